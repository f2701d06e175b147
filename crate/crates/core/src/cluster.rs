//! Lloyd's K-means over segment embeddings.
//!
//! Distances are squared Euclidean. Ties in assignment go to the lowest
//! centroid index. Clusters that lose all their points are re-seeded to the
//! point farthest from its own centroid, so `K` never shrinks.

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpusio::{read_feature_file, write_feature_file, FeatureMatrix};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITERS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Independent random initializations; the lowest-inertia fit wins.
    /// Ignored when initial centroids are supplied.
    pub n_init: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: DEFAULT_MAX_ITERS,
            seed,
            n_init: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// `K x M`.
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index per fitted point.
    pub assignment: Vec<usize>,
    /// Sum of (weighted) squared distances of points to their centroids.
    pub inertia: f64,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

impl ClusterModel {
    /// A model with no fitted points, e.g. loaded centroids.
    pub fn from_centroids(centroids: Vec<Vec<f64>>) -> Result<Self> {
        validate_centroids(&centroids)?;
        Ok(Self {
            centroids,
            assignment: Vec::new(),
            inertia: 0.0,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Nearest centroid and its squared distance.
    pub fn assign(&self, point: &[f64]) -> Result<(usize, f64)> {
        if point.len() != self.dim() {
            return Err(Error::Shape {
                expected: self.dim(),
                got: point.len(),
            });
        }
        Ok(nearest(&self.centroids, point))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let data = self.centroids.iter().flatten().map(|&v| v as f32).collect();
        let m = FeatureMatrix::new("centroids", 1.0, self.k(), self.dim(), data)?;
        write_feature_file(&m, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m = read_feature_file(path)?;
        let centroids = m
            .frames()
            .map(|f| f.iter().map(|&v| v as f64).collect())
            .collect();
        Self::from_centroids(centroids)
    }
}

fn validate_centroids(centroids: &[Vec<f64>]) -> Result<()> {
    let dim = centroids.first().map_or(0, Vec::len);
    if centroids.is_empty() || dim == 0 {
        return Err(Error::Parameter("need at least one non-empty centroid".into()));
    }
    for c in centroids {
        if c.len() != dim {
            return Err(Error::Shape {
                expected: dim,
                got: c.len(),
            });
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite centroid".into()));
        }
    }
    Ok(())
}

fn check_points<P: AsRef<[f64]>>(points: &[P], weights: Option<&[f64]>) -> Result<usize> {
    let dim = points
        .first()
        .map(|p| p.as_ref().len())
        .ok_or_else(|| Error::InsufficientData("k-means needs at least one point".into()))?;
    if let Some(bad) = points.iter().find(|p| p.as_ref().len() != dim) {
        return Err(Error::Shape {
            expected: dim,
            got: bad.as_ref().len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != points.len() {
            return Err(Error::Shape {
                expected: points.len(),
                got: w.len(),
            });
        }
        if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Parameter("point weights must be positive".into()));
        }
    }
    Ok(dim)
}

fn assign_all<P: AsRef<[f64]> + Sync>(
    centroids: &[Vec<f64>],
    points: &[P],
) -> (Vec<usize>, Vec<f64>) {
    points
        .par_iter()
        .map(|p| nearest(centroids, p.as_ref()))
        .unzip()
}

fn inertia_of(dists: &[f64], weights: Option<&[f64]>) -> f64 {
    match weights {
        Some(w) => dists.iter().zip(w).map(|(d, w)| d * w).sum(),
        None => dists.iter().sum(),
    }
}

/// Recomputes centroids as (weighted) means of their points; empty clusters
/// are re-seeded to the farthest point from its own new centroid.
fn update_centroids<P: AsRef<[f64]>>(
    k: usize,
    dim: usize,
    points: &[P],
    assignment: &[usize],
    weights: Option<&[f64]>,
) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut mass = vec![0.0f64; k];
    for (i, (p, &c)) in points.iter().zip(assignment).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        mass[c] += w;
        for (s, &x) in sums[c].iter_mut().zip(p.as_ref()) {
            *s += w * x;
        }
    }
    for (s, &m) in sums.iter_mut().zip(&mass) {
        if m > 0.0 {
            s.iter_mut().for_each(|v| *v /= m);
        }
    }
    let empty: Vec<usize> = (0..k).filter(|&c| mass[c] == 0.0).collect();
    if !empty.is_empty() {
        let mut spread: Vec<(usize, f64)> = points
            .iter()
            .zip(assignment)
            .map(|(p, &c)| squared_distance(p.as_ref(), &sums[c]))
            .enumerate()
            .collect();
        // farthest first, lowest index on ties
        spread.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (slot, &c) in empty.iter().enumerate() {
            let (idx, _) = spread[slot % spread.len()];
            sums[c] = points[idx].as_ref().to_vec();
            log::debug!("re-seeded empty cluster {c} to point {idx}");
        }
    }
    sums
}

/// Uniform choice of `k` points with pairwise distinct values.
fn random_init<P: AsRef<[f64]>>(points: &[P], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut seen = HashSet::new();
    let unique: Vec<usize> = (0..points.len())
        .filter(|&i| seen.insert(points[i].as_ref().iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .collect();
    let n = unique.len();
    let mut idx: Vec<usize> = rand::seq::index::sample(rng, n, k.min(n))
        .into_iter()
        .map(|i| unique[i])
        .collect();
    // more clusters than distinct points: the surplus starts empty and is re-seeded
    while idx.len() < k {
        idx.push(idx[idx.len() % n]);
    }
    idx.into_iter().map(|i| points[i].as_ref().to_vec()).collect()
}

fn lloyd<P: AsRef<[f64]> + Sync>(
    mut centroids: Vec<Vec<f64>>,
    points: &[P],
    max_iters: usize,
    weights: Option<&[f64]>,
) -> ClusterModel {
    let (k, dim) = (centroids.len(), centroids[0].len());
    let mut previous: Option<Vec<usize>> = None;
    for _ in 0..max_iters {
        let (assignment, _) = assign_all(&centroids, points);
        if previous.as_ref() == Some(&assignment) {
            break;
        }
        centroids = update_centroids(k, dim, points, &assignment, weights);
        previous = Some(assignment);
    }
    let (assignment, dists) = assign_all(&centroids, points);
    ClusterModel {
        centroids,
        assignment,
        inertia: inertia_of(&dists, weights),
    }
}

/// Fits `cfg.k` centroids with Lloyd iterations until the assignment stops
/// changing or `cfg.max_iters` updates have run.
///
/// With `init` the fit is warm-started from those centroids. `weights`
/// switches to weighted centroid means (and weighted inertia).
pub fn kmeans_fit<P: AsRef<[f64]> + Sync>(
    points: &[P],
    cfg: &KMeansConfig,
    init: Option<&[Vec<f64>]>,
    weights: Option<&[f64]>,
) -> Result<ClusterModel> {
    if cfg.k == 0 {
        return Err(Error::Parameter("K must be >= 1".into()));
    }
    if cfg.max_iters == 0 {
        return Err(Error::Parameter("max_iters must be >= 1".into()));
    }
    let dim = check_points(points, weights)?;
    if let Some(init) = init {
        validate_centroids(init)?;
        if init.len() != cfg.k || init[0].len() != dim {
            return Err(Error::Shape {
                expected: cfg.k * dim,
                got: init.len() * init[0].len(),
            });
        }
        return Ok(lloyd(init.to_vec(), points, cfg.max_iters, weights));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<ClusterModel> = None;
    for _ in 0..cfg.n_init.max(1) {
        let start = random_init(points, cfg.k, &mut rng);
        let model = lloyd(start, points, cfg.max_iters, weights);
        if best.as_ref().is_none_or(|b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

/// One assign-then-update pass followed by a re-assignment.
pub fn kmeans_step<P: AsRef<[f64]> + Sync>(
    model: &ClusterModel,
    points: &[P],
    weights: Option<&[f64]>,
) -> Result<ClusterModel> {
    let dim = check_points(points, weights)?;
    if dim != model.dim() {
        return Err(Error::Shape {
            expected: model.dim(),
            got: dim,
        });
    }
    let (assignment, _) = assign_all(&model.centroids, points);
    let centroids = update_centroids(model.k(), dim, points, &assignment, weights);
    let (assignment, dists) = assign_all(&centroids, points);
    Ok(ClusterModel {
        centroids,
        assignment,
        inertia: inertia_of(&dists, weights),
    })
}
