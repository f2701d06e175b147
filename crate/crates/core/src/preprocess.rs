//! Feature conditioning: mean-variance normalization for boundary detection
//! and PCA projection for lexicon embeddings.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpusio::{read_feature_file, write_feature_file, FeatureMatrix};
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;
pub const DEFAULT_PCA_DIM: usize = 250;
pub const DEFAULT_PCA_MAX_FRAMES: usize = 100_000;

/// Frames per partial sum when accumulating the covariance. Fixed so the
/// reduction order, and therefore the result, does not depend on thread count.
const COV_CHUNK: usize = 2048;

/// Per-dimension standardization statistics (population convention).
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits over every supplied frame; `std` is floored at [`STD_FLOOR`].
    pub fn fit<'a, I>(frames: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        let mut count = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        let mut m2: Vec<f64> = Vec::new();
        for frame in frames {
            if count == 0 {
                mean = vec![0.0; frame.len()];
                m2 = vec![0.0; frame.len()];
            } else if frame.len() != mean.len() {
                return Err(Error::Shape {
                    expected: mean.len(),
                    got: frame.len(),
                });
            }
            count += 1;
            // Welford update
            for ((mu, s), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(frame) {
                let x = x as f64;
                let delta = x - *mu;
                *mu += delta / count as f64;
                *s += delta * (x - *mu);
            }
        }
        if count < 2 {
            return Err(Error::InsufficientData(format!(
                "normalizer needs at least 2 frames, got {count}"
            )));
        }
        let std = m2
            .iter()
            .map(|s| (s / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn fit_corpus(corpus: &[FeatureMatrix]) -> Result<Self> {
        Self::fit(corpus.iter().flat_map(|m| m.frames()))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `out[t][d] = (in[t][d] - mean[d]) / std[d]`. Not idempotent.
    pub fn apply(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        if m.dim() != self.dim() {
            return Err(Error::Shape {
                expected: self.dim(),
                got: m.dim(),
            });
        }
        let data = m
            .frames()
            .flat_map(|f| {
                f.iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(&x, (mu, sd))| ((x as f64 - mu) / sd) as f32)
            })
            .collect();
        FeatureMatrix::new(m.utterance_id(), m.frame_rate_hz(), m.n_frames(), m.dim(), data)
    }

    /// Stored as a `2 x D` feature file: row 0 is the mean, row 1 the std.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let data = self.mean.iter().chain(&self.std).map(|&v| v as f32).collect();
        let m = FeatureMatrix::new("normalizer", 1.0, 2, self.dim(), data)?;
        write_feature_file(&m, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m = read_feature_file(path)?;
        if m.n_frames() != 2 {
            return Err(Error::Format("normalizer file must have 2 rows".into()));
        }
        let row = |t| m.frame(t).iter().map(|&v| v as f64).collect();
        Ok(Self {
            mean: row(0),
            std: row(1),
        })
    }
}

/// Principal directions of a frame sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `M x D`, orthonormal rows in order of decreasing explained variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        if self.total_variance <= 0.0 {
            return vec![0.0; self.output_dim()];
        }
        self.explained_variance
            .iter()
            .map(|v| v / self.total_variance)
            .collect()
    }

    pub fn project(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(&v, mu)| v as f64 - mu).collect();
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(&centered).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Projects every frame to `M` dimensions.
    pub fn apply(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        let mut data = Vec::with_capacity(m.n_frames() * self.output_dim());
        for frame in m.frames() {
            data.extend(self.project(frame)?.into_iter().map(|v| v as f32));
        }
        FeatureMatrix::new(
            m.utterance_id(),
            m.frame_rate_hz(),
            m.n_frames(),
            self.output_dim(),
            data,
        )
    }

    /// Stored as an `(M + 2) x D` feature file: mean, explained variance
    /// (zero padded, total variance in the last slot), then the components.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let d = self.input_dim();
        let mut variance = vec![0.0; d];
        variance[..self.output_dim()].copy_from_slice(&self.explained_variance);
        if self.output_dim() < d {
            variance[d - 1] = self.total_variance;
        }
        let data = self
            .mean
            .iter()
            .chain(&variance)
            .chain(self.components.iter().flatten())
            .map(|&v| v as f32)
            .collect();
        let m = FeatureMatrix::new("pca", 1.0, self.output_dim() + 2, d, data)?;
        write_feature_file(&m, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m = read_feature_file(path)?;
        if m.n_frames() < 3 {
            return Err(Error::Format("pca file needs at least 3 rows".into()));
        }
        let row = |t: usize| -> Vec<f64> { m.frame(t).iter().map(|&v| v as f64).collect() };
        let out_dim = m.n_frames() - 2;
        let variance = row(1);
        let explained_variance = variance[..out_dim].to_vec();
        let total_variance = if out_dim < m.dim() {
            variance[m.dim() - 1]
        } else {
            explained_variance.iter().sum()
        };
        Ok(Self {
            mean: row(0),
            components: (2..m.n_frames()).map(row).collect(),
            explained_variance,
            total_variance,
        })
    }
}

/// Fits PCA to `sample` with target dimensionality `m`.
pub fn fit_pca<R: AsRef<[f32]> + Sync>(sample: &[R], m: usize) -> Result<PcaModel> {
    let d = sample.first().map_or(0, |r| r.as_ref().len());
    if m == 0 {
        return Err(Error::Parameter("PCA dimensionality must be >= 1".into()));
    }
    if d == 0 {
        return Err(Error::InsufficientData("empty PCA sample".into()));
    }
    if m > d {
        return Err(Error::Parameter(format!(
            "PCA dimensionality {m} exceeds input dimensionality {d}"
        )));
    }
    if sample.len() < m {
        return Err(Error::InsufficientData(format!(
            "PCA to {m} dimensions needs at least {m} frames, got {}",
            sample.len()
        )));
    }
    if let Some(bad) = sample.iter().find(|r| r.as_ref().len() != d) {
        return Err(Error::Shape {
            expected: d,
            got: bad.as_ref().len(),
        });
    }

    let n = sample.len() as f64;
    let mut mean = vec![0.0f64; d];
    for row in sample {
        for (mu, &x) in mean.iter_mut().zip(row.as_ref()) {
            *mu += x as f64;
        }
    }
    mean.iter_mut().for_each(|mu| *mu /= n);

    let partials: Vec<Vec<f64>> = sample
        .par_chunks(COV_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0f64; d * d];
            let mut centered = vec![0.0f64; d];
            for row in chunk {
                for ((c, &x), mu) in centered.iter_mut().zip(row.as_ref()).zip(&mean) {
                    *c = x as f64 - mu;
                }
                for i in 0..d {
                    let ci = centered[i];
                    let line = &mut acc[i * d..i * d + i + 1];
                    for (a, &cj) in line.iter_mut().zip(&centered[..=i]) {
                        *a += ci * cj;
                    }
                }
            }
            acc
        })
        .collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for partial in &partials {
        for i in 0..d {
            for j in 0..=i {
                cov[(i, j)] += partial[i * d + j];
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let total_variance = cov.trace();

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components = Vec::with_capacity(m);
    let mut explained_variance = Vec::with_capacity(m);
    for &k in order.iter().take(m) {
        let mut c: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        // sign convention: largest-magnitude entry is positive
        let pivot = c
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > c[best].abs() { i } else { best });
        if c[pivot] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        explained_variance.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        total_variance,
    })
}

/// Uniform random sample of at most `max_frames` frames drawn across the
/// whole corpus, in corpus order.
pub fn sample_frames(corpus: &[FeatureMatrix], max_frames: usize, seed: u64) -> Vec<Vec<f32>> {
    let total: usize = corpus.iter().map(FeatureMatrix::n_frames).sum();
    let all_frames = || corpus.iter().flat_map(|m| m.frames());
    if total <= max_frames {
        return all_frames().map(<[f32]>::to_vec).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, total, max_frames).into_vec();
    picked.sort_unstable();
    let mut out = Vec::with_capacity(max_frames);
    let mut next = picked.into_iter().peekable();
    for (i, frame) in all_frames().enumerate() {
        match next.peek() {
            Some(&p) if p == i => {
                out.push(frame.to_vec());
                next.next();
            }
            Some(_) => {}
            None => break,
        }
    }
    out
}

/// Fits PCA on a seeded corpus-wide sample of at most `max_frames` frames.
pub fn fit_pca_corpus(
    corpus: &[FeatureMatrix],
    m: usize,
    max_frames: usize,
    seed: u64,
) -> Result<PcaModel> {
    fit_pca(&sample_frames(corpus, max_frames, seed), m)
}
