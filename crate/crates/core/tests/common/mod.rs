//! Brute-force reference implementations shared by the integration and
//! acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use wordseg_core::{ClusterModel, FeatureMatrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, id: &str, t: usize, d: usize) -> FeatureMatrix {
    let data: Vec<f32> = (0..t * d).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    FeatureMatrix::new(id, 50.0, t, d, data).unwrap()
}

pub fn gaussian_model(rng: &mut ChaCha8Rng, k: usize, d: usize) -> ClusterModel {
    let centroids = (0..k)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    ClusterModel::from_centroids(centroids).unwrap()
}

/// `len * min_k |z - mu_k|^2` with `z` the unit-normalized mean of the frames.
pub fn oracle_segment_score(m: &FeatureMatrix, model: &ClusterModel, start: usize, end: usize) -> Option<f64> {
    let d = m.dim();
    let mut mean = vec![0.0f64; d];
    for t in start..end {
        for (k, &x) in m.frame(t).iter().enumerate() {
            mean[k] += x as f64;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    let z: Vec<f64> = mean.iter().map(|v| v / norm).collect();
    let best = model
        .centroids
        .iter()
        .map(|mu| z.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    Some((end - start) as f64 * best)
}

/// Minimum total score over every subset of interior candidates, subject to a
/// minimum segment length in frames and a maximum span in candidate steps.
/// `None` when no subset is feasible.
pub fn oracle_best_cost(
    m: &FeatureMatrix,
    candidates: &[usize],
    model: &ClusterModel,
    min_frames: usize,
    max_span: usize,
) -> Option<(f64, Vec<usize>)> {
    let positions: Vec<usize> = std::iter::once(0).chain(candidates.iter().copied()).collect();
    let interior = candidates.len() - 1;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << interior) {
        let mut chosen: Vec<usize> = (0..interior).filter(|b| mask >> b & 1 == 1).map(|b| b + 1).collect();
        chosen.push(positions.len() - 1);
        let mut prev = 0;
        let mut total = 0.0;
        let mut feasible = true;
        for &j in &chosen {
            let (a, b) = (positions[prev], positions[j]);
            if b - a < min_frames || j - prev > max_span {
                feasible = false;
                break;
            }
            match oracle_segment_score(m, model, a, b) {
                Some(s) => total += s,
                None => {
                    feasible = false;
                    break;
                }
            }
            prev = j;
        }
        if feasible && best.as_ref().is_none_or(|(c, _)| total < *c) {
            best = Some((total, chosen.iter().map(|&j| positions[j]).collect()));
        }
    }
    best
}

/// Peaks by definition: a maximal run of equal values strictly above both
/// neighbours, not touching either end, reported at its first index. The
/// prominence is measured against the higher of the two lowest points
/// reached before climbing above the peak on each side.
pub fn oracle_peaks(values: &[f64]) -> Vec<(usize, f64)> {
    let n = values.len();
    let mut out = Vec::new();
    for i in 1..n.saturating_sub(1) {
        let v = values[i];
        if values[i - 1] >= v {
            continue;
        }
        let mut j = i;
        while j + 1 < n && values[j + 1] == v {
            j += 1;
        }
        if j + 1 >= n || values[j + 1] > v {
            continue;
        }
        let left_stop = (0..i).rev().find(|&k| values[k] > v).map_or(0, |k| k + 1);
        let right_stop = (j + 1..n).find(|&k| values[k] > v).unwrap_or(n);
        let left_min = values[left_stop..=i].iter().copied().fold(f64::INFINITY, f64::min);
        let right_min = values[j..right_stop].iter().copied().fold(f64::INFINITY, f64::min);
        out.push((i, v - left_min.max(right_min)));
    }
    out
}

/// Smallest K-means objective over every assignment of the points to `k`
/// labelled clusters, with each centroid at the mean of its points.
pub fn oracle_min_inertia(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    loop {
        let mut total = 0.0;
        for c in 0..k {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let d = members[0].len();
            let mean: Vec<f64> = (0..d).map(|i| members.iter().map(|p| p[i]).sum::<f64>() / members.len() as f64).collect();
            total += members
                .iter()
                .map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum::<f64>();
        }
        best = best.min(total);
        let mut pos = 0;
        loop {
            if pos == n {
                return best;
            }
            labels[pos] += 1;
            if labels[pos] < k {
                break;
            }
            labels[pos] = 0;
            pos += 1;
        }
    }
}
