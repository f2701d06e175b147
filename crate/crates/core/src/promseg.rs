//! Bottom-up boundary detection: cosine dissimilarity between adjacent
//! frames, moving-average smoothing, and peak-prominence thresholding.

use serde::{Deserialize, Serialize};

use crate::corpusio::FeatureMatrix;
use crate::error::{Error, Result};

/// Boundaries of one utterance as frame indices. Segment `i` spans
/// `[b_{i-1}, b_i)` with an implicit `b_0 = 0`; the last boundary is `T`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segmentation {
    pub utterance_id: String,
    pub boundaries: Vec<usize>,
}

impl Segmentation {
    pub fn new(utterance_id: impl Into<String>, boundaries: Vec<usize>) -> Result<Self> {
        let utterance_id = utterance_id.into();
        if boundaries.is_empty() {
            return Err(Error::Validation(format!(
                "{utterance_id}: segmentation needs at least the final boundary"
            )));
        }
        if boundaries[0] == 0 {
            return Err(Error::Validation(format!(
                "{utterance_id}: boundary 0 is implicit and may not be listed"
            )));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "{utterance_id}: boundaries must be strictly increasing"
            )));
        }
        Ok(Self {
            utterance_id,
            boundaries,
        })
    }

    /// Whole utterance as a single segment.
    pub fn whole(utterance_id: impl Into<String>, n_frames: usize) -> Self {
        Self {
            utterance_id: utterance_id.into(),
            boundaries: vec![n_frames],
        }
    }

    pub fn n_frames(&self) -> usize {
        *self.boundaries.last().expect("segmentation is never empty")
    }

    pub fn interior(&self) -> &[usize] {
        &self.boundaries[..self.boundaries.len() - 1]
    }

    pub fn n_segments(&self) -> usize {
        self.boundaries.len()
    }

    /// `(start, end)` frame extents, tiling `[0, T)`.
    pub fn segments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        std::iter::once(0)
            .chain(self.boundaries.iter().copied())
            .zip(self.boundaries.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromSegConfig {
    pub window_frames: usize,
    pub prominence_threshold: f64,
}

impl PromSegConfig {
    /// Settings for the bottom-up system: 4-frame window, prominence 0.75.
    pub const BOTTOM_UP: Self = Self {
        window_frames: 4,
        prominence_threshold: 0.75,
    };
    /// High-recall candidate settings for ES-KMeans+: 5-frame window, 0.3.
    pub const CANDIDATES: Self = Self {
        window_frames: 5,
        prominence_threshold: 0.3,
    };

    /// Every local maximum of the smoothed curve becomes a boundary.
    pub fn max_recall(window_frames: usize) -> Self {
        Self {
            window_frames,
            prominence_threshold: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_frames == 0 {
            return Err(Error::Parameter("smoothing window must be >= 1".into()));
        }
        if !(self.prominence_threshold >= 0.0) {
            return Err(Error::Parameter("prominence threshold must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for PromSegConfig {
    fn default() -> Self {
        Self::BOTTOM_UP
    }
}

/// Cosine distance between consecutive frames, `T - 1` values in `[0, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityCurve {
    pub utterance_id: String,
    pub values: Vec<f64>,
}

pub fn dissimilarity_curve(m: &FeatureMatrix) -> Result<DissimilarityCurve> {
    let norms: Vec<f64> = m
        .frames()
        .map(|f| f.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
        .collect();
    if let Some(frame) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::DegenerateFrame {
            utterance_id: m.utterance_id().to_owned(),
            frame,
        });
    }
    let values = (1..m.n_frames())
        .map(|t| {
            let dot: f64 = m
                .frame(t - 1)
                .iter()
                .zip(m.frame(t))
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            (1.0 - dot / (norms[t - 1] * norms[t])).clamp(0.0, 2.0)
        })
        .collect();
    Ok(DissimilarityCurve {
        utterance_id: m.utterance_id().to_owned(),
        values,
    })
}

/// Centered moving average; the window covers `(w-1)/2` values to the left
/// and `w/2` to the right and shrinks at the edges.
pub fn smooth(c: &DissimilarityCurve, window_frames: usize) -> Result<DissimilarityCurve> {
    if window_frames == 0 {
        return Err(Error::Parameter("smoothing window must be >= 1".into()));
    }
    if window_frames == 1 {
        return Ok(c.clone());
    }
    let n = c.values.len();
    let (left, right) = ((window_frames - 1) / 2, window_frames / 2);
    let values = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(left);
            let hi = (i + right + 1).min(n);
            c.values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    Ok(DissimilarityCurve {
        utterance_id: c.utterance_id.clone(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub index: usize,
    pub prominence: f64,
}

/// All strict local maxima with their topographic prominence. A plateau
/// counts once, at its leftmost index. Curve endpoints are never peaks.
pub fn find_peaks(values: &[f64]) -> Vec<Peak> {
    let n = values.len();
    let mut peaks = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        let v = values[i];
        if values[i - 1] >= v {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < n && values[j + 1] == v {
            j += 1;
        }
        if j + 1 < n && values[j + 1] < v {
            let mut left_base = v;
            for &x in values[..i].iter().rev() {
                if x > v {
                    break;
                }
                left_base = left_base.min(x);
            }
            let mut right_base = v;
            for &x in &values[j + 1..] {
                if x > v {
                    break;
                }
                right_base = right_base.min(x);
            }
            peaks.push(Peak {
                index: i,
                prominence: v - left_base.max(right_base),
            });
        }
        i = j + 1;
    }
    peaks
}

/// Indices of peaks whose prominence is at least `prominence_threshold`.
pub fn detect_prominent_peaks(c: &DissimilarityCurve, prominence_threshold: f64) -> Vec<usize> {
    find_peaks(&c.values)
        .into_iter()
        .filter(|p| p.prominence >= prominence_threshold)
        .map(|p| p.index)
        .collect()
}

/// Dissimilarity, smoothing and peak picking. Curve index `i` lies between
/// frames `i` and `i + 1`, so a peak there yields boundary `i + 1`.
///
/// Expects mean-variance normalized features.
pub fn prominence_segment(m: &FeatureMatrix, cfg: &PromSegConfig) -> Result<Segmentation> {
    cfg.validate()?;
    let n_frames = m.n_frames();
    if n_frames < 2 {
        return Ok(Segmentation::whole(m.utterance_id(), n_frames));
    }
    let curve = smooth(&dissimilarity_curve(m)?, cfg.window_frames)?;
    let mut boundaries: Vec<usize> = detect_prominent_peaks(&curve, cfg.prominence_threshold)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    boundaries.push(n_frames);
    Segmentation::new(m.utterance_id(), boundaries)
}
