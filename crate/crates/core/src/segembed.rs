//! Fixed-dimensional embeddings of variable-length feature segments.

use serde::{Deserialize, Serialize};

use crate::corpusio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::promseg::Segmentation;

/// Norms below this are treated as a zero mean vector.
const DEGENERATE_NORM: f64 = 1e-12;

pub const DEFAULT_SUBSAMPLE_FRAMES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentEmbedding {
    pub vector: Vec<f64>,
    pub utterance_id: String,
    pub start: usize,
    pub end: usize,
}

impl SegmentEmbedding {
    pub fn length_frames(&self) -> usize {
        self.end - self.start
    }
}

/// Embedding function applied to each segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EmbeddingVariant {
    /// Average of the frames, scaled to unit length.
    #[default]
    Mean,
    /// `frames` uniformly spaced frames, concatenated.
    SubsampleFlatten { frames: usize },
}

impl EmbeddingVariant {
    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            EmbeddingVariant::Mean => input_dim,
            EmbeddingVariant::SubsampleFlatten { frames } => frames * input_dim,
        }
    }

    pub fn embed(&self, m: &FeatureMatrix, start: usize, end: usize) -> Result<SegmentEmbedding> {
        match *self {
            EmbeddingVariant::Mean => embed_mean(m, start, end),
            EmbeddingVariant::SubsampleFlatten { frames } => {
                embed_subsample_flatten(m, start, end, frames)
            }
        }
    }
}

fn check_extent(m: &FeatureMatrix, start: usize, end: usize) -> Result<()> {
    if start >= end || end > m.n_frames() {
        return Err(Error::Parameter(format!(
            "segment [{start}, {end}) is empty or outside 0..{}",
            m.n_frames()
        )));
    }
    Ok(())
}

/// L2-normalized mean of rows `[start, end)`.
pub fn embed_mean(m: &FeatureMatrix, start: usize, end: usize) -> Result<SegmentEmbedding> {
    check_extent(m, start, end)?;
    let mut vector = vec![0.0f64; m.dim()];
    for t in start..end {
        for (acc, &x) in vector.iter_mut().zip(m.frame(t)) {
            *acc += x as f64;
        }
    }
    let len = (end - start) as f64;
    vector.iter_mut().for_each(|v| *v /= len);
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > DEGENERATE_NORM) {
        return Err(Error::DegenerateSegment { start, end });
    }
    vector.iter_mut().for_each(|v| *v /= norm);
    Ok(SegmentEmbedding {
        vector,
        utterance_id: m.utterance_id().to_owned(),
        start,
        end,
    })
}

/// Frame offsets (relative to the segment start) of `n` positions spread
/// evenly over `[0, len - 1]`, rounded to nearest with halves rounding down.
/// A single position sits at the midpoint.
pub fn subsample_offsets(len: usize, n: usize) -> Vec<usize> {
    let span = len - 1;
    if n == 1 {
        return vec![round_half_down(span, 2)];
    }
    (0..n).map(|k| round_half_down(k * span, n - 1)).collect()
}

fn round_half_down(num: usize, den: usize) -> usize {
    (2 * num + den - 1) / (2 * den)
}

/// Concatenation of `n` uniformly subsampled frames; not normalized.
pub fn embed_subsample_flatten(
    m: &FeatureMatrix,
    start: usize,
    end: usize,
    n: usize,
) -> Result<SegmentEmbedding> {
    check_extent(m, start, end)?;
    if n == 0 {
        return Err(Error::Parameter("subsample count must be >= 1".into()));
    }
    let vector = subsample_offsets(end - start, n)
        .into_iter()
        .flat_map(|off| m.frame(start + off).iter().map(|&v| v as f64))
        .collect();
    Ok(SegmentEmbedding {
        vector,
        utterance_id: m.utterance_id().to_owned(),
        start,
        end,
    })
}

/// One embedding per segment, in order.
pub fn embed_segmentation(
    m: &FeatureMatrix,
    s: &Segmentation,
    variant: EmbeddingVariant,
) -> Result<Vec<SegmentEmbedding>> {
    if s.n_frames() != m.n_frames() {
        return Err(Error::Validation(format!(
            "{}: segmentation covers {} frames, features have {}",
            s.utterance_id,
            s.n_frames(),
            m.n_frames()
        )));
    }
    s.segments()
        .map(|(start, end)| variant.embed(m, start, end))
        .collect()
}
