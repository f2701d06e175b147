//! Unsupervised word segmentation and lexicon discovery over frame-level
//! speech features.
//!
//! Two systems share the same building blocks. The bottom-up system finds
//! word boundaries from prominent peaks in the frame dissimilarity curve and
//! then clusters segment embeddings with K-means. ES-KMeans+ alternates
//! between K-means on segment embeddings and a Viterbi search that picks the
//! segmentation closest to the current centroids, restricted to a set of
//! candidate boundaries.

// NaN must fail range checks, so `!(x > 0.0)` is deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod corpusio;
pub mod error;
pub mod eskmeans;
pub mod evalmetrics;
pub mod preprocess;
pub mod pipeline;
pub mod promseg;
pub mod segembed;
pub mod synthcorpus;

pub use cluster::{kmeans_fit, ClusterModel, KMeansConfig};
pub use corpusio::{
    AlignmentEntry, AlignmentTrack, ClassFile, CorpusManifest, FeatureMatrix, ManifestEntry, Tier,
    Token,
};
pub use error::{Error, Result};
pub use eskmeans::{CandidateSet, EsKmeansConfig, EsKmeansResult};
pub use evalmetrics::{BoundaryScore, LexiconScore, NedMode, TokenScore};
pub use preprocess::{Normalizer, PcaModel};
pub use promseg::{PromSegConfig, Segmentation};
pub use segembed::{EmbeddingVariant, SegmentEmbedding};
pub use synthcorpus::{SynthCorpus, SynthSpec};
pub use pipeline::{Corpus, PipelineConfig};
