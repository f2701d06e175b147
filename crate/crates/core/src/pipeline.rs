//! End-to-end runs: the bottom-up system (prominence segmentation, then
//! clustering of the fixed segments) and ES-KMeans+ over a configurable
//! candidate-boundary source, plus evaluation reports.
//!
//! Boundary detection reads mean-variance normalized features. Lexicon
//! embeddings read PCA-projected, unnormalized features, which may come from
//! a second manifest (e.g. another encoder layer) with the same utterances.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans_fit, ClusterModel, KMeansConfig};
use crate::corpusio::{
    format_boundaries, read_alignments, read_boundary_file, read_class_file, read_feature_file,
    write_boundary_file, write_class_file, AlignmentTrack, ClassFile, CorpusManifest,
    FeatureMatrix, Tier, Token,
};
use crate::error::{Error, Result};
use crate::eskmeans::{self, CandidateSet, EsKmeansConfig, IterationRecord};
use crate::evalmetrics::{
    boundary_score, lexicon_score, token_score, BoundaryScore, LexiconScore, NedMode, TokenScore,
    DEFAULT_TOLERANCE_S,
};
use crate::preprocess::{fit_pca_corpus, Normalizer, PcaModel, DEFAULT_PCA_DIM, DEFAULT_PCA_MAX_FRAMES};
use crate::promseg::{prominence_segment, PromSegConfig, Segmentation};
use crate::segembed::EmbeddingVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationScope {
    /// One set of statistics pooled over every frame of the corpus.
    #[default]
    Corpus,
    /// Statistics per utterance.
    Utterance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    /// Prominence peaks with the candidate window and threshold.
    #[default]
    Prominence,
    /// A boundary file.
    File,
    /// Edges of the manifest's alignment for `tier`.
    Alignment,
    /// Every peak of the smoothed curve (threshold 0).
    MaxRecallProminence,
    /// File (or alignment, when no file is set) merged with prominence peaks.
    Union,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateConfig {
    pub source: CandidateSource,
    pub window_frames: usize,
    pub prominence_threshold: f64,
    pub file: Option<PathBuf>,
    pub tier: Tier,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            source: CandidateSource::Prominence,
            window_frames: PromSegConfig::CANDIDATES.window_frames,
            prominence_threshold: PromSegConfig::CANDIDATES.prominence_threshold,
            file: None,
            tier: Tier::Word,
        }
    }
}

/// ES-KMeans+ settings that are not shared with the rest of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsKmeansSection {
    pub n_iterations: usize,
    pub init_keep_prob: f64,
    pub min_segment_frames: usize,
    pub max_span_candidates: usize,
    pub kmeans_max_iters: usize,
    pub weighted_centroids: bool,
}

impl Default for EsKmeansSection {
    fn default() -> Self {
        let d = EsKmeansConfig::default();
        Self {
            n_iterations: d.n_iterations,
            init_keep_prob: d.init_keep_prob,
            min_segment_frames: d.min_segment_frames,
            max_span_candidates: d.max_span_candidates,
            kmeans_max_iters: d.kmeans_max_iters,
            weighted_centroids: d.weighted_centroids,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tolerance_s: f64,
    pub tier: Tier,
    pub ned_mode: NedMode,
    /// Taken from the first feature file when unset.
    pub frame_rate_hz: Option<f64>,
    pub report_top_n: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tolerance_s: DEFAULT_TOLERANCE_S,
            tier: Tier::Word,
            ned_mode: NedMode::Pooled,
            frame_rate_hz: None,
            report_top_n: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Manifest of the features used for boundary detection.
    pub manifest: PathBuf,
    /// Manifest of the features used for lexicon embeddings; defaults to
    /// `manifest`.
    pub lexicon_manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub k: usize,
    /// Clamped to the feature dimension; 0 disables the projection.
    pub pca_dim: usize,
    pub pca_max_frames: usize,
    pub normalization: NormalizationScope,
    pub embedding: EmbeddingVariant,
    /// Lloyd iterations and restarts for the bottom-up clustering.
    pub kmeans_max_iters: usize,
    pub kmeans_n_init: usize,
    /// Worker threads; 0 uses all available cores.
    pub workers: usize,
    pub promseg: PromSegConfig,
    pub candidates: CandidateConfig,
    pub eskmeans: EsKmeansSection,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.txt"),
            lexicon_manifest: None,
            output_dir: PathBuf::from("out"),
            seed: 0,
            k: EsKmeansConfig::default().k,
            pca_dim: DEFAULT_PCA_DIM,
            pca_max_frames: DEFAULT_PCA_MAX_FRAMES,
            normalization: NormalizationScope::Corpus,
            embedding: EmbeddingVariant::Mean,
            kmeans_max_iters: crate::cluster::DEFAULT_MAX_ITERS,
            kmeans_n_init: 1,
            workers: 0,
            promseg: PromSegConfig::BOTTOM_UP,
            candidates: CandidateConfig::default(),
            eskmeans: EsKmeansSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config; relative paths are taken from the config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.manifest);
        rebase(&mut cfg.output_dir);
        if let Some(p) = cfg.lexicon_manifest.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.candidates.file.as_mut() {
            rebase(p);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.kmeans_max_iters == 0 || self.kmeans_n_init == 0 {
            return Err(Error::Config("kmeans_max_iters and kmeans_n_init must be >= 1".into()));
        }
        self.promseg.validate()?;
        self.candidate_promseg().validate()?;
        self.eskmeans_config().validate()?;
        if !(self.eval.tolerance_s >= 0.0) {
            return Err(Error::Config("eval.tolerance_s must be >= 0".into()));
        }
        Ok(())
    }

    pub fn eskmeans_config(&self) -> EsKmeansConfig {
        let e = &self.eskmeans;
        EsKmeansConfig {
            n_iterations: e.n_iterations,
            init_keep_prob: e.init_keep_prob,
            min_segment_frames: e.min_segment_frames,
            max_span_candidates: e.max_span_candidates,
            k: self.k,
            seed: self.seed,
            kmeans_max_iters: e.kmeans_max_iters,
            weighted_centroids: e.weighted_centroids,
            variant: self.embedding,
        }
    }

    fn kmeans_config(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.k,
            max_iters: self.kmeans_max_iters,
            seed: self.seed,
            n_init: self.kmeans_n_init,
        }
    }

    fn candidate_promseg(&self) -> PromSegConfig {
        let c = &self.candidates;
        match c.source {
            CandidateSource::MaxRecallProminence => PromSegConfig::max_recall(c.window_frames),
            _ => PromSegConfig {
                window_frames: c.window_frames,
                prominence_threshold: c.prominence_threshold,
            },
        }
    }
}

/// Runs `f` on a pool of `workers` threads (0 = all cores).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

/// Wall-clock seconds per pipeline phase, in execution order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub phases: Vec<(String, f64)>,
}

impl Timings {
    fn time<R>(&mut self, phase: &str, f: impl FnOnce() -> R) -> R {
        let start = Instant::now();
        let out = f();
        let secs = start.elapsed().as_secs_f64();
        log::info!("phase {phase}: {secs:.3}s");
        self.phases.push((phase.to_owned(), secs));
        out
    }

    pub fn total_s(&self) -> f64 {
        self.phases.iter().map(|p| p.1).sum()
    }
}

/// Features of one corpus: boundary-detection features and, optionally, a
/// separate set of lexicon features for the same utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub boundary: Vec<FeatureMatrix>,
    pub lexicon: Option<Vec<FeatureMatrix>>,
    pub alignments: BTreeMap<Tier, PathBuf>,
}

fn check_consistent(features: &[FeatureMatrix]) -> Result<()> {
    let Some(first) = features.first() else {
        return Err(Error::Validation("corpus is empty".into()));
    };
    for m in features {
        if m.dim() != first.dim() {
            return Err(Error::Shape { expected: first.dim(), got: m.dim() });
        }
        if m.frame_rate_hz() != first.frame_rate_hz() {
            return Err(Error::Validation(format!(
                "{}: frame rate {} differs from {}",
                m.utterance_id(),
                m.frame_rate_hz(),
                first.frame_rate_hz()
            )));
        }
    }
    Ok(())
}

/// Loads every feature file of `manifest`, in manifest order. Missing files
/// are reported together.
pub fn load_features(manifest: &CorpusManifest) -> Result<Vec<FeatureMatrix>> {
    let missing: Vec<String> = manifest
        .entries
        .iter()
        .filter(|e| !e.feature_path.is_file())
        .map(|e| format!("{} ({})", e.utterance_id, e.feature_path.display()))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Manifest(format!(
            "{} feature file(s) missing: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    let features: Vec<FeatureMatrix> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let mut m = read_feature_file(&e.feature_path)?;
            m.set_utterance_id(e.utterance_id.clone());
            Ok(m)
        })
        .collect::<Result<_>>()?;
    check_consistent(&features)?;
    Ok(features)
}

impl Corpus {
    pub fn new(boundary: Vec<FeatureMatrix>, lexicon: Option<Vec<FeatureMatrix>>) -> Result<Self> {
        check_consistent(&boundary)?;
        if let Some(lex) = &lexicon {
            check_consistent(lex)?;
            if lex.len() != boundary.len() {
                return Err(Error::Manifest(format!(
                    "lexicon features cover {} utterances, boundary features {}",
                    lex.len(),
                    boundary.len()
                )));
            }
            for (b, l) in boundary.iter().zip(lex) {
                if b.utterance_id() != l.utterance_id() || b.n_frames() != l.n_frames() {
                    return Err(Error::Manifest(format!(
                        "lexicon utterance {} ({} frames) does not match {} ({} frames)",
                        l.utterance_id(),
                        l.n_frames(),
                        b.utterance_id(),
                        b.n_frames()
                    )));
                }
            }
        }
        Ok(Self {
            boundary,
            lexicon,
            alignments: BTreeMap::new(),
        })
    }

    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let manifest = CorpusManifest::read(&cfg.manifest)?;
        let boundary = load_features(&manifest)?;
        let lexicon = match &cfg.lexicon_manifest {
            None => None,
            Some(path) => {
                let lex_manifest = CorpusManifest::read(path)?;
                let by_id: HashMap<&str, usize> = lex_manifest
                    .entries
                    .iter()
                    .enumerate()
                    .map(|(i, e)| (e.utterance_id.as_str(), i))
                    .collect();
                let missing: Vec<&str> = manifest
                    .entries
                    .iter()
                    .map(|e| e.utterance_id.as_str())
                    .filter(|u| !by_id.contains_key(u))
                    .collect();
                if !missing.is_empty() {
                    return Err(Error::Manifest(format!(
                        "lexicon manifest lacks {} utterance(s): {}",
                        missing.len(),
                        missing.join(", ")
                    )));
                }
                let ordered = CorpusManifest::new(
                    manifest
                        .entries
                        .iter()
                        .map(|e| lex_manifest.entries[by_id[e.utterance_id.as_str()]].clone())
                        .collect(),
                )?;
                Some(load_features(&ordered)?)
            }
        };
        let mut corpus = Self::new(boundary, lexicon)?;
        corpus.alignments = manifest.alignments;
        Ok(corpus)
    }

    pub fn lexicon_features(&self) -> &[FeatureMatrix] {
        self.lexicon.as_deref().unwrap_or(&self.boundary)
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.boundary[0].frame_rate_hz() as f64
    }

    pub fn total_duration_s(&self) -> f64 {
        self.boundary.iter().map(FeatureMatrix::duration_s).sum()
    }
}

/// Mean-variance normalized copies of the boundary features.
pub fn normalize_features(
    features: &[FeatureMatrix],
    scope: NormalizationScope,
) -> Result<Vec<FeatureMatrix>> {
    match scope {
        NormalizationScope::Corpus => {
            let n = Normalizer::fit_corpus(features)?;
            features.par_iter().map(|m| n.apply(m)).collect()
        }
        NormalizationScope::Utterance => features
            .par_iter()
            .map(|m| Normalizer::fit(m.frames())?.apply(m))
            .collect(),
    }
}

/// PCA-projected lexicon features; the model is `None` when disabled.
pub fn project_features(
    features: &[FeatureMatrix],
    pca_dim: usize,
    max_frames: usize,
    seed: u64,
) -> Result<(Option<PcaModel>, Vec<FeatureMatrix>)> {
    if pca_dim == 0 {
        return Ok((None, features.to_vec()));
    }
    let dim = features[0].dim();
    let m = if pca_dim > dim {
        log::warn!("pca_dim {pca_dim} exceeds the feature dimension {dim}; using {dim}");
        dim
    } else {
        pca_dim
    };
    let model = fit_pca_corpus(features, m, max_frames, seed)?;
    let projected = features.par_iter().map(|f| model.apply(f)).collect::<Result<_>>()?;
    Ok((Some(model), projected))
}

/// Order-sensitive FNV-1a hash of the boundary-file text.
pub fn boundary_checksum(segmentations: &[Segmentation]) -> u64 {
    format_boundaries(segmentations)
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn token(s: &Segmentation, start: usize, end: usize, rate: f64) -> Token {
    Token::new(s.utterance_id.clone(), start as f64 / rate, end as f64 / rate)
}

#[derive(Debug, Clone)]
pub struct BottomUpOutput {
    pub segmentations: Vec<Segmentation>,
    pub classes: ClassFile,
    pub model: ClusterModel,
    pub pca: Option<PcaModel>,
    /// Segments whose mean vector vanished and were left unclustered.
    pub n_degenerate: usize,
    pub boundary_checksum: u64,
    pub timings: Timings,
}

#[derive(Debug, Clone)]
pub struct EsKmeansOutput {
    pub candidates: Vec<CandidateSet>,
    pub segmentations: Vec<Segmentation>,
    pub classes: ClassFile,
    pub model: ClusterModel,
    pub pca: Option<PcaModel>,
    pub log: Vec<IterationRecord>,
    pub timings: Timings,
}

fn check_alignment(features: &[FeatureMatrix], segs: &[Segmentation]) -> Result<()> {
    if features.len() != segs.len() {
        return Err(Error::Validation(format!(
            "{} segmentations for {} utterances",
            segs.len(),
            features.len()
        )));
    }
    for (m, s) in features.iter().zip(segs) {
        if m.utterance_id() != s.utterance_id || m.n_frames() != s.n_frames() {
            return Err(Error::Validation(format!(
                "segmentation {} ({} frames) does not match utterance {} ({} frames)",
                s.utterance_id,
                s.n_frames(),
                m.utterance_id(),
                m.n_frames()
            )));
        }
    }
    Ok(())
}

/// `(start, end, embedding)`; `None` for a degenerate segment.
type EmbeddedSegment = (usize, usize, Option<Vec<f64>>);

/// Clusters the segments of fixed segmentations into a lexicon.
pub fn cluster_segmentations(
    cfg: &PipelineConfig,
    corpus: &Corpus,
    segmentations: Vec<Segmentation>,
) -> Result<BottomUpOutput> {
    cfg.validate()?;
    check_alignment(corpus.lexicon_features(), &segmentations)?;
    let mut timings = Timings::default();
    let checksum = boundary_checksum(&segmentations);
    let (pca, lexicon) = timings.time("pca", || {
        project_features(corpus.lexicon_features(), cfg.pca_dim, cfg.pca_max_frames, cfg.seed)
    })?;
    let embedded: Vec<Vec<EmbeddedSegment>> = timings.time("embed", || {
        lexicon
            .par_iter()
            .zip(&segmentations)
            .map(|(m, s)| {
                s.segments()
                    .map(|(a, b)| match cfg.embedding.embed(m, a, b) {
                        Ok(z) => Ok((a, b, Some(z.vector))),
                        Err(Error::DegenerateSegment { .. }) => Ok((a, b, None)),
                        Err(e) => Err(e),
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()
    })?;
    let mut points = Vec::new();
    let mut refs = Vec::new();
    let mut n_degenerate = 0;
    for (u, segs) in embedded.into_iter().enumerate() {
        for (a, b, z) in segs {
            match z {
                Some(z) => {
                    points.push(z);
                    refs.push((u, a, b));
                }
                None => {
                    log::warn!("{}: segment [{a}, {b}) has a zero mean and is not clustered", segmentations[u].utterance_id);
                    n_degenerate += 1;
                }
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Validation("no embeddable segments".into()));
    }
    let model = timings.time("kmeans", || kmeans_fit(&points, &cfg.kmeans_config(), None, None))?;
    let rate = corpus.frame_rate_hz();
    let mut classes = ClassFile::default();
    for (&(u, a, b), &c) in refs.iter().zip(&model.assignment) {
        classes.push(c, token(&segmentations[u], a, b, rate));
    }
    if boundary_checksum(&segmentations) != checksum {
        return Err(Error::Validation("boundaries changed during clustering".into()));
    }
    Ok(BottomUpOutput {
        segmentations,
        classes,
        model,
        pca,
        n_degenerate,
        boundary_checksum: checksum,
        timings,
    })
}

/// Prominence segmentation of normalized boundary features.
pub fn segment_corpus(
    cfg: &PipelineConfig,
    corpus: &Corpus,
    promseg: &PromSegConfig,
) -> Result<Vec<Segmentation>> {
    let normalized = normalize_features(&corpus.boundary, cfg.normalization)?;
    normalized.par_iter().map(|m| prominence_segment(m, promseg)).collect()
}

/// The bottom-up system: boundaries are fixed by prominence segmentation
/// before the lexicon is learned.
pub fn run_promseg_clus(cfg: &PipelineConfig, corpus: &Corpus) -> Result<BottomUpOutput> {
    cfg.validate()?;
    let mut timings = Timings::default();
    let segs = timings.time("segment", || segment_corpus(cfg, corpus, &cfg.promseg))?;
    let mut out = cluster_segmentations(cfg, corpus, segs)?;
    timings.phases.append(&mut out.timings.phases);
    out.timings = timings;
    Ok(out)
}

fn by_utterance<T>(
    items: Vec<T>,
    id: impl Fn(&T) -> &str,
    corpus: &Corpus,
    what: &str,
) -> Result<Vec<T>> {
    let mut map: HashMap<String, T> = items.into_iter().map(|t| (id(&t).to_owned(), t)).collect();
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(corpus.boundary.len());
    for m in &corpus.boundary {
        match map.remove(m.utterance_id()) {
            Some(t) => out.push(t),
            None => missing.push(m.utterance_id().to_owned()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Manifest(format!(
            "{what} missing for {} utterance(s): {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    Ok(out)
}

/// Frame boundaries from alignment edges, rounded to the nearest frame.
pub fn alignment_candidates(track: &AlignmentTrack, n_frames: usize, rate: f64) -> Result<CandidateSet> {
    let mut b: Vec<usize> = track
        .interior_boundaries()
        .into_iter()
        .map(|t| (t * rate).round() as usize)
        .filter(|&f| f > 0 && f < n_frames)
        .collect();
    b.push(n_frames);
    b.sort_unstable();
    b.dedup();
    CandidateSet::new(track.utterance_id.clone(), b)
}

fn file_candidates(corpus: &Corpus, path: &Path) -> Result<Vec<CandidateSet>> {
    let segs = by_utterance(read_boundary_file(path)?, |s| &s.utterance_id, corpus, "candidates")?;
    check_alignment(&corpus.boundary, &segs)?;
    Ok(segs.into_iter().map(Into::into).collect())
}

fn tier_candidates(corpus: &Corpus, tier: Tier) -> Result<Vec<CandidateSet>> {
    let path = corpus
        .alignments
        .get(&tier)
        .ok_or_else(|| Error::Manifest(format!("manifest declares no {tier} alignment")))?;
    let tracks = by_utterance(read_alignments(path, tier)?, |t| &t.utterance_id, corpus, "alignments")?;
    let rate = corpus.frame_rate_hz();
    tracks
        .iter()
        .zip(&corpus.boundary)
        .map(|(t, m)| alignment_candidates(t, m.n_frames(), rate))
        .collect()
}

/// Candidate boundaries for every utterance, in corpus order.
pub fn resolve_candidates(cfg: &PipelineConfig, corpus: &Corpus) -> Result<Vec<CandidateSet>> {
    let c = &cfg.candidates;
    let prominence = || -> Result<Vec<CandidateSet>> {
        Ok(segment_corpus(cfg, corpus, &cfg.candidate_promseg())?
            .into_iter()
            .map(Into::into)
            .collect())
    };
    let external = || match &c.file {
        Some(path) => file_candidates(corpus, path),
        None => tier_candidates(corpus, c.tier),
    };
    match c.source {
        CandidateSource::Prominence | CandidateSource::MaxRecallProminence => prominence(),
        CandidateSource::File => match &c.file {
            Some(path) => file_candidates(corpus, path),
            None => Err(Error::Config("candidates.source = file needs candidates.file".into())),
        },
        CandidateSource::Alignment => tier_candidates(corpus, c.tier),
        CandidateSource::Union => external()?
            .iter()
            .zip(prominence()?)
            .map(|(a, b)| a.union(&b))
            .collect(),
    }
}

/// ES-KMeans+ over the given candidates.
pub fn run_eskmeans_with_candidates(
    cfg: &PipelineConfig,
    corpus: &Corpus,
    candidates: Vec<CandidateSet>,
) -> Result<EsKmeansOutput> {
    cfg.validate()?;
    let segs: Vec<Segmentation> = candidates.iter().cloned().map(Into::into).collect();
    check_alignment(corpus.lexicon_features(), &segs)?;
    let mut timings = Timings::default();
    let (pca, lexicon) = timings.time("pca", || {
        project_features(corpus.lexicon_features(), cfg.pca_dim, cfg.pca_max_frames, cfg.seed)
    })?;
    let paired: Vec<(FeatureMatrix, CandidateSet)> = lexicon.into_iter().zip(candidates.iter().cloned()).collect();
    let result = timings.time("eskmeans", || eskmeans::fit(&paired, &cfg.eskmeans_config()))?;
    for (s, c) in result.segmentations.iter().zip(&candidates) {
        if !s.boundaries.iter().all(|b| c.candidates.binary_search(b).is_ok()) {
            return Err(Error::Validation(format!(
                "{}: output boundary outside the candidate set",
                s.utterance_id
            )));
        }
    }
    let rate = corpus.frame_rate_hz();
    let mut classes = ClassFile::default();
    for (r, &c) in result.segments.iter().zip(&result.model.assignment) {
        classes.push(c, token(&result.segmentations[r.utterance], r.start, r.end, rate));
    }
    Ok(EsKmeansOutput {
        candidates,
        segmentations: result.segmentations,
        classes,
        model: result.model,
        pca,
        log: result.log,
        timings,
    })
}

pub fn run_eskmeans_plus(cfg: &PipelineConfig, corpus: &Corpus) -> Result<EsKmeansOutput> {
    cfg.validate()?;
    let mut timings = Timings::default();
    let candidates = timings.time("candidates", || resolve_candidates(cfg, corpus))?;
    let mut out = run_eskmeans_with_candidates(cfg, corpus, candidates)?;
    timings.phases.append(&mut out.timings.phases);
    out.timings = timings;
    Ok(out)
}

fn write_timings(dir: &Path, timings: &Timings) -> Result<()> {
    let json = serde_json::to_string_pretty(timings).map_err(|e| Error::Format(e.to_string()))?;
    crate::corpusio::write_text(&dir.join("timings.json"), &(json + "\n"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

impl BottomUpOutput {
    /// Writes `boundaries.txt`, `classes.txt`, `centroids.feat` and
    /// `timings.json` (plus `pca.feat` when projected).
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        create_dir(dir)?;
        write_boundary_file(&self.segmentations, dir.join("boundaries.txt"))?;
        write_class_file(&self.classes, dir.join("classes.txt"))?;
        self.model.save(dir.join("centroids.feat"))?;
        if let Some(p) = &self.pca {
            p.save(dir.join("pca.feat"))?;
        }
        write_timings(dir, &self.timings)
    }
}

impl EsKmeansOutput {
    /// As [`BottomUpOutput::write`], plus `candidates.txt` and the
    /// iteration log `iterations.log`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        create_dir(dir)?;
        let cands: Vec<Segmentation> = self.candidates.iter().cloned().map(Into::into).collect();
        write_boundary_file(&cands, dir.join("candidates.txt"))?;
        write_boundary_file(&self.segmentations, dir.join("boundaries.txt"))?;
        write_class_file(&self.classes, dir.join("classes.txt"))?;
        self.model.save(dir.join("centroids.feat"))?;
        if let Some(p) = &self.pca {
            p.save(dir.join("pca.feat"))?;
        }
        let log: String = self.log.iter().map(|r| r.log_line() + "\n").collect();
        crate::corpusio::write_text(&dir.join("iterations.log"), &log)?;
        write_timings(dir, &self.timings)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub boundary: BoundaryScore,
    pub token: TokenScore,
    /// Present when a class file and a phone alignment were given.
    pub lexicon: Option<LexiconScore>,
}

impl EvalReport {
    pub fn to_json_line(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Scores hypothesized boundaries against reference tokens and, when
/// available, the lexicon against phone transcriptions.
pub fn evaluate(
    hyp: &[Segmentation],
    classes: Option<&ClassFile>,
    reference: &[AlignmentTrack],
    phones: Option<&[AlignmentTrack]>,
    total_duration_s: f64,
    frame_rate_hz: f64,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let boundary = boundary_score(hyp, reference, cfg.tolerance_s, frame_rate_hz)?;
    let token = token_score(hyp, reference, cfg.tolerance_s, frame_rate_hz)?;
    let lexicon = match (classes, phones) {
        (Some(c), Some(p)) => Some(lexicon_score(c, p, total_duration_s, cfg.ned_mode)?),
        _ => None,
    };
    Ok(EvalReport { boundary, token, lexicon })
}

/// Evaluates `boundaries` (and `classes`, if given) against the manifest's
/// alignments.
pub fn run_eval(
    cfg: &PipelineConfig,
    boundaries: &Path,
    classes: Option<&Path>,
) -> Result<EvalReport> {
    let manifest = CorpusManifest::read(&cfg.manifest)?;
    let hyp = read_boundary_file(boundaries)?;
    let tier_path = |tier: Tier| {
        manifest
            .alignments
            .get(&tier)
            .ok_or_else(|| Error::Manifest(format!("manifest declares no {tier} alignment")))
    };
    let reference = read_alignments(tier_path(cfg.eval.tier)?, cfg.eval.tier)?;
    let class_file = classes.map(|p| read_class_file(p, Some(&manifest))).transpose()?;
    let phones = match (&class_file, manifest.alignments.get(&Tier::Phone)) {
        (Some(_), Some(p)) => Some(read_alignments(p, Tier::Phone)?),
        _ => None,
    };
    let rate = match cfg.eval.frame_rate_hz {
        Some(r) => r,
        None => {
            let first = manifest
                .entries
                .first()
                .ok_or_else(|| Error::Manifest("manifest is empty".into()))?;
            read_feature_file(&first.feature_path)?.frame_rate_hz() as f64
        }
    };
    evaluate(
        &hyp,
        class_file.as_ref(),
        &reference,
        phones.as_deref(),
        manifest.total_duration_s(),
        rate,
        &cfg.eval,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcorpus::{generate, SynthSpec};

    fn clean_spec() -> SynthSpec {
        SynthSpec {
            noise_sigma: 0.0,
            distractor_rate: 0.0,
            allow_adjacent_repeats: false,
            n_utterances: 40,
            seed: 1,
            ..SynthSpec::default()
        }
    }

    fn clean_config() -> PipelineConfig {
        PipelineConfig {
            k: 20,
            promseg: PromSegConfig { window_frames: 1, prominence_threshold: 0.1 },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn config_defaults_and_toml_round_trip() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.pca_dim, 250);
        assert_eq!(cfg.promseg, PromSegConfig::BOTTOM_UP);
        assert_eq!((cfg.candidates.window_frames, cfg.candidates.prominence_threshold), (5, 0.3));
        let e = cfg.eskmeans_config();
        assert_eq!((e.n_iterations, e.min_segment_frames, e.max_span_candidates), (5, 5, 4));
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_overrides() {
        let cfg = PipelineConfig::from_toml_str(
            "k = 7\nseed = 3\n[promseg]\nwindow_frames = 2\n[candidates]\nsource = \"max_recall_prominence\"\n[eskmeans]\nn_iterations = 2\n",
        )
        .unwrap();
        assert_eq!((cfg.k, cfg.seed, cfg.promseg.window_frames), (7, 3, 2));
        assert_eq!(cfg.promseg.prominence_threshold, 0.75);
        assert_eq!(cfg.candidate_promseg().prominence_threshold, 0.0);
        assert_eq!(cfg.eskmeans_config().k, 7);
        assert!(matches!(PipelineConfig::from_toml_str("k = 0"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml_str("bogus = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn clean_corpus_bottom_up_is_perfect() {
        let synth = generate(&clean_spec()).unwrap();
        let corpus = Corpus::new(synth.features.clone(), None).unwrap();
        let out = run_promseg_clus(&clean_config(), &corpus).unwrap();
        assert_eq!(out.segmentations, synth.true_segmentations());
        let report = evaluate(
            &out.segmentations,
            Some(&out.classes),
            &synth.words,
            Some(&synth.phones),
            synth.total_duration_s(),
            50.0,
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!(report.boundary.f1, 100.0);
        assert_eq!(report.token.f1, 100.0);
        assert_eq!(report.lexicon.unwrap().ned, 0.0);
        assert!(out.model.inertia.abs() < 1e-9);
    }

    #[test]
    fn k_equal_to_segment_count_leaves_ned_undefined() {
        let spec = SynthSpec { n_utterances: 2, words_per_utterance: (3, 3), ..clean_spec() };
        let synth = generate(&spec).unwrap();
        let corpus = Corpus::new(synth.features.clone(), None).unwrap();
        let cfg = PipelineConfig { k: 6, ..clean_config() };
        let out = run_promseg_clus(&cfg, &corpus).unwrap();
        assert!(out.model.inertia.abs() < 1e-12);
        // every token alone in its cluster: no pairs to score
        if out.classes.classes.values().all(|t| t.len() == 1) {
            assert!(matches!(
                crate::evalmetrics::ned(&out.classes, &synth.phones, NedMode::Pooled),
                Err(Error::UndefinedMetric(_))
            ));
        }
    }

    #[test]
    fn ground_truth_candidates_only_merge() {
        let synth = generate(&SynthSpec { n_utterances: 30, seed: 5, ..SynthSpec::default() }).unwrap();
        let corpus = Corpus::new(synth.features.clone(), None).unwrap();
        let truth: Vec<CandidateSet> = synth.true_segmentations().into_iter().map(Into::into).collect();
        let cfg = PipelineConfig { k: 20, ..PipelineConfig::default() };
        let out = run_eskmeans_with_candidates(&cfg, &corpus, truth.clone()).unwrap();
        for (s, t) in out.segmentations.iter().zip(&truth) {
            assert!(s.boundaries.iter().all(|b| t.candidates.contains(b)));
        }
        assert_eq!(out.log.len(), 1 + 2 * cfg.eskmeans.n_iterations);
    }

    #[test]
    fn union_and_alignment_sources() {
        let synth = generate(&SynthSpec { n_utterances: 5, seed: 2, ..SynthSpec::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth.write_to_dir(dir.path()).unwrap();
        let mut cfg = PipelineConfig { manifest, k: 5, ..PipelineConfig::default() };
        let corpus = Corpus::load(&cfg).unwrap();
        cfg.candidates.source = CandidateSource::Alignment;
        let gt = resolve_candidates(&cfg, &corpus).unwrap();
        let truth: Vec<CandidateSet> = synth.true_segmentations().into_iter().map(Into::into).collect();
        assert_eq!(gt, truth);
        cfg.candidates.source = CandidateSource::Union;
        let union = resolve_candidates(&cfg, &corpus).unwrap();
        cfg.candidates.source = CandidateSource::Prominence;
        let prom = resolve_candidates(&cfg, &corpus).unwrap();
        for ((u, g), p) in union.iter().zip(&gt).zip(&prom) {
            assert!(g.candidates.iter().chain(&p.candidates).all(|b| u.candidates.contains(b)));
            assert!(u.candidates.len() <= g.candidates.len() + p.candidates.len());
        }
        cfg.candidates.source = CandidateSource::File;
        cfg.candidates.file = Some(dir.path().join("candidates.txt"));
        assert_eq!(resolve_candidates(&cfg, &corpus).unwrap(), synth.candidates);
    }

    #[test]
    fn missing_features_are_listed() {
        let synth = generate(&SynthSpec { n_utterances: 4, ..SynthSpec::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth.write_to_dir(dir.path()).unwrap();
        fs::remove_file(dir.path().join("features/utt00001.feat")).unwrap();
        fs::remove_file(dir.path().join("features/utt00003.feat")).unwrap();
        let cfg = PipelineConfig { manifest, ..PipelineConfig::default() };
        match Corpus::load(&cfg) {
            Err(Error::Manifest(msg)) => {
                assert!(msg.contains("utt00001") && msg.contains("utt00003") && !msg.contains("utt00002"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lexicon_manifest_must_cover_corpus() {
        let synth = generate(&SynthSpec { n_utterances: 3, ..SynthSpec::default() }).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let manifest = synth.write_to_dir(a.path()).unwrap();
        let small = generate(&SynthSpec { n_utterances: 2, ..SynthSpec::default() }).unwrap();
        let lexicon_manifest = Some(small.write_to_dir(b.path()).unwrap());
        let cfg = PipelineConfig { manifest, lexicon_manifest, ..PipelineConfig::default() };
        assert!(matches!(Corpus::load(&cfg), Err(Error::Manifest(m)) if m.contains("utt00002")));
    }

    #[test]
    fn perfect_and_empty_hypotheses_via_files() {
        let synth = generate(&SynthSpec { n_utterances: 4, ..clean_spec() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth.write_to_dir(dir.path()).unwrap();
        let cfg = PipelineConfig { manifest, ..PipelineConfig::default() };
        let report = run_eval(&cfg, &dir.path().join("candidates.txt"), Some(&dir.path().join("classes.txt"))).unwrap();
        assert_eq!((report.boundary.f1, report.boundary.r_value, report.token.f1), (100.0, 100.0, 100.0));
        assert_eq!(report.lexicon.unwrap().ned, 0.0);
        assert!(report.to_json_line().unwrap().starts_with("{\"boundary\""));

        let whole: Vec<Segmentation> = synth
            .features
            .iter()
            .map(|m| Segmentation::whole(m.utterance_id(), m.n_frames()))
            .collect();
        let path = dir.path().join("whole.txt");
        write_boundary_file(&whole, &path).unwrap();
        let report = run_eval(&cfg, &path, None).unwrap();
        assert_eq!((report.boundary.recall, report.boundary.over_segmentation), (0.0, -100.0));
        assert!(report.lexicon.is_none());
    }

    #[test]
    fn outputs_are_deterministic() {
        let synth = generate(&SynthSpec { n_utterances: 20, seed: 8, distractor_rate: 1.0, ..SynthSpec::default() }).unwrap();
        let corpus = Corpus::new(synth.features.clone(), None).unwrap();
        let cfg = PipelineConfig { k: 20, ..PipelineConfig::default() };
        let a = run_eskmeans_with_candidates(&cfg, &corpus, synth.candidates.clone()).unwrap();
        let b = run_eskmeans_with_candidates(&cfg, &corpus, synth.candidates.clone()).unwrap();
        assert_eq!(a.segmentations, b.segmentations);
        assert_eq!(a.classes, b.classes);
        let x = run_promseg_clus(&cfg, &corpus).unwrap();
        let y = run_promseg_clus(&cfg, &corpus).unwrap();
        assert_eq!(x.classes, y.classes);
        assert_eq!(x.boundary_checksum, y.boundary_checksum);
    }

    #[test]
    fn per_utterance_normalization() {
        let synth = generate(&SynthSpec { n_utterances: 5, ..clean_spec() }).unwrap();
        let norm = normalize_features(&synth.features, NormalizationScope::Utterance).unwrap();
        for m in &norm {
            let n = Normalizer::fit(m.frames()).unwrap();
            assert!(n.mean.iter().all(|v| v.abs() < 1e-5));
        }
    }

    #[test]
    fn pca_dim_is_clamped() {
        let synth = generate(&SynthSpec { n_utterances: 5, ..SynthSpec::default() }).unwrap();
        let (model, projected) = project_features(&synth.features, 250, 1000, 0).unwrap();
        assert_eq!(model.unwrap().output_dim(), 16);
        assert_eq!(projected[0].dim(), 16);
        let (none, same) = project_features(&synth.features, 0, 1000, 0).unwrap();
        assert!(none.is_none());
        assert_eq!(same, synth.features);
    }

    #[test]
    fn workers_pool_runs() {
        assert_eq!(with_workers(2, rayon::current_num_threads).unwrap(), 2);
    }
}
