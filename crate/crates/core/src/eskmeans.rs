//! ES-KMeans+: alternating Viterbi re-segmentation over candidate boundaries
//! and K-means refits, operating on the whole corpus in batches.
//!
//! A segment embedding `z` spanning `len(z)` frames is scored as
//! `len(z) * ||z - mu*||^2` against its nearest centroid `mu*`. An utterance's
//! cost is the sum over its segments, and the segmentation step picks the
//! subset of candidate boundaries with the lowest cost via
//!
//! ```text
//! gamma[j] = min over i in [j - max_span, j) of gamma[i] + d(z(c_i, c_j)),  gamma[0] = 0
//! ```
//!
//! where `c_0 = 0` and `c_n = T`. States live on candidate positions only.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans_fit, ClusterModel, KMeansConfig};
use crate::corpusio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::promseg::Segmentation;
use crate::segembed::{EmbeddingVariant, SegmentEmbedding};

/// Candidate boundary positions for one utterance; always ends with `T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub utterance_id: String,
    pub candidates: Vec<usize>,
}

impl CandidateSet {
    pub fn new(utterance_id: impl Into<String>, candidates: Vec<usize>) -> Result<Self> {
        let seg = Segmentation::new(utterance_id, candidates)?;
        Ok(Self {
            utterance_id: seg.utterance_id,
            candidates: seg.boundaries,
        })
    }

    pub fn n_frames(&self) -> usize {
        *self.candidates.last().expect("candidate set is never empty")
    }

    /// `[0, c_1, ..., T]`: the DP states.
    pub fn positions(&self) -> Vec<usize> {
        std::iter::once(0).chain(self.candidates.iter().copied()).collect()
    }

    /// Merges two candidate sets for the same utterance.
    pub fn union(&self, other: &CandidateSet) -> Result<CandidateSet> {
        if self.n_frames() != other.n_frames() {
            return Err(Error::Validation(format!(
                "{}: candidate sets disagree on T ({} vs {})",
                self.utterance_id,
                self.n_frames(),
                other.n_frames()
            )));
        }
        let mut merged: Vec<usize> = self
            .candidates
            .iter()
            .chain(&other.candidates)
            .copied()
            .collect();
        merged.sort_unstable();
        merged.dedup();
        CandidateSet::new(self.utterance_id.clone(), merged)
    }
}

impl From<Segmentation> for CandidateSet {
    fn from(s: Segmentation) -> Self {
        Self {
            utterance_id: s.utterance_id,
            candidates: s.boundaries,
        }
    }
}

impl From<CandidateSet> for Segmentation {
    fn from(c: CandidateSet) -> Self {
        Segmentation {
            utterance_id: c.utterance_id,
            boundaries: c.candidates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsKmeansConfig {
    pub n_iterations: usize,
    pub init_keep_prob: f64,
    pub min_segment_frames: usize,
    pub max_span_candidates: usize,
    pub k: usize,
    pub seed: u64,
    pub kmeans_max_iters: usize,
    /// Weight centroid means by segment length.
    pub weighted_centroids: bool,
    pub variant: EmbeddingVariant,
}

impl Default for EsKmeansConfig {
    fn default() -> Self {
        Self {
            n_iterations: 5,
            init_keep_prob: 0.5,
            min_segment_frames: 5,
            max_span_candidates: 4,
            k: 100,
            seed: 0,
            kmeans_max_iters: crate::cluster::DEFAULT_MAX_ITERS,
            weighted_centroids: false,
            variant: EmbeddingVariant::Mean,
        }
    }
}

impl EsKmeansConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Parameter(m.into()));
        if self.n_iterations == 0 {
            return fail("n_iterations must be >= 1");
        }
        if !(self.init_keep_prob > 0.0 && self.init_keep_prob <= 1.0) {
            return fail("init_keep_prob must lie in (0, 1]");
        }
        if self.min_segment_frames == 0 {
            return fail("min_segment_frames must be >= 1");
        }
        if self.max_span_candidates == 0 {
            return fail("max_span_candidates must be >= 1");
        }
        if self.k == 0 {
            return fail("K must be >= 1");
        }
        if self.kmeans_max_iters == 0 {
            return fail("kmeans_max_iters must be >= 1");
        }
        Ok(())
    }

    pub fn constraints(&self) -> SegmentConstraints {
        SegmentConstraints {
            min_segment_frames: self.min_segment_frames,
            max_span_candidates: self.max_span_candidates,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentConstraints {
    pub min_segment_frames: usize,
    pub max_span_candidates: usize,
}

impl SegmentConstraints {
    /// No minimum duration and no span limit.
    pub const NONE: Self = Self {
        min_segment_frames: 1,
        max_span_candidates: usize::MAX,
    };

    pub fn allows(&self, positions: &[usize], i: usize, j: usize) -> bool {
        j > i
            && j - i <= self.max_span_candidates
            && positions[j] - positions[i] >= self.min_segment_frames
    }
}

/// `len(z) * ||z - mu*||^2` against the nearest centroid.
pub fn score(z: &SegmentEmbedding, model: &ClusterModel) -> Result<f64> {
    let (_, dist) = model.assign(&z.vector)?;
    Ok(z.length_frames() as f64 * dist)
}

/// Keeps each interior candidate independently with probability `keep_prob`.
pub fn random_init_segmentation(cands: &CandidateSet, keep_prob: f64, seed: u64) -> Segmentation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_with_rng(cands, keep_prob, &mut rng)
}

fn init_with_rng(cands: &CandidateSet, keep_prob: f64, rng: &mut impl Rng) -> Segmentation {
    let p = keep_prob.clamp(0.0, 1.0);
    let mut boundaries: Vec<usize> = cands.candidates[..cands.candidates.len() - 1]
        .iter()
        .copied()
        .filter(|_| rng.random_bool(p))
        .collect();
    boundaries.push(cands.n_frames());
    Segmentation {
        utterance_id: cands.utterance_id.clone(),
        boundaries,
    }
}

/// Forward variables over the positions `[0, c_1, ..., T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DpTable {
    pub positions: Vec<usize>,
    /// Minimal cumulative cost to reach each position; infinite if unreachable.
    pub gamma: Vec<f64>,
    /// Segment count along the chosen path, used to break cost ties.
    pub n_segments: Vec<usize>,
    pub backpointer: Vec<Option<usize>>,
}

impl DpTable {
    pub fn reachable(&self) -> bool {
        self.gamma.last().is_some_and(|g| g.is_finite())
    }

    /// Boundary frames along the optimal path, or `None` if `T` is unreachable.
    pub fn backtrack(&self) -> Option<Vec<usize>> {
        if !self.reachable() {
            return None;
        }
        let mut out = Vec::new();
        let mut j = self.positions.len() - 1;
        while j > 0 {
            out.push(self.positions[j]);
            j = self.backpointer[j]?;
        }
        out.reverse();
        Some(out)
    }
}

/// Runs the forward recursion. `cost(i, j)` scores the segment between
/// positions `i` and `j`; `None` marks it infeasible. Equal costs prefer
/// fewer segments, then the earlier predecessor.
pub fn forward_pass<F>(positions: &[usize], constraints: SegmentConstraints, mut cost: F) -> DpTable
where
    F: FnMut(usize, usize) -> Option<f64>,
{
    let n = positions.len();
    let mut gamma = vec![f64::INFINITY; n];
    let mut n_segments = vec![usize::MAX; n];
    let mut backpointer = vec![None; n];
    gamma[0] = 0.0;
    n_segments[0] = 0;
    for j in 1..n {
        let first = j.saturating_sub(constraints.max_span_candidates);
        for i in first..j {
            if !gamma[i].is_finite() || !constraints.allows(positions, i, j) {
                continue;
            }
            let Some(c) = cost(i, j) else { continue };
            let total = gamma[i] + c;
            let segs = n_segments[i] + 1;
            if total < gamma[j] || (total == gamma[j] && segs < n_segments[j]) {
                gamma[j] = total;
                n_segments[j] = segs;
                backpointer[j] = Some(i);
            }
        }
    }
    DpTable {
        positions: positions.to_vec(),
        gamma,
        n_segments,
        backpointer,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    None,
    /// Minimum duration relaxed to one frame.
    RelaxedMinDuration,
    /// No feasible path; the whole utterance is one segment.
    SingleSegment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViterbiOutcome {
    pub segmentation: Segmentation,
    pub cost: f64,
    pub fallback: Fallback,
}

/// Optimal segmentation over `cands` for an arbitrary segment cost, with the
/// infeasibility fallbacks applied.
pub fn viterbi_with_costs<F>(
    cands: &CandidateSet,
    constraints: SegmentConstraints,
    mut cost: F,
) -> ViterbiOutcome
where
    F: FnMut(usize, usize) -> Option<f64>,
{
    let positions = cands.positions();
    let finish = |table: DpTable, fallback| {
        let cost = *table.gamma.last().unwrap();
        ViterbiOutcome {
            segmentation: Segmentation {
                utterance_id: cands.utterance_id.clone(),
                boundaries: table.backtrack().expect("reachable"),
            },
            cost,
            fallback,
        }
    };
    let table = forward_pass(&positions, constraints, &mut cost);
    if table.reachable() {
        return finish(table, Fallback::None);
    }
    let relaxed = SegmentConstraints {
        min_segment_frames: 1,
        ..constraints
    };
    let table = forward_pass(&positions, relaxed, &mut cost);
    if table.reachable() {
        log::warn!(
            "{}: no segmentation satisfies the minimum duration; relaxed to 1 frame",
            cands.utterance_id
        );
        return finish(table, Fallback::RelaxedMinDuration);
    }
    log::warn!("{}: no feasible segmentation; using a single segment", cands.utterance_id);
    ViterbiOutcome {
        segmentation: Segmentation::whole(cands.utterance_id.clone(), cands.n_frames()),
        cost: cost(0, positions.len() - 1).unwrap_or(f64::INFINITY),
        fallback: Fallback::SingleSegment,
    }
}

/// Embeddings of every segment the DP may use, keyed by position indices.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingCache {
    entries: HashMap<(usize, usize), SegmentEmbedding>,
}

impl EmbeddingCache {
    pub fn get(&self, i: usize, j: usize) -> Option<&SegmentEmbedding> {
        self.entries.get(&(i, j))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.entries.keys()
    }
}

/// Embeds every `(i, j)` position pair allowed by the span and duration
/// constraints. Degenerate segments are left out.
pub fn precompute_segment_embeddings(
    m: &FeatureMatrix,
    cands: &CandidateSet,
    cfg: &EsKmeansConfig,
) -> EmbeddingCache {
    let positions = cands.positions();
    let constraints = cfg.constraints();
    let mut entries = HashMap::new();
    for j in 1..positions.len() {
        for i in j.saturating_sub(constraints.max_span_candidates)..j {
            if !constraints.allows(&positions, i, j) {
                continue;
            }
            if let Ok(z) = cfg.variant.embed(m, positions[i], positions[j]) {
                entries.insert((i, j), z);
            }
        }
    }
    EmbeddingCache { entries }
}

fn check_candidates(m: &FeatureMatrix, cands: &CandidateSet) -> Result<()> {
    if cands.n_frames() != m.n_frames() {
        return Err(Error::Validation(format!(
            "{}: candidates end at {} but features have {} frames",
            cands.utterance_id,
            cands.n_frames(),
            m.n_frames()
        )));
    }
    Ok(())
}

fn segment_cost(
    m: &FeatureMatrix,
    positions: &[usize],
    cache: Option<&EmbeddingCache>,
    model: &ClusterModel,
    variant: EmbeddingVariant,
    i: usize,
    j: usize,
) -> Option<f64> {
    let fresh;
    let z = match cache.and_then(|c| c.get(i, j)) {
        Some(z) => z,
        None => {
            fresh = variant.embed(m, positions[i], positions[j]).ok()?;
            &fresh
        }
    };
    score(z, model).ok()
}

/// Minimum-cost segmentation of `m` over `cands` under fixed centroids.
pub fn viterbi_segment(
    m: &FeatureMatrix,
    cands: &CandidateSet,
    model: &ClusterModel,
    cfg: &EsKmeansConfig,
) -> Result<ViterbiOutcome> {
    viterbi_segment_cached(m, cands, None, model, cfg)
}

/// As [`viterbi_segment`], looking embeddings up in `cache` first.
pub fn viterbi_segment_cached(
    m: &FeatureMatrix,
    cands: &CandidateSet,
    cache: Option<&EmbeddingCache>,
    model: &ClusterModel,
    cfg: &EsKmeansConfig,
) -> Result<ViterbiOutcome> {
    check_candidates(m, cands)?;
    let expected = cfg.variant.output_dim(m.dim());
    if model.k() == 0 || model.dim() != expected {
        return Err(Error::Shape {
            expected,
            got: model.dim(),
        });
    }
    let positions = cands.positions();
    Ok(viterbi_with_costs(cands, cfg.constraints(), |i, j| {
        segment_cost(m, &positions, cache, model, cfg.variant, i, j)
    }))
}

/// Total score of an existing segmentation; degenerate segments are skipped.
pub fn segmentation_cost(
    m: &FeatureMatrix,
    s: &Segmentation,
    model: &ClusterModel,
    variant: EmbeddingVariant,
) -> Result<f64> {
    let mut total = 0.0;
    for (start, end) in s.segments() {
        match variant.embed(m, start, end) {
            Ok(z) => total += score(&z, model)?,
            Err(Error::DegenerateSegment { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(total)
}

/// A segment that was clustered: utterance index and frame extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRef {
    pub utterance: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Seg,
    Cluster,
}

/// One line of the iteration log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub phase: Phase,
    /// Corpus total of segment scores after this phase.
    pub cost: f64,
    /// Unweighted sum of squared distances to the nearest centroid.
    pub inertia: f64,
    pub n_segments: usize,
    pub n_fallbacks: usize,
}

impl IterationRecord {
    pub fn log_line(&self) -> String {
        let phase = match self.phase {
            Phase::Seg => "seg",
            Phase::Cluster => "cluster",
        };
        format!(
            "iter={} phase={} cost={:.6} inertia={:.6}",
            self.iteration, phase, self.cost, self.inertia
        )
    }
}

/// Fitted segmentation and lexicon.
#[derive(Debug, Clone)]
pub struct EsKmeansResult {
    pub segmentations: Vec<Segmentation>,
    pub model: ClusterModel,
    /// Segments in `model.assignment` order.
    pub segments: Vec<SegmentRef>,
    pub log: Vec<IterationRecord>,
}

/// Independent seed for item `index` of a seeded batch.
pub(crate) fn utterance_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// State of a running ES-KMeans+ fit. [`fit`] drives it for the configured
/// number of iterations; [`EsKmeans::step`] runs one re-segment/refit round.
pub struct EsKmeans<'a> {
    corpus: &'a [(FeatureMatrix, CandidateSet)],
    cfg: EsKmeansConfig,
    caches: Vec<EmbeddingCache>,
    segmentations: Vec<Segmentation>,
    model: ClusterModel,
    segments: Vec<SegmentRef>,
    iteration: usize,
    log: Vec<IterationRecord>,
}

struct Embedded {
    points: Vec<Vec<f64>>,
    lengths: Vec<f64>,
    segments: Vec<SegmentRef>,
}

impl<'a> EsKmeans<'a> {
    /// Random initialization followed by the first K-means fit.
    pub fn initialize(
        corpus: &'a [(FeatureMatrix, CandidateSet)],
        cfg: &EsKmeansConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::Validation("empty corpus".into()));
        }
        for (m, c) in corpus {
            check_candidates(m, c)?;
        }
        let caches: Vec<EmbeddingCache> = corpus
            .par_iter()
            .map(|(m, c)| precompute_segment_embeddings(m, c, cfg))
            .collect();
        let segmentations: Vec<Segmentation> = corpus
            .iter()
            .enumerate()
            .map(|(u, (_, c))| {
                random_init_segmentation(c, cfg.init_keep_prob, utterance_seed(cfg.seed, u))
            })
            .collect();
        let mut state = Self {
            corpus,
            cfg: cfg.clone(),
            caches,
            segmentations,
            model: ClusterModel {
                centroids: Vec::new(),
                assignment: Vec::new(),
                inertia: 0.0,
            },
            segments: Vec::new(),
            iteration: 0,
            log: Vec::new(),
        };
        let embedded = state.embed_current()?;
        if cfg.k > embedded.points.len() {
            return Err(Error::Parameter(format!(
                "K = {} exceeds the {} initial segments",
                cfg.k,
                embedded.points.len()
            )));
        }
        state.refit(embedded, None)?;
        Ok(state)
    }

    pub fn segmentations(&self) -> &[Segmentation] {
        &self.segmentations
    }

    pub fn model(&self) -> &ClusterModel {
        &self.model
    }

    pub fn log(&self) -> &[IterationRecord] {
        &self.log
    }

    fn position_index(positions: &[usize], frame: usize) -> Option<usize> {
        positions.binary_search(&frame).ok()
    }

    fn embedding(&self, u: usize, start: usize, end: usize) -> Result<SegmentEmbedding> {
        let (m, c) = &self.corpus[u];
        let positions = c.positions();
        let cached = Self::position_index(&positions, start)
            .zip(Self::position_index(&positions, end))
            .and_then(|(i, j)| self.caches[u].get(i, j));
        match cached {
            Some(z) => Ok(z.clone()),
            None => self.cfg.variant.embed(m, start, end),
        }
    }

    fn embed_current(&self) -> Result<Embedded> {
        let mut out = Embedded {
            points: Vec::new(),
            lengths: Vec::new(),
            segments: Vec::new(),
        };
        for (u, s) in self.segmentations.iter().enumerate() {
            for (start, end) in s.segments() {
                match self.embedding(u, start, end) {
                    Ok(z) => {
                        out.lengths.push(z.length_frames() as f64);
                        out.points.push(z.vector);
                        out.segments.push(SegmentRef {
                            utterance: u,
                            start,
                            end,
                        });
                    }
                    Err(Error::DegenerateSegment { .. }) => {
                        log::warn!(
                            "{}: segment [{start}, {end}) has a zero mean and is not clustered",
                            s.utterance_id
                        );
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        if out.points.is_empty() {
            return Err(Error::Validation("corpus has no embeddable segments".into()));
        }
        Ok(out)
    }

    fn refit(&mut self, embedded: Embedded, warm: Option<&[Vec<f64>]>) -> Result<()> {
        let kcfg = KMeansConfig {
            k: self.cfg.k,
            max_iters: self.cfg.kmeans_max_iters,
            seed: utterance_seed(self.cfg.seed, usize::MAX),
            n_init: 1,
        };
        let weights = self.cfg.weighted_centroids.then_some(embedded.lengths.as_slice());
        self.model = kmeans_fit(&embedded.points, &kcfg, warm, weights)?;
        let (cost, inertia) = embedded
            .points
            .iter()
            .zip(&embedded.lengths)
            .zip(&self.model.assignment)
            .fold((0.0, 0.0), |(cost, inertia), ((p, len), &k)| {
                let d = crate::cluster::squared_distance(p, &self.model.centroids[k]);
                (cost + len * d, inertia + d)
            });
        self.segments = embedded.segments;
        self.log.push(IterationRecord {
            iteration: self.iteration,
            phase: Phase::Cluster,
            cost,
            inertia,
            n_segments: self.segments.len(),
            n_fallbacks: 0,
        });
        Ok(())
    }

    /// Re-segments every utterance under the current centroids, then refits
    /// K-means warm-started from them.
    pub fn step(&mut self) -> Result<()> {
        self.iteration += 1;
        let outcomes: Vec<ViterbiOutcome> = self
            .corpus
            .par_iter()
            .zip(self.caches.par_iter())
            .map(|((m, c), cache)| viterbi_segment_cached(m, c, Some(cache), &self.model, &self.cfg))
            .collect::<Result<_>>()?;
        let n_fallbacks = outcomes.iter().filter(|o| o.fallback != Fallback::None).count();
        let cost: f64 = outcomes.iter().map(|o| o.cost).filter(|c| c.is_finite()).sum();
        self.segmentations = outcomes.into_iter().map(|o| o.segmentation).collect();

        let embedded = self.embed_current()?;
        let mut inertia = 0.0;
        for p in &embedded.points {
            inertia += self.model.assign(p)?.1;
        }
        self.log.push(IterationRecord {
            iteration: self.iteration,
            phase: Phase::Seg,
            cost,
            inertia,
            n_segments: embedded.points.len(),
            n_fallbacks,
        });
        let warm = self.model.centroids.clone();
        self.refit(embedded, Some(&warm))
    }

    pub fn finish(self) -> EsKmeansResult {
        EsKmeansResult {
            segmentations: self.segmentations,
            model: self.model,
            segments: self.segments,
            log: self.log,
        }
    }
}

/// Runs ES-KMeans+ for `cfg.n_iterations` rounds.
pub fn fit(corpus: &[(FeatureMatrix, CandidateSet)], cfg: &EsKmeansConfig) -> Result<EsKmeansResult> {
    let mut state = EsKmeans::initialize(corpus, cfg)?;
    for _ in 0..cfg.n_iterations {
        state.step()?;
    }
    Ok(state.finish())
}
