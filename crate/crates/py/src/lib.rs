use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use wordseg_core::cluster::{kmeans_fit, ClusterModel, KMeansConfig};
use wordseg_core::corpusio::{parse_alignments, read_feature_file, write_feature_file};
use wordseg_core::eskmeans::{viterbi_segment, CandidateSet, EsKmeansConfig, Fallback};
use wordseg_core::evalmetrics;
use wordseg_core::pipeline::{self, Corpus, PipelineConfig};
use wordseg_core::promseg::{self, DissimilarityCurve, PromSegConfig, Segmentation};
use wordseg_core::segembed::embed_mean as core_embed_mean;
use wordseg_core::synthcorpus::{generate, SynthSpec};
use wordseg_core::{Error, Tier};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Frames of one utterance, `T x D` float32.
#[pyclass(name = "FeatureMatrix", module = "wordseg", skip_from_py_object)]
#[derive(Clone)]
pub struct PyFeatureMatrix {
    inner: wordseg_core::FeatureMatrix,
}

#[pymethods]
impl PyFeatureMatrix {
    #[new]
    #[pyo3(signature = (utterance_id, rows, frame_rate_hz = 100.0))]
    fn new(utterance_id: &str, rows: Vec<Vec<f32>>, frame_rate_hz: f32) -> PyResult<Self> {
        let inner = wordseg_core::FeatureMatrix::from_rows(utterance_id, frame_rate_hz, &rows).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: read_feature_file(path).map_err(to_py)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_feature_file(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn utterance_id(&self) -> String {
        self.inner.utterance_id().to_owned()
    }

    #[getter]
    fn n_frames(&self) -> usize {
        self.inner.n_frames()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn frame_rate_hz(&self) -> f32 {
        self.inner.frame_rate_hz()
    }

    fn rows(&self) -> Vec<Vec<f32>> {
        self.inner.frames().map(<[f32]>::to_vec).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.n_frames()
    }

    fn __repr__(&self) -> String {
        format!(
            "FeatureMatrix({:?}, {}x{}, {} Hz)",
            self.inner.utterance_id(),
            self.inner.n_frames(),
            self.inner.dim(),
            self.inner.frame_rate_hz()
        )
    }
}

/// Fitted centroids with the assignment and inertia of the fitted points.
#[pyclass(name = "ClusterModel", module = "wordseg", skip_from_py_object)]
#[derive(Clone)]
pub struct PyClusterModel {
    inner: ClusterModel,
}

#[pymethods]
impl PyClusterModel {
    #[new]
    fn new(centroids: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: ClusterModel::from_centroids(centroids).map_err(to_py)? })
    }

    #[getter]
    fn centroids(&self) -> Vec<Vec<f64>> {
        self.inner.centroids.clone()
    }

    #[getter]
    fn assignment(&self) -> Vec<usize> {
        self.inner.assignment.clone()
    }

    #[getter]
    fn inertia(&self) -> f64 {
        self.inner.inertia
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    /// Nearest centroid and its squared distance.
    fn assign(&self, point: Vec<f64>) -> PyResult<(usize, f64)> {
        self.inner.assign(&point).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("ClusterModel(k={}, inertia={})", self.inner.k(), self.inner.inertia)
    }
}

/// Cosine distance between consecutive frames.
#[pyfunction]
fn dissimilarity_curve(m: &PyFeatureMatrix) -> PyResult<Vec<f64>> {
    Ok(promseg::dissimilarity_curve(&m.inner).map_err(to_py)?.values)
}

#[pyfunction]
fn smooth(values: Vec<f64>, window_frames: usize) -> PyResult<Vec<f64>> {
    let c = DissimilarityCurve { utterance_id: String::new(), values };
    Ok(promseg::smooth(&c, window_frames).map_err(to_py)?.values)
}

/// `(index, prominence)` of every local maximum.
#[pyfunction]
fn find_peaks(values: Vec<f64>) -> Vec<(usize, f64)> {
    promseg::find_peaks(&values).into_iter().map(|p| (p.index, p.prominence)).collect()
}

/// Boundaries `b_1 .. T` of one utterance.
#[pyfunction]
#[pyo3(signature = (m, window_frames = 4, prominence_threshold = 0.75))]
fn prominence_segment(m: &PyFeatureMatrix, window_frames: usize, prominence_threshold: f64) -> PyResult<Vec<usize>> {
    let cfg = PromSegConfig { window_frames, prominence_threshold };
    Ok(promseg::prominence_segment(&m.inner, &cfg).map_err(to_py)?.boundaries)
}

/// Unit-normalized mean of frames `[start, end)`.
#[pyfunction]
fn embed_mean(m: &PyFeatureMatrix, start: usize, end: usize) -> PyResult<Vec<f64>> {
    Ok(core_embed_mean(&m.inner, start, end).map_err(to_py)?.vector)
}

#[pyfunction]
#[pyo3(signature = (points, k, seed = 0, n_init = 1, max_iters = 100, init = None))]
fn kmeans(
    py: Python<'_>,
    points: Vec<Vec<f64>>,
    k: usize,
    seed: u64,
    n_init: usize,
    max_iters: usize,
    init: Option<Vec<Vec<f64>>>,
) -> PyResult<PyClusterModel> {
    let cfg = KMeansConfig { k, max_iters, seed, n_init };
    let inner = py
        .detach(|| kmeans_fit(&points, &cfg, init.as_deref(), None))
        .map_err(to_py)?;
    Ok(PyClusterModel { inner })
}

/// Minimum-cost segmentation over `candidates` (ending with `T`) under fixed
/// centroids. Returns `(boundaries, cost, fallback)`.
#[pyfunction]
#[pyo3(signature = (m, candidates, model, min_segment_frames = 5, max_span_candidates = 4))]
fn viterbi(
    m: &PyFeatureMatrix,
    candidates: Vec<usize>,
    model: &PyClusterModel,
    min_segment_frames: usize,
    max_span_candidates: usize,
) -> PyResult<(Vec<usize>, f64, &'static str)> {
    let cands = CandidateSet::new(m.inner.utterance_id(), candidates).map_err(to_py)?;
    let cfg = EsKmeansConfig {
        k: model.inner.k(),
        min_segment_frames,
        max_span_candidates,
        ..EsKmeansConfig::default()
    };
    let out = viterbi_segment(&m.inner, &cands, &model.inner, &cfg).map_err(to_py)?;
    let fallback = match out.fallback {
        Fallback::None => "none",
        Fallback::RelaxedMinDuration => "relaxed_min_duration",
        Fallback::SingleSegment => "single_segment",
    };
    Ok((out.segmentation.boundaries, out.cost, fallback))
}

fn to_dict<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn segmentations(hyp: Vec<(String, Vec<usize>)>) -> PyResult<Vec<Segmentation>> {
    hyp.into_iter()
        .map(|(u, b)| Segmentation::new(u, b).map_err(to_py))
        .collect()
}

/// Boundary precision, recall, F1, over-segmentation and R-value.
/// `hyp` holds `(utterance_id, boundaries)` pairs; `alignments` is the text
/// of a word alignment file.
#[pyfunction]
#[pyo3(signature = (hyp, alignments, tolerance_s = 0.02, frame_rate_hz = 100.0))]
fn boundary_score<'py>(
    py: Python<'py>,
    hyp: Vec<(String, Vec<usize>)>,
    alignments: &str,
    tolerance_s: f64,
    frame_rate_hz: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let refs = parse_alignments(alignments, Tier::Word).map_err(to_py)?;
    let s = evalmetrics::boundary_score(&segmentations(hyp)?, &refs, tolerance_s, frame_rate_hz).map_err(to_py)?;
    to_dict(py, &s)
}

#[pyfunction]
#[pyo3(signature = (hyp, alignments, tolerance_s = 0.02, frame_rate_hz = 100.0))]
fn token_score<'py>(
    py: Python<'py>,
    hyp: Vec<(String, Vec<usize>)>,
    alignments: &str,
    tolerance_s: f64,
    frame_rate_hz: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let refs = parse_alignments(alignments, Tier::Word).map_err(to_py)?;
    let s = evalmetrics::token_score(&segmentations(hyp)?, &refs, tolerance_s, frame_rate_hz).map_err(to_py)?;
    to_dict(py, &s)
}

#[pyfunction]
fn r_value(recall: f64, over_segmentation: f64) -> f64 {
    evalmetrics::r_value(recall, over_segmentation)
}

#[pyfunction]
fn normalized_edit_distance(a: Vec<String>, b: Vec<String>) -> f64 {
    evalmetrics::normalized_edit_distance(&a, &b)
}

/// Writes a synthetic corpus to `out` and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (
    out,
    seed = 0,
    vocab_size = 20,
    dim = 16,
    n_utterances = 100,
    noise_sigma = 0.01,
    distractor_rate = 0.5,
    frames_per_word = (8, 8),
    words_per_utterance = (3, 6),
    allow_adjacent_repeats = true,
))]
#[allow(clippy::too_many_arguments)]
fn synth(
    py: Python<'_>,
    out: PathBuf,
    seed: u64,
    vocab_size: usize,
    dim: usize,
    n_utterances: usize,
    noise_sigma: f64,
    distractor_rate: f64,
    frames_per_word: (usize, usize),
    words_per_utterance: (usize, usize),
    allow_adjacent_repeats: bool,
) -> PyResult<PathBuf> {
    let spec = SynthSpec {
        vocab_size,
        dim,
        frames_per_word,
        words_per_utterance,
        n_utterances,
        noise_sigma,
        distractor_rate,
        allow_adjacent_repeats,
        seed,
        ..SynthSpec::default()
    };
    py.detach(|| generate(&spec)?.write_to_dir(&out)).map_err(to_py)
}

fn config(
    config: Option<PathBuf>,
    manifest: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    k: Option<usize>,
    seed: Option<u64>,
) -> PyResult<PipelineConfig> {
    let mut cfg = match config {
        Some(p) => PipelineConfig::load(p).map_err(to_py)?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = manifest {
        cfg.manifest = m;
    }
    if let Some(o) = output_dir {
        cfg.output_dir = o;
    }
    if let Some(k) = k {
        cfg.k = k;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Bottom-up system: prominence segmentation, then K-means over segments.
/// Writes the outputs to the output directory and returns it.
#[pyfunction]
#[pyo3(signature = (config = None, manifest = None, output_dir = None, k = None, seed = None))]
fn run_promseg_clus(
    py: Python<'_>,
    config: Option<PathBuf>,
    manifest: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    k: Option<usize>,
    seed: Option<u64>,
) -> PyResult<PathBuf> {
    let cfg = self::config(config, manifest, output_dir, k, seed)?;
    py.detach(|| {
        pipeline::with_workers(cfg.workers, || {
            let corpus = Corpus::load(&cfg)?;
            pipeline::run_promseg_clus(&cfg, &corpus)?.write(&cfg.output_dir)
        })?
    })
    .map_err(to_py)?;
    Ok(cfg.output_dir)
}

/// ES-KMeans+ over the configured candidate source. `candidates` overrides
/// it: "prominence", "file", "alignment", "max_recall_prominence" or
/// "union". Writes the outputs to the output directory and returns it.
#[pyfunction]
#[pyo3(signature = (
    config = None,
    manifest = None,
    output_dir = None,
    k = None,
    seed = None,
    candidates = None,
    candidate_file = None,
))]
#[allow(clippy::too_many_arguments)]
fn run_eskmeans(
    py: Python<'_>,
    config: Option<PathBuf>,
    manifest: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    k: Option<usize>,
    seed: Option<u64>,
    candidates: Option<&str>,
    candidate_file: Option<PathBuf>,
) -> PyResult<PathBuf> {
    let mut cfg = self::config(config, manifest, output_dir, k, seed)?;
    if let Some(s) = candidates {
        cfg.candidates.source = serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| PyValueError::new_err(format!("unknown candidate source {s:?}")))?;
    }
    if candidate_file.is_some() {
        cfg.candidates.file = candidate_file;
    }
    cfg.validate().map_err(to_py)?;
    py.detach(|| {
        pipeline::with_workers(cfg.workers, || {
            let corpus = Corpus::load(&cfg)?;
            pipeline::run_eskmeans_plus(&cfg, &corpus)?.write(&cfg.output_dir)
        })?
    })
    .map_err(to_py)?;
    Ok(cfg.output_dir)
}

/// Scores a boundary file (and class file) against the manifest alignments.
#[pyfunction]
#[pyo3(signature = (manifest, boundaries, classes = None, tolerance_s = 0.02))]
fn evaluate<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    boundaries: PathBuf,
    classes: Option<PathBuf>,
    tolerance_s: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = PipelineConfig { manifest, ..PipelineConfig::default() };
    cfg.eval.tolerance_s = tolerance_s;
    let report = py
        .detach(|| pipeline::run_eval(&cfg, &boundaries, classes.as_deref()))
        .map_err(to_py)?;
    to_dict(py, &report)
}

#[pymodule]
fn wordseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeatureMatrix>()?;
    m.add_class::<PyClusterModel>()?;
    m.add_function(wrap_pyfunction!(dissimilarity_curve, m)?)?;
    m.add_function(wrap_pyfunction!(smooth, m)?)?;
    m.add_function(wrap_pyfunction!(find_peaks, m)?)?;
    m.add_function(wrap_pyfunction!(prominence_segment, m)?)?;
    m.add_function(wrap_pyfunction!(embed_mean, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(viterbi, m)?)?;
    m.add_function(wrap_pyfunction!(boundary_score, m)?)?;
    m.add_function(wrap_pyfunction!(token_score, m)?)?;
    m.add_function(wrap_pyfunction!(r_value, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run_promseg_clus, m)?)?;
    m.add_function(wrap_pyfunction!(run_eskmeans, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
