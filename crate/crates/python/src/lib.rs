//! Python bindings: samples, compositing, prompts, attention metrics, TIPS,
//! dataset statistics, the curation pipeline and review replay.

use std::path::{Path, PathBuf};

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

use layerforge::attention::{self, AttentionRecord, Binarize, Grid, Mask};
use layerforge::backends::{Backends, BackendsConfig, EmbeddingVector};
use layerforge::compositor;
use layerforge::curation::{self, ArtifactThresholds, PipelineConfig, RunOptions};
use layerforge::layer::store::{decode_png, encode_png};
use layerforge::layer::{
    deserialize_sample, read_manifest, serialize_sample, BBox, LayerSource, MultiLayerSample,
    SampleStore, SemanticLayout, StatsAccumulator, TransparentLayer,
};
use layerforge::layerflux::{synth_multilayer as synth, LayerSynthConfig};
use layerforge::prompting::{self, PromptRegistry, SuffixTemplateId};
use layerforge::review::{read_journal, replay as replay_decisions};
use layerforge::tips::{self, PairMeta, PreferencePair, TrainConfig};

create_exception!(layerforge_py, LayerforgeError, PyException);

fn err(e: layerforge::Error) -> PyErr {
    LayerforgeError::new_err(e.to_string())
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for layerforge::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

/// Serializable value to plain Python objects via the `json` module.
fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| err(e.into()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn bbox(t: (i32, i32, u32, u32)) -> BBox {
    BBox::new(t.0, t.1, t.2, t.3)
}

fn parse_layout(json: &str) -> PyResult<SemanticLayout> {
    serde_json::from_str(json).map_err(|e| err(e.into()))
}

fn backends(config: Option<PathBuf>, seed: u64) -> PyResult<Backends> {
    let mut cfg = match config {
        Some(p) => {
            let raw = std::fs::read(&p).map_err(|e| err(layerforge::Error::Io { path: p.clone(), source: e }))?;
            serde_json::from_slice::<BackendsConfig>(&raw).map_err(|e| err(e.into()))?.with_env_overrides()
        }
        None => BackendsConfig::default(),
    };
    cfg.seed = seed;
    Backends::from_config(&cfg).py()
}

/// A multi-layer transparent image: ordered RGBA layers, their layout and
/// the merged composite.
#[pyclass(name = "Sample", module = "layerforge_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PySample {
    inner: MultiLayerSample,
}

#[pymethods]
impl PySample {
    /// Decodes the binary sample encoding produced by `to_bytes`.
    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: deserialize_sample(data).py()?,
        })
    }

    /// Reads sample `id` from a sample store directory.
    #[staticmethod]
    fn read(store_root: PathBuf, id: &str) -> PyResult<Self> {
        Ok(Self {
            inner: SampleStore::open(store_root).py()?.read_id(id).py()?,
        })
    }

    /// A small random sample with `n` layers, for experiments and tests.
    #[staticmethod]
    #[pyo3(signature = (n, seed = 0))]
    fn fixture(n: usize, seed: u64) -> Self {
        Self {
            inner: layerforge::fixtures::sample_with_layers(n, seed),
        }
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn layer_count(&self) -> usize {
        self.inner.layer_count()
    }

    #[getter]
    fn size(&self) -> (u32, u32) {
        (self.inner.layout.canvas.width, self.inner.layout.canvas.height)
    }

    #[getter]
    fn state(&self) -> String {
        self.inner.state.to_string()
    }

    #[getter]
    fn style(&self) -> Option<String> {
        self.inner.style.clone()
    }

    #[getter]
    fn captions(&self) -> Vec<String> {
        self.inner.layers.iter().map(|l| l.caption.clone()).collect()
    }

    #[getter]
    fn kinds(&self) -> Vec<&'static str> {
        self.inner.layers.iter().map(|l| l.kind.as_str()).collect()
    }

    #[getter]
    fn scores<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.scores)
    }

    fn layout_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.layout).map_err(|e| err(e.into()))
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &serialize_sample(&self.inner))
    }

    fn merged_png<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &encode_png(&self.inner.merged).py()?))
    }

    fn layer_png<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyBytes>> {
        let layer = self
            .inner
            .layers
            .get(index)
            .ok_or_else(|| pyo3::exceptions::PyIndexError::new_err(format!("layer {index} out of range")))?;
        Ok(PyBytes::new(py, &encode_png(&layer.image).py()?))
    }

    /// Writes into a sample store; returns the manifest entry.
    fn write<'py>(&self, py: Python<'py>, store_root: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let entry = SampleStore::open(store_root).py()?.write(&self.inner).py()?;
        to_py(py, &entry)
    }

    /// Removes the given layers and re-composites.
    fn drop_layers(&self, layers: Vec<usize>, new_id: &str) -> PyResult<Self> {
        Ok(Self {
            inner: curation::drop_layers(&self.inner, &layers, new_id).py()?,
        })
    }

    /// Duplicate and overlap heuristics using the mock embedder.
    #[pyo3(signature = (seed = 0))]
    fn artifact_report<'py>(&self, py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let b = Backends::mock(seed);
        let r = curation::artifact_report(&self.inner, b.embedder.as_ref(), None, &ArtifactThresholds::default()).py()?;
        to_py(py, &r)
    }

    fn __len__(&self) -> usize {
        self.inner.layer_count()
    }

    fn __eq__(&self, other: &PySample) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let (w, h) = self.size();
        format!("Sample(id={:?}, layers={}, size={w}x{h}, state={})", self.inner.id, self.inner.layer_count(), self.inner.state)
    }
}

/// Synthesizes a sample from a layout (JSON). Uses the mock backends unless
/// a backend config file is given.
#[pyfunction]
#[pyo3(signature = (id, layout_json, seed = 0, long_side = 1024, template = "H", backends_config = None))]
fn synth_multilayer(
    id: &str,
    layout_json: &str,
    seed: u64,
    long_side: u32,
    template: &str,
    backends_config: Option<PathBuf>,
) -> PyResult<PySample> {
    let cfg = LayerSynthConfig {
        suffix_template: template.parse::<SuffixTemplateId>().py()?,
        long_side,
        ..Default::default()
    };
    let b = backends(backends_config, seed)?;
    Ok(PySample {
        inner: synth(id, &parse_layout(layout_json)?, &cfg, &PromptRegistry::default(), &b, seed).py()?,
    })
}

/// Composites PNG layers (bottom to top by slot z) onto a layout; returns
/// the merged RGBA PNG.
#[pyfunction]
fn composite<'py>(py: Python<'py>, layout_json: &str, layer_pngs: Vec<Vec<u8>>) -> PyResult<Bound<'py, PyBytes>> {
    let layout = parse_layout(layout_json)?;
    if layer_pngs.len() != layout.slots.len() {
        return Err(err(layerforge::Error::Precondition(format!(
            "{} layers for {} slots",
            layer_pngs.len(),
            layout.slots.len()
        ))));
    }
    let layers = layer_pngs
        .iter()
        .zip(&layout.slots)
        .map(|(png, slot)| {
            TransparentLayer::new(decode_png(png)?, slot.caption.clone(), None, slot.kind, LayerSource::Crawled)
        })
        .collect::<layerforge::Result<Vec<_>>>()
        .py()?;
    let merged = compositor::composite(&layout, &layers).py()?.merged;
    Ok(PyBytes::new(py, &encode_png(&merged).py()?))
}

#[pyfunction]
fn bbox_iou(a: (i32, i32, u32, u32), b: (i32, i32, u32, u32)) -> f64 {
    compositor::bbox_iou(&bbox(a), &bbox(b))
}

#[pyfunction]
fn overlap_fraction(a: (i32, i32, u32, u32), b: (i32, i32, u32, u32)) -> f64 {
    compositor::overlap_fraction(&bbox(a), &bbox(b))
}

#[pyfunction]
#[pyo3(signature = (width, height, long_side = 1024))]
fn generation_canvas(width: u32, height: u32, long_side: u32) -> PyResult<(u32, u32)> {
    let c = compositor::generation_canvas(width, height, long_side).py()?;
    Ok((c.width, c.height))
}

#[pyfunction]
#[pyo3(signature = (prompt, template = "H", color = "gray"))]
fn apply_suffix(prompt: &str, template: &str, color: &str) -> PyResult<String> {
    prompting::apply_suffix(prompt, template.parse().py()?, color).py()
}

/// Metrics for one attention map against a foreground mask, both given
/// row-major as `width * height` floats.
#[pyfunction]
#[pyo3(signature = (attention, mask, width, height, binarize = "otsu", label = "run"))]
fn attention_metrics<'py>(
    py: Python<'py>,
    attention: Vec<f64>,
    mask: Vec<f64>,
    width: u32,
    height: u32,
    binarize: &str,
    label: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let method: Binarize = binarize.parse().py()?;
    let a = Grid::new(width, height, attention).py()?;
    let m = Mask::from_grid(&Grid::new(width, height, mask).py()?).py()?;
    let rec = AttentionRecord::new(a, m, None).py()?;
    to_py(py, &attention::metrics_row(label, &rec, method).py()?)
}

fn unit(v: Vec<f64>) -> PyResult<EmbeddingVector> {
    EmbeddingVector::normalized(v).py()
}

fn pair(win: Vec<f64>, lose: Vec<f64>, text: Vec<f64>) -> PyResult<PreferencePair> {
    Ok(PreferencePair {
        e_win: unit(win)?,
        e_lose: unit(lose)?,
        e_text: unit(text)?,
        meta: PairMeta::default(),
    })
}

/// Text-image preference score model. Embeddings are L2-normalized on entry.
#[pyclass(name = "TipsModel", module = "layerforge_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTipsModel {
    inner: tips::TipsModel,
}

#[pymethods]
impl PyTipsModel {
    /// Identity projection with the default temperature.
    #[new]
    fn new(dim: usize) -> Self {
        Self {
            inner: tips::TipsModel::init(dim),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: tips::TipsModel::load(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }

    #[setter]
    fn set_tau(&mut self, tau: f64) -> PyResult<()> {
        let mut m = self.inner.clone();
        m.tau = tau;
        m.check().py()?;
        self.inner = m;
        Ok(())
    }

    fn score(&self, image: Vec<f64>, text: Vec<f64>) -> PyResult<f64> {
        tips::tips_score(&self.inner, &unit(image)?, &unit(text)?).py()
    }

    fn p_win(&self, win: Vec<f64>, lose: Vec<f64>, text: Vec<f64>) -> PyResult<f64> {
        tips::p_win(&self.inner, &pair(win, lose, text)?).py()
    }

    fn loss(&self, win: Vec<f64>, lose: Vec<f64>, text: Vec<f64>) -> PyResult<f64> {
        tips::pref_loss(&self.inner, &pair(win, lose, text)?).py()
    }

    fn __repr__(&self) -> String {
        format!("TipsModel(dim={}, tau={})", self.inner.dim, self.inner.tau)
    }
}

/// Trains on preference pairs (JSON lines). Returns the model and the
/// per-epoch history.
#[pyfunction]
#[pyo3(signature = (pairs_path, epochs = 20, lr = 0.05, batch = 16, seed = 0, l2 = 1e-4, holdout = 0.2, init = None))]
#[allow(clippy::too_many_arguments)]
fn train_tips<'py>(
    py: Python<'py>,
    pairs_path: PathBuf,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
    l2: f64,
    holdout: f64,
    init: Option<PyRef<'py, PyTipsModel>>,
) -> PyResult<(PyTipsModel, Bound<'py, PyAny>)> {
    let pairs = tips::read_pairs(&pairs_path).py()?;
    let start = match init {
        Some(m) => m.inner.clone(),
        None => {
            let first = pairs.first().ok_or_else(|| err(layerforge::Error::EmptyInput("no preference pairs")))?;
            tips::TipsModel::init(first.e_win.dim())
        }
    };
    let cfg = TrainConfig {
        lr,
        epochs,
        batch,
        seed,
        l2,
        holdout_fraction: holdout,
        ..Default::default()
    };
    let out = py.detach(|| tips::train(&start, &pairs, &cfg)).py()?;
    Ok((PyTipsModel { inner: out.model }, to_py(py, &out.history)?))
}

/// Layer-count and text statistics of a manifest's samples.
#[pyfunction]
#[pyo3(signature = (manifest, root = None))]
fn dataset_stats<'py>(py: Python<'py>, manifest: PathBuf, root: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let root = root.unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).to_path_buf());
    let stats = py
        .detach(|| {
            let store = SampleStore::open(root)?;
            let mut acc = StatsAccumulator::default();
            for e in read_manifest(&manifest)? {
                acc.add_meta(&store.read_meta(&e.path)?);
            }
            acc.finish()
        })
        .py()?;
    to_py(py, &stats)
}

/// Runs (or resumes) the curation pipeline in `work_dir`. Without a config
/// the small desk preset with mock backends is used.
#[pyfunction]
#[pyo3(signature = (work_dir, config = None, seed = None, mock_layouts = None, stop_after = None, fresh = false))]
fn run_pipeline<'py>(
    py: Python<'py>,
    work_dir: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    mock_layouts: Option<usize>,
    stop_after: Option<&str>,
    fresh: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = match config {
        Some(p) => PipelineConfig::load(&p).py()?,
        None => PipelineConfig::desk(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = mock_layouts {
        cfg.mock_layouts = n;
    }
    let stop_after = stop_after.map(str::parse).transpose().py()?;
    cfg.backends.seed = cfg.seed;
    let b = Backends::from_config(&cfg.backends.clone().with_env_overrides()).py()?;
    let run = py
        .detach(|| curation::run_pipeline(&cfg, &b, &work_dir, RunOptions { stop_after, fresh }))
        .py()?;
    let counts: std::collections::BTreeMap<&str, usize> = run.report.counts().into_iter().collect();
    to_py(
        py,
        &serde_json::json!({
            "counts": counts,
            "completed": run.completed,
            "resumed": run.resumed,
            "manifest": run.manifest,
        }),
    )
}

/// Sample ids accepted after replaying a review journal over a manifest.
#[pyfunction]
fn replay(manifest: PathBuf, journal: PathBuf) -> PyResult<Vec<String>> {
    let m = read_manifest(&manifest).py()?;
    let d = read_journal(&journal).py()?;
    Ok(replay_decisions(&m, &d).into_iter().collect())
}

#[pymodule]
fn layerforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LayerforgeError", m.py().get_type::<LayerforgeError>())?;
    m.add_class::<PySample>()?;
    m.add_class::<PyTipsModel>()?;
    m.add_function(wrap_pyfunction!(synth_multilayer, m)?)?;
    m.add_function(wrap_pyfunction!(composite, m)?)?;
    m.add_function(wrap_pyfunction!(bbox_iou, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(generation_canvas, m)?)?;
    m.add_function(wrap_pyfunction!(apply_suffix, m)?)?;
    m.add_function(wrap_pyfunction!(attention_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(train_tips, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_stats, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add("STYLES", prompting::DEFAULT_STYLES.to_vec())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
