//! Python bindings for `collabvd`.
//!
//! Verdicts cross the boundary as the strings `"vulnerable"` and `"clean"`
//! (plus `"unknown"` for parsed LLM replies). Reports come back as plain
//! dicts mirroring the JSON the CLI writes.

use std::collections::BTreeMap;
use std::path::PathBuf;

use collabvd::collab::AssessmentStore as CoreStore;
use collabvd::collab::{run_pipeline, PipelineOptions};
use collabvd::collab::{Assessment, DialogueOptions, HintMode};
use collabvd::config::RunConfig as CoreConfig;
use collabvd::corpus::{self, LabelPolarity, Part, SplitCorpus, SplitManifest};
use collabvd::dialogue::{self, LlmVerdict, PromptTemplate};
use collabvd::eval;
use collabvd::synthesis::{self, EnrichOptions};
use collabvd::{SampleId, Verdict};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyFileNotFoundError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;
use serde::Serialize;
use serde_json::Value;

create_exception!(collabvd_py, CollabvdError, PyException);

fn err(e: collabvd::Error) -> PyErr {
    match &e {
        collabvd::Error::Io { error, .. } if error.kind() == std::io::ErrorKind::NotFound => {
            PyFileNotFoundError::new_err(e.to_string())
        }
        collabvd::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => CollabvdError::new_err(e.to_string()),
    }
}

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    match v {
        Value::Null => Ok(py.None().into_bound(py)),
        Value::Bool(b) => b.into_bound_py_any(py),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_bound_py_any(py),
            (_, Some(i)) => i.into_bound_py_any(py),
            _ => n.as_f64().unwrap_or(f64::NAN).into_bound_py_any(py),
        },
        Value::String(s) => s.into_bound_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            Ok(list.into_any())
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            Ok(dict.into_any())
        }
    }
}

fn ser<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &serde_json::to_value(value).map_err(value_err)?)
}

fn verdicts(raw: BTreeMap<SampleId, String>) -> PyResult<BTreeMap<SampleId, Verdict>> {
    raw.into_iter()
        .map(|(id, v)| Ok((id, v.parse::<Verdict>().map_err(value_err)?)))
        .collect()
}

fn llm_verdict(s: &str) -> PyResult<LlmVerdict> {
    match s {
        "vulnerable" => Ok(LlmVerdict::Vulnerable),
        "clean" => Ok(LlmVerdict::Clean),
        "unknown" => Ok(LlmVerdict::Unknown),
        other => Err(value_err(format!("unknown verdict `{other}`"))),
    }
}

/// Parses an LLM completion into `{"verdict", "description"}`.
#[pyfunction]
fn parse_reply<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    ser(py, &dialogue::parse_reply(text))
}

/// Harmonic mean of precision and recall; `None` when both are zero.
#[pyfunction]
fn f1_score(precision: f64, recall: f64) -> Option<f64> {
    eval::f1_score(precision, recall)
}

#[pyfunction]
#[pyo3(signature = (tp, fp, tn, fn_))]
fn metrics<'py>(
    py: Python<'py>,
    tp: u64,
    fp: u64,
    tn: u64,
    fn_: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let counts = eval::ConfusionCounts { tp, fp, tn, fn_ };
    ser(py, &eval::metrics(counts).map_err(err)?)
}

/// Scores `predictions` against `truths`; both map sample id to verdict.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    predictions: BTreeMap<SampleId, String>,
    truths: BTreeMap<SampleId, String>,
) -> PyResult<Bound<'py, PyAny>> {
    let report = eval::evaluate(&verdicts(predictions)?, &verdicts(truths)?).map_err(err)?;
    ser(py, &report)
}

/// Overlap of two or three models' correct calls on vulnerable samples.
#[pyfunction]
fn compare_models<'py>(
    py: Python<'py>,
    models: Vec<(String, BTreeMap<SampleId, String>)>,
    truths: BTreeMap<SampleId, String>,
) -> PyResult<Bound<'py, PyAny>> {
    let parsed = models
        .into_iter()
        .map(|(name, preds)| Ok((name, verdicts(preds)?)))
        .collect::<PyResult<Vec<_>>>()?;
    let refs: Vec<(&str, &BTreeMap<SampleId, Verdict>)> =
        parsed.iter().map(|(n, p)| (n.as_str(), p)).collect();
    ser(
        py,
        &eval::compare_models(&refs, &verdicts(truths)?).map_err(err)?,
    )
}

/// Code followed by the analyst marker line, using the built-in template.
#[pyfunction]
#[pyo3(signature = (code, verdict, description=None, drop_verdict=false))]
fn enrich_text(
    code: &str,
    verdict: &str,
    description: Option<&str>,
    drop_verdict: bool,
) -> PyResult<String> {
    Ok(synthesis::enrich_text(
        &PromptTemplate::default(),
        code,
        llm_verdict(verdict)?,
        description,
        EnrichOptions { drop_verdict },
    ))
}

#[pyclass(module = "collabvd_py")]
struct Corpus {
    inner: corpus::Corpus,
}

#[pymethods]
impl Corpus {
    /// Builds a corpus from `(idx, code, verdict)` tuples.
    #[new]
    #[pyo3(signature = (samples, source="memory"))]
    fn new(samples: Vec<(SampleId, String, String)>, source: &str) -> PyResult<Self> {
        let samples = samples
            .into_iter()
            .map(|(id, code, label)| {
                Ok(corpus::CodeSample::new(
                    id,
                    code,
                    label.parse::<Verdict>().map_err(value_err)?,
                ))
            })
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: corpus::Corpus::new(source, samples).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, polarity="one-is-vulnerable"))]
    fn load(path: PathBuf, polarity: &str) -> PyResult<Self> {
        let polarity: LabelPolarity = polarity.parse().map_err(value_err)?;
        Ok(Self {
            inner: corpus::load_corpus(path, polarity).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<SampleId> {
        self.inner.ids().collect()
    }

    fn code(&self, id: SampleId) -> Option<String> {
        self.inner.get(id).map(|s| s.code.clone())
    }

    fn truths(&self) -> BTreeMap<SampleId, &'static str> {
        self.inner
            .truths()
            .into_iter()
            .map(|(id, v)| (id, v.as_str()))
            .collect()
    }

    fn count(&self, label: &str) -> PyResult<usize> {
        Ok(self.inner.count(label.parse().map_err(value_err)?))
    }
}

#[pyclass(module = "collabvd_py")]
struct Split {
    inner: SplitCorpus,
}

#[pymethods]
impl Split {
    /// Re-applies a saved manifest to `corpus`.
    #[staticmethod]
    fn load(path: PathBuf, corpus: &Corpus) -> PyResult<Self> {
        let manifest = SplitManifest::load(path).map_err(err)?;
        Ok(Self {
            inner: manifest.apply(&corpus.inner).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self, part: &str) -> PyResult<Vec<SampleId>> {
        let part: Part = part.parse().map_err(value_err)?;
        Ok(self.inner.part(part).ids().collect())
    }

    fn manifest_json(&self) -> String {
        self.inner.manifest().to_json()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.manifest().save(path).map_err(err)
    }
}

#[pyfunction]
#[pyo3(signature = (corpus, ratios=(0.8, 0.1, 0.1), seed=corpus::DEFAULT_SEED))]
fn split_stratified(corpus: &Corpus, ratios: (f64, f64, f64), seed: u64) -> PyResult<Split> {
    Ok(Split {
        inner: corpus::split_stratified(&corpus.inner, [ratios.0, ratios.1, ratios.2], seed)
            .map_err(err)?,
    })
}

#[pyclass(module = "collabvd_py")]
struct RunConfig {
    inner: CoreConfig,
}

#[pymethods]
impl RunConfig {
    /// Defaults, or the settings in `toml` when given.
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => CoreConfig::from_toml(text).map_err(err)?,
            None => CoreConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreConfig::from_file(path).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    #[getter]
    fn detector(&self) -> Option<String> {
        self.inner.detector.endpoint.clone()
    }

    #[setter]
    fn set_detector(&mut self, spec: Option<String>) {
        self.inner.detector.endpoint = spec;
    }

    #[getter]
    fn llm(&self) -> Option<String> {
        self.inner.llm.endpoint.clone()
    }

    #[setter]
    fn set_llm(&mut self, spec: Option<String>) {
        self.inner.llm.endpoint = spec;
    }

    #[getter]
    fn validator(&self) -> Option<String> {
        self.inner.validator.endpoint.clone()
    }

    #[setter]
    fn set_validator(&mut self, spec: Option<String>) {
        self.inner.validator.endpoint = spec;
    }

    #[getter]
    fn hint_mode(&self) -> &'static str {
        self.inner.assess.hint_mode.as_str()
    }

    #[setter]
    fn set_hint_mode(&mut self, mode: &str) -> PyResult<()> {
        self.inner.assess.hint_mode = mode.parse::<HintMode>().map_err(value_err)?;
        Ok(())
    }

    #[getter]
    fn concurrency(&self) -> usize {
        self.inner.assess.concurrency
    }

    #[setter]
    fn set_concurrency(&mut self, n: usize) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.assess.concurrency = n;
        next.validate().map_err(err)?;
        self.inner = next;
        Ok(())
    }
}

fn assessment<'py>(py: Python<'py>, a: &Assessment) -> PyResult<Bound<'py, PyAny>> {
    let d = PyDict::new(py);
    d.set_item("idx", a.id)?;
    d.set_item("detector", ser(py, &a.detector)?)?;
    d.set_item("initial", ser(py, &a.llm_initial)?)?;
    d.set_item("final", ser(py, &a.llm_final)?)?;
    d.set_item("refined", a.refined)?;
    d.set_item("hint_mode", a.hint_mode.as_str())?;
    d.set_item("complete", a.is_complete())?;
    d.set_item("reply_initial", &a.reply_initial)?;
    d.set_item("reply_final", &a.reply_final)?;
    Ok(d.into_any())
}

#[pyclass(module = "collabvd_py")]
struct AssessmentStore {
    inner: CoreStore,
}

#[pymethods]
impl AssessmentStore {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreStore::load(path).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<SampleId> {
        self.inner.iter().map(|a| a.id).collect()
    }

    fn get<'py>(&self, py: Python<'py>, id: SampleId) -> PyResult<Option<Bound<'py, PyAny>>> {
        self.inner.get(id).map(|a| assessment(py, a)).transpose()
    }

    fn meta<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        ser(py, self.inner.meta())
    }

    /// Ids in `split` that have no complete assessment.
    fn coverage_gaps(&self, split: &Split) -> Vec<SampleId> {
        synthesis::coverage_gaps(&split.inner, &self.inner)
    }
}

/// Runs both phases over every part of `split`, resuming from `store_path`.
///
/// Returns the pipeline report; the store at `store_path` holds the records.
#[pyfunction]
fn assess<'py>(
    py: Python<'py>,
    config: &RunConfig,
    corpus: &Corpus,
    split: &Split,
    store_path: PathBuf,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = &config.inner;
    let template = cfg.template().map_err(err)?;
    let truths = corpus.inner.truths();
    let detector = cfg.build_detector(Some(&truths)).map_err(err)?;
    let llm = cfg.build_llm().map_err(err)?;
    let mode = cfg.assess.hint_mode;
    let meta = cfg
        .store_identity(&template)
        .map_err(err)?
        .store_meta(Some(mode));
    let mut store = CoreStore::open(&store_path, meta).map_err(err)?;

    let mut dialogue = DialogueOptions::new(&template);
    dialogue.variant = cfg.assess.variant;
    dialogue.reask_limit = cfg.assess.reask_limit;
    dialogue.seed = cfg.split.seed;
    let mut opts = PipelineOptions::new(dialogue, mode);
    opts.concurrency = cfg.assess.concurrency;
    opts.failure_threshold = cfg.assess.failure_threshold;

    let split = &split.inner;
    let report = py
        .detach(|| run_pipeline(split, &Part::ALL, &*detector, &*llm, &opts, &mut store))
        .map_err(err)?;
    ser(py, &report)
}

/// Writes `train.jsonl`, `valid.jsonl` and `test.jsonl` under `out_dir`.
#[pyfunction]
#[pyo3(signature = (config, split, store, out_dir, drop_verdict=false))]
fn export_training_set<'py>(
    py: Python<'py>,
    config: &RunConfig,
    split: &Split,
    store: &AssessmentStore,
    out_dir: PathBuf,
    drop_verdict: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let template = config.inner.template().map_err(err)?;
    let summary = synthesis::export_training_set(
        &split.inner,
        &store.inner,
        &template,
        out_dir,
        EnrichOptions { drop_verdict },
    )
    .map_err(err)?;
    ser(py, &summary)
}

#[pymodule]
fn collabvd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CollabvdError", m.py().get_type::<CollabvdError>())?;
    m.add_class::<Corpus>()?;
    m.add_class::<Split>()?;
    m.add_class::<RunConfig>()?;
    m.add_class::<AssessmentStore>()?;
    m.add_function(wrap_pyfunction!(parse_reply, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(compare_models, m)?)?;
    m.add_function(wrap_pyfunction!(enrich_text, m)?)?;
    m.add_function(wrap_pyfunction!(split_stratified, m)?)?;
    m.add_function(wrap_pyfunction!(assess, m)?)?;
    m.add_function(wrap_pyfunction!(export_training_set, m)?)?;
    Ok(())
}
