//! Python bindings: the toy model, scene suites, single generations, the
//! probability utilities and the two benchmark runners. Structured results
//! come back as plain dicts.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;

use evrb::audit::Threshold;
use evrb::collapse;
use evrb::engine::{Components, Engine, EngineConfig};
use evrb::eval::{self, EvalOptions, EvalPlan, Mode, Task};
use evrb::model::{LanguageBackend, TokenId};
use evrb::prob::{self, LogitVector, ProbVector};
use evrb::rectify::{self as rect, CAPTION_MU, PROBE_MU};
use evrb::toy::{self, Knobs, SceneSuite, SuiteFile, SuiteSpec, ToyConfig, ToyLvlm};
use evrb::EvrbError;

fn err(e: impl Into<EvrbError>) -> PyErr {
    let e = e.into();
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    PyModule::import(py, "json")?.call_method1("loads", (text,))
}

fn probs(v: Vec<f64>) -> PyResult<ProbVector> {
    ProbVector::new(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "ToyModel", frozen)]
struct PyToyModel {
    inner: ToyLvlm,
}

#[pymethods]
impl PyToyModel {
    #[new]
    #[pyo3(signature = (seed = 0, knobs = ""))]
    fn new(seed: u64, knobs: &str) -> PyResult<Self> {
        let knobs: Knobs = knobs.parse().map_err(err)?;
        let inner = ToyLvlm::new(ToyConfig::with_seed(seed).with_knobs(knobs)).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.config().seed
    }

    fn knobs<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config().knobs)
    }

    fn vocabulary(&self) -> Vec<String> {
        self.inner.vocab().tokens().to_vec()
    }

    fn object_words(&self) -> Vec<String> {
        let v = self.inner.vocab();
        v.object_words().iter().map(|t| v.word(*t).to_string()).collect()
    }

    /// Object words from most to least favored by the language prior.
    fn popularity(&self) -> Vec<String> {
        let v = self.inner.vocab();
        self.inner
            .pathology()
            .popularity()
            .iter()
            .map(|t| v.word(*t).to_string())
            .collect()
    }

    #[pyo3(signature = (seed = 0, scenes = 50, rho = None))]
    fn suite(&self, seed: u64, scenes: usize, rho: Option<f64>) -> PyResult<PySuite> {
        let rho = rho.unwrap_or(self.inner.config().knobs.rho);
        let inner = toy::generate_scene_suite(
            self.inner.vocab(),
            self.inner.pathology().popularity(),
            SuiteSpec::new(seed, scenes, rho),
        )
        .map_err(err)?;
        Ok(PySuite { inner })
    }

    /// Captions or probes one scene and returns the generation as a dict.
    /// `mode` is `vanilla`, `evrb`, or a component list such as `P+R`.
    #[pyo3(signature = (suite, scene, probe = None, mode = "evrb", mu = None, tau = None, lambda_ = None))]
    #[allow(clippy::too_many_arguments)]
    fn generate<'py>(
        &self,
        py: Python<'py>,
        suite: &PySuite,
        scene: usize,
        probe: Option<&str>,
        mode: &str,
        mu: Option<f64>,
        tau: Option<&str>,
        lambda_: Option<f64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let item = suite
            .inner
            .items
            .iter()
            .find(|i| i.id == scene)
            .ok_or_else(|| PyValueError::new_err(format!("no scene {scene}")))?;
        let default_mu = if probe.is_some() { PROBE_MU } else { CAPTION_MU };
        let mut config = EngineConfig::evrb(mu.unwrap_or(default_mu)).ablate(components(mode)?);
        if let Some(t) = tau {
            config.threshold = t.parse::<Threshold>().map_err(PyValueError::new_err)?;
        }
        if let Some(l) = lambda_ {
            config.lambda = l;
        }
        let model = &self.inner;
        let prompt = match probe {
            Some(word) => {
                let id = model.vocab().require(word).map_err(err)?;
                toy::probe_prompt(model, &item.scene, id)
            }
            None => toy::caption_prompt(model, &item.scene),
        }
        .map_err(err)?;
        let result = py
            .detach(|| Engine::new(model, config)?.generate(&prompt))
            .map_err(err)?;
        to_py(py, &result)
    }

    /// Yes/no probe metrics per mode, keyed by mode label.
    #[pyo3(signature = (suite, modes = vec!["vanilla".to_string(), "evrb".to_string()]))]
    fn run_pope<'py>(
        &self,
        py: Python<'py>,
        suite: &PySuite,
        modes: Vec<String>,
    ) -> PyResult<Bound<'py, PyAny>> {
        self.run(py, suite, Task::Pope, modes)
    }

    /// Caption metrics per mode, keyed by mode label.
    #[pyo3(signature = (suite, modes = vec!["vanilla".to_string(), "evrb".to_string()]))]
    fn run_chair<'py>(
        &self,
        py: Python<'py>,
        suite: &PySuite,
        modes: Vec<String>,
    ) -> PyResult<Bound<'py, PyAny>> {
        self.run(py, suite, Task::Chair, modes)
    }
}

impl PyToyModel {
    fn run<'py>(
        &self,
        py: Python<'py>,
        suite: &PySuite,
        task: Task,
        modes: Vec<String>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let mut plan = EvalPlan::new(task);
        plan.modes = modes
            .iter()
            .map(|m| {
                Ok(Mode {
                    label: m.clone(),
                    components: components(m)?,
                })
            })
            .collect::<PyResult<_>>()?;
        plan.options = EvalOptions::default();
        let model = &self.inner;
        let evaluation = py
            .detach(|| eval::evaluate(model, &suite.inner, &plan))
            .map_err(err)?;
        let rows: std::collections::BTreeMap<_, _> = evaluation
            .report
            .rows
            .iter()
            .map(|r| (r.label.clone(), r))
            .collect();
        to_py(py, &rows)
    }
}

fn components(mode: &str) -> PyResult<Components> {
    match mode {
        "vanilla" => Ok(Components::NONE),
        "evrb" => Ok(Components::ALL),
        other => other.parse().map_err(PyValueError::new_err),
    }
}

#[pyclass(name = "Suite", frozen)]
struct PySuite {
    inner: SceneSuite,
}

#[pymethods]
impl PySuite {
    fn __len__(&self) -> usize {
        self.inner.items.len()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn to_json(&self, model: &PyToyModel) -> PyResult<String> {
        let file = self.inner.to_file(model.inner.vocab());
        serde_json::to_string_pretty(&file).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(model: &PyToyModel, text: &str) -> PyResult<Self> {
        let file: SuiteFile = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let inner = SceneSuite::from_file(&file, model.inner.vocab()).map_err(err)?;
        Ok(Self { inner })
    }

    /// Ground-truth object words of one scene.
    fn ground_truth(&self, model: &PyToyModel, scene: usize) -> PyResult<Vec<String>> {
        let v = model.inner.vocab();
        self.inner
            .items
            .iter()
            .find(|i| i.id == scene)
            .map(|i| i.ground_truth.iter().map(|t| v.word(*t).to_string()).collect())
            .ok_or_else(|| PyValueError::new_err(format!("no scene {scene}")))
    }
}

/// Shannon entropy in nats of a probability vector.
#[pyfunction]
fn entropy(p: Vec<f64>) -> PyResult<f64> {
    Ok(prob::entropy(probs(p)?.as_slice()))
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    let l = LogitVector::new(logits).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(prob::softmax(l.as_slice()))
}

/// Posterior divided by prior on the plausible set, renormalized.
#[pyfunction]
#[pyo3(signature = (posterior, prior, mu = PROBE_MU, epsilon = rect::DEFAULT_EPSILON))]
fn rectify(posterior: Vec<f64>, prior: Vec<f64>, mu: f64, epsilon: f64) -> PyResult<Vec<f64>> {
    let step = rect::rectify(&probs(posterior)?, &probs(prior)?, mu, epsilon).map_err(err)?;
    Ok(step.rectified.as_slice().to_vec())
}

#[pyfunction]
fn js_divergence(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let (a, b) = (probs(a)?, probs(b)?);
    if a.len() != b.len() {
        return Err(PyValueError::new_err("vectors differ in length"));
    }
    Ok(collapse::js_divergence(&a, &b))
}

/// Returns the logits with the termination entry scaled by
/// `1 + lambda * mean_delta_js` when `gate` is true.
#[pyfunction]
#[pyo3(signature = (logits, eos, lambda_, mean_delta_js, gate = true))]
fn scale_eos(logits: Vec<f64>, eos: u32, lambda_: f64, mean_delta_js: f64, gate: bool) -> PyResult<Vec<f64>> {
    if eos as usize >= logits.len() {
        return Err(PyValueError::new_err(format!("eos index {eos} out of range")));
    }
    let l = LogitVector::new(logits).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(
        collapse::scale_eos(&l, TokenId(eos), lambda_, mean_delta_js, gate, false)
            .as_slice()
            .to_vec(),
    )
}

#[pymodule]
fn evrb_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyToyModel>()?;
    m.add_class::<PySuite>()?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(rectify, m)?)?;
    m.add_function(wrap_pyfunction!(js_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(scale_eos, m)?)?;
    Ok(())
}
