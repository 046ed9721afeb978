use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use fedmmkt::math::ProbVec;
use fedmmkt::{protocol, server, Variant};

fn py_err(e: fedmmkt::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_variant(s: &str) -> PyResult<Variant> {
    s.parse::<Variant>().map_err(py_err)
}

fn json_loads<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn prob(p: Vec<f64>) -> PyResult<ProbVec> {
    ProbVec::new(p).map_err(py_err)
}

/// A validated protocol configuration.
#[pyclass(name = "ProtocolConfig", module = "fedmmkt", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: fedmmkt::ProtocolConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: fedmmkt::parse_config_str(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: fedmmkt::preset(name).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json_pretty()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.inner.rounds
    }

    #[setter]
    fn set_rounds(&mut self, rounds: usize) -> PyResult<()> {
        let mut cfg = self.inner.clone();
        cfg.rounds = rounds;
        cfg.validate().map_err(py_err)?;
        self.inner = cfg;
        Ok(())
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.as_str()
    }

    #[setter]
    fn set_variant(&mut self, variant: &str) -> PyResult<()> {
        let mut cfg = self.inner.clone();
        cfg.variant = parse_variant(variant)?;
        cfg.validate().map_err(py_err)?;
        self.inner = cfg;
        Ok(())
    }

    /// The variant actually run once modality coverage is taken into account.
    fn effective_variant(&self) -> &'static str {
        self.inner.effective_variant().as_str()
    }

    /// Per-round `(upload_bytes, download_bytes)`.
    #[pyo3(signature = (variant=None))]
    fn comm_cost(&self, variant: Option<&str>) -> PyResult<(u64, u64)> {
        let v = match variant {
            Some(s) => parse_variant(s)?,
            None => self.inner.effective_variant(),
        };
        let c = protocol::comm_cost(&self.inner, v);
        Ok((c.upload_bytes, c.download_bytes))
    }

    fn __repr__(&self) -> String {
        format!(
            "ProtocolConfig(variant={}, rounds={}, num_clients={}, seed={})",
            self.inner.variant.as_str(),
            self.inner.rounds,
            self.inner.num_clients,
            self.inner.seed
        )
    }
}

/// Metrics, ledger and traces of one run.
#[pyclass(name = "RunResult", module = "fedmmkt")]
struct PyRunResult {
    inner: fedmmkt::ExperimentResult,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.as_str()
    }

    /// One dict per round, round 0 first.
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let text = serde_json::to_string(&self.inner.metrics).map_err(|e| PyValueError::new_err(e.to_string()))?;
        json_loads(py, &text)
    }

    fn metrics_jsonl(&self) -> String {
        self.inner.metrics_jsonl()
    }

    /// `(round, upload_bytes, download_bytes)` rows.
    fn ledger(&self) -> Vec<(usize, u64, u64)> {
        self.inner
            .ledger
            .rows()
            .iter()
            .map(|r| (r.round, r.upload_bytes, r.download_bytes))
            .collect()
    }

    fn ledger_csv(&self) -> String {
        self.inner.ledger.to_csv()
    }

    fn traces<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let text = serde_json::to_string(&self.inner.traces).map_err(|e| PyValueError::new_err(e.to_string()))?;
        json_loads(py, &text)
    }

    #[pyo3(signature = (out_dir, dump_trace=false))]
    fn write(&self, out_dir: PathBuf, dump_trace: bool) -> PyResult<()> {
        protocol::write_outputs(&out_dir, &self.inner, dump_trace).map_err(py_err)
    }
}

#[pyfunction]
fn run(py: Python<'_>, config: &PyConfig) -> PyResult<PyRunResult> {
    let cfg = config.inner.clone();
    let inner = py.detach(move || fedmmkt::run_experiment(&cfg)).map_err(py_err)?;
    Ok(PyRunResult { inner })
}

/// Per-client held-out accuracy without collaboration.
#[pyfunction]
fn run_standalone(py: Python<'_>, config: &PyConfig) -> PyResult<Vec<f64>> {
    let cfg = config.inner.clone();
    py.detach(move || protocol::run_standalone(&cfg)).map_err(py_err)
}

#[pyfunction]
fn presets() -> Vec<(String, String)> {
    fedmmkt::list_presets()
        .into_iter()
        .map(|p| (p.name.to_string(), p.description.to_string()))
        .collect()
}

#[pyfunction]
fn format_mb(bytes: u64) -> String {
    fedmmkt::format_mb(bytes)
}

#[pyfunction]
#[pyo3(signature = (logits, temperature=1.0))]
fn softmax(logits: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    Ok(fedmmkt::math::softmax(&logits, temperature).map_err(py_err)?.into_inner())
}

#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    fedmmkt::math::kl_divergence(&prob(p)?, &prob(q)?).map_err(py_err)
}

#[pyfunction]
fn entropy_weight(p: Vec<f64>) -> PyResult<f64> {
    Ok(fedmmkt::math::entropy_weight(&prob(p)?))
}

#[pyfunction]
fn cosine(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    Ok(fedmmkt::math::cosine(&u, &v).map_err(py_err)?.value)
}

/// `(label, count, mass)` of the weighted plurality over `(label, weight)` pairs.
#[pyfunction]
fn lab_vote(predictions: Vec<(usize, f64)>, num_classes: usize) -> PyResult<(usize, usize, f64)> {
    let v = server::lab_vote(&predictions, num_classes).map_err(py_err)?;
    Ok((v.label, v.count, v.mass))
}

/// Softmax client weights for one record.
#[pyfunction]
fn fusion_alphas(weights: Vec<f64>) -> Vec<f64> {
    server::fusion_alphas(&weights)
}

#[pymodule]
#[pyo3(name = "fedmmkt")]
fn fedmmkt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_standalone, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(format_mb, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_weight, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(lab_vote, m)?)?;
    m.add_function(wrap_pyfunction!(fusion_alphas, m)?)?;
    Ok(())
}
