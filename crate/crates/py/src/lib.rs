//! Python bindings for the core library.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedmob_core::client::{compute_outer_products, privatize as core_privatize, ClientUpdate, PrivacyConfig};
use fedmob_core::eval::{self, AblationConfig, RankedPrediction};
use fedmob_core::numeric::Tensor;
use fedmob_core::{data, encoding, seed, server};

fn err(e: fedmob_core::Error) -> PyErr {
    match e {
        fedmob_core::Error::Io(_) | fedmob_core::Error::Stage { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyfunction]
fn derive_seed(global_seed: u64, label: &str, index: u64) -> u64 {
    seed::derive_seed(global_seed, label, index)
}

/// Time-of-week bucket (day-of-week × 8 + hour / 3) of a UTC timestamp.
#[pyfunction]
fn time_bucket(ts: i64) -> usize {
    encoding::time_bucket(ts)
}

/// Synthetic corpus as `{user: [(timestamp, venue), ...]}`.
#[pyfunction]
fn synth_generate(py: Python<'_>, users: usize, venues: usize, days: i64, seed: u64) -> PyResult<Py<PyDict>> {
    let trajs = data::synth_generate(users, venues, days, seed).map_err(err)?;
    let out = PyDict::new(py);
    for t in trajs {
        let events: Vec<(i64, String)> = t.events.into_iter().map(|c| (c.timestamp, c.venue_id)).collect();
        out.set_item(t.user_id, events)?;
    }
    Ok(out.unbind())
}

/// Row-major outer products of consecutive rows of `embeddings`.
#[pyfunction]
fn outer_products(embeddings: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let e = Tensor::from_rows(&embeddings).map_err(err)?;
    let recs = compute_outer_products(&e).map_err(err)?;
    Ok(recs.into_iter().map(|r| r.o.data().to_vec()).collect())
}

/// Clipped, noised mean of flattened `d × d` records.
#[pyfunction]
#[pyo3(signature = (records, sigma=0.1, clip_norm=1.0, seed=0))]
fn privatize(records: Vec<Vec<f64>>, sigma: f64, clip_norm: f64, seed: u64) -> PyResult<Vec<f64>> {
    let recs = records
        .into_iter()
        .enumerate()
        .map(|(t, v)| {
            let d = (v.len() as f64).sqrt() as usize;
            let o = Tensor::new(vec![d, d], v).map_err(err)?;
            Ok(fedmob_core::client::OuterProductRecord { t, o })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = core_privatize(&recs, &PrivacyConfig { sigma, clip_norm }, &mut rng).map_err(err)?;
    Ok(u.payload)
}

/// Server mean of client payloads, summed in ascending client order.
#[pyfunction]
#[pyo3(signature = (payloads, weighted=false, window_counts=None))]
fn aggregate(payloads: Vec<Vec<f64>>, weighted: bool, window_counts: Option<Vec<u32>>) -> PyResult<Vec<f64>> {
    let d = payloads
        .first()
        .map(|p| (p.len() as f64).sqrt() as usize)
        .ok_or_else(|| PyValueError::new_err("no payloads"))?;
    let counts = window_counts.unwrap_or_else(|| vec![1; payloads.len()]);
    if counts.len() != payloads.len() {
        return Err(PyValueError::new_err("one window count per payload"));
    }
    let updates: Vec<ClientUpdate> = payloads
        .into_iter()
        .zip(counts)
        .enumerate()
        .map(|(i, (payload, window_count))| ClientUpdate {
            client_id: format!("c{i:06}"),
            round: 1,
            window_count,
            d: d as u16,
            sigma: 0.0,
            clip: 0.0,
            payload,
        })
        .collect();
    Ok(server::aggregate_with(&updates, weighted).map_err(err)?.signal)
}

fn predictions(ranked: Vec<Vec<usize>>, truths: Vec<usize>) -> PyResult<Vec<RankedPrediction>> {
    if ranked.len() != truths.len() {
        return Err(PyValueError::new_err("one truth per ranked list"));
    }
    Ok(ranked
        .into_iter()
        .zip(truths)
        .enumerate()
        .map(|(i, (ranked, truth))| RankedPrediction {
            query: i + 1,
            ranked,
            truth,
        })
        .collect())
}

#[pyfunction]
fn acc_at_k(ranked: Vec<Vec<usize>>, truths: Vec<usize>, k: usize) -> PyResult<f64> {
    eval::acc_at_k(&predictions(ranked, truths)?, k).map_err(err)
}

#[pyfunction]
fn mrr(ranked: Vec<Vec<usize>>, truths: Vec<usize>) -> PyResult<f64> {
    eval::mrr(&predictions(ranked, truths)?).map_err(err)
}

/// Experiment configuration in flat `key = value` form.
#[pyclass(name = "ExperimentConfig", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: eval::ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Full-size shapes.
    #[new]
    #[pyo3(signature = (seed=0))]
    fn new(seed: u64) -> Self {
        Self {
            inner: eval::ExperimentConfig {
                seed,
                ..Default::default()
            },
        }
    }

    /// Desk-scale shapes for the reference synthetic corpus.
    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn reference(seed: u64) -> Self {
        Self {
            inner: eval::ExperimentConfig::reference(seed),
        }
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: eval::ExperimentConfig::from_text(text).map_err(err)?,
        })
    }

    fn to_text(&self) -> PyResult<String> {
        self.inner.to_text().map_err(err)
    }

    fn hash(&self) -> PyResult<String> {
        self.inner.hash().map_err(err)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn set_ablation(&mut self, flags: &str) -> PyResult<()> {
        self.inner.ablation = AblationConfig::parse_list(flags).map_err(err)?;
        Ok(())
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(seed={}, ablation={})", self.inner.seed, self.inner.ablation.label())
    }
}

fn report_dict<'py>(py: Python<'py>, r: &eval::RunOutcome) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("config_hash", &r.report.config_hash)?;
    d.set_item("seed", r.report.seed)?;
    d.set_item("ablation", &r.report.ablation)?;
    d.set_item("acc1", r.report.acc1)?;
    d.set_item("acc5", r.report.acc5)?;
    d.set_item("acc20", r.report.acc20)?;
    d.set_item("mrr", r.report.mrr)?;
    d.set_item("m", r.report.m)?;
    d.set_item("param_count", r.report.footprint.param_count)?;
    d.set_item("trainable_count", r.report.footprint.trainable_count)?;
    d.set_item("wall_time_s", r.timing.wall_time_s)?;
    Ok(d)
}

/// Runs the whole pipeline; metrics in the returned dict are scaled by 100.
#[pyfunction]
#[pyo3(signature = (config, out_dir=None))]
fn run_experiment<'py>(py: Python<'py>, config: &PyConfig, out_dir: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let r = py
        .detach(|| eval::run_experiment(&cfg, out_dir.as_deref()))
        .map_err(err)?;
    report_dict(py, &r)
}

/// Re-evaluates a run directory; metrics are fractions.
#[pyfunction]
#[pyo3(signature = (run_dir, split="test"))]
fn evaluate_run_dir(run_dir: PathBuf, split: &str) -> PyResult<(f64, f64, f64, f64, usize)> {
    let (_, m) = eval::evaluate_run_dir(&run_dir, split).map_err(err)?;
    Ok((m.acc1, m.acc5, m.acc20, m.mrr, m.m))
}

#[pymodule]
fn fedmob(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(time_bucket, m)?)?;
    m.add_function(wrap_pyfunction!(synth_generate, m)?)?;
    m.add_function(wrap_pyfunction!(outer_products, m)?)?;
    m.add_function(wrap_pyfunction!(privatize, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(acc_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(mrr, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_run_dir, m)?)?;
    m.add_class::<PyConfig>()?;
    Ok(())
}
