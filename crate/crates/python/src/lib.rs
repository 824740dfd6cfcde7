//! Python bindings: benchmark evaluation, source generation, experiment
//! runs and queries against saved inverse models.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use invtransfer_core::io::{
    gen_source, load_run_dir, run_experiment, ExperimentConfig, RunOverrides, SourceGenConfig, SourceLevel,
};
use invtransfer_core::optimizer::Variant;
use invtransfer_core::problems::{make_mdtlz, Family, MdtlzSpec};
use invtransfer_core::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Numerical(_) | Error::NotPositiveDefinite { .. } | Error::Evaluation(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn spec(family: &str, delta1: f64, delta2: f64, d: usize, m: usize, inverted: bool) -> PyResult<MdtlzSpec> {
    let family: Family = family.parse().map_err(err)?;
    Ok(MdtlzSpec::new(family, inverted, delta1, delta2, d, m))
}

/// Objective vector of an mDTLZ instance at `x`.
#[pyfunction]
#[pyo3(signature = (family, delta1, delta2, d, m, x, inverted = false))]
fn evaluate_mdtlz(
    family: &str,
    delta1: f64,
    delta2: f64,
    d: usize,
    m: usize,
    x: Vec<f64>,
    inverted: bool,
) -> PyResult<Vec<f64>> {
    let p = make_mdtlz(spec(family, delta1, delta2, d, m, inverted)?).map_err(err)?;
    p.evaluate(&x).map_err(err)
}

/// Generates a source dataset for a correlation preset (`HS`, `MS`, `LS`)
/// and writes it to `out`. Returns the number of rows.
#[pyfunction]
#[pyo3(signature = (level, d, m, out, pop_size = 100, generations = 500, keep = 100, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn generate_source(
    level: &str,
    d: usize,
    m: usize,
    out: PathBuf,
    pop_size: usize,
    generations: usize,
    keep: usize,
    seed: u64,
) -> PyResult<usize> {
    let level: SourceLevel = level.parse().map_err(err)?;
    let cfg = SourceGenConfig {
        spec: level.spec(Family::Dtlz2, false, d, m),
        pop_size,
        generations,
        keep,
        seed,
    };
    Ok(gen_source(&cfg, &out).map_err(err)?.len())
}

/// Runs an experiment config and returns the run directories.
#[pyfunction]
#[pyo3(signature = (config, seeds = None, out = None, variant = None, budget = None))]
fn run(
    py: Python<'_>,
    config: PathBuf,
    seeds: Option<usize>,
    out: Option<PathBuf>,
    variant: Option<&str>,
    budget: Option<usize>,
) -> PyResult<Vec<String>> {
    let mut cfg = ExperimentConfig::load(&config).map_err(err)?;
    let variant = variant.map(|v| v.parse::<Variant>()).transpose().map_err(err)?;
    RunOverrides {
        n_seeds: seeds,
        output_dir: out,
        variant,
        budget,
    }
    .apply(&mut cfg);
    let outcome = py.detach(|| run_experiment(&cfg)).map_err(err)?;
    if let Some((seed, msg)) = outcome.failures.first() {
        return Err(PyRuntimeError::new_err(format!("seed {seed} failed: {msg}")));
    }
    Ok(outcome.run_dirs.iter().map(|d| d.display().to_string()).collect())
}

/// A finished run loaded from disk.
#[pyclass(frozen)]
struct Run {
    inner: invtransfer_core::io::LoadedRun,
}

#[pymethods]
impl Run {
    #[new]
    fn new(dir: PathBuf) -> PyResult<Self> {
        Ok(Run {
            inner: load_run_dir(dir).map_err(err)?,
        })
    }

    #[getter]
    fn problem_id(&self) -> String {
        self.inner.meta.problem_id.clone()
    }

    #[getter]
    fn evaluations(&self) -> usize {
        self.inner.result.archive.len()
    }

    /// Nondominated `(x, f)` pairs.
    fn front(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.inner.result.nondominated_points()
    }

    /// Clamped predicted mean, standard deviation and clamp flags at `w`.
    fn query(&self, w: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>, Vec<bool>)> {
        let models = self
            .inner
            .result
            .inverse_models
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("run has no inverse models"))?;
        models.predict_clamped(&w).map_err(err)
    }
}

#[pymodule]
fn invtransfer(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(evaluate_mdtlz, m)?)?;
    m.add_function(wrap_pyfunction!(generate_source, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<Run>()?;
    Ok(())
}
