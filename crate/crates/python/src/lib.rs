//! Python bindings: the numeric kernels plus an in-process CLI entry point.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cbpredict::cli;
use cbpredict::interpret::exact_shapley;
use cbpredict::preprocess::eda_decompose;
use cbpredict::synth::{generate_cohort, SynthConfig};
use cbpredict::train::auc_roc;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Splits raw EDA into `(tonic, phasic)`.
#[pyfunction]
#[pyo3(signature = (eda, lam = cbpredict::preprocess::DEFAULT_LAMBDA))]
fn decompose_eda(eda: Vec<f64>, lam: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let tp = eda_decompose(&eda, lam).map_err(value_err)?;
    Ok((tp.tonic, tp.phasic))
}

/// Midrank AUC-ROC of `scores` against 0/1 `labels`.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    auc_roc(&scores, &labels).map_err(value_err)
}

/// Exact Shapley values of an `n`-player game given by its `2**n`
/// coalition values, indexed by bitmask.
#[pyfunction]
fn shapley(n: usize, values: Vec<f64>) -> PyResult<Vec<f64>> {
    if n > 16 || values.len() != 1usize << n {
        return Err(value_err(format!(
            "expected 2**{n} coalition values, got {}",
            values.len()
        )));
    }
    Ok(exact_shapley(n, &values))
}

/// Writes a synthetic cohort under `out_dir` and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 0, n_subjects = None, session_minutes = None))]
fn synth_cohort(
    out_dir: PathBuf,
    seed: u64,
    n_subjects: Option<usize>,
    session_minutes: Option<f64>,
) -> PyResult<PathBuf> {
    let mut cfg = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    if let Some(n) = n_subjects {
        cfg.n_subjects = n;
    }
    if let Some(m) = session_minutes {
        cfg.session_minutes = m;
    }
    let cohort = generate_cohort(&cfg, 1).map_err(value_err)?;
    cohort.write(&out_dir).map_err(value_err)?;
    Ok(out_dir.join("manifest.csv"))
}

/// Runs a CLI subcommand in process, e.g. `run(["train", "--out", "o"])`.
/// Failures raise `RuntimeError` carrying the machine-readable error line.
#[pyfunction]
fn run(args: Vec<String>) -> PyResult<()> {
    let argv = std::iter::once("cbpredict".to_string())
        .chain(args)
        .map(Into::into);
    cli::run(argv).map_err(|e| PyRuntimeError::new_err(e.machine_line()))
}

#[pymodule]
fn cbpredict_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(decompose_eda, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(shapley, m)?)?;
    m.add_function(wrap_pyfunction!(synth_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
