//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Mode, Tape, Var};
use super::DiffError;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Upper bound on coordinates sampled per parameter tensor.
    pub max_coords_per_param: usize,
    /// Gradients with magnitude below this are compared absolutely.
    pub abs_floor: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            max_coords_per_param: 16,
            abs_floor: 1e-6,
            mode: Mode::Train,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: String,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares the analytic gradient of the scalar produced by `objective`
/// against `(f(θ+h) − f(θ−h)) / 2h` on sampled coordinates of every
/// parameter in `store`.
///
/// `objective` must be deterministic given the store (dropout disabled or
/// a fixed tape seed).
pub fn check_gradients<F>(
    store: &mut ParamStore<f64>,
    objective: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, DiffError>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64, DiffError> {
        let mut tape = Tape::new(opts.mode, opts.seed);
        let out = objective(&mut tape, store)?;
        Ok(tape.value(out).data()[0])
    };

    store.zero_grad();
    let mut tape = Tape::new(opts.mode, opts.seed);
    let out = objective(&mut tape, store)?;
    tape.backward_scalar(out, store)?;
    let analytic: Vec<Vec<f64>> = store
        .params()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();
    store.zero_grad();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: String::new(),
    };
    for pi in 0..store.params().len() {
        let n = store.params()[pi].value.len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_coords_per_param).into_vec()
        };
        for ci in coords {
            let orig = store.params()[pi].value.data()[ci];
            store.params_mut()[pi].value.data_mut()[ci] = orig + opts.h;
            let fp = eval(store)?;
            store.params_mut()[pi].value.data_mut()[ci] = orig - opts.h;
            let fm = eval(store)?;
            store.params_mut()[pi].value.data_mut()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let a = analytic[pi][ci];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let err = (a - numeric).abs() / denom;
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!(
                    "{}[{ci}]: analytic {a:.6e}, numeric {numeric:.6e}",
                    store.params()[pi].name
                );
            }
        }
    }
    Ok(report)
}
