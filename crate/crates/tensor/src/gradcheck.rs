use crate::error::Result;
use crate::param::{ParamGrads, ParamStore};
use crate::tape::{Tape, Var};
use crate::Scalar;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Elements probed per parameter; larger tensors are subsampled evenly.
    pub max_elems: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
            max_elems: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..max).map(|i| i * (len - 1) / (max - 1).max(1)).collect();
    idx.dedup();
    idx
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares `analytic` against central differences of `f` for every
/// parameter with `requires_grad`. `store` is restored before returning.
pub fn finite_diff_check<T: Scalar>(
    store: &mut ParamStore<T>,
    analytic: &ParamGrads<T>,
    mut f: impl FnMut(&ParamStore<T>) -> Result<T>,
    opts: &CheckOptions,
) -> Result<GradCheckReport> {
    let eps = T::of(opts.eps);
    let two_eps = 2.0 * opts.eps;
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).requires_grad).collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let len = store.value(id).len();
        let probes = probe_indices(len, opts.max_elems);
        let mut worst = 0.0f64;
        for &i in &probes {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let up = f(store);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let down = f(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up?.as_f64() - down?.as_f64()) / two_eps;
            let a = analytic.get(id).map(|g| g.data()[i].as_f64()).unwrap_or(0.0);
            worst = worst.max(rel_err(a, numeric, opts.floor));
        }
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            checked: probes.len(),
            max_rel_err: worst,
            pass: worst < opts.tol,
        });
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        pass: params.iter().all(|p| p.pass),
        max_rel_err,
        params,
    })
}

/// Runs `build` once for analytic gradients and repeatedly for the
/// finite-difference estimate.
pub fn check_loss<T: Scalar>(
    store: &mut ParamStore<T>,
    build: impl Fn(&mut Tape<'_, T>) -> Result<Var>,
    opts: &CheckOptions,
) -> Result<GradCheckReport> {
    let analytic = {
        let mut tape = Tape::new(store);
        let root = build(&mut tape)?;
        tape.backward(root)?.into_params()
    };
    finite_diff_check(
        store,
        &analytic,
        |s| {
            let mut tape = Tape::new(s);
            let root = build(&mut tape)?;
            Ok(tape.value(root).item())
        },
        opts,
    )
}
