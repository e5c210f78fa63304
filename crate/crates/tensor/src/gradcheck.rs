//! Central finite-difference checks against the tape's analytic gradients.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point, false)?;
    let y = f(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return Err(TensorError::NotScalar(tape.shape(y).to_vec()));
    }
    Ok(tape.scalar(y))
}

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// for a scalar-valued `f` at `point`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point, true)?;
    let y = f(&mut tape, x)?;
    let first = tape.scalar(y);
    if eval(&f, point)?.to_bits() != first.to_bits() {
        return Err(TensorError::NonDeterministic);
    }
    let analytic = tape.backward(y)?.wrt(x);

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Central-difference gradient of `loss` for every trainable parameter in `store`.
pub fn numeric_params<F, E>(store: &mut ParamStore, loss: F, eps: f64) -> std::result::Result<BTreeMap<String, Vec<f64>>, E>
where
    F: Fn(&ParamStore) -> std::result::Result<f64, E>,
    E: From<TensorError>,
{
    let base = loss(store)?;
    if loss(store)?.to_bits() != base.to_bits() {
        return Err(TensorError::NonDeterministic.into());
    }
    let names: Vec<String> = store
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.to_string())
        .collect();
    let mut out = BTreeMap::new();
    for name in names {
        let n = store.require(&name)?.numel();
        let mut g = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.require(&name)?.data()[i];
            store.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let plus = loss(store)?;
            store.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let minus = loss(store)?;
            store.get_mut(&name).unwrap().data_mut()[i] = orig;
            g.push((plus - minus) / (2.0 * eps));
        }
        out.insert(name, g);
    }
    Ok(out)
}

/// Compares `analytic` gradients of every trainable parameter in `store`
/// against central differences of `loss`. Returns the worst relative error
/// per parameter name.
pub fn check_params<F, E>(
    store: &mut ParamStore,
    analytic: &BTreeMap<String, Vec<f64>>,
    loss: F,
    eps: f64,
) -> std::result::Result<BTreeMap<String, f64>, E>
where
    F: Fn(&ParamStore) -> std::result::Result<f64, E>,
    E: From<TensorError>,
{
    let numeric = numeric_params(store, loss, eps)?;
    Ok(numeric
        .into_iter()
        .map(|(name, num)| {
            let zeros = vec![0.0; num.len()];
            let grad = analytic.get(&name).unwrap_or(&zeros);
            let worst = grad.iter().zip(&num).map(|(a, n)| relative_error(*a, *n)).fold(0.0, f64::max);
            (name, worst)
        })
        .collect())
}
