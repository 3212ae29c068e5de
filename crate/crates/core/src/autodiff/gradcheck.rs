//! Central-difference gradient checking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of `f` against central differences and
/// returns the worst elementwise relative error, with a `1e-8` floor in the
/// denominator.
pub fn grad_check<F>(f: F, params: &[Array], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("grad_check eps must be > 0, got {eps}")));
    }
    let vars: Vec<Tensor> = params.iter().cloned().map(Tensor::variable).collect();
    let loss = f(&vars)?;
    if !loss.value().is_finite() {
        return Err(Error::Numerical(format!(
            "loss {} (trace: {})",
            loss.item(),
            loss.trace()
        )));
    }
    let grads = loss.backward()?;
    let eval = |ps: &[Array]| -> Result<f64> {
        let consts: Vec<Tensor> = ps.iter().cloned().map(Tensor::constant).collect();
        let out = f(&consts)?;
        let v = out.item();
        if !v.is_finite() {
            return Err(Error::Numerical(format!("perturbed loss {v} (trace: {})", out.trace())));
        }
        Ok(v)
    };
    let mut worst: f64 = 0.0;
    let mut work: Vec<Array> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Gradient check over the entries of a parameter store. `f` builds the loss
/// from the store; its flag says whether parameters should record gradients.
/// Checks `samples` randomly chosen entries, or all of them when there are
/// fewer.
pub fn grad_check_store<F>(store: &mut ParamStore, f: F, samples: usize, eps: f64, seed: u64) -> Result<f64>
where
    F: Fn(&ParamStore, bool) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("grad_check eps must be > 0, got {eps}")));
    }
    let grads = f(store, true)?.backward()?;
    let ids: Vec<ParamId> = store.ids().collect();
    let mut entries: Vec<(ParamId, usize)> = ids
        .iter()
        .flat_map(|&id| (0..store.value(id).len()).map(move |j| (id, j)))
        .collect();
    if entries.len() > samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        entries.shuffle(&mut rng);
        entries.truncate(samples);
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let out = f(store, false)?;
        let v = out.item();
        if !v.is_finite() {
            return Err(Error::Numerical(format!("perturbed loss {v} (trace: {})", out.trace())));
        }
        Ok(v)
    };
    let mut worst: f64 = 0.0;
    for (id, j) in entries {
        let orig = store.value(id).data()[j];
        store.value_mut(id).data_mut()[j] = orig + eps;
        let up = eval(store)?;
        store.value_mut(id).data_mut()[j] = orig - eps;
        let down = eval(store)?;
        store.value_mut(id).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = grads.param(id).map_or(0.0, |g| g.data()[j]);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
