//! Central finite-difference checks against reverse-mode gradients.

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_of(g: &Graph<'_>, out: NodeId) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Invalid(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::NonFinite("function value during gradient check".into()));
    }
    Ok(x)
}

/// Compares the backward gradient of `f` at `point` with central
/// differences of step `eps`. `f` receives the input node and returns a
/// scalar node. Returns the largest per-coordinate relative error.
pub fn gradient_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, NodeId) -> Result<NodeId>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let out = f(&mut g, x)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let x = g.variable(point.clone());
    let out = f(&mut g, x)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = x0 - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = x0;
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Like [`gradient_check`] but over every trainable value in `store`.
/// `f` builds the scalar loss from the store.
pub fn gradient_check_params<F>(store: &mut ParamStore, f: F, eps: f64) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>, &'a ParamStore) -> Result<NodeId>,
{
    let grads = {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        scalar_of(&g, out)?;
        g.backward(out)?;
        g.param_grads()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let out = f(&mut g, store)?;
        scalar_of(&g, out)
    };

    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        for i in 0..store.value(id).len() {
            let x0 = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = x0 + eps;
            let fp = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = x0 - eps;
            let fm = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g[i]);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}
