//! Central finite-difference verification of [`Network::backward`].

use crate::error::Result;
use crate::matrix::Matrix;
use crate::net::model::{cross_entropy, Network};
use crate::net::params::ParamSet;

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-5;
pub const GRADCHECK_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorGradCheck {
    pub name: String,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, floor)`.
    pub rel_error: f64,
    /// Largest entrywise `|a − n| / max(|a|, |n|, floor)`.
    pub worst_entry_rel_error: f64,
    pub analytic_norm: f64,
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRADCHECK_FLOOR)
}

fn loss(net: &Network, params: &ParamSet<f64>, x: &Matrix<f64>, label: usize) -> Result<f64> {
    Ok(cross_entropy(&net.forward(params, x)?.logits, label).0)
}

/// Compares analytic and central-difference gradients for every tensor.
pub fn gradient_check(
    net: &Network,
    params: &ParamSet<f64>,
    x: &Matrix<f64>,
    label: usize,
    eps: f64,
) -> Result<Vec<TensorGradCheck>> {
    let cache = net.forward(params, x)?;
    let (_, analytic) = net.backward(params, &cache, label)?;
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.tensors.len());
    for (t, tensor) in params.tensors.iter().enumerate() {
        let n = tensor.value.as_slice().len();
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = tensor.value.as_slice()[i];
            probe.get_mut(t).as_mut_slice()[i] = orig + eps;
            let up = loss(net, &probe, x, label)?;
            probe.get_mut(t).as_mut_slice()[i] = orig - eps;
            let down = loss(net, &probe, x, label)?;
            probe.get_mut(t).as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(t).as_slice()[i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            worst = worst.max(rel_error(a, numeric));
        }
        out.push(TensorGradCheck {
            name: tensor.name.clone(),
            rel_error: diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(GRADCHECK_FLOOR),
            worst_entry_rel_error: worst,
            analytic_norm: a2.sqrt(),
        });
    }
    Ok(out)
}
