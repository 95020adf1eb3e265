//! Finite-difference verification of the analytic gradients.

use serde::{Deserialize, Serialize};

use super::tape::{Graph, Mat};
use super::{Example, Model};
use crate::error::Result;

/// Summed cross-entropy over the example's valid targets and its gradient,
/// one matrix per parameter (zeros where unused).
pub fn loss_and_grads(model: &Model, ex: &Example) -> Result<(f64, Vec<Mat>)> {
    let mut g = Graph::new();
    let net = model.net();
    let mem = net.encode(&mut g, &ex.init, &mut None)?;
    let logits = net.decode(&mut g, mem, &ex.inputs, None, &mut None)?;
    let out = g.cross_entropy_sum(logits, ex.targets.flattened());
    let loss = g.value(out)[[0, 0]];
    let mut map = g.backward(out);
    let grads = model
        .params()
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| map.remove(&i).unwrap_or_else(|| Mat::zeros(v.dim())))
        .collect();
    Ok((loss, grads))
}

fn summed_loss(model: &Model, ex: &Example) -> Result<f64> {
    let logits = model.forward(&ex.init, &ex.inputs)?;
    let n = ex.targets.n_valid() as f64;
    Ok(super::loss(&logits, &ex.targets)? * n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the group.
    pub rel_error: f64,
    pub numeric_norm: f64,
}

/// Central differences with step `eps` for every scalar of every parameter.
pub fn gradient_check(model: &Model, ex: &Example, eps: f64) -> Result<Vec<GradCheck>> {
    let (_, grads) = loss_and_grads(model, ex)?;
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(grads.len());
    for (idx, analytic) in grads.iter().enumerate() {
        let mut num = Mat::zeros(analytic.dim());
        for k in 0..analytic.len() {
            let (r, c) = (k / analytic.ncols(), k % analytic.ncols());
            let orig = probe.params().values()[idx][[r, c]];
            probe.params_mut().values_mut()[idx][[r, c]] = orig + eps;
            let hi = summed_loss(&probe, ex)?;
            probe.params_mut().values_mut()[idx][[r, c]] = orig - eps;
            let lo = summed_loss(&probe, ex)?;
            probe.params_mut().values_mut()[idx][[r, c]] = orig;
            num[[r, c]] = (hi - lo) / (2.0 * eps);
        }
        let norm = |m: &Mat| m.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = norm(&(analytic - &num));
        let scale = norm(analytic).max(norm(&num));
        out.push(GradCheck {
            name: model.params().names()[idx].clone(),
            rel_error: if scale == 0.0 { 0.0 } else { diff / scale },
            numeric_norm: norm(&num),
        });
    }
    Ok(out)
}
