use serde::Serialize;

use super::Model;
use crate::engine::{softmax_cross_entropy, NormMode, Tensor};
use crate::error::Result;

/// Denominator floor for the relative error, so parameters whose true
/// gradient is zero (e.g. a bias feeding batch norm) compare on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradientCheck {
    pub parameters: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Table row holding the worst parameter.
    pub worst_row: String,
}

/// Compares every trainable gradient of `model` against central differences
/// of the train-mode cross-entropy with step `h`.
pub fn gradient_check(model: &Model, input: &Tensor, labels: &[usize], h: f64) -> Result<GradientCheck> {
    let (_, grads, _) = model.gradients(input, labels)?;
    let analytic = grads.flat();
    let mut owner = Vec::with_capacity(analytic.len());
    for (i, row) in grads.rows.iter().enumerate() {
        let n: usize = row.iter().map(Vec::len).sum();
        owner.extend(std::iter::repeat(i).take(n));
    }
    let base = model.flat_params();
    let mut probe = model.clone();
    let loss = |m: &Model| -> Result<f64> {
        let logits = m.logits(input, NormMode::Train)?;
        Ok(softmax_cross_entropy(&logits, labels)?.0)
    };
    // Frozen prefixes contribute no gradients; numeric perturbation starts
    // where the analytic vector starts.
    let skip = base.len() - analytic.len();
    let mut worst = (0.0, 0.0, 0usize);
    let mut params = base.clone();
    for (j, &a) in analytic.iter().enumerate() {
        let k = skip + j;
        params[k] = base[k] + h;
        probe.set_flat_params(&params)?;
        let up = loss(&probe)?;
        params[k] = base[k] - h;
        probe.set_flat_params(&params)?;
        let down = loss(&probe)?;
        params[k] = base[k];
        let numeric = (up - down) / (2.0 * h);
        let abs = (numeric - a).abs();
        let rel = abs / numeric.abs().max(a.abs()).max(REL_FLOOR);
        if rel > worst.0 {
            worst.0 = rel;
            worst.2 = owner[j];
        }
        worst.1 = f64::max(worst.1, abs);
    }
    Ok(GradientCheck {
        parameters: analytic.len(),
        max_rel_error: worst.0,
        max_abs_error: worst.1,
        worst_row: model.spec().rows.get(worst.2).map(|r| r.name.clone()).unwrap_or_default(),
    })
}
