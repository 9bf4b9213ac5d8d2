//! Central finite-difference gradient checking.

use super::param::Parameterized;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockError {
    pub name: String,
    /// max |analytic − numeric| over the block.
    pub max_abs_err: f64,
    /// `max_abs_err` divided by the block's largest gradient magnitude.
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockError>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares analytic gradients with central differences (step 1e-5).
///
/// `loss_and_grad` must return the loss and accumulate gradients into the
/// model's parameters (they are zeroed beforehand); `loss` evaluates the loss
/// only. The relative error of a block is the largest absolute discrepancy
/// scaled by the largest gradient magnitude in that block.
pub fn grad_check<M, G, L>(model: &mut M, mut loss_and_grad: G, loss: L, tol: f64) -> GradCheckReport
where
    M: Parameterized,
    G: FnMut(&mut M) -> f64,
    L: Fn(&M) -> f64,
{
    model.zero_grad();
    loss_and_grad(model);
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |name, p| analytic.push((name.to_string(), p.grad.data().to_vec())));

    let mut blocks = Vec::with_capacity(analytic.len());
    for (b, (name, grads)) in analytic.iter().enumerate() {
        let mut max_abs = 0.0f64;
        let mut scale = 1e-12f64;
        for (i, &a) in grads.iter().enumerate() {
            let orig = nudge(model, b, i, None);
            nudge(model, b, i, Some(orig + FD_STEP));
            let plus = loss(model);
            nudge(model, b, i, Some(orig - FD_STEP));
            let minus = loss(model);
            nudge(model, b, i, Some(orig));
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_abs = max_abs.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        blocks.push(BlockError {
            name: name.clone(),
            max_abs_err: max_abs,
            rel_err: max_abs / scale,
        });
    }
    model.zero_grad();
    let max_rel_err = blocks.iter().map(|b| b.rel_err).fold(0.0, f64::max);
    GradCheckReport {
        passed: max_rel_err < tol,
        blocks,
        max_rel_err,
        tol,
    }
}

/// Reads (and optionally overwrites) element `i` of parameter block `b`.
fn nudge<M: Parameterized>(model: &mut M, b: usize, i: usize, set: Option<f64>) -> f64 {
    let mut k = 0;
    let mut old = 0.0;
    model.visit_params_mut(&mut |_, p| {
        if k == b {
            old = p.value.data()[i];
            if let Some(v) = set {
                p.value.data_mut()[i] = v;
            }
        }
        k += 1;
    });
    old
}
