//! Central finite-difference oracle for gradient verification.
//!
//! The oracle only ever calls the forward pass, so it stays independent of
//! the hand-written adjoints it is checking. Everything runs at 64-bit.

use super::{ParamSet, Tape};

/// Step size for central differences. At f64 this balances truncation
/// (O(h^2)) against rounding (O(eps/h)).
pub const FD_STEP: f64 = 1e-4;

/// Relative-error floor: below this magnitude the comparison degrades to an
/// absolute tolerance, since tiny gradients drown in truncation noise.
pub const FD_FLOOR: f64 = 1e-3;

/// Worst relative mismatch between an analytic gradient and its central
/// finite-difference estimate, over one flattened parameter.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR))
        .fold(0.0, f64::max)
}

/// Central finite differences of `loss_fn` with respect to every parameter
/// in `params`. `loss_fn` must rebuild the computation from scratch (it is
/// called 2 x numel times with perturbed parameters).
pub fn finite_difference(params: &ParamSet, loss_fn: impl Fn(&ParamSet) -> f64) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let mut grad = vec![0.0; tensor.numel()];
        for (i, slot) in grad.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus.get_mut(name).data[i] += FD_STEP;
            let mut minus = params.clone();
            minus.get_mut(name).data[i] -= FD_STEP;
            *slot = (loss_fn(&plus) - loss_fn(&minus)) / (2.0 * FD_STEP);
        }
        out.push((name.to_string(), grad));
    }
    out
}

/// Run a full analytic-vs-numeric comparison. `build` constructs the tape
/// and returns the scalar loss id; it is used once for the analytic side and
/// 2 x numel times (forward only) for the numeric side. Returns the worst
/// relative error over all parameters.
pub fn check(params: &ParamSet, build: impl Fn(&mut Tape, &ParamSet) -> super::TensorId) -> f64 {
    let mut tape = Tape::new();
    let loss = build(&mut tape, params);
    let grads = tape.backward(loss);
    let analytic = grads.by_name(&tape);

    let numeric = finite_difference(params, |p| {
        let mut t = Tape::new();
        let l = build(&mut t, p);
        t.scalar_value(l)
    });

    analytic
        .iter()
        .zip(&numeric)
        .map(|((an, ag), (nn, ng))| {
            assert_eq!(an, nn, "gradcheck: parameter order diverged");
            max_rel_error(ag, ng)
        })
        .fold(0.0, f64::max)
}
