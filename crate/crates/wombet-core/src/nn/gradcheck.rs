//! Central finite-difference gradient oracle.
//!
//! Evaluates a loss as a black box at `θ ± h·e_i` and compares the resulting
//! difference quotient against an analytic gradient. Deliberately knows
//! nothing about how the analytic gradient was produced.

use ndarray::Array2;

use super::mlp::Mlp;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of `loss` w.r.t. a flat parameter vector.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(
    params: &[f64],
    mut loss: F,
    h: f64,
) -> Vec<f64> {
    let mut theta = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let up = loss(&theta);
        theta[i] = orig - h;
        let down = loss(&theta);
        theta[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Max relative error between two gradient vectors, with a small floor so
/// zero-gradient entries compare absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Checks `∂/∂θ Σ_batch Σ_dims output` for an MLP against finite
/// differences; returns the max relative error over all parameters.
pub fn check_mlp_scalar_loss(net: &Mlp, input: &Array2<f64>) -> f64 {
    let (out, tape) = net.forward_batch(input).expect("forward");
    let ones = Array2::ones(out.raw_dim());
    let (grads, _) = net.backward_batch(&tape, &ones).expect("backward");
    let analytic = grads.flatten();

    let flat = net.flatten();
    let mut probe = net.clone();
    let numeric = central_difference(
        &flat,
        |theta| {
            probe.assign_flat(theta).unwrap();
            probe.infer_batch(input).unwrap().sum()
        },
        DEFAULT_STEP,
    );
    max_relative_error(&analytic, &numeric)
}
