//! Central-difference probes used to validate the analytic gradients.
//!
//! These re-evaluate the full forward pass per perturbed parameter, so they
//! are strictly test/diagnostic machinery — O(params) forward passes each.

use super::{BatchState, LossTail, Mlp};
use crate::blas::Scalar;

fn eval_loss<F: Scalar>(mlp: &Mlp<F>, inputs: &[F], tail: &dyn LossTail<F>) -> F {
    let batch = inputs.len() / mlp.config().input_dim;
    let mut state = BatchState::new();
    mlp.forward_batch(inputs, &mut state);
    tail.value_and_grad(&state.out, batch, mlp.config().output_dim).0
}

/// Central finite differences of `tail(net(inputs))` w.r.t. every network
/// parameter.
pub fn param_grad_central<F: Scalar>(
    mlp: &Mlp<F>,
    inputs: &[F],
    tail: &dyn LossTail<F>,
    h: f64,
) -> Vec<F> {
    let mut probe = mlp.clone();
    let n = probe.param_count();
    let mut grads = vec![F::zero(); n];
    let step = F::from_f64(h);
    for j in 0..n {
        let orig = probe.params()[j];
        probe.params_mut()[j] = orig + step;
        let plus = eval_loss(&probe, inputs, tail);
        probe.params_mut()[j] = orig - step;
        let minus = eval_loss(&probe, inputs, tail);
        probe.params_mut()[j] = orig;
        grads[j] = (plus - minus) / (step + step);
    }
    grads
}

/// Central finite differences w.r.t. the input coordinates.
pub fn input_grad_central<F: Scalar>(
    mlp: &Mlp<F>,
    inputs: &[F],
    tail: &dyn LossTail<F>,
    h: f64,
) -> Vec<F> {
    let mut probe = inputs.to_vec();
    let mut grads = vec![F::zero(); inputs.len()];
    let step = F::from_f64(h);
    for j in 0..inputs.len() {
        let orig = probe[j];
        probe[j] = orig + step;
        let plus = eval_loss(mlp, &probe, tail);
        probe[j] = orig - step;
        let minus = eval_loss(mlp, &probe, tail);
        probe[j] = orig;
        grads[j] = (plus - minus) / (step + step);
    }
    grads
}

/// Largest relative deviation between two gradient vectors, with the
/// denominator floored to dodge division by near-zero entries.
pub fn max_relative_error<F: Scalar>(analytic: &[F], numeric: &[F], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let a = a.to_f64();
            let n = n.to_f64();
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
