//! Adam with bias correction, operating on flat parameter vectors.

use crate::blas::Scalar;

/// First/second-moment state for one parameter vector.
///
/// Defaults follow the usual convention: beta1 = 0.9, beta2 = 0.999,
/// epsilon = 1e-8, and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam<F: Scalar> {
    m: Vec<F>,
    v: Vec<F>,
    t: u64,
    beta1: F,
    beta2: F,
    epsilon: F,
}

impl<F: Scalar> Adam<F> {
    pub fn new(param_count: usize) -> Self {
        Adam {
            m: vec![F::zero(); param_count],
            v: vec![F::zero(); param_count],
            t: 0,
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            epsilon: F::from_f64(1e-8),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update: `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    ///
    /// The bias corrections are folded into a per-step effective learning
    /// rate `lr * sqrt(1 - beta2^t) / (1 - beta1^t)`, which is algebraically
    /// identical to correcting each moment separately.
    pub fn step(&mut self, params: &mut [F], grads: &[F], lr: F) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter count");
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let t = self.t as i32;
        let one = F::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        let lr_t = lr * bc2.sqrt() / bc1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let c1 = one - b1;
        let c2 = one - b2;
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            *p = *p - lr_t * *m / (v.sqrt() + self.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn first_step_moves_by_almost_exactly_lr() {
        // With a single constant gradient the bias corrections cancel and
        // the first update is lr * g / (|g| + eps).
        let mut opt = Adam::<f64>::new(1);
        let mut p = [1.0];
        opt.step(&mut p, &[2.0], 0.001);
        assert_abs_diff_eq!(p[0], 1.0 - 0.001, epsilon = 1e-9);
    }

    #[test]
    fn constant_gradient_keeps_unit_scale_steps() {
        let mut opt = Adam::<f64>::new(1);
        let mut p = [0.0];
        opt.step(&mut p, &[1.0], 0.001);
        opt.step(&mut p, &[1.0], 0.001);
        assert_abs_diff_eq!(p[0], -0.002, epsilon = 1e-6);
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op_for_params() {
        let mut opt = Adam::<f64>::new(3);
        let mut p = [0.5, -0.5, 2.0];
        let before = p;
        opt.step(&mut p, &[1.0, -3.0, 0.25], 0.0);
        assert_eq!(p, before);
        // Moment state still advances.
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn f32_state_matches_f64_to_single_precision() {
        let mut a = Adam::<f64>::new(2);
        let mut b = Adam::<f32>::new(2);
        let mut pa = [0.3f64, -0.7];
        let mut pb = [0.3f32, -0.7];
        for i in 0..50 {
            let g = 0.1 + 0.01 * i as f64;
            a.step(&mut pa, &[g, -g], 0.01);
            b.step(&mut pb, &[g as f32, -g as f32], 0.01);
        }
        for (x, y) in pa.iter().zip(&pb) {
            assert_abs_diff_eq!(*x, *y as f64, epsilon = 1e-4);
        }
    }
}
