//! Adam optimizer over the flat parameter vector of an [`Mlp`].

use crate::error::{Error, Result};

use super::mlp::{Gradients, Mlp};

/// First/second moment buffers plus hyperparameters. Buffers are
/// shape-congruent with the parameters they update (same flat length).
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update; increments the step counter.
    pub fn apply(&mut self, params: &mut Mlp, grads: &Gradients) -> Result<()> {
        let g = grads.flatten();
        if g.len() != self.m.len() || params.param_count() != self.m.len() {
            return Err(Error::contract(format!(
                "adam state length {} does not match params {} / grads {}",
                self.m.len(),
                params.param_count(),
                g.len()
            )));
        }
        let mut theta = params.flatten();
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        params.assign_flat(&theta)
    }

    /// Scalar variant used for the learned entropy temperature.
    pub fn apply_scalar(&mut self, param: &mut f64, grad: f64) {
        debug_assert_eq!(self.m.len(), 1);
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        self.m[0] = self.beta1 * self.m[0] + (1.0 - self.beta1) * grad;
        self.v[0] = self.beta2 * self.v[0] + (1.0 - self.beta2) * grad * grad;
        *param -= self.lr * (self.m[0] / bc1) / ((self.v[0] / bc2).sqrt() + self.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mlp::{Activation, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_net(seed: u64) -> Mlp {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Mlp::new(&[1, 1], Activation::Identity, false, &mut rng).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut net = tiny_net(0);
        let before = net.flatten();
        let zeros = Gradients::zeros_like(&net);
        let mut adam = AdamState::new(net.param_count(), 0.1);
        adam.apply(&mut net, &zeros).unwrap();
        assert_eq!(net.flatten(), before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // Scalar parameter, g = 1, lr = 0.1: bias correction makes the first
        // update m̂/√v̂ = 1, so Δθ ≈ −0.1.
        let mut net = tiny_net(1);
        let before = net.flatten();
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].dw[[0, 0]] = 1.0;
        let mut adam = AdamState::new(net.param_count(), 0.1);
        adam.apply(&mut net, &grads).unwrap();
        let delta = net.flatten()[0] - before[0];
        assert!((delta + 0.1).abs() < 1e-6, "Δθ = {delta}");
    }

    #[test]
    fn repeated_identical_steps_do_not_blow_up() {
        let mut net = tiny_net(2);
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].dw[[0, 0]] = 1.0;
        let mut adam = AdamState::new(net.param_count(), 0.1);
        let t0 = net.flatten()[0];
        adam.apply(&mut net, &grads).unwrap();
        let t1 = net.flatten()[0];
        adam.apply(&mut net, &grads).unwrap();
        let t2 = net.flatten()[0];
        assert!((t2 - t1).abs() <= (t1 - t0).abs() + 1e-6);
    }
}
