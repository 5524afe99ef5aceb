use super::{HasTensors, Scalar};

/// Adaptive-moment optimizer with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable tensor of `params` using the
    /// matching tensor of `grads` (same module layout).
    pub fn step<M: HasTensors<T>>(&mut self, params: &mut M, grads: &M, lr: f64) {
        let grads: Vec<_> = grads.tensors().into_iter().filter(|t| t.trainable).collect();
        let mut params: Vec<_> = params
            .tensors_mut()
            .into_iter()
            .filter(|t| t.trainable)
            .collect();
        assert_eq!(params.len(), grads.len(), "parameter/gradient layout mismatch");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.data.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(self.eps);

        for (i, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
            assert_eq!(p.data.len(), g.data.len(), "tensor {} size", p.name);
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let denom = (v[j] * inv_bc2).sqrt() + eps;
                p.data[j] = p.data[j] - step_size * m[j] / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn first_step_moves_each_weight_by_lr_against_gradient_sign() {
        let mut params = Linear::<f64>::zeros(2, 1);
        let mut grads = Linear::<f64>::zeros(2, 1);
        grads.weight = vec![0.5, -2.0];
        grads.bias = vec![0.0];
        let mut adam = Adam::default();
        adam.step(&mut params, &grads, 0.01);
        assert!((params.weight[0] + 0.01).abs() < 1e-6);
        assert!((params.weight[1] - 0.01).abs() < 1e-6);
        assert_eq!(params.bias[0], 0.0);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = Linear::<f64>::zeros(1, 1);
        params.weight = vec![3.0];
        let mut adam = Adam::default();
        for _ in 0..2000 {
            let mut g = Linear::zeros(1, 1);
            g.weight[0] = 2.0 * (params.weight[0] - 1.0);
            adam.step(&mut params, &g, 0.05);
        }
        assert!((params.weight[0] - 1.0).abs() < 1e-3);
    }
}
