use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_len, InitScheme, Matrix, NeuralError, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, v: &mut [f64]) {
        if let Activation::Tanh = self {
            for x in v {
                *x = x.tanh();
            }
        }
    }

    /// Multiplies `d` by the derivative, given the activated output `y`.
    #[inline]
    fn backprop(self, y: &[f64], d: &mut [f64]) {
        if let Activation::Tanh = self {
            for (di, yi) in d.iter_mut().zip(y) {
                *di *= 1.0 - yi * yi;
            }
        }
    }
}

/// Fully connected layer `activation(W x + b)` with `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Matrix,
    pub b: Matrix,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            w: InitScheme::GlorotUniform.sample(output, input, rng),
            b: Matrix::zeros(output, 1),
            activation,
        }
    }

    pub fn from_parts(w: Matrix, b: Vec<f64>, activation: Activation) -> Result<Self, NeuralError> {
        check_len("dense bias", w.rows(), b.len())?;
        Ok(Self {
            w,
            b: Matrix::column(b),
            activation,
        })
    }

    pub fn input_size(&self) -> usize {
        self.w.cols()
    }

    pub fn output_size(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        check_len("dense input", self.input_size(), x.len())?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.w.matvec_accurate(x, self.b.as_slice());
        self.activation.apply(&mut y);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    /// `y` is the output produced by `forward` for `x`.
    pub fn backward(&self, x: &[f64], y: &[f64], dy: &[f64], grad: &mut DenseLayer) -> Vec<f64> {
        let mut d = dy.to_vec();
        self.activation.backprop(y, &mut d);
        grad.w.add_outer(&d, x);
        grad.b.add_flat(&d);
        let mut dx = vec![0.0; self.input_size()];
        self.w.matvec_t_acc(&d, &mut dx);
        dx
    }
}

impl Parameters for DenseLayer {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![("W".into(), &self.w), ("b".into(), &self.b)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w, &mut self.b]
    }
}

pub fn dense_forward(layer: &DenseLayer, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
    layer.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{gradient_check, mae_loss};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_linear() {
        let l = DenseLayer::from_parts(Matrix::identity(2), vec![0.0, 0.0], Activation::Linear).unwrap();
        assert_eq!(dense_forward(&l, &[3.0, -1.0]).unwrap(), [3.0, -1.0]);
    }

    #[test]
    fn zero_weights_tanh_bias() {
        let l = DenseLayer::from_parts(Matrix::zeros(2, 4), vec![1.0, 1.0], Activation::Tanh).unwrap();
        let y = dense_forward(&l, &[5.0, -2.0, 0.3, 9.0]).unwrap();
        assert_eq!(y, [1f64.tanh(), 1f64.tanh()]);
    }

    #[test]
    fn shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = DenseLayer::new(3, 2, Activation::Linear, &mut rng);
        assert!(matches!(l.forward(&[1.0, 2.0]), Err(NeuralError::ShapeMismatch { .. })));
    }

    fn check(activation: Activation, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = DenseLayer::new(5, 4, activation, &mut rng);
        let x: Vec<f64> = (0..5).map(|i| i as f64 * 0.7 - 1.3).collect();
        let target: Vec<f64> = (0..4).map(|i| 3.0 - i as f64 * 2.1).collect();
        let mut grad = layer.zeros_like();
        let y = layer.forward(&x).unwrap();
        let (_, dy) = mae_loss(&y, &target).unwrap();
        layer.backward(&x, &y, &dy, &mut grad);
        gradient_check(&layer, &grad, 1e-6, |m| Ok(mae_loss(&m.forward(&x)?, &target)?.0))
            .unwrap()
            .max_relative_error
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            assert!(check(Activation::Linear, seed) < 1e-6);
            assert!(check(Activation::Tanh, seed) < 1e-6);
        }
    }
}
