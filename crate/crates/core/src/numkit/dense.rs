use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_dim, sigmoid, uniform_fill, Matrix, NumError, Params, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    pub fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// `y = act(W x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    w: Matrix,
    b: Vec<f64>,
    activation: Activation,
}

/// Intermediates kept by [`DenseLayer::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct DenseCache {
    x: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
}

impl DenseCache {
    pub fn output(&self) -> &[f64] {
        &self.y
    }
}

impl DenseLayer {
    pub fn new(w: Matrix, b: Vec<f64>, activation: Activation) -> Result<Self> {
        check_dim("DenseLayer bias", w.rows(), b.len())?;
        Ok(Self { w, b, activation })
    }

    pub fn zeros(out_dim: usize, in_dim: usize, activation: Activation) -> Self {
        Self {
            w: Matrix::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
            activation,
        }
    }

    /// Weights uniform in `[-1/sqrt(in), 1/sqrt(in)]`, zero bias.
    pub fn init<R: Rng>(
        out_dim: usize,
        in_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self::zeros(out_dim, in_dim, activation);
        uniform_fill(layer.w.as_mut_slice(), init_bound(in_dim), rng);
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Matrix {
        &self.w
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.w
    }

    pub fn bias(&self) -> &[f64] {
        &self.b
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.b
    }

    pub fn forward(&self, x: &[f64]) -> Result<DenseCache> {
        check_dim("DenseLayer input", self.in_dim(), x.len())?;
        let mut z = self.b.clone();
        self.w.matvec_acc(x, &mut z);
        let y = z.iter().map(|&v| self.activation.apply(v)).collect();
        Ok(DenseCache {
            x: x.to_vec(),
            z,
            y,
        })
    }

    /// Output only, no cache.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.y)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx` when
    /// `need_input_grad` is set.
    pub fn backward(
        &self,
        cache: &DenseCache,
        dy: &[f64],
        grad: &mut DenseLayer,
        need_input_grad: bool,
    ) -> Result<Option<Vec<f64>>> {
        check_dim("DenseLayer output grad", self.out_dim(), dy.len())?;
        let dz: Vec<f64> = dy
            .iter()
            .zip(cache.z.iter().zip(&cache.y))
            .map(|(d, (&z, &y))| d * self.activation.derivative(z, y))
            .collect();
        grad.w.add_outer(&dz, &cache.x);
        for (gb, d) in grad.b.iter_mut().zip(&dz) {
            *gb += d;
        }
        if need_input_grad {
            let mut dx = vec![0.0; self.in_dim()];
            self.w.tr_matvec_acc(&dz, &mut dx);
            Ok(Some(dx))
        } else {
            Ok(None)
        }
    }
}

impl Params for DenseLayer {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice(), &self.b]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_mut_slice(), &mut self.b]
    }
}

pub(crate) fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    layers: Vec<DenseCache>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.layers.last().map_or(&[], |c| c.output())
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NumError::Spec("empty MLP".into()));
        }
        for pair in layers.windows(2) {
            check_dim("Mlp layer chain", pair[0].out_dim(), pair[1].in_dim())?;
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<MlpCache> {
        let mut caches: Vec<DenseCache> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = caches.last().map_or(x, |c| c.output());
            let c = layer.forward(input)?;
            caches.push(c);
        }
        Ok(MlpCache { layers: caches })
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.apply(&h)?;
        }
        Ok(h)
    }

    pub fn backward(
        &self,
        cache: &MlpCache,
        dy: &[f64],
        grad: &mut Mlp,
        need_input_grad: bool,
    ) -> Result<Option<Vec<f64>>> {
        let mut d = dy.to_vec();
        let n = self.layers.len();
        for i in (0..n).rev() {
            let need = i > 0 || need_input_grad;
            match self.layers[i].backward(&cache.layers[i], &d, &mut grad.layers[i], need)? {
                Some(dx) => d = dx,
                None => return Ok(None),
            }
        }
        Ok(Some(d))
    }
}

impl Params for Mlp {
    fn blocks(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.blocks()).collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.blocks_mut())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_layer() {
        let l = DenseLayer::new(Matrix::identity(2), vec![0.0, 0.0], Activation::Identity).unwrap();
        assert_eq!(l.apply(&[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn tanh_of_zero() {
        let l = DenseLayer::new(
            Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            vec![0.0],
            Activation::Tanh,
        )
        .unwrap();
        assert_eq!(l.apply(&[0.0, 0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn affine_arithmetic() {
        let l = DenseLayer::new(
            Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap(),
            vec![0.1],
            Activation::Identity,
        )
        .unwrap();
        let y = l.apply(&[1.0, 3.0]).unwrap();
        assert!((y[0] - 2.1).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_names_shapes() {
        let l = DenseLayer::zeros(2, 3, Activation::Relu);
        let err = l.apply(&[1.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn linear_squared_loss_closed_form() {
        // y = Wx + b, L = (y - t)^2  =>  dW = 2 (y - t) x^T, db = 2 (y - t)
        let l = DenseLayer::new(
            Matrix::from_rows(&[vec![0.3, -0.2], vec![0.1, 0.4]]).unwrap(),
            vec![0.05, -0.1],
            Activation::Identity,
        )
        .unwrap();
        let x = [1.5, -2.0];
        let t = [0.7, 0.2];
        let c = l.forward(&x).unwrap();
        let dy: Vec<f64> = c
            .output()
            .iter()
            .zip(&t)
            .map(|(y, t)| 2.0 * (y - t))
            .collect();
        let mut g = l.zeros_like();
        let dx = l.backward(&c, &dy, &mut g, true).unwrap().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((g.weights().get(i, j) - dy[i] * x[j]).abs() < 1e-15);
            }
            assert_eq!(g.bias()[i], dy[i]);
        }
        let expect_dx0 = 0.3 * dy[0] + 0.1 * dy[1];
        assert!((dx[0] - expect_dx0).abs() < 1e-15);
    }

    #[test]
    fn mlp_rejects_broken_chain() {
        let a = DenseLayer::zeros(3, 2, Activation::Tanh);
        let b = DenseLayer::zeros(1, 4, Activation::Identity);
        assert!(Mlp::new(vec![a, b]).is_err());
    }
}
