use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ops::{linear_backward_raw, linear_raw, relu, relu_backward, sigmoid, sigmoid_backward};
use crate::nn::tensor::{Matrix, ParamTensor};

/// Pointwise affine layer (a kernel-size-1 convolution over rows).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: ParamTensor::xavier(d_in, d_out, rng),
            bias: ParamTensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.d_in() {
            return Err(Error::shape(&x.shape(), &self.weight.shape));
        }
        Ok(linear_raw(x, &self.weight.values, self.d_out(), &self.bias.values))
    }

    /// Accumulates parameter gradients; returns the input gradient if asked.
    pub fn backward(&mut self, x: &Matrix, dy: &Matrix, want_dx: bool) -> Option<Matrix> {
        let d_out = self.d_out();
        linear_backward_raw(
            x,
            &self.weight.values,
            d_out,
            dy,
            &mut self.weight.grad,
            &mut self.bias.grad,
            want_dx,
        )
    }

    pub fn params_mut(&mut self) -> [&mut ParamTensor; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&ParamTensor; 2] {
        [&self.weight, &self.bias]
    }
}

/// Terminal activation of a two-layer MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Output {
    Identity,
    Sigmoid,
}

/// `Linear -> relu -> Linear [-> sigmoid]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
    pub output: Output,
}

/// Forward intermediates of [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub input: Matrix,
    pub pre_hidden: Matrix,
    pub hidden: Matrix,
    pub output: Matrix,
}

impl Mlp {
    pub fn new(d_in: usize, d_hidden: usize, d_out: usize, output: Output, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new(d_in, d_hidden, rng),
            out: Linear::new(d_hidden, d_out, rng),
            output,
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<MlpCache> {
        let pre_hidden = self.hidden.forward(x)?;
        let hidden = relu(&pre_hidden);
        let mut output = self.out.forward(&hidden)?;
        if self.output == Output::Sigmoid {
            output = sigmoid(&output);
        }
        Ok(MlpCache {
            input: x.clone(),
            pre_hidden,
            hidden,
            output,
        })
    }

    pub fn backward(&mut self, cache: &MlpCache, d_output: &Matrix, want_dx: bool) -> Option<Matrix> {
        let d_pre_out = match self.output {
            Output::Identity => d_output.clone(),
            Output::Sigmoid => sigmoid_backward(&cache.output, d_output),
        };
        let d_hidden = self
            .out
            .backward(&cache.hidden, &d_pre_out, true)
            .expect("hidden gradient requested");
        let d_pre_hidden = relu_backward(&cache.pre_hidden, &d_hidden);
        self.hidden.backward(&cache.input, &d_pre_hidden, want_dx)
    }

    pub fn params_mut(&mut self) -> [&mut ParamTensor; 4] {
        let [a, b] = self.hidden.params_mut();
        let [c, d] = self.out.params_mut();
        [a, b, c, d]
    }

    pub fn params(&self) -> [&ParamTensor; 4] {
        let [a, b] = self.hidden.params();
        let [c, d] = self.out.params();
        [a, b, c, d]
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::gradcheck::grad_check;

    #[test]
    fn mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for output in [Output::Identity, Output::Sigmoid] {
            let mut mlp = Mlp::new(4, 16, 16, output, &mut rng);
            let x = Matrix::from_vec(6, 4, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
            let proj = Matrix::from_vec(6, 16, (0..96).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
            let cache = mlp.forward(&x).unwrap();
            let dx = mlp.backward(&cache, &proj, true).unwrap();
            let obj = |m: &Mlp, x: &Matrix| -> f64 {
                m.forward(x)
                    .unwrap()
                    .output
                    .data
                    .iter()
                    .zip(&proj.data)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let r = grad_check(
                |v| obj(&mlp, &Matrix::from_vec(6, 4, v.to_vec()).unwrap()),
                &x.data,
                &dx.data,
                1e-5,
            );
            assert!(r.max_rel_error < 1e-6, "{output:?} input: {r:?}");

            let w = mlp.hidden.weight.values.clone();
            let gw = mlp.hidden.weight.grad.clone();
            let r = grad_check(
                |v| {
                    let mut m = mlp.clone();
                    m.hidden.weight.values = v.to_vec();
                    obj(&m, &x)
                },
                &w,
                &gw,
                1e-5,
            );
            assert!(r.max_rel_error < 1e-6, "{output:?} weight: {r:?}");
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mlp = Mlp::new(3, 16, 16, Output::Identity, &mut rng);
        mlp.hidden.weight.values.iter_mut().for_each(|w| *w = 0.0);
        mlp.out.weight.values.iter_mut().for_each(|w| *w = 0.0);
        mlp.out.bias.values = (0..16).map(|i| i as f64).collect();
        let y = mlp.forward(&Matrix::filled(5, 3, 2.0)).unwrap().output;
        for i in 0..5 {
            assert_eq!(y.row(i), &mlp.out.bias.values[..]);
        }
    }

    #[test]
    fn sigmoid_gate_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(4, 16, 16, Output::Sigmoid, &mut rng);
        let x = Matrix::from_vec(3, 4, vec![0.1, -3.0, 2.0, 0.5, 1.0, 1.0, 1.0, 1.0, -0.2, 0.0, 0.3, 9.0]).unwrap();
        let y = mlp.forward(&x).unwrap().output;
        assert!(y.data.iter().all(|&g| g > 0.0 && g < 1.0));
    }
}
