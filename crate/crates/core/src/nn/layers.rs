//! Differentiable building blocks with explicit forward caches.
//!
//! Activations are row-major matrices `[rows, features]`. Every `forward`
//! returns the output together with whatever its `backward` needs; `backward`
//! accumulates parameter gradients into a [`Grads`] buffer and returns the
//! gradient w.r.t. the input.

use rand::Rng;

use crate::nn::params::{trunc_normal, Grads, ParamId, ParamStore};
use crate::nn::tensor::{gemm, Real, Tensor};

/// How a freshly created weight matrix is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    TruncNormal(f64),
    Zeros,
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::TruncNormal(std) => trunc_normal(&[in_dim, out_dim], std, rng),
            Init::Zeros => Tensor::zeros(&[in_dim, out_dim]),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.cols(), self.in_dim, "linear input width");
        let rows = x.rows();
        let bias = store.get(self.bias).data();
        let mut data = Vec::with_capacity(rows * self.out_dim);
        for _ in 0..rows {
            data.extend_from_slice(bias);
        }
        gemm(T::ONE, x.mat(), store.get(self.weight).mat(), T::ONE, &mut data, self.out_dim);
        Tensor::from_vec(&[rows, self.out_dim], data).expect("linear output")
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let rows = x.rows();
        gemm(T::ONE, x.mat().t(), dy.mat(), T::ONE, grads.get_mut(self.weight), self.out_dim);
        let db = grads.get_mut(self.bias);
        for r in dy.data().chunks(self.out_dim) {
            for (a, b) in db.iter_mut().zip(r) {
                *a += *b;
            }
        }
        let mut dx = Tensor::zeros(&[rows, self.in_dim]);
        gemm(T::ONE, dy.mat(), store.get(self.weight).mat().t(), T::ZERO, dx.data_mut(), self.in_dim);
        dx
    }
}

const LN_EPS: f64 = 1e-5;

/// Layer normalization over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::from_vec(&[dim], vec![T::ONE; dim]).unwrap());
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, LayerNormCache<T>) {
        let d = self.dim;
        assert_eq!(x.cols(), d, "layer norm width");
        let (g, b) = (store.get(self.gamma).data(), store.get(self.beta).data());
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps = T::from_f64(LN_EPS);
        let mut xhat = Vec::with_capacity(x.len());
        let mut y = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.rows());
        for row in x.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::ONE / (var + eps).sqrt();
            inv_std.push(is);
            for (k, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                y.push(h * g[k] + b[k]);
            }
        }
        let shape = x.shape();
        (Tensor::from_vec(shape, y).unwrap(), LayerNormCache { xhat: Tensor::from_vec(shape, xhat).unwrap(), inv_std })
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &LayerNormCache<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let d = self.dim;
        let g = store.get(self.gamma).data();
        let inv_d = T::from_f64(1.0 / d as f64);
        let mut dgamma = vec![T::ZERO; d];
        let mut dbeta = vec![T::ZERO; d];
        let mut dx = Vec::with_capacity(dy.len());
        let mut dxhat = vec![T::ZERO; d];
        for ((dy_row, xh_row), &is) in dy.data().chunks(d).zip(cache.xhat.data().chunks(d)).zip(&cache.inv_std) {
            let mut mean_dxhat = T::ZERO;
            let mut mean_dxhat_xhat = T::ZERO;
            for k in 0..d {
                dgamma[k] += dy_row[k] * xh_row[k];
                dbeta[k] += dy_row[k];
                dxhat[k] = dy_row[k] * g[k];
                mean_dxhat += dxhat[k];
                mean_dxhat_xhat += dxhat[k] * xh_row[k];
            }
            mean_dxhat *= inv_d;
            mean_dxhat_xhat *= inv_d;
            for k in 0..d {
                dx.push(is * (dxhat[k] - mean_dxhat - xh_row[k] * mean_dxhat_xhat));
            }
        }
        for (a, b) in grads.get_mut(self.gamma).iter_mut().zip(&dgamma) {
            *a += *b;
        }
        for (a, b) in grads.get_mut(self.beta).iter_mut().zip(&dbeta) {
            *a += *b;
        }
        Tensor::from_vec(dy.shape(), dx).unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// tanh approximation
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::ZERO),
            Activation::Gelu => {
                let c = T::from_f64(GELU_C);
                let k = T::from_f64(0.044715);
                let half = T::from_f64(0.5);
                half * x * (T::ONE + (c * (x + k * x * x * x)).tanh())
            }
        }
    }

    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::ZERO {
                    T::ONE
                } else {
                    T::ZERO
                }
            }
            Activation::Gelu => {
                let c = T::from_f64(GELU_C);
                let k = T::from_f64(0.044715);
                let half = T::from_f64(0.5);
                let u = c * (x + k * x * x * x);
                let th = u.tanh();
                let du = c * (T::ONE + T::from_f64(3.0) * k * x * x);
                half * (T::ONE + th) + half * x * (T::ONE - th * th) * du
            }
        }
    }
}

/// Two-layer perceptron `fc2(act(fc1(x)))`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    x: Tensor<T>,
    pre: Tensor<T>,
    hidden: Tensor<T>,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        activation: Activation,
        init: (Init, Init),
        rng: &mut R,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, init.0, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, init.1, rng),
            activation,
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, MlpCache<T>) {
        let pre = self.fc1.forward(store, x);
        let hidden =
            Tensor::from_vec(pre.shape(), pre.data().iter().map(|&v| self.activation.apply(v)).collect()).unwrap();
        let y = self.fc2.forward(store, &hidden);
        (y, MlpCache { x: x.clone(), pre, hidden })
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &MlpCache<T>,
        dy: &Tensor<T>,
    ) -> Tensor<T> {
        let mut dh = self.fc2.backward(store, grads, &cache.hidden, dy);
        for (g, &p) in dh.data_mut().iter_mut().zip(cache.pre.data()) {
            *g *= self.activation.derivative(p);
        }
        self.fc1.backward(store, grads, &cache.x, &dh)
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows<T: Real>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let mut m = row[0];
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut s = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = T::ONE / s;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input_grad, check_param_grads, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_matrix(n: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    #[test]
    fn identity_linear_reproduces_input() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 4, 4, Init::Zeros, &mut rng);
        *store.get_mut(lin.weight) = identity_matrix(4);
        let x = random_tensor(&[3, 4], &mut rng);
        assert_eq!(lin.forward(&store, &x), x);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = random_tensor::<f64, _>(&[5, 7], &mut rng);
        for v in t.data_mut() {
            *v *= 30.0;
        }
        softmax_rows(t.data_mut(), 7);
        for row in t.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_gradients() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (rows, i, o) = (1 + seed as usize % 4, 2 + seed as usize % 5, 1 + seed as usize % 3);
            let mut store = ParamStore::<f64>::new();
            let lin = Linear::new(&mut store, "l", i, o, Init::TruncNormal(0.5), &mut rng);
            for v in store.get_mut(lin.bias).data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let x = random_tensor(&[rows, i], &mut rng);
            let w = random_tensor(&[rows, o], &mut rng);
            let loss = |s: &ParamStore<f64>, x: &Tensor<f64>| dot(&lin.forward(s, x), &w);
            let back = |s: &ParamStore<f64>, x: &Tensor<f64>| {
                let mut g = s.zero_grads();
                let dx = lin.backward(s, &mut g, x, &w);
                (g, dx)
            };
            check_param_grads(&store, &x, loss, back, 1e-4).unwrap();
            check_input_grad(&store, &x, loss, back, 1e-4).unwrap();
        }
    }

    #[test]
    fn layer_norm_gradients() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (rows, d) = (1 + seed as usize % 3, 3 + seed as usize % 6);
            let mut store = ParamStore::<f64>::new();
            let ln = LayerNorm::new(&mut store, "ln", d);
            for v in store.get_mut(ln.gamma).data_mut() {
                *v = rng.random_range(0.5..1.5);
            }
            for v in store.get_mut(ln.beta).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            let x = random_tensor(&[rows, d], &mut rng);
            let w = random_tensor(&[rows, d], &mut rng);
            let loss = |s: &ParamStore<f64>, x: &Tensor<f64>| dot(&ln.forward(s, x).0, &w);
            let back = |s: &ParamStore<f64>, x: &Tensor<f64>| {
                let mut g = s.zero_grads();
                let (_, c) = ln.forward(s, x);
                let dx = ln.backward(s, &mut g, &c, &w);
                (g, dx)
            };
            check_param_grads(&store, &x, loss, back, 1e-4).unwrap();
            check_input_grad(&store, &x, loss, back, 1e-4).unwrap();
        }
    }

    #[test]
    fn mlp_gradients_both_activations() {
        for seed in 0..10u64 {
            let act = if seed % 2 == 0 { Activation::Gelu } else { Activation::Relu };
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (rows, i, h, o) = (1 + seed as usize % 3, 2 + seed as usize % 4, 3 + seed as usize % 5, 2);
            let mut store = ParamStore::<f64>::new();
            let init = (Init::TruncNormal(0.5), Init::TruncNormal(0.5));
            let mlp = Mlp::new(&mut store, "m", i, h, o, act, init, &mut rng);
            let x = random_tensor(&[rows, i], &mut rng);
            let w = random_tensor(&[rows, o], &mut rng);
            let loss = |s: &ParamStore<f64>, x: &Tensor<f64>| dot(&mlp.forward(s, x).0, &w);
            let back = |s: &ParamStore<f64>, x: &Tensor<f64>| {
                let mut g = s.zero_grads();
                let (_, c) = mlp.forward(s, x);
                let dx = mlp.backward(s, &mut g, &c, &w);
                (g, dx)
            };
            check_param_grads(&store, &x, loss, back, 1e-4).unwrap();
            check_input_grad(&store, &x, loss, back, 1e-4).unwrap();
        }
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }
}
