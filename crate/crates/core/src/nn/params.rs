use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::tensor::{Real, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    pub adam_t: u64,
}

/// Named parameter tensors plus optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    /// Tensors whose update was skipped because of a non-finite gradient.
    pub skipped_updates: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), skipped_updates: 0 }
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        value.requires_grad = true;
        let n = value.len();
        self.params.push(Param { name, value, adam_m: vec![T::ZERO; n], adam_v: vec![T::ZERO; n], adam_t: 0 });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads { data: self.params.iter().map(|p| vec![T::ZERO; p.value.len()]).collect() }
    }

    /// Same parameters and optimizer state in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    adam_m: conv(&p.adam_m),
                    adam_v: conv(&p.adam_v),
                    adam_t: p.adam_t,
                })
                .collect(),
            skipped_updates: self.skipped_updates,
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    pub data: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.data[id.0]
    }

    /// Global L2 norm over finite entries (in f64).
    pub fn global_norm(&self) -> f64 {
        self.data.iter().flatten().map(|v| v.to_f64()).filter(|v| v.is_finite()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: T) {
        for v in self.data.iter_mut().flatten() {
            *v *= s;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update. Tensors with a non-finite gradient are left
/// untouched (their step count included) and counted in
/// `store.skipped_updates`. Returns the number of skipped tensors.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, grads: &Grads<T>, cfg: &AdamConfig) -> Result<usize> {
    if grads.data.len() != store.params.len()
        || grads.data.iter().zip(&store.params).any(|(g, p)| g.len() != p.value.len())
    {
        return Err(Error::shape("gradient buffers do not match the parameter store"));
    }
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::ONE - b1, T::ONE - b2);
    let eps = T::from_f64(cfg.eps);
    let mut skipped = 0;
    for (p, g) in store.params.iter_mut().zip(&grads.data) {
        if !g.iter().all(|v| v.is_finite()) {
            skipped += 1;
            continue;
        }
        p.adam_t += 1;
        let t = p.adam_t as i32;
        let c1 = T::from_f64(1.0 / (1.0 - cfg.beta1.powi(t)));
        let c2 = T::from_f64(1.0 / (1.0 - cfg.beta2.powi(t)));
        let lr = T::from_f64(cfg.lr);
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let gi = g[i];
            p.adam_m[i] = b1 * p.adam_m[i] + one_b1 * gi;
            p.adam_v[i] = b2 * p.adam_v[i] + one_b2 * gi * gi;
            let m_hat = p.adam_m[i] * c1;
            let v_hat = p.adam_v[i] * c2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    store.skipped_updates += skipped as u64;
    Ok(skipped)
}

/// Truncated normal (cut at ±2σ) initializer.
pub fn trunc_normal<T: Real, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(T::from_f64(z * std));
        }
    }
    Tensor::from_vec(shape, data).expect("shape product")
}
