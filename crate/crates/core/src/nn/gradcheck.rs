//! Central finite-difference gradient checking.
//!
//! The comparison metric is an elementwise relative error whose denominator
//! is floored at a thousandth of the largest numeric gradient, so that entries
//! which are negligible relative to the rest cannot fail on round-off alone.
//! An absolute floor covers tensors whose exact gradient is zero (a key bias
//! under softmax, for instance):
//!
//! ```text
//! err = max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-3 · max_j |n_j|, 1e-6)
//! ```

use rand::Rng;

use crate::nn::params::{Grads, ParamStore};
use crate::nn::tensor::{Real, Tensor};

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-4;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-6);
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for each selected coordinate.
pub fn central_differences(x: &mut [f64], indices: &[usize], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    indices
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + h;
            let fp = f(x);
            x[i] = orig - h;
            let fm = f(x);
            x[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

pub fn random_tensor<T: Real, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect()).unwrap()
}

/// Checks every parameter gradient of a scalar function of `(params, x)`.
pub fn check_param_grads<L, B>(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    loss: L,
    back: B,
    tol: f64,
) -> Result<f64, String>
where
    L: Fn(&ParamStore<f64>, &Tensor<f64>) -> f64,
    B: Fn(&ParamStore<f64>, &Tensor<f64>) -> (Grads<f64>, Tensor<f64>),
{
    let (grads, _) = back(store, x);
    let mut worst: f64 = 0.0;
    for (pi, p) in store.params().iter().enumerate() {
        let mut s = store.clone();
        let idx: Vec<usize> = (0..p.value.len()).collect();
        let mut vals = p.value.data().to_vec();
        let numeric = central_differences(&mut vals, &idx, FD_STEP, |v| {
            s.params_mut()[pi].value.data_mut().copy_from_slice(v);
            loss(&s, x)
        });
        let err = relative_error(&grads.data[pi], &numeric);
        if err >= tol {
            return Err(format!("parameter {}: relative error {err:.3e}", p.name));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Checks the input gradient returned by `back`.
pub fn check_input_grad<L, B>(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    loss: L,
    back: B,
    tol: f64,
) -> Result<f64, String>
where
    L: Fn(&ParamStore<f64>, &Tensor<f64>) -> f64,
    B: Fn(&ParamStore<f64>, &Tensor<f64>) -> (Grads<f64>, Tensor<f64>),
{
    let (_, dx) = back(store, x);
    let idx: Vec<usize> = (0..x.len()).collect();
    let mut vals = x.data().to_vec();
    let mut xt = x.clone();
    let numeric = central_differences(&mut vals, &idx, FD_STEP, |v| {
        xt.data_mut().copy_from_slice(v);
        loss(store, &xt)
    });
    let err = relative_error(dx.data(), &numeric);
    if err >= tol {
        return Err(format!("input: relative error {err:.3e}"));
    }
    Ok(err)
}
