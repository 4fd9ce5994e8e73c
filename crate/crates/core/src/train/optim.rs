use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
        }
    }
}

/// First and second moment buffers mirroring the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Completed update count.
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<_> = params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified unless every gradient
/// is finite and shaped like its parameter.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    config: &AdamConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::Contract(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.names().iter().zip(params.tensors()).zip(grads) {
        if p.shape() != g.shape() {
            return Err(TrainError::Contract(format!(
                "gradient of {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient { param: name.clone() });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let (one, eps, lr) = (T::one(), T::lit(config.epsilon), T::lit(lr));
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamSet<f64> {
        let mut p = ParamSet::default();
        p.push("theta", Tensor::from_f64(&[1], &[value]).unwrap());
        p
    }

    #[test]
    fn hand_computed_first_step() {
        // m = 0.05, v = 0.005, m̂ = 0.5, v̂ = 0.25 → Δ = 0.01·0.5/(0.5 + 1e-9)
        let mut p = single(1.0);
        let mut s = AdamState::new(&p);
        let g = [Tensor::from_f64(&[1], &[0.5]).unwrap()];
        adam_step(&mut p, &g, &mut s, 0.01, &AdamConfig::default()).unwrap();
        let theta = p.tensors()[0].item();
        assert!((theta - 0.99).abs() < 1e-6);
        assert!((theta - (1.0 - 0.01 * 0.5 / (0.5 + 1e-9))).abs() < 1e-15);
        assert_eq!(s.t, 1);
        assert!((s.m[0].item() - 0.05).abs() < 1e-15);
        assert!((s.v[0].item() - 0.005).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.3);
        let mut s = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &[Tensor::zeros(&[1])], &mut s, 0.1, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.tensors()[0].item(), 0.3);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(0.3);
        let mut s = AdamState::new(&p);
        let g = [Tensor::from_f64(&[1], &[f64::NAN]).unwrap()];
        match adam_step(&mut p, &g, &mut s, 0.1, &AdamConfig::default()) {
            Err(TrainError::NonFiniteGradient { param }) => assert_eq!(param, "theta"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.t, 0);
        assert_eq!(p.tensors()[0].item(), 0.3);
    }

    #[test]
    fn clipping_scales_to_bound() {
        let mut g: Vec<Tensor<f64>> = vec![
            Tensor::from_f64(&[2], &[3.0, 0.0]).unwrap(),
            Tensor::from_f64(&[1], &[4.0]).unwrap(),
        ];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6f64).abs() < 1e-15 && (g[1].data()[0] - 0.8f64).abs() < 1e-15);
        let before = g.clone();
        clip_global_norm(&mut g, 1.0 + 1e-9);
        assert_eq!(g, before);
    }
}
