//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParameters;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ModelParameters<T>, config: AdamConfig) -> Self {
        let zeros = || params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }
}

/// One Adam update. Non-finite gradients abort the step and leave both the
/// parameters and the state untouched.
pub fn adam_step<T: Real>(
    params: &mut ModelParameters<T>,
    grads: &ModelParameters<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if state.first.len() != grads.tensors().count() {
        return Err(Error::shape("adam_step", "optimizer state built for another model".to_string()));
    }
    for ((p, g), m) in params.tensors().zip(grads.tensors()).zip(&state.first) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("parameter {:?}, gradient {:?}, moment {:?}", p.shape(), g.shape(), m.shape()),
            ));
        }
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite { stage: "gradient".into() });
    }

    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as f64;
    let step_size = T::lit(lr / (1.0 - beta1.powf(t)));
    let v_correction = T::lit(1.0 / (1.0 - beta2.powf(t)));
    let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
    let (c1, c2) = (T::one() - b1, T::one() - b2);

    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            *p = *p - step_size * *m / ((*v * v_correction).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HiddenWidths, ModelConfig};
    use crate::pfg::SamplingConfig;

    fn tiny() -> ModelParameters<f64> {
        let cfg = ModelConfig {
            input_channels: 2,
            length: 4,
            widths: HiddenWidths {
                dsb_hidden: 3,
                dsb_out: 2,
                acr_hidden: 3,
                tbc_collapse: 3,
                tbc_hidden: 2,
            },
            sampling: SamplingConfig::new(2, 2, 2),
            seed: 1,
        };
        ModelParameters::init(cfg).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = tiny();
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = OptimizerState::new(&p, AdamConfig::default());
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut s, 1e-3).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.step, 3);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut p = tiny();
        let mut g = p.zeros_like();
        for t in g.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.37);
        }
        let mut s = OptimizerState::new(&p, AdamConfig::default());
        let lr = 1e-3;
        for _ in 0..200 {
            let before = p.clone();
            adam_step(&mut p, &g, &mut s, lr).unwrap();
            for (a, b) in p.tensors().zip(before.tensors()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!(((y - x) - lr).abs() < 1e-9, "{}", y - x);
                }
            }
        }
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.tensors_mut().next().unwrap().data_mut()[0] = f64::NAN;
        let mut s = OptimizerState::new(&p, AdamConfig::default());
        let err = adam_step(&mut p, &g, &mut s, 1e-3).unwrap_err();
        assert!(err.is_numeric());
        assert_eq!(p, before);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = tiny();
            let mut g = p.zeros_like();
            for (k, t) in g.tensors_mut().enumerate() {
                t.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = ((k * 31 + i) as f64).sin());
            }
            let mut s = OptimizerState::new(&p, AdamConfig::default());
            for _ in 0..5 {
                adam_step(&mut p, &g, &mut s, 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
