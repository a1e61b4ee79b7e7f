use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::tensor::{ParameterSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global L2 norm the gradients are rescaled to when exceeded.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            clip_norm: None,
        }
    }

    pub fn adam(learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1,
            beta2,
            eps: default_eps(),
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::invalid("adam betas must lie in (0, 1)"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("clip_norm must be > 0"));
            }
        }
        Ok(())
    }
}

/// Adam moment estimates, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState<T = f32> {
    steps: BTreeMap<String, u64>,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        Self {
            steps: BTreeMap::new(),
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

/// Applies one descent step to every tensor in `params`; `grads` must hold
/// a same-shaped gradient for each (extra gradient entries are ignored).
pub fn step<T: Scalar>(
    params: &mut ParameterSet<T>,
    grads: &ParameterSet<T>,
    opt: &OptimizerConfig,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    opt.validate()?;
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                name.clone(),
                format!("gradient shape {:?} vs parameter {:?}", g.shape(), p.shape()),
            ));
        }
    }
    let scale = match opt.clip_norm {
        Some(max) => {
            let norm: f64 = params
                .names()
                .map(|n| {
                    grads.get(n).expect("checked").data().iter().map(|v| {
                        let x = v.as_f64();
                        x * x
                    })
                    .sum::<f64>()
                })
                .sum::<f64>()
                .sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let lr = T::lit(opt.learning_rate);
    let scale = T::lit(scale);
    for (name, p) in params.iter_mut() {
        let g: &Tensor<T> = grads.get(name).expect("checked");
        match opt.kind {
            OptimizerKind::Sgd => {
                for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d * scale;
                }
            }
            OptimizerKind::Adam => {
                let t = state.steps.entry(name.clone()).or_insert(0);
                *t += 1;
                let n = p.len();
                let m = state
                    .first
                    .entry(name.clone())
                    .or_insert_with(|| vec![T::zero(); n]);
                let v = state
                    .second
                    .entry(name.clone())
                    .or_insert_with(|| vec![T::zero(); n]);
                let b1 = T::lit(opt.beta1);
                let b2 = T::lit(opt.beta2);
                let c1 = T::lit(1.0 - opt.beta1.powi(*t as i32));
                let c2 = T::lit(1.0 - opt.beta2.powi(*t as i32));
                let eps = T::lit(opt.eps);
                for (((w, &d), mi), vi) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    let d = d * scale;
                    *mi = b1 * *mi + (T::one() - b1) * d;
                    *vi = b2 * *vi + (T::one() - b2) * d * d;
                    let m_hat = *mi / c1;
                    let v_hat = *vi / c2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f32) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        p
    }

    #[test]
    fn sgd_step_definition() {
        let mut p = single(0.5);
        step(&mut p, &single(1.0), &OptimizerConfig::sgd(0.1), &mut OptimizerState::new()).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.4).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for opt in [OptimizerConfig::sgd(0.3), OptimizerConfig::adam(0.01, 0.9, 0.999)] {
            let mut p = single(0.25);
            let mut st = OptimizerState::new();
            for _ in 0..3 {
                step(&mut p, &single(0.0), &opt, &mut st).unwrap();
            }
            assert_eq!(p.get("w").unwrap().data()[0], 0.25);
        }
    }

    #[test]
    fn adam_first_step_magnitude() {
        // m_hat = g, v_hat = g^2, so the first step is lr * g / (|g| + eps)
        let expected = -0.001 * 0.5 / (0.5 + 1e-8);
        let mut p = ParameterSet::<f64>::new();
        p.insert("w", Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        let mut g = ParameterSet::<f64>::new();
        g.insert("w", Tensor::new(vec![1], vec![0.5]).unwrap()).unwrap();
        step(&mut p, &g, &OptimizerConfig::adam(0.001, 0.9, 0.999), &mut OptimizerState::new())
            .unwrap();
        let delta = p.get("w").unwrap().data()[0];
        assert!((delta - expected).abs() < 1e-15);
        assert!((delta + 0.001).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = single(0.5);
        let mut g = ParameterSet::new();
        g.insert("w", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
        assert!(step(&mut p, &g, &OptimizerConfig::sgd(0.1), &mut OptimizerState::new()).is_err());
    }

    #[test]
    fn clip_norm_rescales() {
        let mut p = single(0.0);
        let mut opt = OptimizerConfig::sgd(1.0);
        opt.clip_norm = Some(1.0);
        step(&mut p, &single(10.0), &opt, &mut OptimizerState::new()).unwrap();
        assert!((p.get("w").unwrap().data()[0] + 1.0).abs() < 1e-6);
    }
}
