use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            weight_decay: 5e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParameterSet) -> Self {
        Self {
            config,
            step: 0,
            first: vec![None; params.len()],
            second: vec![None; params.len()],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Moment tensors for parameter `index`, if that parameter has been updated.
    pub fn moments(&self, index: usize) -> Option<(&Tensor, &Tensor)> {
        Some((self.first.get(index)?.as_ref()?, self.second.get(index)?.as_ref()?))
    }

    pub(crate) fn restore(&mut self, step: u64, moments: Vec<Option<(Tensor, Tensor)>>) {
        self.step = step;
        let (first, second) = moments
            .into_iter()
            .map(|m| match m {
                Some((a, b)) => (Some(a), Some(b)),
                None => (None, None),
            })
            .unzip();
        self.first = first;
        self.second = second;
    }

    /// Applies one update. Parameters with no gradient, or an all-zero one,
    /// are left untouched. Any non-finite gradient aborts before mutation.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &[(usize, Tensor)]) -> Result<()> {
        for (index, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(params.name(*index).to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (index, g) in grads {
            let index = *index;
            if g.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            let w = params.value_mut(index);
            let m = self.first[index].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self.second[index].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for (((wi, &gi), mi), vi) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi + c.weight_decay * *wi;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *wi -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        params.bump_version();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;

    fn single(w: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(w)).unwrap();
        p
    }

    #[test]
    fn defaults_match_training_recipe() {
        let c = AdamConfig::default();
        assert_eq!(c.lr, 5e-5);
        assert_eq!(c.weight_decay, 5e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.7);
        let mut opt = Adam::new(
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            &p,
        );
        opt.step(&mut p, &[(0, Tensor::scalar(0.0))]).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.7);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn one_step_on_square_decreases() {
        let mut p = single(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let f = |p: &ParameterSet| p.get("w").unwrap().item().powi(2);
        let before = f(&p);
        let tape = Tape::new();
        let w = tape.param(&p, "w").unwrap();
        let loss = w.mul(w).unwrap();
        let grads = tape.backward(loss).into_params();
        drop(tape);
        opt.step(&mut p, &grads).unwrap();
        assert!(f(&p) < before);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let err = opt.step(&mut p, &[(0, Tensor::scalar(f64::NAN))]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(p.get("w").unwrap().item(), 1.0);
    }
}
