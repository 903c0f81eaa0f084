use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, params: &ParamStore<S>) -> Self {
        let zeros = |(_, t): (&str, &Tensor<S>)| Tensor::zeros(t.shape());
        Self {
            config,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }

    /// Rebuilds an optimizer from saved moments (checkpoint resume).
    pub fn from_parts(
        config: AdamConfig,
        step: u64,
        first: Vec<Tensor<S>>,
        second: Vec<Tensor<S>>,
    ) -> Result<Self> {
        if first.len() != second.len() {
            return Err(Error::Config("moment buffer count mismatch".into()));
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<S>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<S>] {
        &self.second
    }

    /// Applies one update. Slots with no gradient are left untouched.
    ///
    /// A non-finite gradient aborts before any parameter is modified.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Option<Tensor<S>>]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, store has {}, got {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (slot, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != params.at(slot).shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: params.at(slot).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if let Some(pos) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} has {} at flat index {pos} (step {})",
                    params.name(slot),
                    g.data()[pos],
                    self.step + 1
                )));
            }
        }

        self.step += 1;
        let c = self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let t = self.step as i32;
        let bc1 = S::one() - S::of(c.beta1.powi(t));
        let bc2 = S::one() - S::of(c.beta2.powi(t));
        let lr = S::of(c.lr);
        let eps = S::of(c.epsilon);

        for (slot, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.first[slot].data_mut();
            let v = self.second[slot].data_mut();
            let p = params.at_mut(slot).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (S::one() - b1) * gi;
                v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(x)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_store(1.5);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Some(Tensor::scalar(0.0))]).unwrap();
        assert_eq!(p.at(0).data(), &[1.5]);
    }

    #[test]
    fn first_step_is_a_bias_corrected_unit_step() {
        let mut p = scalar_store(0.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &p);
        adam.step(&mut p, &[Some(Tensor::scalar(1.0))]).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = −lr / (1 + ε)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.at(0).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut p = scalar_store(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &p);
        for _ in 0..100 {
            let x = p.at(0).data()[0];
            adam.step(&mut p, &[Some(Tensor::scalar(2.0 * x))]).unwrap();
        }
        assert!(p.at(0).data()[0].abs() < 0.05, "{:?}", p.at(0));
    }

    #[test]
    fn nan_gradient_halts_without_update() {
        let mut p = scalar_store(2.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let err = adam.step(&mut p, &[Some(Tensor::scalar(f64::NAN))]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("x")));
        assert_eq!(p.at(0).data(), &[2.0]);
        assert_eq!(adam.step_count(), 0);
    }
}
