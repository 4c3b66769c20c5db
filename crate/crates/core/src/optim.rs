//! AdamW over the flat parameter vector.
//!
//! Decoupled weight decay: the decay term scales the parameter directly and
//! never passes through the moment estimates, so regularization strength is
//! independent of the adaptive step size. Moments are kept in f64 regardless
//! of model precision; an f32 model still accumulates its optimizer state
//! without drift, and the final write-back is the only rounding point.
//!
//! The learning rate is constant — no warmup, no schedule. Betas and epsilon
//! are fixed at 0.9 / 0.999 / 1e-8; decay applies uniformly to every
//! parameter including biases and normalization gains.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Optimizer state: first/second moment per parameter plus the step counter
/// driving bias correction. Lazily sized on the first step so one optimizer
/// value can be declared before the store is populated.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Result<Self> {
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(Error::Validation(format!(
                "learning rate must be finite and non-negative, got {learning_rate}"
            )));
        }
        if !weight_decay.is_finite() || weight_decay < 0.0 {
            return Err(Error::Validation(format!(
                "weight decay must be finite and non-negative, got {weight_decay}"
            )));
        }
        Ok(AdamW {
            learning_rate,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            steps: 0,
        })
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update in place. `grads` must align with the store's flat
    /// layout (as returned by a backward sweep). A non-finite gradient entry
    /// aborts before any state is touched, naming the owning parameter —
    /// letting it through would poison the moment vectors for every later
    /// step even if the caller recovers.
    pub fn step<R: Real>(&mut self, store: &mut ParamStore<R>, grads: &[R]) -> Result<()> {
        let n = store.flat_len();
        if grads.len() != n {
            return Err(Error::Validation(format!(
                "gradient has {} entries for {} parameters",
                grads.len(),
                n
            )));
        }
        if self.m.is_empty() {
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
        } else if self.m.len() != n {
            return Err(Error::Validation(format!(
                "optimizer state sized for {} parameters, store has {}",
                self.m.len(),
                n
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.cast_f64().is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} at flat index {} (parameter {})",
                    g,
                    i,
                    store.owner_of(i)
                )));
            }
        }

        self.steps += 1;
        let bc1 = 1.0 - BETA1.powi(self.steps as i32);
        let bc2 = 1.0 - BETA2.powi(self.steps as i32);
        let mut flat: Vec<f64> = store.read_flat().iter().map(|x| x.cast_f64()).collect();
        for i in 0..n {
            let g = grads[i].cast_f64();
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            flat[i] -= self.learning_rate * (m_hat / (v_hat.sqrt() + EPSILON) + self.weight_decay * flat[i]);
        }
        let back: Vec<R> = flat.iter().map(|&x| R::cast_from(x)).collect();
        store.write_flat(&back)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn small_store(values: &[f64]) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store
            .insert("p", Tensor::from_f64(1, values.len(), values).unwrap())
            .unwrap();
        store
    }

    #[test]
    fn zero_learning_rate_with_zero_decay_is_identity() {
        let init = [0.3, -1.7, 0.0, 42.0];
        let mut store = small_store(&init);
        let mut opt = AdamW::new(0.0, 0.0).unwrap();
        for _ in 0..5 {
            opt.step(&mut store, &[1.0, -2.0, 0.5, 3.0]).unwrap();
        }
        assert_eq!(store.read_flat(), init.to_vec());
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let theta0 = 0.5;
        let g = 0.25;
        let lr = 1e-2;
        let wd = 0.1;
        let mut store = small_store(&[theta0]);
        let mut opt = AdamW::new(lr, wd).unwrap();
        opt.step(&mut store, &[g]).unwrap();

        // First step: bias correction cancels the (1 - beta) factors exactly,
        // so m_hat = g and v_hat = g^2.
        let expected = theta0 - lr * (g / (g.abs() + EPSILON) + wd * theta0);
        let got = store.read_flat()[0];
        assert!((got - expected).abs() < 1e-15, "got {got}, expected {expected}");
    }

    #[test]
    fn two_steps_match_hand_computation() {
        let theta0 = -0.8;
        let (g1, g2) = (0.6, -0.3);
        let lr = 5e-3;
        let mut store = small_store(&[theta0]);
        let mut opt = AdamW::new(lr, 0.0).unwrap();
        opt.step(&mut store, &[g1]).unwrap();
        opt.step(&mut store, &[g2]).unwrap();

        let mut m = 0.0;
        let mut v = 0.0;
        let mut theta = theta0;
        for (t, g) in [(1, g1), (2, g2)] {
            m = BETA1 * m + (1.0 - BETA1) * g;
            v = BETA2 * v + (1.0 - BETA2) * g * g;
            let m_hat = m / (1.0 - BETA1.powi(t));
            let v_hat = v / (1.0 - BETA2.powi(t));
            theta -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
        let got = store.read_flat()[0];
        assert!((got - theta).abs() < 1e-15, "got {got}, expected {theta}");
    }

    #[test]
    fn decay_is_decoupled_from_moments() {
        // With zero gradient the adaptive term is exactly zero (0/ (0 + eps)),
        // leaving pure multiplicative shrinkage per step.
        let theta0 = 2.0;
        let lr = 1e-2;
        let wd = 0.5;
        let mut store = small_store(&[theta0]);
        let mut opt = AdamW::new(lr, wd).unwrap();
        let mut expected = theta0;
        for _ in 0..3 {
            opt.step(&mut store, &[0.0]).unwrap();
            expected -= lr * wd * expected;
        }
        let got = store.read_flat()[0];
        assert!((got - expected).abs() < 1e-15, "got {got}, expected {expected}");
    }

    #[test]
    fn identical_runs_produce_identical_parameters() {
        let init = [0.1, -0.2, 0.33, 1.5, -2.25];
        let grads: Vec<Vec<f64>> = (0..7)
            .map(|t| (0..5).map(|i| ((t * 5 + i) as f64 * 0.37).sin()).collect())
            .collect();
        let run = || {
            let mut store = small_store(&init);
            let mut opt = AdamW::new(3e-3, 0.02).unwrap();
            for g in &grads {
                opt.step(&mut store, g).unwrap();
            }
            store.read_flat()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn non_finite_gradient_is_rejected_and_state_untouched() {
        let mut store = small_store(&[1.0, 2.0]);
        let mut opt = AdamW::new(1e-3, 0.0).unwrap();
        opt.step(&mut store, &[0.1, 0.1]).unwrap();
        let before = store.read_flat();

        let err = opt.step(&mut store, &[0.1, f64::NAN]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("flat index 1"), "unhelpful message: {msg}");
        assert!(msg.contains('p'), "should name the parameter: {msg}");
        assert_eq!(opt.steps(), 1, "failed step must not advance the counter");
        assert_eq!(store.read_flat(), before);

        // Recovery with a clean gradient still works.
        opt.step(&mut store, &[0.1, 0.1]).unwrap();
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn mismatched_gradient_length_is_rejected() {
        let mut store = small_store(&[1.0, 2.0, 3.0]);
        let mut opt = AdamW::new(1e-3, 0.0).unwrap();
        assert!(opt.step(&mut store, &[0.1, 0.2]).is_err());
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        assert!(AdamW::new(-1e-3, 0.0).is_err());
        assert!(AdamW::new(f64::NAN, 0.0).is_err());
        assert!(AdamW::new(1e-3, -0.1).is_err());
        assert!(AdamW::new(1e-3, f64::INFINITY).is_err());
    }

    #[test]
    fn f32_store_keeps_f64_moments() {
        // A gradient small enough to underflow f32 squared still moves the
        // second moment, because accumulation happens in f64.
        let mut store: ParamStore<f32> = ParamStore::new();
        store
            .insert("w", Tensor::from_f64(1, 1, &[1.0]).unwrap())
            .unwrap();
        let mut opt = AdamW::new(1e-2, 0.0).unwrap();
        let g = 1e-25f32; // g*g underflows to 0 in f32, not in f64
        opt.step(&mut store, &[g]).unwrap();
        let got = store.read_flat()[0] as f64;
        // v_hat = g^2 in f64, so the update is lr * g/( |g| + eps ) ~ lr * 1e-17,
        // far below f32 resolution; the parameter must stay put but the step
        // itself must succeed.
        assert!((got - 1.0).abs() < 1e-6);
    }
}
