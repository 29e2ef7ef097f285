use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    /// Inverse-time decay per update: `lr / (1 + decay·t)`.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Updates applied so far.
    pub t: u64,
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &IndexMap<String, Tensor>, config: AdamConfig) -> Self {
        let zeros: IndexMap<String, Tensor> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        AdamState {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Rate used by the next update.
    pub fn current_lr(&self) -> f64 {
        self.config.learning_rate / (1.0 + self.config.decay * self.t as f64)
    }

    /// One bias-corrected update. Nothing changes if any gradient is non-finite.
    pub fn step(&mut self, params: &mut IndexMap<String, Tensor>, grads: &IndexMap<String, Tensor>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for parameter {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::dim(
                    "adam",
                    format!("gradient of {name} is {:?}, parameter is {:?}", g.shape(), p.shape()),
                ));
            }
            if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("gradient of {name} contains {bad}")));
            }
        }
        let c = self.config;
        let lr = self.current_lr();
        let step = (self.t + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(step);
        let bc2 = 1.0 - c.beta2.powi(step);
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self.m.get_mut(name).expect("moment for every parameter").data_mut();
            let v = self.v.get_mut(name).expect("moment for every parameter").data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
        self.t += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: Vec<f64>) -> IndexMap<String, Tensor> {
        [(name.to_string(), Tensor::vector(v))].into_iter().collect()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = one("w", vec![1.0, -2.0]);
        let before = p.clone();
        let mut s = AdamState::new(&p, AdamConfig::default());
        s.step(&mut p, &one("w", vec![0.0, 0.0])).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = one("w", vec![0.0, 0.0]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        s.step(&mut p, &one("w", vec![3.0, -0.5])).unwrap();
        // m̂ = g and v̂ = g², so the step is lr·g/(|g|+ε).
        assert!((p["w"].data()[0] + 1e-3 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((p["w"].data()[1] - 1e-3 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn decayed_rate() {
        let p = one("w", vec![0.0]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        s.t = 1000;
        assert!((s.current_lr() - 1e-3 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = one("fusion1.weight", vec![0.0]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        let err = s.step(&mut p, &one("fusion1.weight", vec![f64::NAN])).unwrap_err();
        assert!(err.to_string().contains("fusion1.weight"));
        assert_eq!(s.t, 0);
    }
}
