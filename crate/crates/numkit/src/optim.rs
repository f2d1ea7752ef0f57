use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::array::RealArray;
use crate::error::{shape_err, NumError, Result};
use crate::params::{GradientRecord, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam moment accumulators. Parameters absent from a gradient record are
/// treated as having a zero gradient for that step.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update of `params` in place.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradientRecord) -> Result<()> {
        grads.check_against(params)?;
        if grads.iter().any(|(_, g)| !g.all_finite()) {
            return Err(NumError::NonFinite {
                op: "optimizer_step",
            });
        }
        for (name, m) in &self.first {
            let p = params.require(name)?;
            if p.len() != m.len() {
                return Err(shape_err(
                    "optimizer_step",
                    format!(
                        "moment for {name} has {} values, param {}",
                        m.len(),
                        p.len()
                    ),
                ));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let grad = grads.get(&name);
            if grad.is_none() && !self.first.contains_key(&name) {
                // never seen a gradient: nothing to update
                continue;
            }
            let p = params.get_mut(&name).expect("name from params");
            let n = p.len();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; n]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; n]);
            let gd = grad.map(RealArray::data);
            for i in 0..n {
                let gi = gd.map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn single(name: &str, v: f64) -> ParamSet {
        [(name.to_string(), RealArray::scalar(v))]
            .into_iter()
            .collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single("p", 1.5);
        let before = p.clone();
        let mut st = OptimizerState::new(AdamConfig::default());
        let zeros = GradientRecord::zeros_for(&p);
        st.step(&mut p, &zeros).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn one_step_descends_on_square() {
        let mut p = single("p", 1.0);
        let mut st = OptimizerState::new(AdamConfig::with_lr(0.01));
        let mut g = Graph::new();
        let v = g.param(&p, "p").unwrap();
        let sq = g.mul(v, v).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        st.step(&mut p, &grads).unwrap();
        let after = p.get("p").unwrap().item();
        assert!(after.abs() < 1.0);
    }

    #[test]
    fn step_is_deterministic() {
        let p0 = single("p", 0.3);
        let grads = GradientRecord::from_map(
            0.0,
            [("p".to_string(), RealArray::scalar(0.7))]
                .into_iter()
                .collect(),
        );
        let st0 = OptimizerState::new(AdamConfig::default());
        let run = || {
            let (mut p, mut st) = (p0.clone(), st0.clone());
            st.step(&mut p, &grads).unwrap();
            (p, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(sa, sb);
    }

    #[test]
    fn mismatched_gradient_shape_is_rejected() {
        let mut p = single("p", 0.3);
        let grads = GradientRecord::from_map(
            0.0,
            [("p".to_string(), RealArray::zeros(&[2]))]
                .into_iter()
                .collect(),
        );
        let mut st = OptimizerState::new(AdamConfig::default());
        assert!(st.step(&mut p, &grads).is_err());
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn convex_quadratic_converges() {
        // f(x, y) = (x - 1)^2 + 3 (y + 2)^2 with minimum 0 at (1, -2)
        let mut p: ParamSet = [("xy".to_string(), RealArray::vector(vec![4.0, 3.0]).unwrap())]
            .into_iter()
            .collect();
        let mut st = OptimizerState::new(AdamConfig::with_lr(0.1));
        let loss = |p: &ParamSet| -> (f64, GradientRecord) {
            let mut g = Graph::new();
            let v = g.param(p, "xy").unwrap();
            let target = g.constant(RealArray::vector(vec![1.0, -2.0]).unwrap());
            let d = g.sub(v, target).unwrap();
            let w = g.constant(RealArray::vector(vec![1.0, 3.0]).unwrap());
            let d2 = g.mul(d, d).unwrap();
            let wd = g.mul(d2, w).unwrap();
            let l = g.sum(wd).unwrap();
            (g.scalar(l), g.backward(l).unwrap())
        };
        for _ in 0..200 {
            let (_, grads) = loss(&p);
            st.step(&mut p, &grads).unwrap();
        }
        assert!(loss(&p).0 < 1e-6, "final loss {}", loss(&p).0);
    }
}
