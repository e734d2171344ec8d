use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::params::{ParamGrads, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for every parameter in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Applies one update in place and advances the step counter.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads.get(name).ok_or_else(|| Error::UnboundInput(name.clone()))?;
            for (what, t) in [("gradient", g), ("first moment", &self.first[name])] {
                if t.shape() != p.shape() {
                    return Err(Error::DimensionMismatch {
                        what: format!("{what} of `{name}`"),
                        expected: p.len(),
                        actual: t.len(),
                    });
                }
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
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.first.get_mut(name).expect("moment");
            let v = self.second.get_mut(name).expect("moment");
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut ParamStore, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(values.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(&[1.5, -2.0]);
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let g: ParamGrads = [("w".to_string(), Tensor::zeros(&[2]))].into();
        for _ in 0..3 {
            st.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        // After one step m_hat = g and v_hat = g^2, so the update is lr * g / (|g| + eps).
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut p = store(&[0.0, 0.0]);
        let mut st = AdamState::new(cfg, &p);
        let g: ParamGrads = [("w".to_string(), Tensor::vector(vec![2.0, -0.5]).unwrap())].into();
        st.step(&mut p, &g).unwrap();
        let expected = [-0.01 * 2.0 / (2.0 + 1e-8), 0.01 * 0.5 / (0.5 + 1e-8)];
        for (a, e) in p.get("w").unwrap().data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    #[test]
    fn decreases_convex_quadratic() {
        // f(w) = (w - 3)^2
        let f = |w: f64| (w - 3.0) * (w - 3.0);
        let mut p = store(&[0.0]);
        let mut st = AdamState::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            &p,
        );
        let mut last = f(0.0);
        for _ in 0..2 {
            let w = p.get("w").unwrap().data()[0];
            let g: ParamGrads = [(
                "w".to_string(),
                Tensor::vector(vec![2.0 * (w - 3.0)]).unwrap(),
            )]
            .into();
            st.step(&mut p, &g).unwrap();
            let now = f(p.get("w").unwrap().data()[0]);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = store(&[0.0, 0.0]);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let g: ParamGrads = [("w".to_string(), Tensor::zeros(&[3]))].into();
        assert!(st.step(&mut p, &g).is_err());
        assert_eq!(st.step, 0);
    }
}
