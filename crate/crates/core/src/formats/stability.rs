//! Random L∞ perturbations of the input features.
//!
//! Each draw adds `δ = ε·(2u − 1)` with `u ~ U[0, 1)` per coordinate, so the
//! same seed at two radii yields the same directions scaled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fuzzy::BOOLEAN_THRESHOLD;
use crate::symbolic::extract_local_rule;
use crate::tensor::Tensor;
use crate::training::{argmax, forward_full, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub eps: f64,
    pub draws: usize,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            eps: 0.05,
            draws: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub config: PerturbationConfig,
    pub samples: usize,
    /// Samples whose fused-head class changes under at least one draw.
    pub class_flip_fraction: f64,
    /// Largest `‖I(x+δ) − I(x)‖∞` over samples, draws and both indicators.
    pub max_indicator_change: f64,
    /// Samples whose extracted rule changes under at least one draw.
    pub rule_change_fraction: f64,
}

pub fn perturb_stability(
    model: &ModelParams,
    dataset: &Dataset,
    cfg: &PerturbationConfig,
) -> Result<StabilityReport> {
    if !(cfg.eps.is_finite() && cfg.eps >= 0.0) {
        return Err(Error::InvalidConfig(format!("radius must be non-negative, got {}", cfg.eps)));
    }
    if cfg.draws == 0 {
        return Err(Error::InvalidConfig("at least one draw is required".into()));
    }
    let x = &dataset.features;
    let base = forward_full(model, x)?;
    let m = x.rows();
    let pred: Vec<usize> = (0..m).map(|r| argmax(base.logits.row(r))).collect();
    let rules = base
        .indicators
        .iter()
        .zip(&pred)
        .map(|(ind, &j)| extract_local_rule(ind, j, BOOLEAN_THRESHOLD))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut flipped = vec![false; m];
    let mut rule_changed = vec![false; m];
    let mut max_change = 0.0f64;
    for _ in 0..cfg.draws {
        let data: Vec<f64> = x
            .data()
            .iter()
            .map(|&v| v + cfg.eps * (2.0 * rng.gen::<f64>() - 1.0))
            .collect();
        let out = forward_full(model, &Tensor::new(x.shape().to_vec(), data)?)?;
        for s in 0..m {
            let p = argmax(out.logits.row(s));
            flipped[s] |= p != pred[s];
            let (a, b) = (&base.indicators[s], &out.indicators[s]);
            max_change = max_change
                .max(a.polarity.max_abs_diff(&b.polarity))
                .max(a.relevance.max_abs_diff(&b.relevance));
            let rule = extract_local_rule(b, p, BOOLEAN_THRESHOLD)?;
            rule_changed[s] |= !rule.same_rule(&rules[s]);
        }
    }
    let frac = |v: &[bool]| v.iter().filter(|&&b| b).count() as f64 / m as f64;
    Ok(StabilityReport {
        config: *cfg,
        samples: m,
        class_flip_fraction: frac(&flipped),
        max_indicator_change: max_change,
        rule_change_fraction: frac(&rule_changed),
    })
}
