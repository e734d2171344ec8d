//! Planted-rule synthetic datasets.
//!
//! Each class owns one conjunctive rule over the concepts. A sample of class
//! `j` fixes the concepts named by rule `j` and draws the rest uniformly; its
//! feature vector is a fixed random affine map of the concept bits plus
//! Gaussian noise.

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alignment::ConceptLabelMatrix;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fuzzy::{ConjunctiveRule, Literal};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_concepts: usize,
    pub num_classes: usize,
    /// One rule per class, in class order. `None` uses [`default_rules`].
    pub rules: Option<Vec<ConjunctiveRule>>,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_concepts: 4,
            num_classes: 2,
            rules: None,
            samples_per_class: 200,
            feature_dim: 16,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// Class `j ⇐ c_{(j−1) mod C} ∧ ¬c_j` for up to three classes; beyond that,
/// class `j` is its binary code over the first `⌈log2 C⌉` concepts.
pub fn default_rules(num_concepts: usize, num_classes: usize) -> Result<Vec<ConjunctiveRule>> {
    if num_classes < 2 {
        return Err(Error::InvalidConfig("at least two classes are required".into()));
    }
    if num_classes <= 3 {
        if num_concepts < num_classes {
            return Err(Error::InvalidConfig(format!(
                "{num_classes} classes need at least {num_classes} concepts"
            )));
        }
        return (0..num_classes)
            .map(|j| {
                let prev = (j + num_classes - 1) % num_classes;
                ConjunctiveRule::new(j, vec![Literal::pos(prev), Literal::neg(j)])
            })
            .collect();
    }
    let bits = usize::BITS - (num_classes - 1).leading_zeros();
    let bits = bits as usize;
    if num_concepts < bits {
        return Err(Error::InvalidConfig(format!(
            "{num_classes} classes need at least {bits} concepts"
        )));
    }
    (0..num_classes)
        .map(|j| {
            let lits = (0..bits)
                .map(|b| Literal {
                    concept: b,
                    positive: (j >> b) & 1 == 1,
                })
                .collect();
            ConjunctiveRule::new(j, lits)
        })
        .collect()
}

impl SyntheticSpec {
    pub fn resolved_rules(&self) -> Result<Vec<ConjunctiveRule>> {
        match &self.rules {
            Some(r) => Ok(r.clone()),
            None => default_rules(self.num_concepts, self.num_classes),
        }
    }

    pub fn validate(&self) -> Result<Vec<ConjunctiveRule>> {
        if self.num_concepts == 0 || self.feature_dim == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidConfig(
                "concepts, feature dim and samples per class must be positive".into(),
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise standard deviation must be non-negative, got {}",
                self.noise_std
            )));
        }
        let rules = self.resolved_rules()?;
        if rules.len() != self.num_classes {
            return Err(Error::DimensionMismatch {
                what: "planted rule count".into(),
                expected: self.num_classes,
                actual: rules.len(),
            });
        }
        for (j, r) in rules.iter().enumerate() {
            if r.class != j {
                return Err(Error::InvalidConfig(format!(
                    "rule at position {j} is for class {}",
                    r.class
                )));
            }
            r.check_indices(self.num_concepts)?;
        }
        for a in 0..rules.len() {
            for b in a + 1..rules.len() {
                if !rules[a].conflicts_with(&rules[b]) {
                    return Err(Error::OverlappingRules(a, b));
                }
            }
        }
        Ok(rules)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub rules: Vec<ConjunctiveRule>,
    /// The affine map `features = bits · weights + bias (+ noise)`, `N × F`.
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Classical truth of a rule on a bit vector.
pub fn rule_holds(rule: &ConjunctiveRule, bits: &[bool]) -> bool {
    rule.literals().iter().all(|l| bits[l.concept] == l.positive)
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let rules = spec.validate()?;
    let (n, f, c) = (spec.num_concepts, spec.feature_dim, spec.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let weights: Vec<f64> = (0..n * f).map(|_| StandardNormal.sample(&mut rng)).collect();
    let bias: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let mut samples: Vec<(usize, Vec<bool>)> = Vec::with_capacity(c * spec.samples_per_class);
    for (j, rule) in rules.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let mut bits: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            for l in rule.literals() {
                bits[l.concept] = l.positive;
            }
            samples.push((j, bits));
        }
    }
    samples.shuffle(&mut rng);

    let m = samples.len();
    let mut feats = Vec::with_capacity(m * f);
    for (_, bits) in &samples {
        for k in 0..f {
            let mut v = bias[k];
            for (i, &b) in bits.iter().enumerate() {
                if b {
                    v += weights[i * f + k];
                }
            }
            feats.push(v + noise.sample(&mut rng));
        }
    }
    let width = m.to_string().len().max(4);
    let dataset = Dataset::new(
        (0..m).map(|i| format!("s{i:0width$}")).collect(),
        Tensor::new(vec![m, f], feats)?,
        samples.iter().map(|s| s.0).collect(),
        Some(ConceptLabelMatrix::new(
            m,
            n,
            samples.iter().flat_map(|s| s.1.iter().copied()).collect(),
        )?),
        (0..n).map(|i| format!("c{i}")).collect(),
        (0..c).map(|j| format!("class{j}")).collect(),
    )?;
    Ok(SyntheticData {
        dataset,
        rules,
        weights: Tensor::new(vec![n, f], weights)?,
        bias: Tensor::new(vec![f], bias)?,
    })
}
