//! Continuous fuzzy logic over [0, 1], Booleanization and conjunctive rules.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default Booleanization threshold. Values at the threshold map to true.
pub const BOOLEAN_THRESHOLD: f64 = 0.5;

/// A truth degree in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct TruthValue(f64);

impl TruthValue {
    pub const FALSE: Self = Self(0.0);
    pub const TRUE: Self = Self(1.0);

    pub fn new(v: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&v) {
            Ok(Self(v))
        } else {
            Err(Error::OutOfRange(v))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn from_bool(b: bool) -> Self {
        if b {
            Self::TRUE
        } else {
            Self::FALSE
        }
    }
}

impl TryFrom<f64> for TruthValue {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TruthValue> for f64 {
    fn from(v: TruthValue) -> f64 {
        v.0
    }
}

/// Choice of t-norm / t-conorm pair. Negation is always `1 - x`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Logic {
    /// min / max
    #[default]
    Godel,
    /// a·b / a + b − a·b
    Product,
}

impl Logic {
    pub fn neg(self, a: TruthValue) -> TruthValue {
        TruthValue(1.0 - a.0)
    }

    pub fn and(self, a: TruthValue, b: TruthValue) -> TruthValue {
        match self {
            Logic::Godel => TruthValue(a.0.min(b.0)),
            Logic::Product => TruthValue(a.0 * b.0),
        }
    }

    pub fn or(self, a: TruthValue, b: TruthValue) -> TruthValue {
        match self {
            Logic::Godel => TruthValue(a.0.max(b.0)),
            Logic::Product => TruthValue((a.0 + b.0 - a.0 * b.0).clamp(0.0, 1.0)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FuzzyOps {
    pub neg: TruthValue,
    pub and: TruthValue,
    pub or: TruthValue,
}

/// Negation of `a` and the conjunction/disjunction of `a` and `b` on raw reals.
pub fn fuzzy_ops(a: f64, b: f64, logic: Logic) -> Result<FuzzyOps> {
    let (a, b) = (TruthValue::new(a)?, TruthValue::new(b)?);
    Ok(FuzzyOps {
        neg: logic.neg(a),
        and: logic.and(a, b),
        or: logic.or(a, b),
    })
}

pub fn booleanize(v: TruthValue, threshold: f64) -> bool {
    v.0 >= threshold
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Literal {
    pub concept: usize,
    pub positive: bool,
}

impl Literal {
    pub fn pos(concept: usize) -> Self {
        Self {
            concept,
            positive: true,
        }
    }

    pub fn neg(concept: usize) -> Self {
        Self {
            concept,
            positive: false,
        }
    }
}

/// `y_class ⇐ l_1 ∧ … ∧ l_k`, literals kept sorted by concept index.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConjunctiveRule {
    pub class: usize,
    literals: Vec<Literal>,
    pub support: usize,
}

impl ConjunctiveRule {
    pub fn new(class: usize, mut literals: Vec<Literal>) -> Result<Self> {
        literals.sort();
        if let Some(w) = literals.windows(2).find(|w| w[0].concept == w[1].concept) {
            return Err(Error::InvalidConfig(format!(
                "concept {} appears twice in one rule",
                w[0].concept
            )));
        }
        Ok(Self {
            class,
            literals,
            support: 0,
        })
    }

    pub fn literals(&self) -> &[Literal] {
        &self.literals
    }

    pub fn is_empty(&self) -> bool {
        self.literals.is_empty()
    }

    /// Same class and literals, ignoring support.
    pub fn same_rule(&self, other: &Self) -> bool {
        self.class == other.class && self.literals == other.literals
    }

    /// True when no Boolean assignment can satisfy both rules.
    pub fn conflicts_with(&self, other: &Self) -> bool {
        self.literals.iter().any(|a| {
            other
                .literals
                .iter()
                .any(|b| a.concept == b.concept && a.positive != b.positive)
        })
    }

    pub fn check_indices(&self, num_concepts: usize) -> Result<()> {
        match self.literals.iter().find(|l| l.concept >= num_concepts) {
            Some(l) => Err(Error::ConceptIndex {
                index: l.concept,
                size: num_concepts,
            }),
            None => Ok(()),
        }
    }
}

/// Gödel evaluation of a rule body; the empty conjunction is true.
pub fn eval_rule(rule: &ConjunctiveRule, truths: &[TruthValue]) -> Result<TruthValue> {
    eval_rule_with(rule, truths, Logic::Godel)
}

pub fn eval_rule_with(
    rule: &ConjunctiveRule,
    truths: &[TruthValue],
    logic: Logic,
) -> Result<TruthValue> {
    rule.check_indices(truths.len())?;
    Ok(rule.literals.iter().fold(TruthValue::TRUE, |acc, l| {
        let t = truths[l.concept];
        let lit = if l.positive { t } else { logic.neg(t) };
        logic.and(acc, lit)
    }))
}

/// Mean with standard error of the mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStat {
    pub mean: f64,
    pub std_err: f64,
}

/// Disagreement rate between Booleanized-rule and fuzzy predictions.
/// The standard error uses the sample standard deviation (n − 1).
pub fn rule_error_rate(boolean_preds: &[bool], fuzzy_preds: &[bool]) -> Result<ErrorStat> {
    if boolean_preds.is_empty() {
        return Err(Error::Empty("rule predictions"));
    }
    if boolean_preds.len() != fuzzy_preds.len() {
        return Err(Error::DimensionMismatch {
            what: "fuzzy predictions".into(),
            expected: boolean_preds.len(),
            actual: fuzzy_preds.len(),
        });
    }
    let n = boolean_preds.len() as f64;
    let flags: Vec<f64> = boolean_preds
        .iter()
        .zip(fuzzy_preds)
        .map(|(a, b)| if a != b { 1.0 } else { 0.0 })
        .collect();
    let mean = flags.iter().sum::<f64>() / n;
    let std_err = if flags.len() < 2 {
        0.0
    } else {
        let var = flags.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0);
        var.sqrt() / n.sqrt()
    };
    Ok(ErrorStat { mean, std_err })
}

/// Renders `y_j ⇐ A ∧ ¬B`, or `y_j ⇐ ⊤` for an empty rule.
pub fn format_rule<S: AsRef<str>>(rule: &ConjunctiveRule, concept_names: &[S]) -> Result<String> {
    rule.check_indices(concept_names.len())?;
    let mut out = format!("y_{} ⇐ ", rule.class);
    if rule.literals.is_empty() {
        out.push('⊤');
        return Ok(out);
    }
    for (k, l) in rule.literals.iter().enumerate() {
        if k > 0 {
            out.push_str(" ∧ ");
        }
        let sign = if l.positive { "" } else { "¬" };
        let _ = write!(out, "{sign}{}", concept_names[l.concept].as_ref());
    }
    Ok(out)
}

/// Rules grouped per class, each group ordered by descending support.
#[derive(Clone, Debug, PartialEq)]
pub struct RuleSet {
    pub per_class: Vec<Vec<ConjunctiveRule>>,
    pub fidelity: ErrorStat,
}

impl RuleSet {
    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    /// The highest-support rule for `class`.
    pub fn top_rule(&self, class: usize) -> Option<&ConjunctiveRule> {
        self.per_class.get(class).and_then(|r| r.first())
    }

    pub fn to_document<S: AsRef<str>>(&self, concept_names: &[S]) -> Result<RuleSetDocument> {
        let classes = self
            .per_class
            .iter()
            .enumerate()
            .map(|(class, rules)| {
                let rules = rules
                    .iter()
                    .map(|r| {
                        Ok(RuleDocument {
                            text: format_rule(r, concept_names)?,
                            support: r.support,
                            literals: r
                                .literals
                                .iter()
                                .map(|l| LiteralDocument {
                                    index: l.concept,
                                    concept: concept_names[l.concept].as_ref().to_string(),
                                    positive: l.positive,
                                })
                                .collect(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ClassRulesDocument { class, rules })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RuleSetDocument {
            num_classes: self.per_class.len(),
            fidelity: self.fidelity,
            classes,
        })
    }

    pub fn from_document(doc: &RuleSetDocument) -> Result<Self> {
        let mut per_class = vec![Vec::new(); doc.num_classes];
        for group in &doc.classes {
            if group.class >= doc.num_classes {
                return Err(Error::ClassIndex {
                    index: group.class,
                    classes: doc.num_classes,
                });
            }
            for r in &group.rules {
                let lits = r
                    .literals
                    .iter()
                    .map(|l| Literal {
                        concept: l.index,
                        positive: l.positive,
                    })
                    .collect();
                let mut rule = ConjunctiveRule::new(group.class, lits)?;
                rule.support = r.support;
                per_class[group.class].push(rule);
            }
        }
        Ok(Self {
            per_class,
            fidelity: doc.fidelity,
        })
    }
}

/// JSON form of a [`RuleSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleSetDocument {
    pub num_classes: usize,
    pub fidelity: ErrorStat,
    pub classes: Vec<ClassRulesDocument>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRulesDocument {
    pub class: usize,
    pub rules: Vec<RuleDocument>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleDocument {
    pub text: String,
    pub support: usize,
    pub literals: Vec<LiteralDocument>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiteralDocument {
    pub index: usize,
    pub concept: String,
    pub positive: bool,
}
