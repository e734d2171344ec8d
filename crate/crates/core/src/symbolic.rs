//! Per-class polarity (Φ) and relevance (Ψ) networks, min/max aggregation
//! into class truth degrees, and rule extraction.
//!
//! Two aggregation semantics are available. `Literal` evaluates
//! `ŷ_j = min_i max(1 − I_o[i,j], I_r[i,j])`, negating polarity. `Filtered`
//! swaps the roles, `ŷ_j = min_i max(1 − I_r[i,j], I_o[i,j])`, so that an
//! irrelevant concept is the one forced to truth 1. The printed formula and
//! the accompanying prose disagree on which indicator is negated; both are
//! kept behind one switch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId, ParamStore};
use crate::encoder::glorot;
use crate::error::{Error, Result};
use crate::fuzzy::{
    booleanize, rule_error_rate, ConjunctiveRule, ErrorStat, Literal, RuleSet, TruthValue,
    BOOLEAN_THRESHOLD,
};
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Semantics {
    #[default]
    Literal,
    Filtered,
}

impl std::str::FromStr for Semantics {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "filtered" => Ok(Self::Filtered),
            other => Err(Error::InvalidConfig(format!(
                "unknown semantics {other:?} (expected literal or filtered)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Net {
    Polarity,
    Relevance,
}

impl Net {
    fn prefix(self) -> &'static str {
        match self {
            Net::Polarity => "phi",
            Net::Relevance => "psi",
        }
    }
}

/// Parameter name for one layer of a class network, e.g. `phi0.w1`.
pub fn param_name(net: Net, class: usize, part: &str) -> String {
    format!("{}{class}.{part}", net.prefix())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndicatorConfig {
    pub num_concepts: usize,
    pub num_classes: usize,
    /// Concept embedding width `m`.
    pub width: usize,
    pub hidden: usize,
}

impl IndicatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_concepts == 0 || self.num_classes == 0 || self.width == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig(format!(
                "indicator dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let per_net = self.width * self.hidden + self.hidden + self.hidden + 1;
        2 * self.num_classes * per_net
    }

    pub fn init(&self, rng: &mut impl Rng, store: &mut ParamStore) -> Result<()> {
        self.validate()?;
        let (m, h) = (self.width, self.hidden);
        for j in 0..self.num_classes {
            for net in [Net::Polarity, Net::Relevance] {
                store.insert(param_name(net, j, "w1"), glorot(rng, m, h, m, h));
                store.insert(param_name(net, j, "b1"), Tensor::zeros(&[h]));
                store.insert(param_name(net, j, "w2"), glorot(rng, h, 1, h, 1));
                store.insert(param_name(net, j, "b2"), Tensor::zeros(&[1]));
            }
        }
        Ok(())
    }

    /// Applies every Φ_j and Ψ_j to `mixed` (`[B·N, m]`) and returns
    /// `[B, N]` indicator nodes per class.
    pub fn build(&self, g: &mut Graph, mixed: NodeId) -> IndicatorNodes {
        let n = self.num_concepts as isize;
        let apply = |g: &mut Graph, net: Net, j: usize| {
            let w1 = g.input(param_name(net, j, "w1"));
            let b1 = g.input(param_name(net, j, "b1"));
            let w2 = g.input(param_name(net, j, "w2"));
            let b2 = g.input(param_name(net, j, "b2"));
            let h = g.affine(mixed, w1, b1);
            let h = g.relu(h);
            let o = g.affine(h, w2, b2);
            let o = g.sigmoid(o);
            g.reshape(o, &[-1, n])
        };
        let mut polarity = Vec::with_capacity(self.num_classes);
        let mut relevance = Vec::with_capacity(self.num_classes);
        for j in 0..self.num_classes {
            polarity.push(apply(g, Net::Polarity, j));
            relevance.push(apply(g, Net::Relevance, j));
        }
        IndicatorNodes {
            polarity,
            relevance,
        }
    }
}

/// Per-class `[B, N]` indicator nodes.
#[derive(Clone, Debug)]
pub struct IndicatorNodes {
    pub polarity: Vec<NodeId>,
    pub relevance: Vec<NodeId>,
}

/// Adds the min/max aggregation over `[B, N]` indicators, giving `[B, C]`.
pub fn build_eq1(g: &mut Graph, nodes: &IndicatorNodes, semantics: Semantics) -> NodeId {
    let cols: Vec<NodeId> = nodes
        .polarity
        .iter()
        .zip(&nodes.relevance)
        .map(|(&io, &ir)| {
            let (negated, kept) = match semantics {
                Semantics::Literal => (io, ir),
                Semantics::Filtered => (ir, io),
            };
            let neg = g.one_minus(negated);
            let term = g.maximum(neg, kept);
            g.reduce_min(term, 1, true)
        })
        .collect();
    g.concat(&cols, 1)
}

/// Polarity and relevance indicators of one sample, both `N × C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndicatorMatrix {
    pub polarity: Tensor,
    pub relevance: Tensor,
}

impl IndicatorMatrix {
    pub fn new(polarity: Tensor, relevance: Tensor) -> Result<Self> {
        if polarity.rank() != 2 || polarity.shape() != relevance.shape() {
            return Err(Error::ShapeMismatch {
                node: 0,
                op: "indicator matrix",
                left: polarity.shape().to_vec(),
                right: relevance.shape().to_vec(),
            });
        }
        if let Some(&v) = polarity
            .data()
            .iter()
            .chain(relevance.data())
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::OutOfRange(v));
        }
        Ok(Self {
            polarity,
            relevance,
        })
    }

    pub fn num_concepts(&self) -> usize {
        self.polarity.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.polarity.cols()
    }

    pub fn io(&self, i: usize, j: usize) -> f64 {
        self.polarity.get(&[i, j])
    }

    pub fn ir(&self, i: usize, j: usize) -> f64 {
        self.relevance.get(&[i, j])
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes() {
            return Err(Error::ClassIndex {
                index: class,
                classes: self.num_classes(),
            });
        }
        Ok(())
    }

    /// Thresholds every entry at `threshold`, giving 0/1 indicators.
    pub fn booleanized(&self, threshold: f64) -> Self {
        let b = |v: f64| if v >= threshold { 1.0 } else { 0.0 };
        Self {
            polarity: self.polarity.map(b),
            relevance: self.relevance.map(b),
        }
    }
}

/// Indicator matrices for a batch of concept embeddings (`[N, m]` or `[B, N, m]`).
pub fn compute_indicators(
    cfg: &IndicatorConfig,
    store: &ParamStore,
    embeddings: &Tensor,
) -> Result<Vec<IndicatorMatrix>> {
    let (b, n, m) = match *embeddings.shape() {
        [n, m] => (1, n, m),
        [b, n, m] => (b, n, m),
        _ => {
            return Err(Error::DimensionMismatch {
                what: "embedding rank".into(),
                expected: 3,
                actual: embeddings.rank(),
            })
        }
    };
    if m != cfg.width || n != cfg.num_concepts {
        return Err(Error::DimensionMismatch {
            what: "concept embedding shape".into(),
            expected: cfg.num_concepts * cfg.width,
            actual: n * m,
        });
    }
    let mut g = Graph::new();
    let x = g.input("embeddings");
    let nodes = cfg.build(&mut g, x);
    let mut bind = Bindings::new();
    store.bind_into(&mut bind);
    bind.insert("embeddings".into(), embeddings.clone().reshape(vec![b * n, m])?);
    let ev = g.evaluate(&bind)?;
    indicators_from(&ev, &nodes, b, n)
}

pub(crate) fn indicators_from(
    ev: &crate::autodiff::Evaluation,
    nodes: &IndicatorNodes,
    batch: usize,
    n: usize,
) -> Result<Vec<IndicatorMatrix>> {
    let c = nodes.polarity.len();
    (0..batch)
        .map(|s| {
            let gather = |ids: &[NodeId]| {
                let mut data = vec![0.0; n * c];
                for (j, &id) in ids.iter().enumerate() {
                    let row = ev.value(id).row(s);
                    for i in 0..n {
                        data[i * c + j] = row[i];
                    }
                }
                Tensor::new(vec![n, c], data)
            };
            IndicatorMatrix::new(gather(&nodes.polarity)?, gather(&nodes.relevance)?)
        })
        .collect()
}

/// Class truth degrees `ŷ` for one sample.
pub fn aggregate_eq1(ind: &IndicatorMatrix, semantics: Semantics) -> Vec<f64> {
    (0..ind.num_classes())
        .map(|j| {
            (0..ind.num_concepts())
                .map(|i| match semantics {
                    Semantics::Literal => (1.0 - ind.io(i, j)).max(ind.ir(i, j)),
                    Semantics::Filtered => (1.0 - ind.ir(i, j)).max(ind.io(i, j)),
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Classical evaluation of the thresholded indicators for class `j`.
pub fn boolean_prediction(
    ind: &IndicatorMatrix,
    class: usize,
    semantics: Semantics,
    threshold: f64,
) -> Result<bool> {
    ind.check_class(class)?;
    let t = |v: f64| booleanize(TruthValue::new(v).expect("indicator in range"), threshold);
    Ok((0..ind.num_concepts()).all(|i| {
        let (o, r) = (t(ind.io(i, class)), t(ind.ir(i, class)));
        match semantics {
            Semantics::Literal => !o || r,
            Semantics::Filtered => !r || o,
        }
    }))
}

/// Relevant concepts (Ψ ≥ τ) with sign given by Φ ≥ τ.
pub fn extract_local_rule(ind: &IndicatorMatrix, class: usize, tau: f64) -> Result<ConjunctiveRule> {
    ind.check_class(class)?;
    let lits = (0..ind.num_concepts())
        .filter(|&i| ind.ir(i, class) >= tau)
        .map(|i| Literal {
            concept: i,
            positive: ind.io(i, class) >= tau,
        })
        .collect();
    ConjunctiveRule::new(class, lits)
}

/// Groups per-sample rules by class, counting support and ordering each
/// group by descending support (ties keep first-seen order).
pub fn aggregate_global_rules(
    rules: &[ConjunctiveRule],
    num_classes: usize,
    fidelity: ErrorStat,
) -> Result<RuleSet> {
    if rules.is_empty() {
        return Err(Error::Empty("rules"));
    }
    let mut per_class: Vec<Vec<ConjunctiveRule>> = vec![Vec::new(); num_classes];
    for r in rules {
        let group = per_class.get_mut(r.class).ok_or(Error::ClassIndex {
            index: r.class,
            classes: num_classes,
        })?;
        match group.iter_mut().find(|g| g.same_rule(r)) {
            Some(g) => g.support += 1,
            None => {
                let mut r = r.clone();
                r.support = 1;
                group.push(r);
            }
        }
    }
    for g in &mut per_class {
        g.sort_by(|a, b| b.support.cmp(&a.support));
    }
    Ok(RuleSet {
        per_class,
        fidelity,
    })
}

/// Disagreement between thresholded fuzzy outputs and classical evaluation
/// of the thresholded indicators, over every (sample, class) pair.
pub fn indicator_fidelity(inds: &[IndicatorMatrix], semantics: Semantics) -> Result<ErrorStat> {
    let mut boolean = Vec::new();
    let mut fuzzy = Vec::new();
    for ind in inds {
        let y = aggregate_eq1(ind, semantics);
        for (j, &v) in y.iter().enumerate() {
            boolean.push(boolean_prediction(ind, j, semantics, BOOLEAN_THRESHOLD)?);
            fuzzy.push(v >= BOOLEAN_THRESHOLD);
        }
    }
    rule_error_rate(&boolean, &fuzzy)
}
