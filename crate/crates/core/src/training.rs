//! Full model, three-term loss, training loop and evaluation.
//!
//! One graph carries all three heads: the concept encoder feeds both the
//! indicator networks (class truth degrees `ŷ`) and the fusion head, which
//! classifies `concat(f(x), f_c(x))`. The loss is
//! `L_task + λ1·L_c + λ2·L_neural`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::graph::{bce_forward, cross_entropy_forward, normalized_ce_forward};
use crate::autodiff::{AdamConfig, AdamState, Bindings, Graph, NodeId, ParamStore};
use crate::dataset::{Batch, Dataset};
use crate::encoder::{glorot, EncoderConfig, EncoderNodes, DEFAULT_WIDTH};
use crate::error::{Error, Result};
use crate::fuzzy::{ErrorStat, RuleSet, BOOLEAN_THRESHOLD};
use crate::metrics::{multiclass_metrics, MetricsBundle};
use crate::symbolic::{
    aggregate_global_rules, build_eq1, extract_local_rule, indicator_fidelity, indicators_from,
    IndicatorConfig, IndicatorMatrix, IndicatorNodes, Semantics, DEFAULT_HIDDEN,
};
use crate::tensor::Tensor;

pub const FUSE_W: &str = "fuse.w";
pub const FUSE_B: &str = "fuse.b";

const EVAL_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub num_concepts: usize,
    pub num_classes: usize,
    pub width: usize,
    pub hidden: usize,
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            feature_dim: self.feature_dim,
            num_concepts: self.num_concepts,
            width: self.width,
        }
    }

    pub fn indicators(&self) -> IndicatorConfig {
        IndicatorConfig {
            num_concepts: self.num_concepts,
            num_classes: self.num_classes,
            width: self.width,
            hidden: self.hidden,
        }
    }

    pub fn fusion_inputs(&self) -> usize {
        self.feature_dim + self.num_concepts * self.width
    }

    pub fn fusion_param_count(&self) -> usize {
        (self.fusion_inputs() + 1) * self.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.encoder().param_count() + self.indicators().param_count() + self.fusion_param_count()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.indicators().validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda_concept: f64,
    pub lambda_neural: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub semantics: Semantics,
    pub hidden: usize,
    pub width: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda_concept: 0.1,
            lambda_neural: 0.1,
            lr: AdamConfig::default().lr,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            semantics: Semantics::Literal,
            hidden: DEFAULT_HIDDEN,
            width: DEFAULT_WIDTH,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, v) in [("lambda_concept", self.lambda_concept), ("lambda_neural", self.lambda_neural)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        Ok(())
    }

    pub fn model_config(&self, dataset: &Dataset) -> ModelConfig {
        ModelConfig {
            feature_dim: dataset.feature_dim(),
            num_concepts: dataset.num_concepts(),
            num_classes: dataset.num_classes(),
            width: self.width,
            hidden: self.hidden,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Trainable state: every parameter plus the optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub semantics: Semantics,
    pub params: ParamStore,
    pub adam: AdamState,
}

impl ModelParams {
    pub fn init(config: ModelConfig, semantics: Semantics, adam: AdamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        config.encoder().init(&mut rng, &mut params)?;
        config.indicators().init(&mut rng, &mut params)?;
        let (k, c) = (config.fusion_inputs(), config.num_classes);
        params.insert(FUSE_W, glorot(&mut rng, k, c, k, c));
        params.insert(FUSE_B, Tensor::zeros(&[c]));
        let adam = AdamState::new(adam, &params);
        Ok(Self {
            config,
            semantics,
            params,
            adam,
        })
    }

    /// Checks that every expected parameter exists with the right shape.
    pub fn check_shapes(&self) -> Result<()> {
        let fresh = Self::init(self.config, self.semantics, self.adam.config, 0)?;
        for (name, t) in fresh.params.iter() {
            let have = self.params.require(name)?;
            if have.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    node: 0,
                    op: "parameter",
                    left: t.shape().to_vec(),
                    right: have.shape().to_vec(),
                });
            }
        }
        if self.params.len() != fresh.params.len() {
            return Err(Error::DimensionMismatch {
                what: "parameter count".into(),
                expected: fresh.params.len(),
                actual: self.params.len(),
            });
        }
        Ok(())
    }
}

pub fn init_model(dataset: &Dataset, hyper: &Hyperparams) -> Result<ModelParams> {
    hyper.validate()?;
    ModelParams::init(hyper.model_config(dataset), hyper.semantics, hyper.adam(), hyper.seed)
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub task: NodeId,
    pub concept: NodeId,
    pub neural: NodeId,
    pub total: NodeId,
}

/// Graph over inputs `x` (`B × F`), and, when losses are attached, `y`
/// (`B × C` one-hot) and `c` (`B × N`).
#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub graph: Graph,
    pub encoder: EncoderNodes,
    pub indicators: IndicatorNodes,
    pub logits: NodeId,
    pub y_neural: NodeId,
    pub loss: Option<LossNodes>,
}

pub fn build_model_graph(
    config: &ModelConfig,
    semantics: Semantics,
    weights: Option<(f64, f64)>,
) -> ModelGraph {
    let mut g = Graph::new();
    let x = g.input("x");
    let encoder = config.encoder().build(&mut g, x);
    let indicators = config.indicators().build(&mut g, encoder.mixed);
    let y_neural = build_eq1(&mut g, &indicators, semantics);

    let fused_in = g.concat(&[x, encoder.context], 1);
    let w = g.input(FUSE_W);
    let b = g.input(FUSE_B);
    let logits = g.affine(fused_in, w, b);

    let loss = weights.map(|(l1, l2)| {
        let y = g.input("y");
        let c = g.input("c");
        let task = g.cross_entropy(logits, y);
        let concept = g.bce(encoder.concept_probs, c);
        let neural = if config.num_classes == 2 {
            g.bce(y_neural, y)
        } else {
            g.normalized_cross_entropy(y_neural, y)
        };
        let a = g.scale(concept, l1);
        let b = g.scale(neural, l2);
        let t = g.add(task, a);
        let total = g.add(t, b);
        LossNodes {
            task,
            concept,
            neural,
            total,
        }
    });
    ModelGraph {
        graph: g,
        encoder,
        indicators,
        logits,
        y_neural,
        loss,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    /// Fused-head logits `ỹ`, `B × C`.
    pub logits: Tensor,
    /// Class truth degrees, `B × C`.
    pub y_neural: Tensor,
    /// `ĉ`, `B × N`.
    pub concept_probs: Tensor,
    pub indicators: Vec<IndicatorMatrix>,
}

fn check_features(config: &ModelConfig, features: &Tensor) -> Result<()> {
    if features.rank() != 2 || features.cols() != config.feature_dim {
        return Err(Error::DimensionMismatch {
            what: "feature length".into(),
            expected: config.feature_dim,
            actual: features.shape().last().copied().unwrap_or(0),
        });
    }
    Ok(())
}

/// All model outputs for a `B × F` feature batch.
pub fn forward_full(model: &ModelParams, features: &Tensor) -> Result<ForwardOutputs> {
    check_features(&model.config, features)?;
    let mg = build_model_graph(&model.config, model.semantics, None);
    let mut bind = Bindings::new();
    model.params.bind_into(&mut bind);
    let b = features.rows();
    let mut out: Option<ForwardOutputs> = None;
    for start in (0..b).step_by(EVAL_CHUNK) {
        let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(b)).collect();
        bind.insert("x".into(), features.select_rows(&rows)?);
        let ev = mg.graph.evaluate(&bind)?;
        let part = ForwardOutputs {
            logits: ev.value(mg.logits).clone(),
            y_neural: ev.value(mg.y_neural).clone(),
            concept_probs: ev.value(mg.encoder.concept_probs).clone(),
            indicators: indicators_from(&ev, &mg.indicators, rows.len(), model.config.num_concepts)?,
        };
        out = Some(match out {
            None => part,
            Some(acc) => ForwardOutputs {
                logits: stack(&acc.logits, &part.logits)?,
                y_neural: stack(&acc.y_neural, &part.y_neural)?,
                concept_probs: stack(&acc.concept_probs, &part.concept_probs)?,
                indicators: acc.indicators.into_iter().chain(part.indicators).collect(),
            },
        });
    }
    out.ok_or(Error::Empty("feature batch"))
}

fn stack(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![a.rows() + b.rows(), a.cols()], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub concept: f64,
    pub neural: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn combine(task: f64, concept: f64, neural: f64, hyper: &Hyperparams) -> Self {
        Self {
            task,
            concept,
            neural,
            total: task + hyper.lambda_concept * concept + hyper.lambda_neural * neural,
        }
    }
}

/// Loss of precomputed outputs against a batch.
pub fn total_loss(out: &ForwardOutputs, batch: &Batch, hyper: &Hyperparams) -> Result<LossBreakdown> {
    if let Some(&v) = out.y_neural.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::OutOfRange(v));
    }
    let c = out.logits.cols();
    let y = batch.one_hot(c)?;
    if y.shape() != out.logits.shape() {
        return Err(Error::DimensionMismatch {
            what: "batch size".into(),
            expected: out.logits.rows(),
            actual: batch.len(),
        });
    }
    let task = cross_entropy_forward(&out.logits, &y).data()[0];
    let concept = match &batch.concepts {
        Some(t) => bce_forward(&out.concept_probs, t).data()[0],
        None if hyper.lambda_concept == 0.0 => 0.0,
        None => return Err(Error::InvalidConfig("concept loss needs concept labels".into())),
    };
    let neural = if c == 2 {
        bce_forward(&out.y_neural, &y)
    } else {
        normalized_ce_forward(&out.y_neural, &y)
    }
    .data()[0];
    Ok(LossBreakdown::combine(task, concept, neural, hyper))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub epochs: Vec<EpochLoss>,
}

impl LossCurve {
    pub const CSV_HEADER: [&'static str; 5] = ["epoch", "L_task", "L_c", "L_neural", "total"];

    pub fn last(&self) -> Option<&LossBreakdown> {
        self.epochs.last().map(|e| &e.loss)
    }
}

/// Initializes from `hyper.seed` and trains.
pub fn train(dataset: &Dataset, hyper: &Hyperparams) -> Result<(ModelParams, LossCurve)> {
    let model = init_model(dataset, hyper)?;
    train_from(model, dataset, hyper)
}

/// Continues training `model` for `hyper.epochs` epochs.
///
/// Each epoch reshuffles with a generator seeded from `hyper.seed`, so runs
/// are reproducible. The curve records batch-size-weighted epoch means.
pub fn train_from(
    mut model: ModelParams,
    dataset: &Dataset,
    hyper: &Hyperparams,
) -> Result<(ModelParams, LossCurve)> {
    hyper.validate()?;
    dataset.validate()?;
    let expect = hyper.model_config(dataset);
    if model.config.feature_dim != expect.feature_dim
        || model.config.num_concepts != expect.num_concepts
        || model.config.num_classes != expect.num_classes
    {
        return Err(Error::InvalidConfig(format!(
            "model dimensions {:?} do not match dataset {:?}",
            model.config, expect
        )));
    }
    if dataset.concept_labels.is_none() && hyper.lambda_concept > 0.0 {
        return Err(Error::InvalidConfig(
            "concept loss weight is positive but the dataset has no concept labels".into(),
        ));
    }
    model.adam.config.lr = hyper.lr;

    let mg = build_model_graph(
        &model.config,
        model.semantics,
        Some((hyper.lambda_concept, hyper.lambda_neural)),
    );
    let loss = mg.loss.expect("loss nodes");
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = LossCurve::default();
    let m = dataset.len() as f64;

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let (mut task, mut concept, mut neural) = (0.0, 0.0, 0.0);
        for (bi, idx) in order.chunks(hyper.batch_size).enumerate() {
            let batch = dataset.batch(idx)?;
            let mut bind = Bindings::new();
            model.params.bind_into(&mut bind);
            bind.insert("x".into(), batch.features.clone());
            bind.insert("y".into(), batch.one_hot(model.config.num_classes)?);
            bind.insert(
                "c".into(),
                batch
                    .concepts
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(&[idx.len(), model.config.num_concepts])),
            );
            let ev = mg.graph.evaluate(&bind)?;
            let parts = [loss.task, loss.concept, loss.neural, loss.total].map(|n| ev.value(n).data()[0]);
            if parts.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: format!(
                        "L_task={} L_c={} L_neural={} total={}",
                        parts[0], parts[1], parts[2], parts[3]
                    ),
                });
            }
            let w = idx.len() as f64;
            task += parts[0] * w;
            concept += parts[1] * w;
            neural += parts[2] * w;
            let grads = ev.backward(&mg.graph, loss.total)?;
            let grads = model.params.collect_grads(&grads)?;
            model.adam.step(&mut model.params, &grads)?;
        }
        curve.epochs.push(EpochLoss {
            epoch,
            loss: LossBreakdown::combine(task / m, concept / m, neural / m, hyper),
        });
    }
    Ok((model, curve))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut data = Vec::with_capacity(logits.len());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|z| (z - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        data.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(vec![logits.rows(), c], data).expect("softmax shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fused: MetricsBundle,
    pub neural: MetricsBundle,
    pub rule_error: ErrorStat,
    pub rules: RuleSet,
    pub fused_pred: Vec<usize>,
    pub neural_pred: Vec<usize>,
    /// Fused-head class probabilities, `M × C`.
    pub fused_probs: Tensor,
    pub outputs: ForwardOutputs,
}

/// Metrics for both heads, rule fidelity and rules grouped by the fused
/// head's predicted class.
pub fn evaluate(model: &ModelParams, dataset: &Dataset) -> Result<EvalReport> {
    dataset.validate()?;
    let c = model.config.num_classes;
    if dataset.num_classes() != c || dataset.num_concepts() != model.config.num_concepts {
        return Err(Error::InvalidConfig(format!(
            "model expects {} concepts and {} classes, dataset has {} and {}",
            model.config.num_concepts,
            c,
            dataset.num_concepts(),
            dataset.num_classes()
        )));
    }
    let out = forward_full(model, &dataset.features)?;
    let fused_probs = softmax_rows(&out.logits);
    let rows = |t: &Tensor| (0..t.rows()).map(|r| argmax(t.row(r))).collect::<Vec<_>>();
    let fused_pred = rows(&out.logits);
    let neural_pred = rows(&out.y_neural);
    let fused = multiclass_metrics(&fused_pred, &dataset.labels, &fused_probs, c)?;
    let neural = multiclass_metrics(&neural_pred, &dataset.labels, &out.y_neural, c)?;
    let rule_error = indicator_fidelity(&out.indicators, model.semantics)?;
    let local = out
        .indicators
        .iter()
        .zip(&fused_pred)
        .map(|(ind, &j)| extract_local_rule(ind, j, BOOLEAN_THRESHOLD))
        .collect::<Result<Vec<_>>>()?;
    let rules = aggregate_global_rules(&local, c, rule_error)?;
    Ok(EvalReport {
        fused,
        neural,
        rule_error,
        rules,
        fused_pred,
        neural_pred,
        fused_probs,
        outputs: out,
    })
}

/// Fusion-head weight mass per (concept, class): the L1 norm of each
/// concept's embedding block, normalized to sum to 1 over concepts within
/// each class. Returned as `N × C`.
pub fn concept_weight_report(model: &ModelParams) -> Result<Tensor> {
    let cfg = model.config;
    let w = model.params.require(FUSE_W)?;
    let (n, c, m) = (cfg.num_concepts, cfg.num_classes, cfg.width);
    let mut mass = vec![0.0; n * c];
    for i in 0..n {
        for r in 0..m {
            let row = w.row(cfg.feature_dim + i * m + r);
            for j in 0..c {
                mass[i * c + j] += row[j].abs();
            }
        }
    }
    for j in 0..c {
        let total: f64 = (0..n).map(|i| mass[i * c + j]).sum();
        if total > 0.0 {
            for i in 0..n {
                mass[i * c + j] /= total;
            }
        }
    }
    Tensor::new(vec![n, c], mass)
}
