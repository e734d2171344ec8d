//! Concept encoder: positive/negative concept embeddings mixed by the
//! predicted concept probability.
//!
//! For concept `i` and input feature `f`:
//!
//! ```text
//! e⁺ = ReLU(W⁺_i f + b⁺_i)        e⁻ = ReLU(W⁻_i f + b⁻_i)
//! p_i = σ(w_s · [e⁺; e⁻] + b_s)    (scoring head shared across concepts)
//! mixed_i = p_i e⁺ + (1 − p_i) e⁻
//! ```
//!
//! The per-concept maps are stored packed side by side: `pos_w` is
//! `F × (N·m)` and columns `i·m .. (i+1)·m` belong to concept `i`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const POS_W: &str = "enc.pos_w";
pub const POS_B: &str = "enc.pos_b";
pub const NEG_W: &str = "enc.neg_w";
pub const NEG_B: &str = "enc.neg_b";
pub const SCORE_W: &str = "enc.score_w";
pub const SCORE_B: &str = "enc.score_b";

pub const DEFAULT_WIDTH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub num_concepts: usize,
    /// Embedding width `m`.
    pub width: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.num_concepts == 0 || self.width == 0 {
            return Err(Error::InvalidConfig(format!(
                "encoder dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn context_len(&self) -> usize {
        self.num_concepts * self.width
    }

    pub fn param_count(&self) -> usize {
        let (f, n, m) = (self.feature_dim, self.num_concepts, self.width);
        n * (2 * (f * m + m)) + (2 * m + 1)
    }

    /// Glorot-uniform weights per concept block, zero biases.
    pub fn init(&self, rng: &mut impl Rng, store: &mut ParamStore) -> Result<()> {
        self.validate()?;
        let (f, n, m) = (self.feature_dim, self.num_concepts, self.width);
        for w in [POS_W, NEG_W] {
            store.insert(w, glorot(rng, f, n * m, f, m));
        }
        store.insert(POS_B, Tensor::zeros(&[n * m]));
        store.insert(NEG_B, Tensor::zeros(&[n * m]));
        store.insert(SCORE_W, glorot(rng, 2 * m, 1, 2 * m, 1));
        store.insert(SCORE_B, Tensor::zeros(&[1]));
        Ok(())
    }

    /// Adds the encoder to `g` for a `[B, F]` input node.
    pub fn build(&self, g: &mut Graph, x: NodeId) -> EncoderNodes {
        let (n, m) = (self.num_concepts as isize, self.width as isize);
        let pos_w = g.input(POS_W);
        let pos_b = g.input(POS_B);
        let neg_w = g.input(NEG_W);
        let neg_b = g.input(NEG_B);
        let score_w = g.input(SCORE_W);
        let score_b = g.input(SCORE_B);

        let pos = g.affine(x, pos_w, pos_b);
        let pos = g.relu(pos);
        let pos = g.reshape(pos, &[-1, m]);
        let neg = g.affine(x, neg_w, neg_b);
        let neg = g.relu(neg);
        let neg = g.reshape(neg, &[-1, m]);

        let both = g.concat(&[pos, neg], 1);
        let score = g.affine(both, score_w, score_b);
        let prob = g.sigmoid(score);
        let q = g.one_minus(prob);
        let a = g.mul(prob, pos);
        let b = g.mul(q, neg);
        let mixed = g.add(a, b);

        let concept_probs = g.reshape(prob, &[-1, n]);
        let context = g.reshape(mixed, &[-1, n * m]);
        EncoderNodes {
            concept_probs,
            mixed,
            context,
            positive: pos,
            negative: neg,
        }
    }

    /// Encodes a `[B, F]` batch (or a single `[F]` vector) with fixed parameters.
    pub fn encode(&self, store: &ParamStore, features: &Tensor) -> Result<EncoderOutput> {
        let features = as_batch(features)?;
        if features.cols() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                what: "feature length".into(),
                expected: self.feature_dim,
                actual: features.cols(),
            });
        }
        let mut g = Graph::new();
        let x = g.input("x");
        let nodes = self.build(&mut g, x);
        let mut bind = Bindings::new();
        store.bind_into(&mut bind);
        bind.insert("x".into(), features.clone());
        let ev = g.evaluate(&bind)?;
        let b = features.rows();
        Ok(EncoderOutput {
            concept_probs: ev.value(nodes.concept_probs).clone(),
            embeddings: ev
                .value(nodes.mixed)
                .clone()
                .reshape(vec![b, self.num_concepts, self.width])?,
            context: ev.value(nodes.context).clone(),
        })
    }
}

/// Graph nodes produced by [`EncoderConfig::build`].
#[derive(Clone, Copy, Debug)]
pub struct EncoderNodes {
    /// `[B, N]`
    pub concept_probs: NodeId,
    /// `[B·N, m]`, row `b·N + i` is concept `i` of sample `b`.
    pub mixed: NodeId,
    /// `[B, N·m]`
    pub context: NodeId,
    pub positive: NodeId,
    pub negative: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `ĉ`, `[B, N]`
    pub concept_probs: Tensor,
    /// `[B, N, m]`
    pub embeddings: Tensor,
    /// `f_c`, `[B, N·m]`
    pub context: Tensor,
}

/// Builds a fresh encoder parameter set from `seed`.
pub fn init_encoder(config: EncoderConfig, seed: u64) -> Result<ParamStore> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    config.init(&mut rng, &mut store)?;
    Ok(store)
}

/// `rows × cols` matrix of independent Glorot-uniform blocks sized `fan_in × fan_out`.
pub(crate) fn glorot(
    rng: &mut impl Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("glorot shape")
}

pub(crate) fn as_batch(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        1 => t.clone().reshape(vec![1, t.len()]),
        2 => Ok(t.clone()),
        r => Err(Error::DimensionMismatch {
            what: "feature rank".into(),
            expected: 2,
            actual: r,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use rand::SeedableRng;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            feature_dim: 6,
            num_concepts: 3,
            width: 4,
        }
    }

    fn features(b: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![b, f], (0..b * f).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(init_encoder(cfg(), 3).unwrap(), init_encoder(cfg(), 3).unwrap());
        assert_ne!(init_encoder(cfg(), 3).unwrap(), init_encoder(cfg(), 4).unwrap());
    }

    #[test]
    fn parameter_count() {
        let c = EncoderConfig {
            feature_dim: 64,
            num_concepts: 8,
            width: 16,
        };
        assert_eq!(c.context_len(), 128);
        assert_eq!(c.param_count(), 8 * (2 * (64 * 16 + 16)) + 33);
        assert_eq!(init_encoder(c, 0).unwrap().scalar_count(), c.param_count());
    }

    #[test]
    fn shapes_and_probability_range() {
        let c = cfg();
        let store = init_encoder(c, 1).unwrap();
        let out = c.encode(&store, &features(5, 6, 2)).unwrap();
        assert_eq!(out.concept_probs.shape(), &[5, 3]);
        assert_eq!(out.embeddings.shape(), &[5, 3, 4]);
        assert_eq!(out.context.shape(), &[5, 12]);
        assert_eq!(out.context.data(), out.embeddings.data());
        assert!(out.concept_probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    fn pos_neg(c: EncoderConfig, store: &ParamStore, x: &Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let xi = g.input("x");
        let nodes = c.build(&mut g, xi);
        let mut bind = Bindings::new();
        store.bind_into(&mut bind);
        bind.insert("x".into(), x.clone());
        let ev = g.evaluate(&bind).unwrap();
        (ev.value(nodes.positive).clone(), ev.value(nodes.negative).clone())
    }

    #[test]
    fn saturated_probability_selects_positive_embedding() {
        let c = cfg();
        let mut store = init_encoder(c, 1).unwrap();
        store.insert(SCORE_W, Tensor::zeros(&[8, 1]));
        store.insert(SCORE_B, Tensor::full(&[1], 1000.0));
        let x = features(2, 6, 9);
        let out = c.encode(&store, &x).unwrap();
        let (pos, _) = pos_neg(c, &store, &x);
        assert!(out.concept_probs.data().iter().all(|&p| p == 1.0));
        assert_eq!(out.embeddings.data(), pos.data());
    }

    #[test]
    fn half_probability_gives_midpoint() {
        let c = cfg();
        let mut store = init_encoder(c, 1).unwrap();
        store.insert(SCORE_W, Tensor::zeros(&[8, 1]));
        let x = features(2, 6, 9);
        let out = c.encode(&store, &x).unwrap();
        let (pos, neg) = pos_neg(c, &store, &x);
        for ((m, p), n) in out.embeddings.data().iter().zip(pos.data()).zip(neg.data()) {
            assert_eq!(*m, (p + n) / 2.0);
        }
    }

    #[test]
    fn wrong_feature_length_is_an_error() {
        let c = cfg();
        let store = init_encoder(c, 1).unwrap();
        assert!(c.encode(&store, &features(1, 5, 0)).is_err());
    }

    #[test]
    fn concept_bce_gradients_pass_finite_differences() {
        let c = cfg();
        let store = init_encoder(c, 5).unwrap();
        let mut g = Graph::new();
        let x = g.input("x");
        let t = g.input("c");
        let nodes = c.build(&mut g, x);
        let loss = g.bce(nodes.concept_probs, t);
        let mut bind = Bindings::new();
        store.bind_into(&mut bind);
        // biases away from zero keep ReLU units off their kink
        bind.insert(POS_B.into(), Tensor::full(&[12], 0.05));
        bind.insert(NEG_B.into(), Tensor::full(&[12], 0.07));
        bind.insert("x".into(), features(4, 6, 11));
        bind.insert(
            "c".into(),
            Tensor::new(vec![4, 3], vec![1., 0., 1., 0., 0., 1., 1., 1., 0., 0., 1., 0.]).unwrap(),
        );
        let names: Vec<&str> = store.names().collect();
        let report = check_gradients(&g, &bind, loss, &names, 1e-5, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
    }
}
