//! Image/concept alignment: cosine heatmaps between a visual feature map and
//! concept text embeddings, average pooling into concept scores, threshold
//! pseudo-labels, and concept-set filtering.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LABEL_THRESHOLD: f64 = 0.65;
pub const PRUNE_FLOOR: f64 = 0.45;
pub const MAX_NAME_CHARS: usize = 30;
pub const CLASS_SIMILARITY: f64 = 0.85;
pub const PAIRWISE_SIMILARITY: f64 = 0.9;

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// A grid of visual embeddings, shape `H × W × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::DimensionMismatch {
                what: "feature map rank".into(),
                expected: 3,
                actual: t.rank(),
            });
        }
        if !t.is_finite() {
            return Err(Error::InvalidConfig("feature map has non-finite entries".into()));
        }
        Ok(Self(t))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn position(&self, p: usize, k: usize) -> &[f64] {
        let d = self.dim();
        let start = (p * self.width() + k) * d;
        &self.0.data()[start..start + d]
    }
}

/// Ordered concept names with optional text embeddings (`N × D`).
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSet {
    names: Vec<String>,
    embeddings: Option<Tensor>,
}

impl ConceptSet {
    pub fn new(names: Vec<String>, embeddings: Option<Tensor>) -> Result<Self> {
        let mut seen = HashSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(Error::InvalidConfig("empty concept name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate concept name `{n}`")));
            }
        }
        if let Some(e) = &embeddings {
            if e.rank() != 2 || e.rows() != names.len() {
                return Err(Error::DimensionMismatch {
                    what: "concept embedding rows".into(),
                    expected: names.len(),
                    actual: e.rows(),
                });
            }
        }
        Ok(Self { names, embeddings })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> Option<&Tensor> {
        self.embeddings.as_ref()
    }

    pub fn embedding(&self, i: usize) -> Option<&[f64]> {
        self.embeddings.as_ref().map(|e| e.row(i))
    }

    pub fn require_embeddings(&self) -> Result<&Tensor> {
        self.embeddings
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("concept set has no text embeddings".into()))
    }

    /// The concepts at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let names = indices.iter().map(|&i| self.names[i].clone()).collect();
        let embeddings = match &self.embeddings {
            Some(e) if !indices.is_empty() => Some(e.select_rows(indices)?),
            _ => None,
        };
        Ok(Self { names, embeddings })
    }
}

/// Per-position cosine similarity between a concept embedding and a feature map.
pub fn compute_heatmap(map: &FeatureMap, text_embedding: &[f64]) -> Result<Tensor> {
    if text_embedding.len() != map.dim() {
        return Err(Error::DimensionMismatch {
            what: "text embedding dimension".into(),
            expected: map.dim(),
            actual: text_embedding.len(),
        });
    }
    let (h, w) = (map.height(), map.width());
    let mut data = Vec::with_capacity(h * w);
    for p in 0..h {
        for k in 0..w {
            data.push(cosine(text_embedding, map.position(p, k)));
        }
    }
    Tensor::new(vec![h, w], data)
}

/// Average pooling of a heatmap into one similarity score.
pub fn pool_scores(heatmap: &Tensor) -> Result<f64> {
    if heatmap.is_empty() {
        return Err(Error::Empty("heatmap"));
    }
    Ok(heatmap.data().iter().sum::<f64>() / heatmap.len() as f64)
}

/// The score vector `e = (s_1, …, s_N)` of one image against every concept.
pub fn concept_scores(map: &FeatureMap, concepts: &ConceptSet) -> Result<Vec<f64>> {
    let emb = concepts.require_embeddings()?;
    (0..concepts.len())
        .map(|i| pool_scores(&compute_heatmap(map, emb.row(i))?))
        .collect()
}

/// Binary concept labels, one row per sample, columns in concept-set order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptLabelMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl ConceptLabelMatrix {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "concept label count".into(),
                expected: rows * cols,
                actual: bits.len(),
            });
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn select_cols(&self, cols: &[usize]) -> Self {
        let bits = (0..self.rows)
            .flat_map(|r| cols.iter().map(move |&c| (r, c)))
            .map(|(r, c)| self.get(r, c))
            .collect();
        Self {
            rows: self.rows,
            cols: cols.len(),
            bits,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.rows.max(1), self.cols.max(1)],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("non-empty label matrix")
    }
}

/// `label = 1` iff `score >= tau`.
pub fn threshold_labels(scores: &Tensor, tau: f64) -> Result<ConceptLabelMatrix> {
    if !scores.is_finite() {
        return Err(Error::InvalidConfig("non-finite concept score".into()));
    }
    let bits = scores.data().iter().map(|&s| s >= tau).collect();
    ConceptLabelMatrix::new(scores.rows(), scores.cols(), bits)
}

/// Indices of concepts whose best score over all samples reaches `floor`.
pub fn prune_low_similarity(scores: &Tensor, floor: f64) -> Result<Vec<usize>> {
    if scores.rows() == 0 || scores.rank() != 2 {
        return Err(Error::Empty("score matrix"));
    }
    let (m, n) = (scores.rows(), scores.cols());
    Ok((0..n)
        .filter(|&i| {
            (0..m)
                .map(|r| scores.data()[r * n + i])
                .fold(f64::NEG_INFINITY, f64::max)
                >= floor
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterStage {
    Length,
    ClassSimilarity,
    Pairwise,
    Projection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub max_name_chars: usize,
    pub class_similarity: f64,
    pub pairwise_similarity: f64,
    pub projection_floor: f64,
    pub length: bool,
    pub class_filter: bool,
    pub pairwise: bool,
    pub projection: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_name_chars: MAX_NAME_CHARS,
            class_similarity: CLASS_SIMILARITY,
            pairwise_similarity: PAIRWISE_SIMILARITY,
            projection_floor: PRUNE_FLOOR,
            length: true,
            class_filter: true,
            pairwise: true,
            projection: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptProvenance {
    pub index: usize,
    pub name: String,
    /// `None` for survivors.
    pub dropped_by: Option<FilterStage>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome {
    /// Surviving indices into the input set, in input order.
    pub kept: Vec<usize>,
    pub concepts: ConceptSet,
    pub provenance: Vec<ConceptProvenance>,
    pub stages_run: Vec<FilterStage>,
}

impl FilterOutcome {
    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

/// Applies length, class-similarity, pairwise-similarity and projection
/// filters in that order. `scores` (`M × N`, aligned with `concepts`) feeds
/// the projection filter, which is skipped when absent.
pub fn filter_concepts(
    concepts: &ConceptSet,
    class_embeddings: Option<&Tensor>,
    scores: Option<&Tensor>,
    cfg: &FilterConfig,
) -> Result<FilterOutcome> {
    let n = concepts.len();
    let mut dropped: Vec<Option<(FilterStage, String)>> = vec![None; n];
    let mut stages_run = Vec::new();
    let alive = |d: &Vec<Option<(FilterStage, String)>>| -> Vec<usize> {
        (0..n).filter(|&i| d[i].is_none()).collect()
    };

    if cfg.length {
        stages_run.push(FilterStage::Length);
        for (i, name) in concepts.names().iter().enumerate() {
            let len = name.chars().count();
            if len > cfg.max_name_chars {
                dropped[i] = Some((
                    FilterStage::Length,
                    format!("name has {len} characters (> {})", cfg.max_name_chars),
                ));
            }
        }
    }

    if cfg.class_filter {
        stages_run.push(FilterStage::ClassSimilarity);
        let emb = concepts.require_embeddings()?;
        let classes = class_embeddings.ok_or_else(|| {
            Error::InvalidConfig("class-similarity filter needs class embeddings".into())
        })?;
        check_dim("class embedding dimension", emb.cols(), classes.cols())?;
        for i in alive(&dropped) {
            let best = (0..classes.rows())
                .map(|c| (c, cosine(emb.row(i), classes.row(c))))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            if best.1 >= cfg.class_similarity {
                dropped[i] = Some((
                    FilterStage::ClassSimilarity,
                    format!("cosine {:.4} with class {}", best.1, best.0),
                ));
            }
        }
    }

    if cfg.pairwise {
        stages_run.push(FilterStage::Pairwise);
        let emb = concepts.require_embeddings()?;
        let mut kept: Vec<usize> = Vec::new();
        for i in alive(&dropped) {
            match kept
                .iter()
                .map(|&j| (j, cosine(emb.row(i), emb.row(j))))
                .find(|&(_, s)| s >= cfg.pairwise_similarity)
            {
                Some((j, s)) => {
                    dropped[i] = Some((
                        FilterStage::Pairwise,
                        format!("cosine {s:.4} with `{}`", concepts.names()[j]),
                    ))
                }
                None => kept.push(i),
            }
        }
    }

    if cfg.projection {
        if let Some(scores) = scores {
            stages_run.push(FilterStage::Projection);
            check_dim("score columns", n, scores.cols())?;
            let retained: HashSet<usize> = prune_low_similarity(scores, cfg.projection_floor)?
                .into_iter()
                .collect();
            for i in alive(&dropped) {
                if !retained.contains(&i) {
                    dropped[i] = Some((
                        FilterStage::Projection,
                        format!("max score below {}", cfg.projection_floor),
                    ));
                }
            }
        }
    }

    let kept = alive(&dropped);
    let provenance = concepts
        .names()
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let (dropped_by, detail) = match &dropped[i] {
                Some((stage, why)) => (Some(*stage), why.clone()),
                None => (None, "kept".to_string()),
            };
            ConceptProvenance {
                index: i,
                name: name.clone(),
                dropped_by,
                detail,
            }
        })
        .collect();
    Ok(FilterOutcome {
        concepts: concepts.subset(&kept)?,
        kept,
        provenance,
        stages_run,
    })
}

fn check_dim(what: &str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what: what.into(),
            expected,
            actual,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, d: usize, data: Vec<f64>) -> FeatureMap {
        FeatureMap::new(Tensor::new(vec![h, w, d], data).unwrap()).unwrap()
    }

    #[test]
    fn heatmap_cosines() {
        let v = map(1, 3, 2, vec![2.0, 0.0, 0.0, 5.0, 1.0, 0.0]);
        let h = compute_heatmap(&v, &[2.0, 0.0]).unwrap();
        assert_eq!(h.data()[0], 1.0);
        assert_eq!(h.data()[1], 0.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let h = compute_heatmap(&v, &[s, s]).unwrap();
        assert!((h.data()[2] - 0.7071067811865476).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_positions_score_zero() {
        let v = map(1, 2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let h = compute_heatmap(&v, &[1.0, 0.0]).unwrap();
        assert_eq!(h.data()[0], 0.0);
        let h = compute_heatmap(&v, &[0.0, 0.0]).unwrap();
        assert_eq!(h.data(), &[0.0, 0.0]);
    }

    #[test]
    fn heatmap_dimension_mismatch() {
        let v = map(1, 1, 2, vec![1.0, 0.0]);
        assert!(compute_heatmap(&v, &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn pooling_examples() {
        let t = |rows: [[f64; 2]; 2]| Tensor::from_rows(&rows).unwrap();
        assert_eq!(pool_scores(&t([[0.5, 0.5], [0.5, 0.5]])).unwrap(), 0.5);
        assert_eq!(pool_scores(&t([[1.0, 0.0], [0.0, 1.0]])).unwrap(), 0.5);
        assert!((pool_scores(&t([[0.9, 0.7], [0.3, 0.1]])).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn threshold_examples() {
        let s = Tensor::from_rows(&[[0.66, 0.64, 0.65]]).unwrap();
        let l = threshold_labels(&s, LABEL_THRESHOLD).unwrap();
        assert_eq!(l.row(0), &[true, false, true]);
        let s = Tensor::from_rows(&[[0.0], [0.3], [0.9]]).unwrap();
        let l = threshold_labels(&s, 0.0).unwrap();
        assert!((0..3).all(|r| l.get(r, 0)));
    }

    #[test]
    fn prune_boundary_is_inclusive() {
        let s = Tensor::from_rows(&[[0.44, 0.45, 0.95], [0.10, 0.20, 0.91]]).unwrap();
        assert_eq!(prune_low_similarity(&s, PRUNE_FLOOR).unwrap(), vec![1, 2]);
        let s = Tensor::from_rows(&[[0.9, 0.95], [0.99, 0.92]]).unwrap();
        assert_eq!(prune_low_similarity(&s, PRUNE_FLOOR).unwrap(), vec![0, 1]);
    }

    fn basis(n: usize, d: usize) -> Tensor {
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            data[i * d + i] = 1.0;
        }
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn length_filter_drops_long_names() {
        let names = vec!["short".to_string(), "x".repeat(35)];
        let set = ConceptSet::new(names, Some(basis(2, 4))).unwrap();
        let classes = Tensor::from_rows(&[[0.0, 0.0, 0.0, 1.0]]).unwrap();
        let out = filter_concepts(&set, Some(&classes), None, &FilterConfig::default()).unwrap();
        assert_eq!(out.kept, vec![0]);
        assert_eq!(out.provenance[1].dropped_by, Some(FilterStage::Length));
    }

    #[test]
    fn pairwise_filter_drops_later_duplicate() {
        let emb = Tensor::from_rows(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let set = ConceptSet::new(vec!["a".into(), "b".into(), "c".into()], Some(emb)).unwrap();
        let classes = Tensor::from_rows(&[[0.0, 0.0, 1.0]]).unwrap();
        let out = filter_concepts(&set, Some(&classes), None, &FilterConfig::default()).unwrap();
        assert_eq!(out.kept, vec![0, 2]);
        assert_eq!(out.provenance[1].dropped_by, Some(FilterStage::Pairwise));
    }

    #[test]
    fn well_separated_covid_concepts_all_survive() {
        let names: Vec<String> = [
            "Peripheral ground-glass opacities",
            "Bilateral involvement",
            "Multilobar distribution",
            "Crazy-paving pattern",
            "Absence of lobar consolidation",
            "Localized or diffuse persentation",
            "lncreased density in the lung",
            "Ground-glass appearance",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let set = ConceptSet::new(names, Some(basis(8, 10))).unwrap();
        let classes = basis(10, 10).select_rows(&[8, 9]).unwrap();
        let scores = Tensor::full(&[3, 8], 0.7);

        // Two of the published names are 33 characters long.
        let full = filter_concepts(&set, Some(&classes), Some(&scores), &FilterConfig::default())
            .unwrap();
        assert_eq!(full.kept, vec![1, 2, 3, 4, 6, 7]);

        let cfg = FilterConfig {
            length: false,
            ..FilterConfig::default()
        };
        let out = filter_concepts(&set, Some(&classes), Some(&scores), &cfg).unwrap();
        assert_eq!(out.kept.len(), 8);
        let again = filter_concepts(
            &out.concepts,
            Some(&classes),
            Some(&scores.select_cols(&out.kept).unwrap()),
            &cfg,
        )
        .unwrap();
        assert_eq!(again.concepts, out.concepts);
    }

    #[test]
    fn class_filter_without_class_embeddings_is_an_error() {
        let set = ConceptSet::new(vec!["a".into()], Some(basis(1, 2))).unwrap();
        assert!(filter_concepts(&set, None, None, &FilterConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn heatmap_scale_invariant(
            data in proptest::collection::vec(-1.0..1.0f64, 12),
            t in proptest::collection::vec(-1.0..1.0f64, 3),
            a in 0.01..100.0f64,
            b in 0.01..100.0f64,
        ) {
            let v = map(2, 2, 3, data.clone());
            let base = compute_heatmap(&v, &t).unwrap();
            let scaled_t: Vec<f64> = t.iter().map(|x| x * a).collect();
            let scaled_v = map(2, 2, 3, data.iter().map(|x| x * b).collect());
            let other = compute_heatmap(&scaled_v, &scaled_t).unwrap();
            prop_assert!(base.max_abs_diff(&other) <= 1e-12);
            for &x in base.data() {
                prop_assert!((-1.0..=1.0).contains(&x));
            }
        }

        #[test]
        fn pooling_is_permutation_invariant(mut data in proptest::collection::vec(-1.0..1.0f64, 6), seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let t = Tensor::new(vec![2, 3], data.clone()).unwrap();
            let p = pool_scores(&t).unwrap();
            data.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let q = pool_scores(&Tensor::new(vec![3, 2], data).unwrap()).unwrap();
            prop_assert!((p - q).abs() < 1e-12);
        }

        #[test]
        fn threshold_monotone_in_tau(scores in proptest::collection::vec(-1.0..1.0f64, 8), lo in -1.0..1.0f64, d in 0.0..1.0f64) {
            let s = Tensor::new(vec![2, 4], scores).unwrap();
            let a = threshold_labels(&s, lo).unwrap();
            let b = threshold_labels(&s, lo + d).unwrap();
            for r in 0..2 {
                for c in 0..4 {
                    prop_assert!(!(b.get(r, c) && !a.get(r, c)));
                }
            }
        }

        #[test]
        fn filtering_yields_idempotent_subset(
            emb in proptest::collection::vec(-1.0..1.0f64, 24),
            scores in proptest::collection::vec(0.0..1.0f64, 18),
            lens in proptest::collection::vec(1usize..40, 6),
        ) {
            let names: Vec<String> = lens.iter().enumerate().map(|(i, &l)| format!("{i}{}", "x".repeat(l))).collect();
            let set = ConceptSet::new(names, Some(Tensor::new(vec![6, 4], emb).unwrap())).unwrap();
            let classes = Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0]]).unwrap();
            let scores = Tensor::new(vec![3, 6], scores).unwrap();
            let cfg = FilterConfig::default();
            let out = filter_concepts(&set, Some(&classes), Some(&scores), &cfg).unwrap();
            for &k in &out.kept {
                prop_assert!(k < 6);
            }
            prop_assert!(out.kept.windows(2).all(|w| w[0] < w[1]));
            if !out.is_empty() {
                let sub = scores.select_cols(&out.kept).unwrap();
                let again = filter_concepts(&out.concepts, Some(&classes), Some(&sub), &cfg).unwrap();
                prop_assert_eq!(again.kept.len(), out.kept.len());
            }
        }
    }
}
