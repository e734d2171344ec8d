//! In-memory dataset: backbone features, class labels and optional concept labels.

use crate::alignment::ConceptLabelMatrix;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sample_ids: Vec<String>,
    /// `M × F`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub concept_labels: Option<ConceptLabelMatrix>,
    pub concept_names: Vec<String>,
    pub class_names: Vec<String>,
}

/// A slice of a dataset ready for the model graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `B × F`
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// `B × N` of 0/1, when concept labels exist.
    pub concepts: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `B × C` one-hot targets.
    pub fn one_hot(&self, num_classes: usize) -> Result<Tensor> {
        one_hot(&self.labels, num_classes)
    }
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::ClassIndex {
                index: y,
                classes: num_classes,
            });
        }
        data[r * num_classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), num_classes], data)
}

impl Dataset {
    pub fn new(
        sample_ids: Vec<String>,
        features: Tensor,
        labels: Vec<usize>,
        concept_labels: Option<ConceptLabelMatrix>,
        concept_names: Vec<String>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let ds = Self {
            sample_ids,
            features,
            labels,
            concept_labels,
            concept_names,
            class_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.labels.len();
        if m == 0 {
            return Err(Error::Empty("dataset"));
        }
        if self.class_names.is_empty() {
            return Err(Error::Empty("class names"));
        }
        if self.concept_names.is_empty() {
            return Err(Error::Empty("concept names"));
        }
        let check = |what: &str, expected: usize, actual: usize| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    what: what.into(),
                    expected,
                    actual,
                })
            }
        };
        check("sample id count", m, self.sample_ids.len())?;
        check("feature rank", 2, self.features.rank())?;
        check("feature rows", m, self.features.rows())?;
        if let Some(c) = &self.concept_labels {
            check("concept label rows", m, c.rows())?;
            check("concept label columns", self.concept_names.len(), c.cols())?;
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.class_names.len()) {
            return Err(Error::ClassIndex {
                index: bad,
                classes: self.class_names.len(),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_concepts(&self) -> usize {
        self.concept_names.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let concepts = match &self.concept_labels {
            Some(c) => Some(c.to_tensor().select_rows(indices)?),
            None => None,
        };
        Ok(Batch {
            features: self.features.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            concepts,
        })
    }

    pub fn full_batch(&self) -> Result<Batch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}
