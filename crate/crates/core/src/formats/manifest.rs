//! Dataset manifests, concept-set documents and concept-label CSVs.
//!
//! Relative paths inside a JSON document are resolved against the
//! document's own directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{ConceptLabelMatrix, ConceptProvenance, ConceptSet, FeatureMap};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::formats::tensor_file::{load_tensor, save_tensor};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const ID_COLUMN: &str = "sample_id";

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))
}

/// JSON description of a concept set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptSetDocument {
    pub names: Vec<String>,
    /// Tensor file with one text embedding per concept (`N × D`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    /// Tensor file with one text embedding per class (`C × D`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_embeddings: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Vec<ConceptProvenance>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConceptSet {
    pub concepts: ConceptSet,
    pub class_names: Option<Vec<String>>,
    pub class_embeddings: Option<Tensor>,
    pub provenance: Option<Vec<ConceptProvenance>>,
}

pub fn load_concept_set(path: impl AsRef<Path>) -> Result<LoadedConceptSet> {
    let path = path.as_ref();
    let doc: ConceptSetDocument = read_json(path)?;
    let base = base_dir(path);
    let embeddings = doc.embeddings.as_ref().map(|p| load_tensor(base.join(p))).transpose()?;
    let class_embeddings = doc
        .class_embeddings
        .as_ref()
        .map(|p| load_tensor(base.join(p)))
        .transpose()?;
    if let (Some(names), Some(emb)) = (&doc.class_names, &class_embeddings) {
        if emb.rank() != 2 || emb.rows() != names.len() {
            return Err(Error::malformed(
                path,
                format!(
                    "class embeddings have shape {:?} for {} classes",
                    emb.shape(),
                    names.len()
                ),
            ));
        }
    }
    let concepts = ConceptSet::new(doc.names, embeddings)
        .map_err(|e| Error::malformed(path, e.to_string()))?;
    Ok(LoadedConceptSet {
        concepts,
        class_names: doc.class_names,
        class_embeddings,
        provenance: doc.provenance,
    })
}

/// Writes `<stem>.json` plus tensor files for whatever embeddings exist.
pub fn save_concept_set(
    dir: impl AsRef<Path>,
    stem: &str,
    set: &LoadedConceptSet,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut doc = ConceptSetDocument {
        names: set.concepts.names().to_vec(),
        class_names: set.class_names.clone(),
        provenance: set.provenance.clone(),
        ..Default::default()
    };
    if let Some(e) = set.concepts.embeddings() {
        let name = format!("{stem}.embeddings.micn");
        save_tensor(dir.join(&name), e)?;
        doc.embeddings = Some(name);
    }
    if let Some(e) = &set.class_embeddings {
        let name = format!("{stem}.class_embeddings.micn");
        save_tensor(dir.join(&name), e)?;
        doc.class_embeddings = Some(name);
    }
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &doc)?;
    Ok(path)
}

/// Concept labels as read from or written to CSV.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptLabelTable {
    pub sample_ids: Vec<String>,
    pub concept_names: Vec<String>,
    pub labels: ConceptLabelMatrix,
}

pub fn write_concept_labels(path: impl AsRef<Path>, table: &ConceptLabelTable) -> Result<()> {
    let path = path.as_ref();
    if table.sample_ids.len() != table.labels.rows() || table.concept_names.len() != table.labels.cols() {
        return Err(Error::DimensionMismatch {
            what: "concept label table".into(),
            expected: table.sample_ids.len() * table.concept_names.len(),
            actual: table.labels.rows() * table.labels.cols(),
        });
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    let mut header = vec![ID_COLUMN.to_string()];
    header.extend(table.concept_names.iter().cloned());
    w.write_record(&header)?;
    for (r, id) in table.sample_ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(table.labels.row(r).iter().map(|&b| if b { "1" } else { "0" }.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_concept_labels(path: impl AsRef<Path>) -> Result<ConceptLabelTable> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = r.headers()?.clone();
    if header.get(0) != Some(ID_COLUMN) {
        return Err(Error::malformed(path, format!("first column must be `{ID_COLUMN}`")));
    }
    let concept_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut sample_ids = Vec::new();
    let mut bits = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::malformed(
                path,
                format!("row {} has {} fields, expected {}", line + 1, rec.len(), header.len()),
            ));
        }
        sample_ids.push(rec[0].to_string());
        for (k, v) in rec.iter().skip(1).enumerate() {
            bits.push(match v {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::malformed(
                        path,
                        format!(
                            "row {}, column `{}`: expected 0 or 1, got {other:?}",
                            line + 1,
                            concept_names[k]
                        ),
                    ))
                }
            });
        }
    }
    let labels = ConceptLabelMatrix::new(sample_ids.len(), concept_names.len(), bits)?;
    Ok(ConceptLabelTable {
        sample_ids,
        concept_names,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub label: usize,
    /// Tensor file holding an `H × W × D` visual feature map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_map: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub concept_set: String,
    /// Tensor file of backbone features, `M × F`, rows in sample order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_labels: Option<String>,
    pub samples: Vec<SampleEntry>,
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestFile {
    pub path: PathBuf,
    pub manifest: DatasetManifest,
}

impl ManifestFile {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        base_dir(&self.path).join(rel)
    }

    pub fn concept_set(&self) -> Result<LoadedConceptSet> {
        load_concept_set(self.resolve(&self.manifest.concept_set))
    }

    pub fn feature_map(&self, sample: usize) -> Result<FeatureMap> {
        let s = &self.manifest.samples[sample];
        let rel = s.feature_map.as_ref().ok_or_else(|| {
            Error::malformed(&self.path, format!("sample `{}` has no feature map", s.id))
        })?;
        FeatureMap::new(load_tensor(self.resolve(rel))?)
    }

    /// Features, labels and (when listed) concept labels as a [`Dataset`].
    pub fn dataset(&self) -> Result<Dataset> {
        let m = &self.manifest;
        let bad = |reason: String| Error::malformed(&self.path, reason);
        let concepts = self.concept_set()?;
        let rel = m
            .features
            .as_ref()
            .ok_or_else(|| bad("manifest lists no features tensor".into()))?;
        let features = load_tensor(self.resolve(rel))?;
        if features.rank() != 2 || features.rows() != m.samples.len() || features.cols() != m.feature_dim {
            return Err(bad(format!(
                "features have shape {:?}, expected [{}, {}]",
                features.shape(),
                m.samples.len(),
                m.feature_dim
            )));
        }
        let ids: Vec<String> = m.samples.iter().map(|s| s.id.clone()).collect();
        let concept_labels = match &m.concept_labels {
            None => None,
            Some(rel) => {
                let table = read_concept_labels(self.resolve(rel))?;
                Some(align_labels(&table, &ids, concepts.concepts.names()).map_err(|e| bad(e.to_string()))?)
            }
        };
        Dataset::new(
            ids,
            features,
            m.samples.iter().map(|s| s.label).collect(),
            concept_labels,
            concepts.concepts.names().to_vec(),
            m.class_names.clone(),
        )
        .map_err(|e| bad(e.to_string()))
    }
}

/// Reorders a label table to the given sample and concept order.
pub fn align_labels(
    table: &ConceptLabelTable,
    ids: &[String],
    names: &[String],
) -> Result<ConceptLabelMatrix> {
    let col_of = |name: &String| {
        table
            .concept_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidConfig(format!("concept `{name}` missing from label CSV")))
    };
    let cols: Vec<usize> = names.iter().map(col_of).collect::<Result<_>>()?;
    let index: std::collections::HashMap<&str, usize> = table
        .sample_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut bits = Vec::with_capacity(ids.len() * names.len());
    for id in ids {
        let r = *index
            .get(id.as_str())
            .ok_or_else(|| Error::InvalidConfig(format!("sample `{id}` missing from label CSV")))?;
        bits.extend(cols.iter().map(|&c| table.labels.get(r, c)));
    }
    ConceptLabelMatrix::new(ids.len(), names.len(), bits)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<ManifestFile> {
    let path = path.as_ref();
    let manifest: DatasetManifest = read_json(path)?;
    let bad = |reason: String| Err(Error::malformed(path, reason));
    if manifest.version != MANIFEST_VERSION {
        return bad(format!("unsupported manifest version {}", manifest.version));
    }
    if manifest.class_names.len() != manifest.num_classes {
        return bad(format!(
            "{} class names for {} classes",
            manifest.class_names.len(),
            manifest.num_classes
        ));
    }
    let mut seen = std::collections::HashSet::new();
    for s in &manifest.samples {
        if !seen.insert(&s.id) {
            return bad(format!("duplicate sample id `{}`", s.id));
        }
        if s.label >= manifest.num_classes {
            return bad(format!("sample `{}` has label {} of {} classes", s.id, s.label, manifest.num_classes));
        }
    }
    Ok(ManifestFile {
        path: path.to_path_buf(),
        manifest,
    })
}

pub fn save_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    write_json(path.as_ref(), manifest)
}

/// Writes a dataset as `manifest.json`, `features.micn`, `concepts.json`
/// and (when present) `concept_labels.csv` under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<PathBuf> {
    let dir = dir.as_ref();
    save_tensor(dir.join("features.micn"), &dataset.features)?;
    let set = LoadedConceptSet {
        concepts: ConceptSet::new(dataset.concept_names.clone(), None)?,
        class_names: Some(dataset.class_names.clone()),
        class_embeddings: None,
        provenance: None,
    };
    save_concept_set(dir, "concepts", &set)?;
    let concept_labels = match &dataset.concept_labels {
        Some(labels) => {
            write_concept_labels(
                dir.join("concept_labels.csv"),
                &ConceptLabelTable {
                    sample_ids: dataset.sample_ids.clone(),
                    concept_names: dataset.concept_names.clone(),
                    labels: labels.clone(),
                },
            )?;
            Some("concept_labels.csv".to_string())
        }
        None => None,
    };
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        feature_dim: dataset.feature_dim(),
        num_classes: dataset.num_classes(),
        class_names: dataset.class_names.clone(),
        concept_set: "concepts.json".into(),
        features: Some("features.micn".into()),
        concept_labels,
        samples: dataset
            .sample_ids
            .iter()
            .zip(&dataset.labels)
            .map(|(id, &label)| SampleEntry {
                id: id.clone(),
                label,
                feature_map: None,
            })
            .collect(),
    };
    let path = dir.join("manifest.json");
    save_manifest(&path, &manifest)?;
    Ok(path)
}
