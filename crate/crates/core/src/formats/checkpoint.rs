//! Model checkpoints: `checkpoint.json` plus one tensor file per parameter
//! and per Adam moment.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, ParamStore};
use crate::error::{Error, Result};
use crate::formats::manifest::{read_json, write_json};
use crate::formats::tensor_file::{load_tensor, save_tensor};
use crate::symbolic::Semantics;
use crate::training::{ModelConfig, ModelParams};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDocument {
    pub version: u32,
    pub config: ModelConfig,
    pub semantics: Semantics,
    pub adam: AdamConfig,
    pub adam_step: u64,
    /// Parameter name to tensor file, relative to the checkpoint directory.
    pub params: BTreeMap<String, String>,
    pub adam_first: BTreeMap<String, String>,
    pub adam_second: BTreeMap<String, String>,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, model: &ModelParams) -> Result<()> {
    let dir = dir.as_ref();
    let write_group = |sub: &str, tensors: &mut dyn Iterator<Item = (&String, &crate::Tensor)>| {
        let mut files = BTreeMap::new();
        for (name, t) in tensors {
            let rel = format!("{sub}/{name}.micn");
            save_tensor(dir.join(&rel), t)?;
            files.insert(name.clone(), rel);
        }
        Ok::<_, Error>(files)
    };
    let params = write_group("params", &mut model.params.iter())?;
    let adam_first = write_group("adam_first", &mut model.adam.first.iter())?;
    let adam_second = write_group("adam_second", &mut model.adam.second.iter())?;
    let doc = CheckpointDocument {
        version: CHECKPOINT_VERSION,
        config: model.config,
        semantics: model.semantics,
        adam: model.adam.config,
        adam_step: model.adam.step,
        params,
        adam_first,
        adam_second,
    };
    write_json(&dir.join(CHECKPOINT_FILE), &doc)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ModelParams> {
    let dir = dir.as_ref();
    let path = dir.join(CHECKPOINT_FILE);
    let doc: CheckpointDocument = read_json(&path)?;
    if doc.version != CHECKPOINT_VERSION {
        return Err(Error::malformed(&path, format!("unsupported checkpoint version {}", doc.version)));
    }
    let load_group = |files: &BTreeMap<String, String>| {
        files
            .iter()
            .map(|(name, rel)| Ok((name.clone(), load_tensor(dir.join(rel))?)))
            .collect::<Result<BTreeMap<_, _>>>()
    };
    let mut params = ParamStore::new();
    for (name, t) in load_group(&doc.params)? {
        params.insert(name, t);
    }
    let adam = AdamState {
        config: doc.adam,
        step: doc.adam_step,
        first: load_group(&doc.adam_first)?,
        second: load_group(&doc.adam_second)?,
    };
    let model = ModelParams {
        config: doc.config,
        semantics: doc.semantics,
        params,
        adam,
    };
    model
        .check_shapes()
        .map_err(|e| Error::malformed(&path, e.to_string()))?;
    for (what, group) in [("first", &model.adam.first), ("second", &model.adam.second)] {
        for (name, t) in group {
            if model.params.get(name).map(|p| p.shape()) != Some(t.shape()) {
                return Err(Error::malformed(&path, format!("{what} moment `{name}` does not match its parameter")));
            }
        }
        if group.len() != model.params.len() {
            return Err(Error::malformed(&path, format!("{what} moments cover {} of {} parameters", group.len(), model.params.len())));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelParams {
        let cfg = ModelConfig {
            feature_dim: 3,
            num_concepts: 2,
            num_classes: 2,
            width: 2,
            hidden: 3,
        };
        ModelParams::init(cfg, Semantics::Filtered, AdamConfig::default(), 5).unwrap()
    }

    #[test]
    fn round_trip_is_exact_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save_checkpoint(dir.path(), &m).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.semantics, Semantics::Filtered);
        for (name, t) in m.params.iter() {
            let narrowed = t.map(|v| f64::from(v as f32));
            assert_eq!(back.params.get(name).unwrap(), &narrowed);
        }
    }

    #[test]
    fn missing_parameter_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model()).unwrap();
        std::fs::remove_file(dir.path().join("params/fuse.w.micn")).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
