//! File formats, synthetic data and the perturbation harness.

pub mod checkpoint;
pub mod manifest;
pub mod pgm;
pub mod stability;
pub mod synthetic;
pub mod tensor_file;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use manifest::{
    load_concept_set, load_manifest, read_concept_labels, save_concept_set, save_manifest,
    write_concept_labels, write_dataset, ConceptLabelTable, DatasetManifest, LoadedConceptSet,
    ManifestFile, SampleEntry,
};
pub use stability::{perturb_stability, PerturbationConfig, StabilityReport};
pub use synthetic::{gen_synthetic, SyntheticData, SyntheticSpec};
pub use tensor_file::{load_tensor, save_tensor};
