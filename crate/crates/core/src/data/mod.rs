//! Synthetic identities, texture corpora, manifests and run configs.

mod config;
mod manifest;
mod synth;

pub use config::{RunConfig, RESOLVED_CONFIG_NAME};
pub use manifest::{synth_data, DatasetManifest, ManifestEntry, PairList, PairRecord, Split};
pub use synth::{synth_dataset, texture_corpus, Dataset, IdentityPattern, SynthConfig};
