//! On-disk formats and typed data containers.

pub mod bten;
pub mod cfgfile;
mod types;

pub use bten::{load_array, save_array, RoleTag};
pub use cfgfile::{CfgFile, CfgSection};
pub use types::{
    load_dataset, save_dataset, validate_pairing, BatchLabels, BrainRecording, Dataset, Embedding,
    Modality, SemanticStack, StackKind,
};
