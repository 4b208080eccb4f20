//! Dataset file formats, model checkpoints, and synthetic data generation.
//!
//! Features, edges, outfits and questions are plain text (inspectable and
//! diffable); checkpoints are binary for precision and size. All writers are
//! deterministic, so identical inputs produce byte-identical files.

pub mod checkpoint;
pub mod synthetic;
pub mod text;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use synthetic::{
    gen_synthetic, DatasetBundle, SyntheticConfig, SyntheticDataset, SyntheticError,
};
pub use text::{
    load_edges, load_features, load_outfits, load_questions, save_edges, save_features,
    save_outfits, save_questions, TextError,
};
