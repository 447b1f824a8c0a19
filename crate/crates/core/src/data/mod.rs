//! Synthetic scenes, fold rotation, image files and the on-disk dataset.

mod dataset;
pub mod folds;
pub mod netpbm;
mod synth;

pub use dataset::{read_dataset, read_meta, scene_id, write_dataset, DatasetEntry, DatasetError, SceneMeta, META_HEADER};
pub use folds::{fold_split, fold_split_shuffled, FoldError, FoldPlan};
pub use netpbm::{read_pfm, read_pgm, read_ppm, write_pfm, write_pgm, write_ppm, NetpbmError};
pub use synth::{
    generate_dataset, generate_scene, is_single_component, kind_counts, KindMix, SceneKind, SynthError,
    SyntheticScene, MAX_FOREGROUND, MIN_FOREGROUND,
};
