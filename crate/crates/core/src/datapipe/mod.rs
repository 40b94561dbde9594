//! Dataset manifests, stratified splitting, balancing augmentation and
//! image preprocessing.
//!
//! The stages run in this order: [`parse_manifest`] → [`stratified_split`]
//! → [`plan_balance`] → [`materialize`], which applies each planned
//! transform to the original image, crops the centered square and resizes
//! it to the network input.

pub mod image;
pub mod manifest;
pub mod materialize;
pub mod plan;
pub mod split;
pub mod transform;

pub use image::{center_square_crop, normalize, preprocess, resize, ImageBuffer, NormStats};
pub use manifest::{parse_manifest, DatasetManifest, ManifestRecord};
pub use materialize::{materialize, FileDataset, MaterializeOptions, MaterializeReport, OutputRecord};
pub use plan::{plan_balance, AugmentationPlan, BalanceTargets, CellPlan};
pub use split::{stratified_split, Split, SplitSpec, DEFAULT_TRAIN_RATIO};
pub use transform::{apply_transform, Transform};

pub const NUM_CLASSES: usize = 7;

/// Diagnostic categories in label order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["MEL", "NV", "BCC", "AKIEC", "BKL", "DF", "VASC"];

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|c| *c == name)
}
