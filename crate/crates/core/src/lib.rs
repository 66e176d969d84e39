//! Unit-based tissue segmentation.
//!
//! Images are cut into fixed 32×32 tiles, every tile is classified by the
//! L-ViT network (a small multi-level CNN backbone with channel/spatial
//! attention, multi-level feature fusion and a transformer stage), and the
//! tile decisions are reassembled into a color mask that is smoothed,
//! discretized back to the class palette and blended over the source image.
//!
//! The crate is `no_std` and only needs `alloc`. Everything that touches the
//! filesystem (PNG, manifests, checkpoints, the CLI) lives in the `uts`
//! companion crate.
//!
//! Module map:
//!
//! - [`tensor`], [`ops`], [`tape`]: dense tensors, the numeric kernels and a
//!   reverse-mode tape used for training.
//! - [`lvit`]: the classifier and its building blocks.
//! - [`tiling`]: tile grids over RGB images and mask assembly.
//! - [`refine`]: separable smoothing, palette discretization, overlay.
//! - [`train`]: loss, SGD, the epoch loop and patient-level folds.
//! - [`metrics`]: confusion matrices, macro metrics, tissue ratios,
//!   operation counts and the label-noise variance trial.
//! - [`synth`]: procedural three-class textures standing in for real slides.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod lvit;
pub mod metrics;
pub mod ops;
pub mod refine;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tiling;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Side length of a segmentation unit in pixels.
pub const TILE_SIZE: usize = 32;

/// Number of tissue classes.
pub const NUM_CLASSES: usize = 3;

/// Tissue classes in palette order. The index is the class label everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TissueClass {
    Tumor = 0,
    Stroma = 1,
    Fat = 2,
}

impl TissueClass {
    pub const ALL: [TissueClass; NUM_CLASSES] =
        [TissueClass::Tumor, TissueClass::Stroma, TissueClass::Fat];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or(Error::LabelOutOfRange(index))
    }

    /// Lower-case name used in manifests and reports.
    pub fn name(self) -> &'static str {
        match self {
            TissueClass::Tumor => "tumor",
            TissueClass::Stroma => "stroma",
            TissueClass::Fat => "fat",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            TissueClass::Tumor => "Tumor",
            TissueClass::Stroma => "Stroma",
            TissueClass::Fat => "Fat",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(name))
    }
}
