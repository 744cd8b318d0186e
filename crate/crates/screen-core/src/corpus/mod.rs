//! Dataset construction: mask-driven preprocessing, synthetic corpus
//! generation, manifest management and the split protocol.

mod manifest;
mod preprocess;
mod regions;
mod synth;

pub use manifest::{split_dataset, DatasetManifest, ManifestEntry, SplitCounts};
pub use preprocess::{
    preprocess_corpus, write_rejection_report, PreprocessOutcome, Rejection, PREPROCESSED_SIDE,
};
pub use regions::{
    crop_to_lungs, quality_gate, resize_image, resize_mask_nearest, two_largest_regions,
    GateDecision, Region,
};
pub use synth::{generate_synthetic_corpus, SynthConfig};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BitGrid, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Tb,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Normal => write!(f, "normal"),
            Label::Tb => write!(f, "tb"),
        }
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Label::Normal),
            "tb" => Ok(Label::Tb),
            other => Err(Error::Manifest(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Labeled,
    Unlabeled1,
    Unlabeled2,
    Unlabeled3,
    Test,
}

impl Split {
    pub const ALL: [Split; 5] =
        [Split::Labeled, Split::Unlabeled1, Split::Unlabeled2, Split::Unlabeled3, Split::Test];

    pub fn unlabeled_subset(index: usize) -> Option<Split> {
        match index {
            0 => Some(Split::Unlabeled1),
            1 => Some(Split::Unlabeled2),
            2 => Some(Split::Unlabeled3),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Labeled => "labeled",
            Split::Unlabeled1 => "unlabeled_1",
            Split::Unlabeled2 => "unlabeled_2",
            Split::Unlabeled3 => "unlabeled_3",
            Split::Test => "test",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Split::Labeled),
            "unlabeled_1" => Ok(Split::Unlabeled1),
            "unlabeled_2" => Ok(Split::Unlabeled2),
            "unlabeled_3" => Ok(Split::Unlabeled3),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

/// One grayscale image with label, split assignment and, for the synthetic
/// corpus, the planted-lesion ground truth.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Grid,
    pub label: Label,
    pub split: Split,
    pub lesion_mask: Option<BitGrid>,
}

impl ImageSample {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.pixels.min_max();
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
            return Err(Error::invalid(format!("pixel values outside [0,1]: {lo}..{hi}")));
        }
        if let Some(mask) = &self.lesion_mask {
            if mask.dims() != self.pixels.dims() {
                return Err(Error::ShapeMismatch("lesion mask dims differ from pixels".into()));
            }
            if self.label == Label::Normal && !mask.is_empty() {
                return Err(Error::invalid("normal sample carries a non-empty lesion mask"));
            }
        }
        Ok(())
    }
}

/// Lung segmentation mask, aligned with the image it describes.
#[derive(Debug, Clone)]
pub struct LungMask {
    pub bits: BitGrid,
    pub source_dims: (usize, usize),
}

impl LungMask {
    pub fn new(bits: BitGrid) -> Self {
        let dims = bits.dims();
        LungMask { bits, source_dims: dims }
    }
}
