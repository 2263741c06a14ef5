//! Sequences: synthetic generation, OTB-style directories and training
//! triplet sampling.

mod otb;
mod synth;
mod triplet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::tensor::Tensor;

pub use otb::{format_box, load_sequence_dir, parse_groundtruth, write_sequence_dir};
pub use synth::{benchmark_specs, generate_sequence, generate_with_truth, SynthSpec, SynthTruth};
pub use triplet::{
    sample_indices, sample_training_triplet, CropSample, TrainingTriplet, TripletConfig, TripletIndices,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Deformation,
    Occlusion,
    ScaleVariation,
    BackgroundClutter,
    MotionBlur,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Deformation,
        Attribute::Occlusion,
        Attribute::ScaleVariation,
        Attribute::BackgroundClutter,
        Attribute::MotionBlur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Deformation => "deformation",
            Attribute::Occlusion => "occlusion",
            Attribute::ScaleVariation => "scale_variation",
            Attribute::BackgroundClutter => "background_clutter",
            Attribute::MotionBlur => "motion_blur",
        }
    }
}

impl std::fmt::Display for Attribute {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Attribute {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Attribute::ALL
            .into_iter()
            .find(|a| a.name() == key)
            .ok_or_else(|| {
                let valid: Vec<_> = Attribute::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown attribute {s:?}; valid tags: {}", valid.join(", ")))
            })
    }
}

/// Frames (`3×H×W` in `[0, 1]`) with one ground-truth box each.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub name: String,
    pub frames: Vec<Tensor>,
    pub gt: Vec<Rect>,
    pub attributes: Vec<Attribute>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(width, height)` of the first frame.
    pub fn frame_size(&self) -> (usize, usize) {
        self.frames.first().map(|f| (f.shape()[2], f.shape()[1])).unwrap_or((0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.gt.len() {
            return Err(Error::Data(format!(
                "sequence {}: {} frames but {} ground-truth boxes",
                self.name,
                self.frames.len(),
                self.gt.len()
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            let (c, _, _) = f.dims3("sequence frame")?;
            if c != 3 {
                return Err(Error::Data(format!("sequence {}: frame {i} has {c} channels", self.name)));
            }
        }
        Ok(())
    }
}
