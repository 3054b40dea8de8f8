//! Partially labeled annotations, the E/A/B partitioner, preprocessing, batch
//! sampling and a synthetic generator with emotion-correlated action units.

mod batch;
mod dataset;
mod manifest;
mod packed;
mod partition;
mod preprocess;
mod synth;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::nn::NUM_AUS;

pub use batch::make_batches;
pub use dataset::{packed_path_for, Dataset};
pub use manifest::{format_record, load_annotations, parse_manifest, write_manifest};
pub use packed::{read_packed_images, write_packed_images, PACKED_MAGIC, PACKED_VERSION};
pub use partition::{partition, DatasetPartition};
pub use preprocess::{preprocess, PreprocessConfig, RawImage};
pub use synth::{synth_generate, SynthConfig, SynthOutput, DEFAULT_AU_BASE_RATES, DEFAULT_PROTOTYPES};

/// Where a record's pixels live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageRef {
    /// Image file on disk, relative to the manifest's directory.
    Path(PathBuf),
    /// Index into the packed image file stored next to the manifest.
    Packed(usize),
}

impl ImageRef {
    const PACKED_PREFIX: &'static str = "packed:";

    pub fn parse(s: &str) -> Self {
        match s
            .strip_prefix(Self::PACKED_PREFIX)
            .and_then(|i| i.parse().ok())
        {
            Some(i) => ImageRef::Packed(i),
            None => ImageRef::Path(PathBuf::from(s)),
        }
    }
}

impl std::fmt::Display for ImageRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ImageRef::Path(p) => write!(f, "{}", p.display()),
            ImageRef::Packed(i) => write!(f, "{}{i}", Self::PACKED_PREFIX),
        }
    }
}

pub type AuVector = [u8; NUM_AUS];

/// One sample with whichever labels it has.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub image: ImageRef,
    /// Expression class in 0..7.
    pub expr: Option<u8>,
    pub aus: Option<AuVector>,
}

impl AnnotationRecord {
    pub fn new(image: ImageRef, expr: Option<u8>, aus: Option<AuVector>) -> Self {
        AnnotationRecord {
            id: image.to_string(),
            image,
            expr,
            aus,
        }
    }

    pub fn has_any_label(&self) -> bool {
        self.expr.is_some() || self.aus.is_some()
    }
}
