//! Annotated samples and the four dataset variants built from them.

mod construct;
mod manifest;
mod synth;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BoxRect, Ratio};

pub use construct::{
    build_bg, build_fg, build_hybrid, build_variant, filter_bg_train, merge_labels, BgFilter,
    LabelMerge,
};
pub use manifest::{
    build_datasets, load_samples, load_variant, read_manifest, write_manifest, write_variant,
    BuildOptions, ManifestRecord,
};
pub use synth::{synth_generate, CategorySpec, Glyph, SynthConfig, SynthCorpus, Texture};

/// One annotated image: the unit of dataset construction.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSample {
    pub source_id: String,
    pub image: RgbImage,
    pub boxes: Vec<BoxRect>,
    pub label: u32,
    /// Label before any merge; equals `label` for unmerged data.
    pub fine_label: u32,
}

impl AnnotatedSample {
    pub fn new(
        source_id: impl Into<String>,
        image: RgbImage,
        boxes: Vec<BoxRect>,
        label: u32,
    ) -> Result<Self> {
        let s = Self {
            source_id: source_id.into(),
            image,
            boxes,
            label,
            fine_label: label,
        };
        s.validate()?;
        Ok(s)
    }

    /// Every box must lie inside the image.
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.image.dimensions();
        for b in &self.boxes {
            if !b.fits_within(w, h) {
                return Err(Error::InvalidBox {
                    x0: b.x0(),
                    y0: b.y0(),
                    x1: b.x1(),
                    y1: b.y1(),
                    reason: "outside image bounds",
                });
            }
        }
        Ok(())
    }

    pub fn foreground_pixel_ratio(&self) -> Ratio {
        geometry::foreground_pixel_ratio(&self.boxes, self.image.width(), self.image.height())
    }

    pub fn frame_area_ratio(&self) -> Result<Ratio> {
        geometry::frame_area_ratio(&self.boxes, self.image.width(), self.image.height())
    }

    pub fn frame(&self) -> Option<BoxRect> {
        geometry::enclosing_frame(&self.boxes).ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Orig,
    Fg,
    Bg,
    Hybrid,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [Self::Orig, Self::Fg, Self::Bg, Self::Hybrid];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Orig => "orig",
            Self::Fg => "fg",
            Self::Bg => "bg",
            Self::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "orig" => Ok(Self::Orig),
            "fg" => Ok(Self::Fg),
            "bg" => Ok(Self::Bg),
            "hybrid" => Ok(Self::Hybrid),
            other => Err(Error::Config(format!("unknown dataset kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A processed sample inside a variant: the manifest record plus its pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub record: ManifestRecord,
    pub image: RgbImage,
}

/// One split of one dataset kind.
#[derive(Clone, Debug)]
pub struct DatasetVariant {
    pub kind: DatasetKind,
    pub split: Split,
    pub items: Vec<Item>,
    pub manifest_path: Option<PathBuf>,
}

impl DatasetVariant {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.items.iter().map(|i| i.record.label).collect()
    }

    /// One past the largest label present.
    pub fn category_span(&self) -> usize {
        self.items
            .iter()
            .map(|i| i.record.label as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn id(&self) -> String {
        format!("{}-{}", self.kind, self.split)
    }
}
