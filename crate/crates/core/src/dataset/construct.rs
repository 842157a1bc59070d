use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AnnotatedSample, DatasetKind, DatasetVariant, Item, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::geometry::{enclosing_frame, Ratio};
use crate::imaging;

/// Crop to the enclosing frame. With several boxes, frame pixels outside
/// every box are zeroed.
pub fn build_fg(sample: &AnnotatedSample) -> Result<RgbImage> {
    let frame = enclosing_frame(&sample.boxes)?;
    let mut out = imaging::crop(&sample.image, &frame);
    if sample.boxes.len() > 1 {
        let local: Vec<_> = sample
            .boxes
            .iter()
            .map(|b| {
                crate::geometry::BoxRect::new(
                    b.x0() - frame.x0(),
                    b.y0() - frame.y0(),
                    b.x1() - frame.x0(),
                    b.y1() - frame.y0(),
                )
            })
            .collect::<Result<_>>()?;
        for (x, y, p) in out.enumerate_pixels_mut() {
            if !local.iter().any(|b| b.contains_pixel(x, y)) {
                *p = image::Rgb([0, 0, 0]);
            }
        }
    }
    Ok(out)
}

/// Zero every pixel inside any box; leave the rest untouched.
pub fn build_bg(sample: &AnnotatedSample) -> Result<RgbImage> {
    if sample.boxes.is_empty() {
        return Err(Error::NoBoxes);
    }
    let mut out = sample.image.clone();
    imaging::zero_boxes(&mut out, &sample.boxes);
    Ok(out)
}

/// FG construction when annotated, the untouched image otherwise.
pub fn build_hybrid(sample: &AnnotatedSample) -> RgbImage {
    if sample.boxes.is_empty() {
        sample.image.clone()
    } else {
        // Cannot fail: boxes are non-empty.
        build_fg(sample).expect("boxed sample")
    }
}

/// Which measure drives the background-training filter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BgFilter {
    /// Enclosing-frame area over image area.
    #[default]
    Frame,
    /// Box-union pixel count over image pixels.
    Union,
}

impl std::str::FromStr for BgFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame" => Ok(Self::Frame),
            "union" => Ok(Self::Union),
            other => Err(Error::Config(format!("unknown bg filter `{other}`"))),
        }
    }
}

const BG_KEEP_LIMIT: f64 = 0.5;

fn bg_measure(sample: &AnnotatedSample, filter: BgFilter) -> Result<Ratio> {
    match filter {
        BgFilter::Frame => sample.frame_area_ratio(),
        BgFilter::Union => Ok(sample.foreground_pixel_ratio()),
    }
}

/// Keeps the training samples whose measure is at most one half. A ratio of
/// exactly 0.5 is kept.
pub fn filter_bg_train<'a>(
    samples: impl IntoIterator<Item = &'a AnnotatedSample>,
    filter: BgFilter,
) -> Result<Vec<&'a AnnotatedSample>> {
    let mut kept = Vec::new();
    for s in samples {
        if bg_measure(s, filter)?.value() <= BG_KEEP_LIMIT {
            kept.push(s);
        }
    }
    Ok(kept)
}

/// Fine-to-coarse label mapping with display names for the coarse labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMerge {
    #[serde(default)]
    pub mapping: BTreeMap<u32, u32>,
    /// Display name per coarse label, indexed by coarse id.
    #[serde(default)]
    pub names: Vec<String>,
}

impl LabelMerge {
    pub fn identity(labels: impl IntoIterator<Item = u32>) -> Self {
        Self {
            mapping: labels.into_iter().map(|l| (l, l)).collect(),
            names: Vec::new(),
        }
    }

    pub fn coarse_count(&self) -> usize {
        self.mapping.values().collect::<BTreeSet<_>>().len()
    }

    pub fn map(&self, fine: u32) -> Result<u32> {
        self.mapping
            .get(&fine)
            .copied()
            .ok_or(Error::UnmappedLabel(fine))
    }

    pub fn display_name(&self, coarse: u32) -> String {
        self.names
            .get(coarse as usize)
            .cloned()
            .unwrap_or_else(|| format!("category {coarse}"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let merge: LabelMerge = serde_json::from_str(&text)?;
        Ok(merge)
    }
}

/// Replaces every label by its coarse image, keeping the fine label.
pub fn merge_labels(
    samples: &[AnnotatedSample],
    merge: &LabelMerge,
) -> Result<Vec<AnnotatedSample>> {
    samples
        .iter()
        .map(|s| {
            let mut out = s.clone();
            out.label = merge.map(s.fine_label)?;
            Ok(out)
        })
        .collect()
}

fn record_for(sample: &AnnotatedSample, kind: DatasetKind, split: Split) -> Result<ManifestRecord> {
    Ok(ManifestRecord {
        source_id: sample.source_id.clone(),
        image_path: format!("images/{}/{}.png", split, sample.source_id),
        kind,
        split,
        label: sample.label,
        fine_label: sample.fine_label,
        boxes: sample.boxes.clone(),
        frame: sample.frame(),
        foreground_pixel_ratio: sample.foreground_pixel_ratio(),
        frame_area_ratio: if sample.boxes.is_empty() {
            None
        } else {
            Some(sample.frame_area_ratio()?)
        },
    })
}

/// Builds one split of one variant. Output order is by `source_id` regardless
/// of input order or worker count.
pub fn build_variant(
    samples: &[AnnotatedSample],
    kind: DatasetKind,
    split: Split,
    filter: BgFilter,
) -> Result<DatasetVariant> {
    let mut chosen: Vec<&AnnotatedSample> = match kind {
        DatasetKind::Orig | DatasetKind::Hybrid => samples.iter().collect(),
        DatasetKind::Fg => samples.iter().filter(|s| !s.boxes.is_empty()).collect(),
        DatasetKind::Bg => {
            let boxed = samples.iter().filter(|s| !s.boxes.is_empty());
            match split {
                Split::Train => filter_bg_train(boxed, filter)?,
                Split::Test => boxed.collect(),
            }
        }
    };
    chosen.sort_by(|a, b| a.source_id.cmp(&b.source_id));

    let items = chosen
        .par_iter()
        .map(|s| {
            let image = match kind {
                DatasetKind::Orig => s.image.clone(),
                DatasetKind::Fg => build_fg(s)?,
                DatasetKind::Bg => build_bg(s)?,
                DatasetKind::Hybrid => build_hybrid(s),
            };
            Ok(Item {
                record: record_for(s, kind, split)?,
                image,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(DatasetVariant {
        kind,
        split,
        items,
        manifest_path: None,
    })
}
