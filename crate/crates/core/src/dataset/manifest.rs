//! Line-delimited JSON manifests. One record per processed image; image
//! paths are relative to the manifest's directory.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    build_variant, merge_labels, AnnotatedSample, BgFilter, DatasetKind, DatasetVariant, Item,
    LabelMerge, Split,
};
use crate::error::{Error, Result};
use crate::geometry::{BoxRect, Ratio};
use crate::imaging;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub source_id: String,
    pub image_path: String,
    pub kind: DatasetKind,
    pub split: Split,
    pub label: u32,
    pub fine_label: u32,
    pub boxes: Vec<BoxRect>,
    pub frame: Option<BoxRect>,
    pub foreground_pixel_ratio: Ratio,
    pub frame_area_ratio: Option<Ratio>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest<'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a ManifestRecord>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Writes the images of every split and one manifest covering all of them.
pub fn write_variant(dir: &Path, splits: &[&DatasetVariant]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    for v in splits {
        v.items
            .par_iter()
            .map(|item| imaging::save_png(&item.image, &dir.join(&item.record.image_path)))
            .collect::<Result<()>>()?;
    }
    let path = dir.join("manifest.jsonl");
    write_manifest(
        &path,
        splits
            .iter()
            .flat_map(|v| v.items.iter().map(|i| &i.record)),
    )?;
    Ok(path)
}

fn load_image(dir: &Path, rec: &ManifestRecord) -> Result<image::RgbImage> {
    imaging::load_png(&dir.join(&rec.image_path)).map_err(|e| Error::UnreadableImage {
        source_id: rec.source_id.clone(),
        message: e.to_string(),
    })
}

/// Loads the records of one split together with their images.
pub fn load_variant(manifest: &Path, split: Split) -> Result<DatasetVariant> {
    let dir = manifest_dir(manifest);
    let records: Vec<_> = read_manifest(manifest)?
        .into_iter()
        .filter(|r| r.split == split)
        .collect();
    let kind = records.first().map_or(DatasetKind::Orig, |r| r.kind);
    let items = records
        .into_par_iter()
        .map(|record| {
            let image = load_image(&dir, &record)?;
            Ok(Item { record, image })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetVariant {
        kind,
        split,
        items,
        manifest_path: Some(manifest.to_path_buf()),
    })
}

/// Loads raw annotated samples from an input manifest (any kind; normally
/// `orig`). Out-of-bounds boxes are rejected here, at ingestion.
pub fn load_samples(manifest: &Path) -> Result<Vec<(Split, AnnotatedSample)>> {
    let dir = manifest_dir(manifest);
    read_manifest(manifest)?
        .into_par_iter()
        .map(|rec| {
            let image = load_image(&dir, &rec)?;
            let sample = AnnotatedSample {
                source_id: rec.source_id,
                image,
                boxes: rec.boxes,
                label: rec.label,
                fine_label: rec.fine_label,
            };
            sample.validate()?;
            Ok((rec.split, sample))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub input: PathBuf,
    pub out: PathBuf,
    pub kinds: Vec<DatasetKind>,
    pub bg_filter: BgFilter,
    pub merge: Option<LabelMerge>,
}

/// Builds every requested kind from an input manifest. Each kind lands in
/// `out/<kind>/manifest.jsonl` with both splits.
pub fn build_datasets(opts: &BuildOptions) -> Result<Vec<PathBuf>> {
    let all = load_samples(&opts.input)?;
    let (mut train, mut test): (Vec<_>, Vec<_>) = (Vec::new(), Vec::new());
    for (split, s) in all {
        match split {
            Split::Train => train.push(s),
            Split::Test => test.push(s),
        }
    }
    if let Some(merge) = &opts.merge {
        train = merge_labels(&train, merge)?;
        test = merge_labels(&test, merge)?;
    }
    let mut written = Vec::new();
    for &kind in &opts.kinds {
        let tr = build_variant(&train, kind, Split::Train, opts.bg_filter)?;
        let te = build_variant(&test, kind, Split::Test, opts.bg_filter)?;
        written.push(write_variant(&opts.out.join(kind.as_str()), &[&tr, &te])?);
    }
    Ok(written)
}
