//! Multi-patch scoring, top-k accuracy, cross-evaluation and accuracy binned
//! by foreground ratio.

use std::io::{BufRead, Write};
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetVariant;
use crate::error::{Error, Result};
use crate::geometry::Ratio;
use crate::imaging;
use crate::nn::{Network, TensorBuf};

/// Images are resized to `crop * PRE_CROP_SCALE` before patches are cut.
pub const PRE_CROP_SCALE: f64 = 1.14;

pub fn pre_crop_size(crop: usize) -> u32 {
    (crop as f64 * PRE_CROP_SCALE).round() as u32
}

/// Which set of crops is averaged for a prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PatchProtocol {
    /// Single center crop.
    Center,
    /// Four corners and the center, each also mirrored.
    #[default]
    Ten,
    /// Fifty crops on a 5x10 grid, each also mirrored.
    Hundred,
}

impl std::str::FromStr for PatchProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" | "1" => Ok(Self::Center),
            "ten" | "10" => Ok(Self::Ten),
            "hundred" | "100" => Ok(Self::Hundred),
            other => Err(Error::Config(format!("unknown patch protocol {other:?}"))),
        }
    }
}

/// Crop windows `(x, y, flip)` for an image of `width x height`.
pub fn patch_windows(
    protocol: PatchProtocol,
    width: u32,
    height: u32,
    crop: u32,
) -> Result<Vec<(u32, u32, bool)>> {
    if width < crop || height < crop {
        return Err(Error::ImageTooSmall {
            width,
            height,
            crop,
        });
    }
    let (sx, sy) = (width - crop, height - crop);
    let base: Vec<(u32, u32)> = match protocol {
        PatchProtocol::Center => return Ok(vec![(sx / 2, sy / 2, false)]),
        PatchProtocol::Ten => vec![(0, 0), (sx, 0), (0, sy), (sx, sy), (sx / 2, sy / 2)],
        PatchProtocol::Hundred => {
            let at = |i: u32, n: u32, span: u32| (span * i + (n - 1) / 2) / (n - 1);
            (0..5)
                .flat_map(|r| (0..10).map(move |c| (at(c, 10, sx), at(r, 5, sy))))
                .collect()
        }
    };
    Ok(base
        .iter()
        .map(|&(x, y)| (x, y, false))
        .chain(base.iter().map(|&(x, y)| (x, y, true)))
        .collect())
}

/// Mean pre-softmax scores over the protocol's crops of an image that is
/// already at the pre-crop size.
pub fn patch_predict(
    net: &Network<f32>,
    image: &RgbImage,
    protocol: PatchProtocol,
) -> Result<Vec<f32>> {
    let [_, crop, _] = net.input_shape();
    let windows = patch_windows(protocol, image.width(), image.height(), crop as u32)?;
    let mut buf = Vec::with_capacity(windows.len() * 3 * crop * crop);
    for &(x, y, flip) in &windows {
        imaging::window_chw(image, x, y, crop as u32, flip, &mut buf);
    }
    let batch = TensorBuf::from_vec(&[windows.len(), 3, crop, crop], buf)?;
    let out = net.forward(&batch)?;
    Ok(mean_rows(&out))
}

/// Ten-patch prediction of a pre-crop-size image.
pub fn ten_patch_predict(net: &Network<f32>, image: &RgbImage) -> Result<Vec<f32>> {
    patch_predict(net, image, PatchProtocol::Ten)
}

/// Resizes an arbitrary image to the pre-crop size and predicts.
pub fn predict_image(
    net: &Network<f32>,
    image: &RgbImage,
    protocol: PatchProtocol,
) -> Result<Vec<f32>> {
    let size = pre_crop_size(net.input_shape()[1]);
    patch_predict(net, &imaging::resize(image, size, size), protocol)
}

fn mean_rows(out: &TensorBuf<f32>) -> Vec<f32> {
    let n = out.shape()[0];
    let mut acc = vec![0.0f32; out.shape()[1]];
    for i in 0..n {
        for (a, &v) in acc.iter_mut().zip(out.row(i)) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / n as f32).collect()
}

/// Number of categories scoring strictly above `label`, counting ties with a
/// lower index as above.
pub fn rank_of<T: PartialOrd>(scores: &[T], label: usize) -> usize {
    let s = &scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, v)| v > s || (v == s && j < label))
        .count()
}

/// Fraction of rows whose true label ranks within the top `k`.
pub fn topk_accuracy<T: PartialOrd>(scores: &[Vec<T>], labels: &[u32], k: usize) -> Result<Ratio> {
    if scores.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Empty("score matrix"));
    }
    let c = scores[0].len();
    if k == 0 || k > c {
        return Err(Error::KTooLarge { k, categories: c });
    }
    let mut hits = 0u64;
    for (row, &l) in scores.iter().zip(labels) {
        if row.len() != c {
            return Err(Error::CategoryMismatch(row.len(), c));
        }
        if l as usize >= c {
            return Err(Error::LabelOutOfRange {
                label: l,
                categories: c,
            });
        }
        if rank_of(row, l as usize) < k {
            hits += 1;
        }
    }
    Ok(Ratio::of(hits, scores.len() as u64))
}

/// Scores every test image of a variant.
pub fn score_variant(
    net: &Network<f32>,
    variant: &DatasetVariant,
    protocol: PatchProtocol,
) -> Result<Vec<Vec<f32>>> {
    if variant.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let span = variant.category_span();
    if span > net.category_count() {
        return Err(Error::CategoryMismatch(span, net.category_count()));
    }
    variant
        .items
        .par_iter()
        .map(|i| predict_image(net, &i.image, protocol))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub source_id: String,
    pub label: u32,
    pub scores: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub net_id: String,
    pub dataset_id: String,
    pub top1: Ratio,
    pub top5: Ratio,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scores: Option<Vec<ScoreRecord>>,
}

/// Top-1 and top-5 (or top-C when fewer categories) of a network on a variant.
pub fn evaluate(
    net: &Network<f32>,
    net_id: &str,
    variant: &DatasetVariant,
    protocol: PatchProtocol,
    keep_scores: bool,
) -> Result<EvalReport> {
    let scores = score_variant(net, variant, protocol)?;
    let labels = variant.labels();
    let report = EvalReport {
        net_id: net_id.to_string(),
        dataset_id: variant.id(),
        top1: topk_accuracy(&scores, &labels, 1)?,
        top5: topk_accuracy(&scores, &labels, 5.min(net.category_count()))?,
        scores: keep_scores.then(|| {
            variant
                .items
                .iter()
                .zip(scores)
                .map(|(i, s)| ScoreRecord {
                    source_id: i.record.source_id.clone(),
                    label: i.record.label,
                    scores: s,
                })
                .collect()
        }),
    };
    Ok(report)
}

/// Every network on every dataset; `result[i][j]` is network `i` on set `j`.
pub fn cross_eval(
    nets: &[(String, &Network<f32>)],
    sets: &[&DatasetVariant],
    protocol: PatchProtocol,
) -> Result<Vec<Vec<EvalReport>>> {
    let Some((_, first)) = nets.first() else {
        return Err(Error::Empty("network list"));
    };
    let c = first.category_count();
    if let Some((_, n)) = nets.iter().find(|(_, n)| n.category_count() != c) {
        return Err(Error::CategoryMismatch(n.category_count(), c));
    }
    nets.iter()
        .map(|(id, net)| {
            sets.iter()
                .map(|s| evaluate(net, id, s, protocol, false))
                .collect()
        })
        .collect()
}

/// Accuracy over the samples whose foreground ratio is at most each threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioCurve {
    pub thresholds: Vec<f64>,
    pub counts: Vec<usize>,
    /// `None` where no sample falls under the threshold.
    pub accuracy: Vec<Option<f64>>,
}

pub fn ratio_curve(ratios: &[f64], hits: &[bool], thresholds: &[f64]) -> Result<RatioCurve> {
    if ratios.len() != hits.len() {
        return Err(Error::Config("ratio and hit counts differ".into()));
    }
    if thresholds.is_empty() || thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "thresholds {thresholds:?} must be strictly ascending"
        )));
    }
    let mut counts = Vec::with_capacity(thresholds.len());
    let mut accuracy = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let (n, c) = ratios
            .iter()
            .zip(hits)
            .filter(|(&r, _)| r <= t)
            .fold((0usize, 0usize), |(n, c), (_, &h)| (n + 1, c + h as usize));
        counts.push(n);
        accuracy.push((n > 0).then(|| c as f64 / n as f64));
    }
    Ok(RatioCurve {
        thresholds: thresholds.to_vec(),
        counts,
        accuracy,
    })
}

/// Top-1 accuracy of `net` on `variant` over cumulative foreground-ratio
/// subsets.
pub fn ratio_binned_accuracy(
    net: &Network<f32>,
    variant: &DatasetVariant,
    thresholds: &[f64],
    protocol: PatchProtocol,
) -> Result<RatioCurve> {
    let scores = score_variant(net, variant, protocol)?;
    let ratios: Vec<f64> = variant
        .items
        .iter()
        .map(|i| i.record.foreground_pixel_ratio.value())
        .collect();
    let hits: Vec<bool> = variant
        .items
        .iter()
        .zip(&scores)
        .map(|(i, s)| rank_of(s, i.record.label as usize) == 0)
        .collect();
    ratio_curve(&ratios, &hits, thresholds)
}

pub fn write_scores(path: &Path, rows: &[ScoreRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
