//! Edge-density box proposals, non-maximum suppression and recall curves.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetVariant;
use crate::error::{Error, Result};
use crate::geometry::{enclosing_frame, iou, BoxRect, Ratio};
use crate::imaging;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    /// Gradient magnitude above which a pixel counts as an edge.
    pub edge_threshold: f32,
    /// Width of the boundary band, in pixels.
    pub band: u32,
    /// Weight of band edges against interior edges.
    pub lambda: f64,
    /// Exponent of the area normalization.
    pub kappa: f64,
    pub scale_count: usize,
    /// Smallest and largest candidate area as a fraction of the image.
    pub scale_range: [f64; 2],
    /// Width over height.
    pub aspects: Vec<f64>,
    /// Sliding stride as a fraction of the box side.
    pub stride_frac: f64,
    pub nms_iou: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            edge_threshold: 60.0,
            band: 2,
            lambda: 1.0,
            kappa: 0.7,
            scale_count: 6,
            scale_range: [0.1, 0.9],
            aspects: vec![0.5, 1.0, 2.0],
            stride_frac: 0.125,
            nms_iou: 0.8,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        let ok = self.edge_threshold.is_finite()
            && self.lambda >= 0.0
            && self.kappa >= 0.0
            && self.scale_count >= 1
            && lo > 0.0
            && lo <= hi
            && hi <= 1.0
            && !self.aspects.is_empty()
            && self.aspects.iter().all(|a| *a > 0.0 && a.is_finite())
            && self.stride_frac > 0.0
            && (0.0..=1.0).contains(&self.nms_iou);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid proposal config {self:?}")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub rect: BoxRect,
    pub score: f64,
}

/// Binary edge mask, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    width: u32,
    height: u32,
    mask: Vec<bool>,
}

impl EdgeMap {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.mask[(y * self.width + x) as usize]
    }

    pub fn from_mask(width: u32, height: u32, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != (width * height) as usize {
            return Err(Error::Config(
                "edge mask length does not match dimensions".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            mask,
        })
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Marks pixels whose luminance gradient (central differences, border
/// replicated) has magnitude above `threshold`.
pub fn edge_map(image: &RgbImage, threshold: f32) -> EdgeMap {
    let (w, h) = image.dimensions();
    let lum: Vec<f32> = image.pixels().map(imaging::luminance).collect();
    let at = |x: i64, y: i64| {
        lum[(y.clamp(0, h as i64 - 1) * w as i64 + x.clamp(0, w as i64 - 1)) as usize]
    };
    let mut mask = Vec::with_capacity((w * h) as usize);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = (at(x + 1, y) - at(x - 1, y)) * 0.5;
            let gy = (at(x, y + 1) - at(x, y - 1)) * 0.5;
            mask.push((gx * gx + gy * gy).sqrt() > threshold);
        }
    }
    EdgeMap {
        width: w,
        height: h,
        mask,
    }
}

/// Summed-area table over an edge mask.
pub struct EdgeIntegral {
    width: u32,
    table: Vec<u32>,
}

impl EdgeIntegral {
    pub fn new(edges: &EdgeMap) -> Self {
        let (w, h) = (edges.width as usize, edges.height as usize);
        let mut table = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += edges.mask[y * w + x] as u32;
                table[(y + 1) * (w + 1) + x + 1] = table[y * (w + 1) + x + 1] + row;
            }
        }
        Self {
            width: edges.width,
            table,
        }
    }

    /// Edge pixels in `[x0, x1) x [y0, y1)`.
    pub fn sum(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> u32 {
        let s = self.width as usize + 1;
        let t = |x: u32, y: u32| self.table[y as usize * s + x as usize];
        t(x1, y1) + t(x0, y0) - t(x0, y1) - t(x1, y0)
    }
}

/// `max(0, interior - lambda * band) / area^kappa`; zero for boxes narrower
/// than twice the band.
pub fn score_box(integral: &EdgeIntegral, rect: &BoxRect, config: &ProposalConfig) -> f64 {
    let w = config.band;
    if rect.width() < 2 * w || rect.height() < 2 * w {
        return 0.0;
    }
    let total = integral.sum(rect.x0(), rect.y0(), rect.x1(), rect.y1()) as f64;
    let interior = integral.sum(rect.x0() + w, rect.y0() + w, rect.x1() - w, rect.y1() - w) as f64;
    let raw = (interior - config.lambda * (total - interior)).max(0.0);
    raw / (rect.area() as f64).powf(config.kappa)
}

/// Sliding-window candidates over every scale and aspect ratio.
pub fn candidate_grid(width: u32, height: u32, config: &ProposalConfig) -> Vec<BoxRect> {
    let [lo, hi] = config.scale_range;
    let n = config.scale_count;
    let image_area = width as f64 * height as f64;
    let mut out = Vec::new();
    for s in 0..n {
        let frac = if n == 1 {
            lo
        } else {
            lo * (hi / lo).powf(s as f64 / (n - 1) as f64)
        };
        let area = frac * image_area;
        for &aspect in &config.aspects {
            let bw = ((area * aspect).sqrt().round() as u32).clamp(1, width);
            let bh = ((area / aspect).sqrt().round() as u32).clamp(1, height);
            for y in positions(height, bh, config.stride_frac) {
                for x in positions(width, bw, config.stride_frac) {
                    out.push(BoxRect::new(x, y, x + bw, y + bh).expect("non-empty candidate"));
                }
            }
        }
    }
    out.sort_by_key(|b| b.as_array());
    out.dedup();
    out
}

fn positions(extent: u32, side: u32, stride_frac: f64) -> Vec<u32> {
    let last = extent - side;
    let stride = ((side as f64 * stride_frac).round() as u32).max(1);
    let mut v: Vec<u32> = (0..=last).step_by(stride as usize).collect();
    if *v.last().expect("starts at 0") != last {
        v.push(last);
    }
    v
}

/// Greedy suppression over boxes sorted by descending score: a box is kept
/// unless it overlaps an already kept box with IoU above `threshold`.
pub fn nms(sorted: &[ScoredBox], threshold: f64, limit: usize) -> Vec<ScoredBox> {
    let mut kept: Vec<ScoredBox> = Vec::new();
    for b in sorted {
        if kept.len() == limit {
            break;
        }
        if kept
            .iter()
            .all(|k| iou(&k.rect, &b.rect).value() <= threshold)
        {
            kept.push(*b);
        }
    }
    kept
}

/// Top-`k` proposals for an image, best first.
pub fn generate(image: &RgbImage, k: usize, config: &ProposalConfig) -> Result<Vec<ScoredBox>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    config.validate()?;
    let edges = edge_map(image, config.edge_threshold);
    let integral = EdgeIntegral::new(&edges);
    let mut scored: Vec<ScoredBox> = candidate_grid(image.width(), image.height(), config)
        .into_iter()
        .map(|rect| ScoredBox {
            score: score_box(&integral, &rect, config),
            rect,
        })
        .collect();
    scored.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then_with(|| a.rect.as_array().cmp(&b.rect.as_array()))
    });
    Ok(nms(&scored, config.nms_iou, k))
}

/// Proposals for every image of a variant, keyed by source id.
pub fn propose_variant(
    variant: &DatasetVariant,
    k: usize,
    config: &ProposalConfig,
) -> Result<BTreeMap<String, Vec<ScoredBox>>> {
    variant
        .items
        .par_iter()
        .map(|i| Ok((i.record.source_id.clone(), generate(&i.image, k, config)?)))
        .collect()
}

/// Fraction of ground truths matched within the first `k` proposals, for
/// `k = 1..=k_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub iou_threshold: f64,
    pub recall: Vec<Ratio>,
}

impl RecallCurve {
    pub fn at(&self, k: usize) -> Ratio {
        self.recall[k.clamp(1, self.recall.len()) - 1]
    }

    pub fn rows(&self) -> Vec<CurveRow> {
        self.recall
            .iter()
            .enumerate()
            .map(|(i, r)| CurveRow {
                k: i + 1,
                recall: *r,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub k: usize,
    pub recall: Ratio,
}

pub fn recall_cdf(
    proposals: &[Vec<BoxRect>],
    truths: &[BoxRect],
    iou_threshold: f64,
    k_max: usize,
) -> Result<RecallCurve> {
    if k_max < 1 {
        return Err(Error::Config("k_max must be at least 1".into()));
    }
    if proposals.len() != truths.len() {
        return Err(Error::Config(format!(
            "{} proposal lists for {} ground truths",
            proposals.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::Empty("ground truth list"));
    }
    let mut first_hit = vec![0u64; k_max + 1];
    for (list, gt) in proposals.iter().zip(truths) {
        if let Some(r) = list
            .iter()
            .take(k_max)
            .position(|p| iou(p, gt).value() >= iou_threshold)
        {
            first_hit[r + 1] += 1;
        }
    }
    let n = truths.len() as u64;
    let mut acc = 0;
    let recall = first_hit[1..]
        .iter()
        .map(|&h| {
            acc += h;
            Ratio::of(acc, n)
        })
        .collect();
    Ok(RecallCurve {
        iou_threshold,
        recall,
    })
}

/// Recall of the proposals for every boxed sample of a variant; the ground
/// truth of a multi-box sample is its enclosing frame.
pub fn variant_recall(
    variant: &DatasetVariant,
    proposals: &BTreeMap<String, Vec<ScoredBox>>,
    iou_threshold: f64,
    k_max: usize,
) -> Result<RecallCurve> {
    let mut lists = Vec::new();
    let mut truths = Vec::new();
    for item in &variant.items {
        if item.record.boxes.is_empty() {
            continue;
        }
        truths.push(enclosing_frame(&item.record.boxes)?);
        lists.push(
            proposals
                .get(&item.record.source_id)
                .map(|v| v.iter().map(|s| s.rect).collect())
                .unwrap_or_default(),
        );
    }
    recall_cdf(&lists, &truths, iou_threshold, k_max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub source_id: String,
    pub rank: usize,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub score: f64,
}

pub fn write_proposals(path: &Path, proposals: &BTreeMap<String, Vec<ScoredBox>>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (id, list) in proposals {
        for (i, p) in list.iter().enumerate() {
            let rec = ProposalRecord {
                source_id: id.clone(),
                rank: i + 1,
                x0: p.rect.x0(),
                y0: p.rect.y0(),
                x1: p.rect.x1(),
                y1: p.rect.y1(),
                score: p.score,
            };
            serde_json::to_writer(&mut f, &rec)?;
            f.write_all(b"\n")?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Reads a proposal file, which may come from any external generator. Lists
/// are ordered by rank.
pub fn read_proposals(path: &Path) -> Result<BTreeMap<String, Vec<ScoredBox>>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut ranked: BTreeMap<String, Vec<(usize, ScoredBox)>> = BTreeMap::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let rec: ProposalRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let rect = BoxRect::new(rec.x0, rec.y0, rec.x1, rec.y1).map_err(|e| bad(e.to_string()))?;
        ranked.entry(rec.source_id).or_default().push((
            rec.rank,
            ScoredBox {
                rect,
                score: rec.score,
            },
        ));
    }
    Ok(ranked
        .into_iter()
        .map(|(id, mut v)| {
            v.sort_by_key(|(r, _)| *r);
            (id, v.into_iter().map(|(_, b)| b).collect())
        })
        .collect())
}

pub fn write_curve(path: &Path, curve: &RecallCurve) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in curve.rows() {
        serde_json::to_writer(&mut f, &row)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
