//! Strongest-responding patches per filter: receptive-field tracing, a
//! one-hit-per-image scan over a reference set, and PNG grids.

use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxRect;
use crate::imaging;
use crate::nn::{ArchSpec, LayerSpec, Network, TensorBuf};

/// Input region of one unit, before and after clipping to the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub clipped: BoxRect,
    /// `[x0, y0, x1, y1]`, half-open, possibly outside the image.
    pub unclipped: [i64; 4],
}

/// Index of the last convolution layer.
pub fn last_conv(arch: &ArchSpec) -> Option<usize> {
    arch.layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Conv { .. }))
}

/// Traces unit `(row, col)` of layer `layer`'s output back to the input.
pub fn receptive_field(
    arch: &ArchSpec,
    layer: usize,
    row: usize,
    col: usize,
) -> Result<ReceptiveField> {
    let shapes = arch.shapes()?;
    let out = shapes
        .get(layer + 1)
        .ok_or_else(|| Error::Config(format!("no layer {layer}")))?;
    if out.len() != 3 {
        return Err(Error::Config(format!("layer {layer} is not spatial")));
    }
    if row >= out[1] || col >= out[2] {
        return Err(Error::PositionOutOfRange {
            layer,
            pos: (row, col),
            rows: out[1],
            cols: out[2],
        });
    }
    let (mut r, mut c) = ((row as i64, row as i64), (col as i64, col as i64));
    for spec in arch.layers[..=layer].iter().rev() {
        let (k, s, p) = match spec {
            LayerSpec::Relu | LayerSpec::Dropout { .. } => continue,
            other => other.window().ok_or_else(|| {
                Error::Config(format!("layer {layer} follows a non-spatial layer"))
            })?,
        };
        let (k, s, p) = (k as i64, s as i64, p as i64);
        let back = |(a, b): (i64, i64)| (a * s - p, b * s - p + k - 1);
        r = back(r);
        c = back(c);
    }
    let [_, h, w] = arch.input;
    let unclipped = [c.0, r.0, c.1 + 1, r.1 + 1];
    let clip = |v: i64, hi: usize| v.clamp(0, hi as i64) as u32;
    let clipped = BoxRect::new(
        clip(c.0, w),
        clip(r.0, h),
        clip(c.1 + 1, w),
        clip(r.1 + 1, h),
    )?;
    Ok(ReceptiveField { clipped, unclipped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchHit {
    pub source_id: String,
    pub filter: usize,
    pub row: usize,
    pub col: usize,
    pub response: f32,
    pub field: ReceptiveField,
}

/// A reference image resized to the network input.
pub struct Reference {
    pub source_id: String,
    pub image: RgbImage,
}

impl Reference {
    pub fn new(source_id: impl Into<String>, image: &RgbImage, net: &Network<f32>) -> Self {
        let [_, h, w] = net.input_shape();
        Self {
            source_id: source_id.into(),
            image: imaging::resize(image, w as u32, h as u32),
        }
    }
}

/// For each filter, the `count` strongest units over the reference set, at
/// most one per image. Within an image the first maximal position in
/// row-major order wins; across images, ties go to the lower source id.
pub fn top_patches(
    net: &Network<f32>,
    layer: usize,
    filters: &[usize],
    references: &[Reference],
    count: usize,
) -> Result<Vec<Vec<PatchHit>>> {
    if count < 1 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    if references.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    let shape = net.output_shape_of(layer).to_vec();
    if shape.len() != 3 {
        return Err(Error::Config(format!("layer {layer} is not spatial")));
    }
    let (nf, rows, cols) = (shape[0], shape[1], shape[2]);
    if let Some(&f) = filters.iter().find(|&&f| f >= nf) {
        return Err(Error::Config(format!(
            "layer {layer} has {nf} filters, asked for {f}"
        )));
    }
    let [_, size, _] = net.input_shape();
    let per_image: Vec<Vec<(usize, usize, f32)>> = references
        .par_iter()
        .map(|r| {
            let mut buf = Vec::with_capacity(3 * size * size);
            imaging::window_chw(&r.image, 0, 0, size as u32, false, &mut buf);
            let act = net.activations(&TensorBuf::from_vec(&[1, 3, size, size], buf)?, layer)?;
            let data = act.data();
            Ok(filters
                .iter()
                .map(|&f| {
                    let map = &data[f * rows * cols..(f + 1) * rows * cols];
                    let mut best = 0;
                    for (i, &v) in map.iter().enumerate() {
                        if v > map[best] {
                            best = i;
                        }
                    }
                    (best / cols, best % cols, map[best])
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let arch = net.arch();
    filters
        .iter()
        .enumerate()
        .map(|(fi, &f)| {
            let mut order: Vec<usize> = (0..references.len()).collect();
            order.sort_by(|&a, &b| {
                per_image[b][fi]
                    .2
                    .total_cmp(&per_image[a][fi].2)
                    .then_with(|| references[a].source_id.cmp(&references[b].source_id))
            });
            order
                .into_iter()
                .take(count)
                .map(|i| {
                    let (row, col, response) = per_image[i][fi];
                    if !response.is_finite() {
                        return Err(Error::Config(format!(
                            "non-finite response from {}",
                            references[i].source_id
                        )));
                    }
                    Ok(PatchHit {
                        source_id: references[i].source_id.clone(),
                        filter: f,
                        row,
                        col,
                        response,
                        field: receptive_field(arch, layer, row, col)?,
                    })
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    pub tile: u32,
    pub gutter: u32,
}

impl Default for GridLayout {
    fn default() -> Self {
        Self {
            tile: 32,
            gutter: 2,
        }
    }
}

impl GridLayout {
    /// `(width, height)` of a grid with `rows` filters and up to `cols` hits.
    pub fn dimensions(&self, rows: u32, cols: u32) -> (u32, u32) {
        let span = |n: u32| n * self.tile + n.saturating_sub(1) * self.gutter;
        (span(cols), span(rows))
    }
}

/// One row per filter, one tile per hit, white gutters. `load` returns the
/// network-input-size image for a source id.
pub fn render_grid(
    hits: &[Vec<PatchHit>],
    layout: GridLayout,
    mut load: impl FnMut(&str) -> Result<RgbImage>,
) -> Result<RgbImage> {
    let cols = hits.iter().map(Vec::len).max().unwrap_or(0) as u32;
    if hits.is_empty() || cols == 0 {
        return Err(Error::Empty("hit list"));
    }
    let (w, h) = layout.dimensions(hits.len() as u32, cols);
    let mut grid = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let step = layout.tile + layout.gutter;
    for (r, row) in hits.iter().enumerate() {
        for (c, hit) in row.iter().enumerate() {
            let img = load(&hit.source_id).map_err(|e| Error::UnreadableImage {
                source_id: hit.source_id.clone(),
                message: e.to_string(),
            })?;
            let patch = imaging::resize(
                &imaging::crop(&img, &hit.field.clipped),
                layout.tile,
                layout.tile,
            );
            image::imageops::replace(
                &mut grid,
                &patch,
                (c as u32 * step) as i64,
                (r as u32 * step) as i64,
            );
        }
    }
    Ok(grid)
}

pub fn emit_grid(
    hits: &[Vec<PatchHit>],
    layout: GridLayout,
    load: impl FnMut(&str) -> Result<RgbImage>,
    out: &Path,
) -> Result<()> {
    let grid = render_grid(hits, layout, load)?;
    imaging::save_png(&grid, out)
}

pub fn write_hits(path: &Path, hits: &[Vec<PatchHit>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for h in hits.iter().flatten() {
        serde_json::to_writer(&mut f, h)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
