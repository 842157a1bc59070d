//! Pixel-level helpers over 8-bit RGB images.

use std::io::Cursor;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageFormat, RgbImage};

use crate::error::Result;
use crate::geometry::BoxRect;

pub use image::Rgb;

/// Copies out the region covered by `b`.
pub fn crop(img: &RgbImage, b: &BoxRect) -> RgbImage {
    imageops::crop_imm(img, b.x0(), b.y0(), b.width(), b.height()).to_image()
}

/// Writes 0 into every channel of every pixel covered by any box.
pub fn zero_boxes(img: &mut RgbImage, boxes: &[BoxRect]) {
    for b in boxes {
        for y in b.y0()..b.y1().min(img.height()) {
            for x in b.x0()..b.x1().min(img.width()) {
                img.put_pixel(x, y, Rgb([0, 0, 0]));
            }
        }
    }
}

/// Aspect-distorting bilinear resize. Returns a clone when already at size.
pub fn resize(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    imageops::resize(img, width, height, FilterType::Triangle)
}

pub fn flip_horizontal(img: &RgbImage) -> RgbImage {
    imageops::flip_horizontal(img)
}

pub fn luminance(p: &Rgb<u8>) -> f32 {
    0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32
}

/// Maps a channel value to the network's input range. Zero stays the most
/// negative value so zeroed regions remain distinguishable.
#[inline]
pub fn normalize(v: u8) -> f32 {
    (v as f32 - 128.0) / 64.0
}

/// Planar CHW tensor data for the `size`x`size` window at (`x`, `y`),
/// optionally mirrored left-right.
pub fn window_chw(img: &RgbImage, x: u32, y: u32, size: u32, flip: bool, out: &mut Vec<f32>) {
    let plane = (size * size) as usize;
    let base = out.len();
    out.resize(base + 3 * plane, 0.0);
    for r in 0..size {
        for c in 0..size {
            let sx = if flip { x + size - 1 - c } else { x + c };
            let p = img.get_pixel(sx, y + r);
            let i = (r * size + c) as usize;
            for ch in 0..3 {
                out[base + ch * plane + i] = normalize(p[ch]);
            }
        }
    }
}

pub fn load_png(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}
