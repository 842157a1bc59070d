//! Synthetic figure-ground corpus.
//!
//! Each image is a noisy background texture with one square "sprite" pasted
//! on top: a light backing tile carrying a dark glyph. The ground-truth box
//! is exactly the sprite tile. A category is a (glyph, texture) pair, so the
//! foreground and the background each carry part of the label. How much the
//! background carries is set by `bg_informative`: at 1 every image uses its
//! category's texture, at 0 the texture is drawn uniformly and carries
//! nothing.

use std::collections::BTreeSet;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AnnotatedSample, LabelMerge, Split};
use crate::error::{Error, Result};
use crate::geometry::BoxRect;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Glyph {
    Disk,
    Ring,
    Plus,
    Cross,
    Bars,
    Triangle,
    Frame,
    Diamond,
}

impl Glyph {
    pub const ALL: [Glyph; 8] = [
        Self::Disk,
        Self::Ring,
        Self::Plus,
        Self::Cross,
        Self::Bars,
        Self::Triangle,
        Self::Frame,
        Self::Diamond,
    ];

    /// Ink test at normalized coordinates `u, v` in `[-1, 1]`. Every glyph is
    /// mirror-symmetric left-right, so horizontal flips keep the category.
    fn ink(self, u: f64, v: f64) -> bool {
        let (au, av) = (u.abs(), v.abs());
        match self {
            Self::Disk => u * u + v * v <= 0.62 * 0.62,
            Self::Ring => {
                let r2 = u * u + v * v;
                (0.38 * 0.38..=0.72 * 0.72).contains(&r2)
            }
            Self::Plus => (au < 0.2 && av < 0.75) || (av < 0.2 && au < 0.75),
            Self::Cross => au < 0.75 && av < 0.75 && ((u - v).abs() < 0.26 || (u + v).abs() < 0.26),
            Self::Bars => au < 0.75 && ((v - 0.38).abs() < 0.17 || (v + 0.38).abs() < 0.17),
            Self::Triangle => (-0.7..=0.7).contains(&v) && au <= (v + 0.7) / 1.4 * 0.8,
            Self::Frame => {
                let m = au.max(av);
                (0.42..=0.74).contains(&m)
            }
            Self::Diamond => au + av <= 0.72,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    HStripes,
    VStripes,
    Checker,
    Dots,
    Hatch,
    Rings,
}

impl Texture {
    pub const ALL: [Texture; 6] = [
        Self::HStripes,
        Self::VStripes,
        Self::Checker,
        Self::Dots,
        Self::Hatch,
        Self::Rings,
    ];
}

struct TextureParams {
    texture: Texture,
    period: f64,
    phase_x: f64,
    phase_y: f64,
    cx: f64,
    cy: f64,
}

impl TextureParams {
    fn draw(texture: Texture, rng: &mut ChaCha8Rng, width: u32, height: u32) -> Self {
        let period = rng.gen_range(6.0..10.0);
        Self {
            texture,
            period,
            phase_x: rng.gen_range(0.0..period),
            phase_y: rng.gen_range(0.0..period),
            cx: rng.gen_range(0.0..width as f64),
            cy: rng.gen_range(0.0..height as f64),
        }
    }

    /// Pattern value in {-1, 1}.
    fn at(&self, x: f64, y: f64) -> f64 {
        let p = self.period;
        let (tx, ty) = (x + self.phase_x, y + self.phase_y);
        let wave = |t: f64| (std::f64::consts::TAU * t / p).sin();
        let sign = |b: bool| if b { 1.0 } else { -1.0 };
        match self.texture {
            Texture::HStripes => sign(wave(ty) >= 0.0),
            Texture::VStripes => sign(wave(tx) >= 0.0),
            Texture::Checker => sign(wave(tx) * wave(ty) >= 0.0),
            Texture::Dots => {
                let dx = tx.rem_euclid(p) - p / 2.0;
                let dy = ty.rem_euclid(p) - p / 2.0;
                sign(dx * dx + dy * dy <= (p / 3.2) * (p / 3.2))
            }
            Texture::Hatch => {
                let band = p / 4.0;
                sign((tx + ty).rem_euclid(p) < band || (tx - ty).rem_euclid(p) < band)
            }
            Texture::Rings => {
                let r = ((x - self.cx).powi(2) + (y - self.cy).powi(2)).sqrt();
                sign(wave(r) >= 0.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub glyph: Glyph,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    pub train_per_category: usize,
    pub test_per_category: usize,
    pub categories: Vec<CategorySpec>,
    /// Probability that an image's texture is its category's texture.
    pub bg_informative: f64,
    /// Inclusive range of sprite side lengths in pixels.
    pub object_side: [u32; 2],
    /// Fraction of training images whose box annotation is withheld.
    pub unannotated_fraction: f64,
    pub texture_contrast: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            train_per_category: 200,
            test_per_category: 50,
            categories: Self::paired_categories(10),
            bg_informative: 1.0,
            object_side: [24, 56],
            unannotated_fraction: 0.0,
            texture_contrast: 18.0,
            noise: 6.0,
        }
    }
}

impl SynthConfig {
    /// `n` categories (n even, n/2 <= 6) laid out so that each glyph and each
    /// texture is shared by exactly two categories, and the (glyph, texture)
    /// pair is unique. Foreground alone or background alone then tops out at
    /// half the categories; together they identify the label.
    pub fn paired_categories(n: usize) -> Vec<CategorySpec> {
        let half = (n / 2).max(1);
        (0..n)
            .map(|c| {
                let glyph = Glyph::ALL[c % half % Glyph::ALL.len()];
                let texture = Texture::ALL[(c % half + c / half) % half % Texture::ALL.len()];
                CategorySpec {
                    name: format!("{glyph:?}-{texture:?}").to_lowercase(),
                    glyph,
                    texture,
                }
            })
            .collect()
    }

    /// Identity label mapping carrying the category names.
    pub fn roster(&self) -> LabelMerge {
        LabelMerge {
            names: self.categories.iter().map(|c| c.name.clone()).collect(),
            ..LabelMerge::identity(0..self.categories.len() as u32)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.categories.len() < 2 {
            return bad("synthetic corpus needs at least two categories".into());
        }
        let [lo, hi] = self.object_side;
        if lo < 4 || lo > hi {
            return bad(format!("object side range [{lo}, {hi}] is degenerate"));
        }
        if hi > self.width.min(self.height) {
            return bad(format!(
                "object side {hi} exceeds the {}x{} canvas",
                self.width, self.height
            ));
        }
        for (name, v) in [
            ("bg_informative", self.bg_informative),
            ("unannotated_fraction", self.unannotated_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.noise < 0.0 || self.texture_contrast < 0.0 {
            return bad("noise and contrast must be non-negative".into());
        }
        Ok(())
    }

    fn textures(&self) -> Vec<Texture> {
        self.categories
            .iter()
            .map(|c| c.texture)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<AnnotatedSample>,
    pub test: Vec<AnnotatedSample>,
}

/// Generates the train and test corpora. Deterministic in `seed`.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    config.validate()?;
    let textures = config.textures();
    let gen_split = |split: Split, per_cat: usize| -> Result<Vec<AnnotatedSample>> {
        let n_cat = config.categories.len();
        let split_seed = seed::derive(seed, split.as_str());
        (0..per_cat * n_cat)
            .into_par_iter()
            .map(|k| {
                let label = (k % n_cat) as u32;
                let mut rng = seed::rng(seed::mix(split_seed, k as u64, 0));
                draw_sample(config, &textures, split, k, label, &mut rng)
            })
            .collect()
    };
    Ok(SynthCorpus {
        train: gen_split(Split::Train, config.train_per_category)?,
        test: gen_split(Split::Test, config.test_per_category)?,
    })
}

fn draw_sample(
    config: &SynthConfig,
    textures: &[Texture],
    split: Split,
    index: usize,
    label: u32,
    rng: &mut ChaCha8Rng,
) -> Result<AnnotatedSample> {
    let (w, h) = (config.width, config.height);
    let cat = &config.categories[label as usize];
    let texture = if rng.gen_bool(config.bg_informative) {
        cat.texture
    } else {
        textures[rng.gen_range(0..textures.len())]
    };
    let params = TextureParams::draw(texture, rng, w, h);
    let noise = Normal::new(0.0, config.noise.max(1e-9)).expect("valid sigma");
    let base = rng.gen_range(95.0..125.0);
    let tint: [f64; 3] = [
        rng.gen_range(-12.0..12.0),
        rng.gen_range(-12.0..12.0),
        rng.gen_range(-12.0..12.0),
    ];

    let side = rng.gen_range(config.object_side[0]..=config.object_side[1]);
    let ox = rng.gen_range(0..=w - side);
    let oy = rng.gen_range(0..=h - side);
    let bx = BoxRect::new(ox, oy, ox + side, oy + side)?;
    let backing = rng.gen_range(200.0..235.0);
    let ink = rng.gen_range(20.0..60.0);

    let mut image = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let level = if bx.contains_pixel(x, y) {
                let u = (fx - ox as f64) / side as f64 * 2.0 - 1.0;
                let v = (fy - oy as f64) / side as f64 * 2.0 - 1.0;
                if cat.glyph.ink(u, v) {
                    ink
                } else {
                    backing
                }
            } else {
                base + config.texture_contrast * params.at(fx, fy)
            };
            let mut px = [0u8; 3];
            for (ch, slot) in px.iter_mut().enumerate() {
                let v = level + tint[ch] + noise.sample(rng);
                *slot = v.round().clamp(1.0, 255.0) as u8;
            }
            image.put_pixel(x, y, Rgb(px));
        }
    }

    let annotated = split == Split::Test || !rng.gen_bool(config.unannotated_fraction);
    let boxes = if annotated { vec![bx] } else { Vec::new() };
    AnnotatedSample::new(format!("{split}-{index:06}"), image, boxes, label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            train_per_category: 3,
            test_per_category: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = synth_generate(&small(), 11).unwrap();
        let b = synth_generate(&small(), 11).unwrap();
        let c = synth_generate(&small(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train[0].image, c.train[0].image);
    }

    #[test]
    fn counts_and_balance() {
        let cfg = SynthConfig {
            train_per_category: 200,
            test_per_category: 1,
            width: 24,
            height: 24,
            object_side: [6, 20],
            ..SynthConfig::default()
        };
        let corpus = synth_generate(&cfg, 1).unwrap();
        assert_eq!(corpus.train.len(), 2000);
        let mut counts = [0usize; 10];
        for s in &corpus.train {
            counts[s.label as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 200));
    }

    #[test]
    fn boxes_valid_and_tight() {
        let corpus = synth_generate(&small(), 5).unwrap();
        for s in corpus.train.iter().chain(&corpus.test) {
            assert_eq!(s.boxes.len(), 1);
            s.validate().unwrap();
            let b = s.boxes[0];
            assert_eq!(b.width(), b.height());
        }
    }

    #[test]
    fn degenerate_configs_rejected() {
        let mut cfg = small();
        cfg.object_side = [10, 65];
        assert!(synth_generate(&cfg, 0).is_err());
        cfg.object_side = [10, 8];
        assert!(synth_generate(&cfg, 0).is_err());
        let mut one = small();
        one.categories.truncate(1);
        assert!(synth_generate(&one, 0).is_err());
    }

    #[test]
    fn paired_layout_is_a_bijection() {
        let cats = SynthConfig::paired_categories(10);
        let pairs: BTreeSet<_> = cats.iter().map(|c| (c.glyph, c.texture)).collect();
        assert_eq!(pairs.len(), 10);
        for g in cats.iter().map(|c| c.glyph) {
            let texs: BTreeSet<_> = cats
                .iter()
                .filter(|c| c.glyph == g)
                .map(|c| c.texture)
                .collect();
            assert_eq!(texs.len(), 2);
        }
        for t in cats.iter().map(|c| c.texture) {
            let glyphs: BTreeSet<_> = cats
                .iter()
                .filter(|c| c.texture == t)
                .map(|c| c.glyph)
                .collect();
            assert_eq!(glyphs.len(), 2);
        }
    }

    #[test]
    fn glyphs_are_mirror_symmetric() {
        for g in Glyph::ALL {
            for i in 0..40 {
                for j in 0..40 {
                    let (u, v) = (i as f64 / 20.0 - 0.9875, j as f64 / 20.0 - 0.9875);
                    assert_eq!(g.ink(u, v), g.ink(-u, v), "{g:?}");
                }
            }
        }
    }

    #[test]
    fn unannotated_fraction_only_touches_train() {
        let cfg = SynthConfig {
            unannotated_fraction: 1.0,
            ..small()
        };
        let corpus = synth_generate(&cfg, 3).unwrap();
        assert!(corpus.train.iter().all(|s| s.boxes.is_empty()));
        assert!(corpus.test.iter().all(|s| s.boxes.len() == 1));
    }
}
