//! Axis-aligned box arithmetic.
//!
//! Boxes use integer pixel coordinates, half-open on the max edge, so a box
//! `(x0, y0, x1, y1)` covers columns `x0..x1` and rows `y0..y1`. Areas are
//! exact integer counts and abutting boxes never overlap.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open integer rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BoxRect {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl BoxRect {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidBox {
                x0,
                y0,
                x1,
                y1,
                reason: "empty or inverted extent",
            });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Builds a box from signed corners, clipping to `width` x `height`.
    /// Returns `None` when nothing of the box survives clipping.
    pub fn clipped(x0: i64, y0: i64, x1: i64, y1: i64, width: u32, height: u32) -> Option<Self> {
        let cx0 = x0.clamp(0, width as i64) as u32;
        let cy0 = y0.clamp(0, height as i64) as u32;
        let cx1 = x1.clamp(0, width as i64) as u32;
        let cy1 = y1.clamp(0, height as i64) as u32;
        Self::new(cx0, cy0, cx1, cy1).ok()
    }

    pub fn x0(&self) -> u32 {
        self.x0
    }
    pub fn y0(&self) -> u32 {
        self.y0
    }
    pub fn x1(&self) -> u32 {
        self.x1
    }
    pub fn y1(&self) -> u32 {
        self.y1
    }
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }
    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }
    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn contains(&self, other: &BoxRect) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x1 <= width && self.y1 <= height
    }

    pub fn intersection(&self, other: &BoxRect) -> Option<BoxRect> {
        BoxRect::new(
            self.x0.max(other.x0),
            self.y0.max(other.y0),
            self.x1.min(other.x1),
            self.y1.min(other.y1),
        )
        .ok()
    }

    pub fn translated(&self, dx: u32, dy: u32) -> BoxRect {
        BoxRect {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    pub fn as_array(&self) -> [u32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

impl TryFrom<[u32; 4]> for BoxRect {
    type Error = Error;

    fn try_from(v: [u32; 4]) -> Result<Self> {
        BoxRect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoxRect> for [u32; 4] {
    fn from(b: BoxRect) -> Self {
        b.as_array()
    }
}

impl fmt::Display for BoxRect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x0, self.y0, self.x1, self.y1)
    }
}

/// A dimensionless quantity in `[0, 1]`: IoU values and area ratios.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ratio(f64);

impl Ratio {
    pub const ZERO: Ratio = Ratio(0.0);
    pub const ONE: Ratio = Ratio(1.0);

    /// Exact ratio of two counts. `den` must be non-zero and `num <= den`.
    pub fn of(num: u64, den: u64) -> Ratio {
        debug_assert!(den > 0 && num <= den);
        Ratio(num as f64 / den as f64)
    }

    pub fn new(value: f64) -> Result<Ratio> {
        if (0.0..=1.0).contains(&value) {
            Ok(Ratio(value))
        } else {
            Err(Error::Config(format!("ratio {value} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}", self.0)
    }
}

/// Intersection over union. Symmetric; 1 for identical boxes, 0 for disjoint.
pub fn iou(a: &BoxRect, b: &BoxRect) -> Ratio {
    let inter = a.intersection(b).map_or(0, |i| i.area());
    let union = a.area() + b.area() - inter;
    Ratio::of(inter, union)
}

/// Smallest box containing every input box.
pub fn enclosing_frame(boxes: &[BoxRect]) -> Result<BoxRect> {
    let (first, rest) = boxes.split_first().ok_or(Error::NoBoxes)?;
    Ok(rest.iter().fold(*first, |acc, b| BoxRect {
        x0: acc.x0.min(b.x0),
        y0: acc.y0.min(b.y0),
        x1: acc.x1.max(b.x1),
        y1: acc.y1.max(b.y1),
    }))
}

/// Exact pixel count of the union of `boxes`, via coordinate compression.
pub fn union_area(boxes: &[BoxRect]) -> u64 {
    if boxes.is_empty() {
        return 0;
    }
    let mut xs: Vec<u32> = boxes.iter().flat_map(|b| [b.x0, b.x1]).collect();
    xs.sort_unstable();
    xs.dedup();
    let mut total = 0u64;
    let mut spans: Vec<(u32, u32)> = Vec::with_capacity(boxes.len());
    for w in xs.windows(2) {
        let (left, right) = (w[0], w[1]);
        spans.clear();
        spans.extend(
            boxes
                .iter()
                .filter(|b| b.x0 <= left && b.x1 >= right)
                .map(|b| (b.y0, b.y1)),
        );
        if spans.is_empty() {
            continue;
        }
        spans.sort_unstable();
        let mut covered = 0u64;
        let (mut lo, mut hi) = spans[0];
        for &(s, e) in &spans[1..] {
            if s > hi {
                covered += (hi - lo) as u64;
                lo = s;
                hi = e;
            } else {
                hi = hi.max(e);
            }
        }
        covered += (hi - lo) as u64;
        total += covered * (right - left) as u64;
    }
    total
}

/// Fraction of image pixels covered by the union of `boxes`; 0 with no boxes.
pub fn foreground_pixel_ratio(boxes: &[BoxRect], width: u32, height: u32) -> Ratio {
    Ratio::of(union_area(boxes), width as u64 * height as u64)
}

/// Area of the enclosing frame over the image area.
pub fn frame_area_ratio(boxes: &[BoxRect], width: u32, height: u32) -> Result<Ratio> {
    let frame = enclosing_frame(boxes)?;
    Ok(Ratio::of(frame.area(), width as u64 * height as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: u32, y0: u32, x1: u32, y1: u32) -> BoxRect {
        BoxRect::new(x0, y0, x1, y1).unwrap()
    }

    // Rasterization oracle: membership grid over a bounded canvas.
    fn raster(boxes: &[BoxRect], w: u32, h: u32) -> Vec<bool> {
        let mut grid = vec![false; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                grid[(y * w + x) as usize] = boxes.iter().any(|bx| bx.contains_pixel(x, y));
            }
        }
        grid
    }

    fn count(grid: &[bool]) -> u64 {
        grid.iter().filter(|&&v| v).count() as u64
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0, 0, 10, 10), &b(0, 0, 10, 10)).value(), 1.0);
        assert_eq!(iou(&b(0, 0, 10, 10), &b(20, 20, 30, 30)).value(), 0.0);
        let v = iou(&b(0, 0, 10, 10), &b(5, 5, 15, 15)).value();
        assert!((v - 25.0 / 175.0).abs() < 1e-15);
        assert!((v - 0.142857).abs() < 1e-6);
    }

    #[test]
    fn enclosing_frame_examples() {
        assert_eq!(enclosing_frame(&[b(3, 4, 7, 9)]).unwrap(), b(3, 4, 7, 9));
        assert_eq!(
            enclosing_frame(&[b(0, 0, 2, 2), b(4, 4, 6, 6)]).unwrap(),
            b(0, 0, 6, 6)
        );
        assert_eq!(
            enclosing_frame(&[b(1, 5, 4, 8), b(2, 1, 9, 6)]).unwrap(),
            b(1, 1, 9, 8)
        );
        assert!(matches!(enclosing_frame(&[]), Err(Error::NoBoxes)));
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(foreground_pixel_ratio(&[], 10, 10).value(), 0.0);
        assert_eq!(
            foreground_pixel_ratio(&[b(0, 0, 5, 5)], 10, 10).value(),
            0.25
        );
        // 25 + 25 minus the 2x2 overlap.
        assert_eq!(
            foreground_pixel_ratio(&[b(0, 0, 5, 5), b(3, 3, 8, 8)], 10, 10).value(),
            0.46
        );
        assert_eq!(
            frame_area_ratio(&[b(0, 0, 10, 10)], 10, 10)
                .unwrap()
                .value(),
            1.0
        );
        assert_eq!(
            frame_area_ratio(&[b(0, 0, 5, 10)], 10, 10).unwrap().value(),
            0.5
        );
        assert_eq!(
            frame_area_ratio(&[b(0, 0, 2, 2), b(8, 8, 10, 10)], 10, 10)
                .unwrap()
                .value(),
            1.0
        );
        assert!(frame_area_ratio(&[], 10, 10).is_err());
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BoxRect::new(3, 0, 3, 5).is_err());
        assert!(BoxRect::new(0, 6, 3, 5).is_err());
        assert!(serde_json::from_str::<BoxRect>("[5,0,2,2]").is_err());
        let parsed: BoxRect = serde_json::from_str("[1,2,3,4]").unwrap();
        assert_eq!(parsed, b(1, 2, 3, 4));
    }

    fn arb_box(max: u32) -> impl Strategy<Value = BoxRect> {
        (0..max, 0..max, 1..=max, 1..=max).prop_map(move |(x, y, w, h)| {
            let x1 = (x + w).min(max).max(x + 1);
            let y1 = (y + h).min(max).max(y + 1);
            BoxRect::new(x, y, x1, y1).unwrap()
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric(a in arb_box(64), c in arb_box(64)) {
            prop_assert_eq!(iou(&a, &c), iou(&c, &a));
            prop_assert_eq!(iou(&a, &a).value(), 1.0);
        }

        #[test]
        fn frame_permutation_invariant(mut boxes in prop::collection::vec(arb_box(32), 1..6)) {
            let f = enclosing_frame(&boxes).unwrap();
            boxes.reverse();
            prop_assert_eq!(f, enclosing_frame(&boxes).unwrap());
            boxes.rotate_left(1);
            prop_assert_eq!(f, enclosing_frame(&boxes).unwrap());
        }

        #[test]
        fn agrees_with_raster_oracle(boxes in prop::collection::vec(arb_box(32), 0..6), other in arb_box(32)) {
            let grid = raster(&boxes, 32, 32);
            prop_assert_eq!(union_area(&boxes), count(&grid));
            prop_assert_eq!(foreground_pixel_ratio(&boxes, 32, 32), Ratio::of(count(&grid), 1024));

            if let Some(first) = boxes.first() {
                let inter = raster(&[*first], 32, 32).iter().zip(raster(&[other], 32, 32))
                    .filter(|(p, q)| **p && *q).count() as u64;
                let uni = count(&raster(&[*first, other], 32, 32));
                prop_assert_eq!(iou(first, &other), Ratio::of(inter, uni));

                let frame = enclosing_frame(&boxes).unwrap();
                // The frame holds every member pixel, and each edge touches some box.
                prop_assert!(boxes.iter().all(|bx| frame.contains(bx)));
                prop_assert!(boxes.iter().any(|bx| bx.x0() == frame.x0()));
                prop_assert!(boxes.iter().any(|bx| bx.y0() == frame.y0()));
                prop_assert!(boxes.iter().any(|bx| bx.x1() == frame.x1()));
                prop_assert!(boxes.iter().any(|bx| bx.y1() == frame.y1()));
                let fr = frame_area_ratio(&boxes, 32, 32).unwrap();
                prop_assert_eq!(fr, Ratio::of(count(&raster(&[frame], 32, 32)), 1024));
                prop_assert!(foreground_pixel_ratio(&boxes, 32, 32) <= fr);
            }
        }
    }
}
