//! Panel-consistent weak (rotation, hue, circular shift) and strong (block
//! masking after weak) augmentation. One parameter draw covers all four images.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taskgen::rng::{derive, stream};
use crate::taskgen::{Panel, RgbImage};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("augment config field {field} = {value} outside {range}")]
    Config {
        field: &'static str,
        value: f64,
        range: &'static str,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub p_w: f64,
    /// Degrees.
    pub hue_shift_max: f64,
    /// Fraction of the canvas side.
    pub shift_max: f64,
    pub sda_grid: usize,
    pub sda_mask_ratio: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_w: 0.5,
            hue_shift_max: 36.0,
            shift_max: 0.1,
            sda_grid: 8,
            sda_mask_ratio: 0.25,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let check = |ok: bool, field, value, range| if ok { Ok(()) } else { Err(AugmentError::Config { field, value, range }) };
        check((0.0..=1.0).contains(&self.p_w), "p_w", self.p_w, "[0, 1]")?;
        check((0.0..=180.0).contains(&self.hue_shift_max), "hue_shift_max", self.hue_shift_max, "[0, 180]")?;
        check((0.0..=1.0).contains(&self.shift_max), "shift_max", self.shift_max, "[0, 1]")?;
        check(self.sda_grid >= 1, "sda_grid", self.sda_grid as f64, ">= 1")?;
        check((0.0..1.0).contains(&self.sda_mask_ratio), "sda_mask_ratio", self.sda_mask_ratio, "[0, 1)")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftAxis {
    Horizontal,
    Vertical,
}

/// Parameters of one weak transform, shared by the four images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakParams {
    /// Quarter turns counter-clockwise, 1..=3.
    pub quarter_turns: u8,
    pub hue_degrees: f64,
    pub axis: ShiftAxis,
    pub shift_px: isize,
}

impl WeakParams {
    /// `None` when the p_w draw skips augmentation.
    pub fn draw<R: Rng + ?Sized>(cfg: &AugmentConfig, side: usize, rng: &mut R) -> Option<Self> {
        if !(rng.gen::<f64>() < cfg.p_w) {
            return None;
        }
        let quarter_turns = rng.gen_range(1..=3);
        let hue_degrees = if cfg.hue_shift_max > 0.0 {
            rng.gen_range(-cfg.hue_shift_max..=cfg.hue_shift_max)
        } else {
            0.0
        };
        let axis = if rng.gen_bool(0.5) { ShiftAxis::Horizontal } else { ShiftAxis::Vertical };
        let max_px = (cfg.shift_max * side as f64).floor() as isize;
        let shift_px = rng.gen_range(-max_px..=max_px);
        Some(Self {
            quarter_turns,
            hue_degrees,
            axis,
            shift_px,
        })
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        let rotated = rotate_quarter(img, self.quarter_turns);
        let hued = hue_shift(&rotated, self.hue_degrees);
        match self.axis {
            ShiftAxis::Horizontal => circular_shift(&hued, self.shift_px, 0),
            ShiftAxis::Vertical => circular_shift(&hued, 0, self.shift_px),
        }
    }
}

/// Rotates a square image by `k` quarter turns counter-clockwise.
pub fn rotate_quarter(img: &RgbImage, k: u8) -> RgbImage {
    let n = img.width();
    assert_eq!(n, img.height(), "rotation needs a square image");
    let mut out = img.clone();
    for _ in 0..k % 4 {
        let src = out.clone();
        for y in 0..n {
            for x in 0..n {
                out.set_pixel(y, n - 1 - x, src.pixel(x, y));
            }
        }
    }
    out
}

fn rgb_to_hsv([r, g, b]: [u8; 3]) -> (f64, f64, f64) {
    let (r, g, b) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|ch| ((ch + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Rotates hue by `degrees`; gray pixels (no defined hue) pass through.
pub fn hue_shift(img: &RgbImage, degrees: f64) -> RgbImage {
    let mut out = img.clone();
    if degrees == 0.0 {
        return out;
    }
    for px in out.data_mut().chunks_exact_mut(3) {
        if px[0] == px[1] && px[1] == px[2] {
            continue;
        }
        let (h, s, v) = rgb_to_hsv([px[0], px[1], px[2]]);
        px.copy_from_slice(&hsv_to_rgb(h + degrees, s, v));
    }
    out
}

/// Wrap-around translation by `(dx, dy)` pixels.
pub fn circular_shift(img: &RgbImage, dx: isize, dy: isize) -> RgbImage {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let sx = (x - dx).rem_euclid(w) as usize;
            let sy = (y - dy).rem_euclid(h) as usize;
            out.set_pixel(x as usize, y as usize, img.pixel(sx, sy));
        }
    }
    out
}

/// Row/column pixel span of block `i` out of `grid`; the last absorbs the remainder.
pub fn block_span(side: usize, grid: usize, i: usize) -> (usize, usize) {
    let step = side / grid;
    let end = if i + 1 == grid { side } else { (i + 1) * step };
    (i * step, end)
}

/// Blocks (row-major indices) to black out.
pub fn draw_mask<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Vec<usize> {
    let total = cfg.sda_grid * cfg.sda_grid;
    let m = (cfg.sda_mask_ratio * total as f64).floor() as usize;
    let mut blocks = sample(rng, total, m).into_vec();
    blocks.sort_unstable();
    blocks
}

pub fn mask_blocks(img: &RgbImage, grid: usize, blocks: &[usize]) -> RgbImage {
    let mut out = img.clone();
    for &b in blocks {
        let (y0, y1) = block_span(img.height(), grid, b / grid);
        let (x0, x1) = block_span(img.width(), grid, b % grid);
        for y in y0..y1 {
            for x in x0..x1 {
                out.set_pixel(x, y, [0, 0, 0]);
            }
        }
    }
    out
}

fn map_images(panel: &Panel, f: impl Fn(&RgbImage) -> RgbImage) -> Panel {
    let mut out = panel.clone();
    out.images = std::array::from_fn(|i| f(&panel.images[i]));
    out
}

pub fn weak_augment(panel: &Panel, seed: u64, cfg: &AugmentConfig) -> Panel {
    let mut rng = stream(seed);
    match WeakParams::draw(cfg, panel.resolution(), &mut rng) {
        Some(p) => map_images(panel, |img| p.apply(img)),
        None => panel.clone(),
    }
}

/// Weak augmentation under a derived seed, then one block mask for all slots.
pub fn strong_augment(panel: &Panel, seed: u64, cfg: &AugmentConfig) -> Result<Panel, AugmentError> {
    cfg.validate()?;
    let weak = weak_augment(panel, derive(&[seed, 1]), cfg);
    Ok(mask_only(&weak, derive(&[seed, 2]), cfg))
}

/// Block masking without the weak stage.
pub fn mask_only(panel: &Panel, seed: u64, cfg: &AugmentConfig) -> Panel {
    let blocks = draw_mask(cfg, &mut stream(seed));
    if blocks.is_empty() {
        return panel.clone();
    }
    map_images(panel, |img| mask_blocks(img, cfg.sda_grid, &blocks))
}
