//! Mask refinement: separable mean smoothing, snapping back to the class
//! palette, and blending over the source image.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tiling::RgbImage;
use crate::NUM_CLASSES;

pub const BLACK: [u8; 3] = [0, 0, 0];

/// Class colors, indexed by class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Palette {
    colors: [[u8; 3]; NUM_CLASSES],
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            colors: [[255, 0, 0], [0, 255, 0], [255, 255, 0]],
        }
    }
}

impl Palette {
    pub fn new(colors: [[u8; 3]; NUM_CLASSES]) -> Result<Self> {
        for i in 0..NUM_CLASSES {
            for j in i + 1..NUM_CLASSES {
                if colors[i] == colors[j] {
                    return Err(Error::invalid(format!("classes {i} and {j} share a color")));
                }
            }
        }
        Ok(Palette { colors })
    }

    pub fn colors(&self) -> &[[u8; 3]; NUM_CLASSES] {
        &self.colors
    }

    pub fn color(&self, label: usize) -> Result<[u8; 3]> {
        self.colors
            .get(label)
            .copied()
            .ok_or(Error::LabelOutOfRange(label))
    }

    pub fn label_of(&self, c: [u8; 3]) -> Option<usize> {
        self.colors.iter().position(|&p| p == c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskState {
    /// Straight from the tile grid.
    Raw,
    Smoothed,
    /// Snapped back to the palette.
    Discrete,
}

/// RGB segmentation raster with real-valued channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorMask {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
    pub state: MaskState,
}

impl ColorMask {
    pub fn black(width: usize, height: usize, state: MaskState) -> Self {
        ColorMask {
            width,
            height,
            pixels: vec![[0.0; 3]; width * height],
            state,
        }
    }

    pub fn from_image(image: &RgbImage, state: MaskState) -> Self {
        ColorMask {
            width: image.width,
            height: image.height,
            pixels: image.pixels.iter().map(|c| c.map(f64::from)).collect(),
            state,
        }
    }

    /// Rounds (halves away from zero) and clamps every channel to 8 bits.
    pub fn to_image(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| p.map(to_u8)).collect(),
        }
    }
}

fn to_u8(v: f64) -> u8 {
    libm::round(v).clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlayConfig {
    alpha: f64,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        OverlayConfig { alpha: 0.5 }
    }
}

impl OverlayConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(OverlayConfig { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Window of width `w` around `i` in `[0, n)`: offsets `-(w/2) ..= w-1-w/2`,
/// clipped to the axis.
fn window_bounds(i: usize, n: usize, w: usize) -> (usize, usize) {
    let back = w / 2;
    let fwd = w - 1 - back;
    (i.saturating_sub(back), (i + fwd).min(n - 1))
}

fn check_window(mask: &ColorMask, window: usize) -> Result<()> {
    if window == 0 {
        return Err(Error::invalid("window must be at least 1"));
    }
    if window > mask.width && window > mask.height {
        return Err(Error::invalid(format!(
            "window {window} exceeds both image dimensions ({}×{})",
            mask.width, mask.height
        )));
    }
    if mask.pixels.len() != mask.width * mask.height {
        return Err(Error::invalid("mask pixel count does not match its size"));
    }
    Ok(())
}

/// Samples accumulated by a smoothing pass, per pixel and in total. One sample
/// is one multiply-add on each of the three channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpCount {
    pub total: u64,
    pub max_per_pixel: u64,
    pub pixels: u64,
}

impl OpCount {
    fn add_pixel(&mut self, ops: u64) {
        self.total += ops;
        self.max_per_pixel = self.max_per_pixel.max(ops);
    }

    pub fn mean_per_pixel(&self) -> f64 {
        if self.pixels == 0 {
            0.0
        } else {
            self.total as f64 / self.pixels as f64
        }
    }
}

/// Local mean over a `window`×`window` neighborhood computed as a horizontal
/// then a vertical 1-D pass. Windows are clipped at the borders and each pass
/// divides by its own sample count.
pub fn smooth_separable(mask: &ColorMask, window: usize) -> Result<ColorMask> {
    smooth_separable_counted(mask, window).map(|(m, _)| m)
}

pub fn smooth_separable_counted(mask: &ColorMask, window: usize) -> Result<(ColorMask, OpCount)> {
    check_window(mask, window)?;
    let (w, h) = (mask.width, mask.height);
    let mut per_pixel = vec![0u64; w * h];

    let mut horiz = vec![[0.0; 3]; w * h];
    for y in 0..h {
        let row = &mask.pixels[y * w..(y + 1) * w];
        for x in 0..w {
            let (lo, hi) = window_bounds(x, w, window);
            let mut acc = [0.0; 3];
            for p in &row[lo..=hi] {
                for c in 0..3 {
                    acc[c] += p[c];
                }
            }
            let n = (hi - lo + 1) as f64;
            horiz[y * w + x] = acc.map(|v| v / n);
            per_pixel[y * w + x] += (hi - lo + 1) as u64;
        }
    }

    let mut out = vec![[0.0; 3]; w * h];
    for y in 0..h {
        let (lo, hi) = window_bounds(y, h, window);
        let n = (hi - lo + 1) as f64;
        for x in 0..w {
            let mut acc = [0.0; 3];
            for yy in lo..=hi {
                let p = horiz[yy * w + x];
                for c in 0..3 {
                    acc[c] += p[c];
                }
            }
            out[y * w + x] = acc.map(|v| v / n);
            per_pixel[y * w + x] += (hi - lo + 1) as u64;
        }
    }

    let mut ops = OpCount {
        pixels: (w * h) as u64,
        ..OpCount::default()
    };
    per_pixel.iter().for_each(|&n| ops.add_pixel(n));
    let smoothed = ColorMask {
        width: w,
        height: h,
        pixels: out,
        state: MaskState::Smoothed,
    };
    Ok((smoothed, ops))
}

/// Reference 2-D windowed mean: sums the whole clipped window at every pixel.
pub fn smooth_direct(mask: &ColorMask, window: usize) -> Result<(ColorMask, OpCount)> {
    check_window(mask, window)?;
    let (w, h) = (mask.width, mask.height);
    let mut ops = OpCount {
        pixels: (w * h) as u64,
        ..OpCount::default()
    };
    let mut out = vec![[0.0; 3]; w * h];
    for y in 0..h {
        let (y0, y1) = window_bounds(y, h, window);
        for x in 0..w {
            let (x0, x1) = window_bounds(x, w, window);
            let mut acc = [0.0; 3];
            let mut count = 0u64;
            for yy in y0..=y1 {
                for p in &mask.pixels[yy * w + x0..=yy * w + x1] {
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                    count += 1;
                }
            }
            out[y * w + x] = acc.map(|v| v / count as f64);
            ops.add_pixel(count);
        }
    }
    let smoothed = ColorMask {
        width: w,
        height: h,
        pixels: out,
        state: MaskState::Smoothed,
    };
    Ok((smoothed, ops))
}

/// Index of the nearest target color by Euclidean distance; the earliest
/// target wins ties.
fn nearest(p: [f64; 3], targets: &[[u8; 3]]) -> usize {
    let dist = |t: &[u8; 3]| -> f64 { (0..3).map(|c| (p[c] - t[c] as f64) * (p[c] - t[c] as f64)).sum() };
    let mut best = 0;
    let mut best_d = dist(&targets[0]);
    for (i, t) in targets.iter().enumerate().skip(1) {
        let d = dist(t);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Replaces every pixel with the nearest palette color. With `null_class`,
/// black is an extra target that wins only when strictly nearer than every
/// class color.
pub fn discretize(mask: &ColorMask, palette: &Palette, null_class: bool) -> ColorMask {
    let mut targets: Vec<[u8; 3]> = palette.colors().to_vec();
    if null_class {
        targets.push(BLACK);
    }
    let pixels = mask
        .pixels
        .iter()
        .map(|&p| targets[nearest(p, &targets)].map(f64::from))
        .collect();
    ColorMask {
        width: mask.width,
        height: mask.height,
        pixels,
        state: MaskState::Discrete,
    }
}

/// `alpha·mask + (1 − alpha)·image` per channel, rounded half away from zero.
pub fn overlay(mask: &ColorMask, image: &RgbImage, cfg: &OverlayConfig) -> Result<RgbImage> {
    if mask.width != image.width || mask.height != image.height {
        return Err(Error::shape(
            "overlay",
            &[mask.height, mask.width],
            &[image.height, image.width],
        ));
    }
    let a = cfg.alpha;
    let pixels = mask
        .pixels
        .iter()
        .zip(&image.pixels)
        .map(|(m, i)| core::array::from_fn(|c| to_u8(a * m[c] + (1.0 - a) * i[c] as f64)))
        .collect();
    Ok(RgbImage {
        width: image.width,
        height: image.height,
        pixels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Smoothing window in pixels (1.5 tiles by default).
    pub window: usize,
    pub overlay: OverlayConfig,
    /// Let black be a discretization target.
    pub null_class: bool,
    /// Keep pixels that are black in the raw mask black in the output.
    pub freeze_excluded: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            window: 48,
            overlay: OverlayConfig::default(),
            null_class: false,
            freeze_excluded: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Refined {
    pub smoothed: ColorMask,
    pub discrete: ColorMask,
    pub overlay: RgbImage,
    pub ops: OpCount,
}

/// smooth → discretize → overlay.
pub fn refine_pipeline(
    raw: &ColorMask,
    image: &RgbImage,
    palette: &Palette,
    cfg: &RefineConfig,
) -> Result<Refined> {
    let (smoothed, ops) = smooth_separable_counted(raw, cfg.window)?;
    let mut discrete = discretize(&smoothed, palette, cfg.null_class);
    if cfg.freeze_excluded {
        for (d, r) in discrete.pixels.iter_mut().zip(&raw.pixels) {
            if *r == [0.0; 3] {
                *d = [0.0; 3];
            }
        }
    }
    let overlay = overlay(&discrete, image, &cfg.overlay)?;
    Ok(Refined {
        smoothed,
        discrete,
        overlay,
        ops,
    })
}
