//! Augmentation chain: Gaussian horizontal crop/pad, bilinear resize,
//! horizontal flip, random erasing and standardization.
//!
//! Every function takes its randomness from a caller-supplied stream, so a
//! sample's augmentation depends only on how that stream was seeded.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::manifest::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STANDARDIZE_MEAN: f32 = 0.5;
pub const STANDARDIZE_STD: f32 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HdaConfig {
    pub sigma: f32,
    pub clip: f32,
    pub apply_prob: f32,
}

impl Default for HdaConfig {
    fn default() -> Self {
        HdaConfig { sigma: 0.05, clip: 0.15, apply_prob: 0.4 }
    }
}

impl HdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::Config(format!("hda.apply_prob must be in [0, 1], got {}", self.apply_prob)));
        }
        if !(self.clip > 0.0) || self.clip >= 1.0 {
            return Err(Error::Config(format!("hda.clip must be in (0, 1), got {}", self.clip)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("hda.sigma must be non-negative, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// What one HDA draw decided.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HdaDraw {
    pub applied: bool,
    /// The normal draw; its sign picks crop (negative) or pad.
    pub g: f32,
    /// `min(|g|, clip)`, zero when not applied.
    pub fraction: f32,
    pub top: bool,
}

impl HdaDraw {
    pub const NONE: HdaDraw = HdaDraw { applied: false, g: 0.0, fraction: 0.0, top: false };

    /// Signed change in row count for an image of height `h`.
    pub fn row_delta(&self, h: usize) -> i64 {
        let rows = (self.fraction as f64 * h as f64).round() as i64;
        if self.g < 0.0 {
            -rows
        } else {
            rows
        }
    }
}

pub fn hda_draw<R: Rng + ?Sized>(config: &HdaConfig, rng: &mut R) -> HdaDraw {
    if rng.random::<f32>() >= config.apply_prob {
        return HdaDraw::NONE;
    }
    let g = if config.sigma > 0.0 {
        Normal::new(0.0f32, config.sigma).expect("validated sigma").sample(rng)
    } else {
        0.0
    };
    let top = rng.random::<bool>();
    HdaDraw { applied: true, g, fraction: g.abs().min(config.clip), top }
}

/// Per-channel means of a `C x H x W` tensor.
pub fn channel_means(t: &Tensor) -> Vec<f32> {
    let c = t.shape()[0];
    let plane = t.numel() / c;
    t.data().chunks_exact(plane).map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32).collect()
}

fn chw(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(op, format!("expected CxHxW, got {:?}", t.shape()))),
    }
}

/// Crops (negative delta) or pads (positive delta) rows on one side. Padding
/// uses the per-channel mean of the input.
pub fn apply_row_delta(t: &Tensor, delta: i64, top: bool) -> Result<Tensor> {
    let (c, h, w) = chw(t, "hda")?;
    if delta == 0 {
        return Ok(t.clone());
    }
    let new_h = h as i64 + delta;
    if new_h < 1 {
        return Err(Error::dim("hda", format!("cannot crop {} of {h} rows", -delta)));
    }
    let new_h = new_h as usize;
    let means = channel_means(t);
    let mut out = Vec::with_capacity(c * new_h * w);
    for (ch, plane) in t.data().chunks_exact(h * w).enumerate() {
        if delta < 0 {
            let skip = (-delta) as usize;
            let start = if top { skip } else { 0 };
            out.extend_from_slice(&plane[start * w..(start + new_h) * w]);
        } else {
            let pad = vec![means[ch]; delta as usize * w];
            if top {
                out.extend_from_slice(&pad);
                out.extend_from_slice(plane);
            } else {
                out.extend_from_slice(plane);
                out.extend_from_slice(&pad);
            }
        }
    }
    Tensor::new(vec![c, new_h, w], out)
}

/// Gaussian horizontal crop/pad of the top or bottom rows.
pub fn hda_augment<R: Rng + ?Sized>(image: &LabeledImage, config: &HdaConfig, rng: &mut R) -> Result<(LabeledImage, HdaDraw)> {
    let (_, h, _) = chw(&image.pixels, "hda")?;
    if h < 8 {
        return Err(Error::dim("hda", format!("image height {h} is below 8 rows")));
    }
    let draw = hda_draw(config, rng);
    let pixels = apply_row_delta(&image.pixels, draw.row_delta(h), draw.top)?;
    Ok((LabeledImage { pixels, ..image.clone() }, draw))
}

/// Bilinear resize with half-pixel centers (`align_corners = false`);
/// source coordinates below zero clamp to the first row/column.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = chw(t, "resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("resize", "target size must be positive"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in t.data().chunks_exact(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

pub fn hflip(t: &Tensor) -> Result<Tensor> {
    let (_, _, w) = chw(t, "hflip")?;
    let mut out = t.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErasingConfig {
    pub prob: f32,
    pub area_min: f32,
    pub area_max: f32,
    pub aspect_min: f32,
    pub attempts: usize,
}

impl Default for ErasingConfig {
    fn default() -> Self {
        ErasingConfig { prob: 0.5, area_min: 0.02, area_max: 0.4, aspect_min: 0.3, attempts: 100 }
    }
}

/// Erased rectangle: top row, left column, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EraseRect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// Samples a rectangle for an `h x w` image. Area ratio is uniform in
/// `[area_min, area_max]` and aspect uniform in
/// `[aspect_min, 1/aspect_min]`; rectangles that do not fit, or whose rounded
/// area ratio leaves the area range, are redrawn. `None` after `attempts`
/// failures.
pub fn sample_erase_rect<R: Rng + ?Sized>(cfg: &ErasingConfig, h: usize, w: usize, rng: &mut R) -> Option<EraseRect> {
    let total = (h * w) as f32;
    for _ in 0..cfg.attempts {
        let area = rng.random_range(cfg.area_min..=cfg.area_max) * total;
        let aspect = rng.random_range(cfg.aspect_min..=1.0 / cfg.aspect_min);
        let eh = (area * aspect).sqrt().round() as usize;
        let ew = (area / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let ratio = (eh * ew) as f32 / total;
        if ratio < cfg.area_min || ratio > cfg.area_max {
            continue;
        }
        let y = rng.random_range(0..=h - eh);
        let x = rng.random_range(0..=w - ew);
        return Some(EraseRect { y, x, h: eh, w: ew });
    }
    None
}

/// Fills `rect` with the per-channel mean of the image.
pub fn erase(t: &mut Tensor, rect: EraseRect) -> Result<()> {
    let (_, h, w) = chw(t, "erase")?;
    if rect.y + rect.h > h || rect.x + rect.w > w {
        return Err(Error::dim("erase", format!("rectangle {rect:?} outside {h}x{w}")));
    }
    let means = channel_means(t);
    for (plane, m) in t.data_mut().chunks_exact_mut(h * w).zip(means) {
        for y in rect.y..rect.y + rect.h {
            plane[y * w + rect.x..y * w + rect.x + rect.w].fill(m);
        }
    }
    Ok(())
}

pub fn standardize(t: &Tensor) -> Tensor {
    t.map(|v| (v - STANDARDIZE_MEAN) / STANDARDIZE_STD)
}

/// Inverse of [`standardize`], for previews.
pub fn unstandardize(t: &Tensor) -> Tensor {
    t.map(|v| v * STANDARDIZE_STD + STANDARDIZE_MEAN)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub height: usize,
    pub width: usize,
    pub hda: HdaConfig,
    pub flip_prob: f32,
    pub erasing: ErasingConfig,
}

impl AugmentConfig {
    pub fn new(height: usize, width: usize, hda: HdaConfig) -> Self {
        AugmentConfig { height, width, hda, flip_prob: 0.5, erasing: ErasingConfig::default() }
    }
}

/// Record of the random decisions taken by one train-mode chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentTrace {
    pub hda: HdaDraw,
    pub flipped: bool,
    pub erased: Option<EraseRect>,
}

/// Train mode: HDA, resize, flip, erase, standardize. Eval mode: resize and
/// standardize, with no randomness consumed.
pub fn augment_chain<R: Rng + ?Sized>(
    pixels: &Tensor,
    cfg: &AugmentConfig,
    rng: &mut R,
    train: bool,
) -> Result<(Tensor, AugmentTrace)> {
    let mut trace = AugmentTrace { hda: HdaDraw::NONE, flipped: false, erased: None };
    if !train {
        let t = resize_bilinear(pixels, cfg.height, cfg.width)?;
        return Ok((standardize(&t), trace));
    }
    let (_, h, _) = chw(pixels, "augment")?;
    let base = if h >= 8 {
        trace.hda = hda_draw(&cfg.hda, rng);
        apply_row_delta(pixels, trace.hda.row_delta(h), trace.hda.top)?
    } else {
        pixels.clone()
    };
    let mut t = resize_bilinear(&base, cfg.height, cfg.width)?;
    if rng.random::<f32>() < cfg.flip_prob {
        t = hflip(&t)?;
        trace.flipped = true;
    }
    if rng.random::<f32>() < cfg.erasing.prob {
        if let Some(rect) = sample_erase_rect(&cfg.erasing, cfg.height, cfg.width, rng) {
            erase(&mut t, rect)?;
            trace.erased = Some(rect);
        }
    }
    Ok((standardize(&t), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![c, h, w], (0..c * h * w).map(|v| (v % 251) as f32 / 251.0).collect()).unwrap()
    }

    fn img(h: usize) -> LabeledImage {
        LabeledImage { pixels: ramp(3, h, 5), person_id: 0, camera_id: 0, path: String::new() }
    }

    #[test]
    fn zero_draw_is_identity() {
        let d = HdaDraw { applied: true, g: 0.0, fraction: 0.0, top: true };
        let t = ramp(3, 20, 5);
        assert_eq!(apply_row_delta(&t, d.row_delta(20), d.top).unwrap(), t);
    }

    #[test]
    fn clipped_crop_removes_fifteen_percent() {
        let cfg = HdaConfig::default();
        let g = -0.30f32;
        let d = HdaDraw { applied: true, g, fraction: g.abs().min(cfg.clip), top: false };
        assert_eq!(d.fraction, 0.15);
        assert_eq!(d.row_delta(100), -15);
        let t = ramp(3, 100, 5);
        let out = apply_row_delta(&t, d.row_delta(100), d.top).unwrap();
        assert_eq!(out.shape(), &[3, 85, 5]);
        assert_eq!(&out.data()[..5], &t.data()[..5]);
        let top = apply_row_delta(&t, -15, true).unwrap();
        assert_eq!(&top.data()[..5], &t.data()[75..80]);
    }

    #[test]
    fn pad_uses_channel_mean_and_keeps_width() {
        let t = ramp(3, 10, 5);
        let means = channel_means(&t);
        let out = apply_row_delta(&t, 2, true).unwrap();
        assert_eq!(out.shape(), &[3, 12, 5]);
        assert!(out.data()[..10].iter().all(|&v| v == means[0]));
        assert_eq!(&out.data()[10..60], &t.data()[..50]);
    }

    #[test]
    fn hda_never_changes_width_and_respects_clip() {
        let cfg = HdaConfig::default();
        let mut rng = stream(&[3]);
        for _ in 0..500 {
            let (out, d) = hda_augment(&img(40), &cfg, &mut rng).unwrap();
            assert_eq!(out.pixels.shape()[2], 5);
            assert!(d.fraction <= cfg.clip);
            assert_eq!(out.pixels.shape()[1] as i64, 40 + d.row_delta(40));
        }
        assert!(hda_augment(&img(7), &cfg, &mut rng).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let t = ramp(3, 6, 7);
        let f = hflip(&t).unwrap();
        assert_ne!(f, t);
        assert_eq!(hflip(&f).unwrap(), t);
    }

    #[test]
    fn resize_matches_half_pixel_reference() {
        // 1x2 -> 1x4: centers at -0.25, 0.25, 0.75, 1.25 in source space.
        let t = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let r = resize_bilinear(&t, 1, 4).unwrap();
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
        let c = Tensor::full(&[3, 9, 4], 0.3);
        assert!(resize_bilinear(&c, 5, 7).unwrap().data().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn eval_chain_is_deterministic() {
        let cfg = AugmentConfig::new(16, 8, HdaConfig::default());
        let t = ramp(3, 30, 10);
        let (a, _) = augment_chain(&t, &cfg, &mut stream(&[1]), false).unwrap();
        let (b, _) = augment_chain(&t, &cfg, &mut stream(&[2]), false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 16, 8]);
        let round = unstandardize(&standardize(&t));
        assert!(round.max_abs_diff(&t) < 1e-6);
    }

    #[test]
    fn erase_fills_with_channel_mean() {
        let mut t = ramp(3, 10, 10);
        let means = channel_means(&t);
        let rect = EraseRect { y: 2, x: 3, h: 4, w: 2 };
        erase(&mut t, rect).unwrap();
        assert_eq!(t.data()[2 * 10 + 3], means[0]);
        assert_eq!(t.data()[100 + 5 * 10 + 4], means[1]);
        assert_ne!(t.data()[0], means[0]);
    }
}
