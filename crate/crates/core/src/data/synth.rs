//! Procedural person-like images with identity and camera signal.
//!
//! Each identity is a vertical figure: head, torso and legs in
//! identity-specific colors, with horizontal stripes on the torso at an
//! identity-specific frequency. Each camera contributes a fixed tint, a
//! brightness shift, a background pattern and a vertical offset of the figure.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::manifest::write_manifest;
use crate::data::ppm::{write_ppm, RgbImage};
use crate::error::{Error, Result};
use crate::rng::stream;

const TAG_IDENTITY: u64 = 0x1d;
const TAG_CAMERA: u64 = 0xca;
const TAG_IMAGE: u64 = 0x1a;

#[derive(Clone, Debug)]
struct Identity {
    head: [f32; 3],
    torso: [f32; 3],
    stripe: [f32; 3],
    legs: [f32; 3],
    stripe_period: f32,
    width_frac: f32,
}

#[derive(Clone, Copy, Debug)]
enum Background {
    VerticalGradient,
    Checker,
    Stripes,
    Noise,
}

#[derive(Clone, Debug)]
struct Camera {
    tint: [f32; 3],
    brightness: f32,
    base: [f32; 3],
    background: Background,
    offset_frac: f32,
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

fn identity(seed: u64, id: usize) -> Identity {
    let mut rng = stream(&[seed, TAG_IDENTITY, id as u64]);
    Identity {
        head: color(&mut rng),
        torso: color(&mut rng),
        stripe: color(&mut rng),
        legs: color(&mut rng),
        stripe_period: rng.random_range(3.0..12.0),
        width_frac: rng.random_range(0.4..0.6),
    }
}

const TINTS: [[f32; 3]; 6] = [
    [1.15, 0.85, 0.85],
    [0.85, 1.15, 0.85],
    [0.85, 0.85, 1.15],
    [1.1, 1.1, 0.75],
    [0.75, 1.1, 1.1],
    [1.1, 0.75, 1.1],
];

fn camera(seed: u64, cam: usize) -> Camera {
    let mut rng = stream(&[seed, TAG_CAMERA, cam as u64]);
    let background = match cam % 4 {
        0 => Background::VerticalGradient,
        1 => Background::Checker,
        2 => Background::Stripes,
        _ => Background::Noise,
    };
    let tint = if cam < TINTS.len() {
        TINTS[cam]
    } else {
        [rng.random_range(0.75..1.15), rng.random_range(0.75..1.15), rng.random_range(0.75..1.15)]
    };
    let mut base = tint.map(|t| (t - 0.7) * 1.2);
    for b in &mut base {
        *b = (*b + rng.random_range(-0.05..0.05)).clamp(0.05, 0.95);
    }
    Camera {
        tint,
        brightness: [-0.08, 0.08, 0.0, -0.04, 0.04, 0.12][cam % 6],
        base,
        background,
        offset_frac: [0.0, 0.06, -0.06, 0.03, -0.03, 0.09][cam % 6],
    }
}

fn background_px(cam: &Camera, x: usize, y: usize, h: usize, rng: &mut ChaCha8Rng) -> [f32; 3] {
    let shade = match cam.background {
        Background::VerticalGradient => 0.7 + 0.6 * y as f32 / h as f32,
        Background::Checker => {
            if (x / 4 + y / 4) % 2 == 0 {
                1.2
            } else {
                0.8
            }
        }
        Background::Stripes => {
            if (x / 3) % 2 == 0 {
                1.15
            } else {
                0.85
            }
        }
        Background::Noise => rng.random_range(0.7..1.3),
    };
    cam.base.map(|c| c * shade)
}

fn render(ident: &Identity, cam: &Camera, h: usize, w: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let jitter_y = rng.random_range(-0.03..0.03) * h as f32;
    let jitter_x = rng.random_range(-0.06..0.06) * w as f32;
    let scale = rng.random_range(0.92..1.05);
    let light = rng.random_range(-0.04..0.04);
    let top = 0.08 * h as f32 + cam.offset_frac * h as f32 + jitter_y;
    let height = 0.84 * h as f32 * scale;
    let cx = w as f32 / 2.0 + jitter_x;
    let body_half = ident.width_frac * w as f32 / 2.0 * scale;
    let head_r = 0.075 * height;
    let head_cy = top + head_r;
    let torso_top = top + 2.0 * head_r;
    let torso_bottom = top + 0.55 * height;
    let legs_bottom = top + height;
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let dx = fx - cx;
            let px = if (dx * dx + (fy - head_cy).powi(2)).sqrt() <= head_r {
                Some(ident.head)
            } else if fy >= torso_top && fy < torso_bottom && dx.abs() <= body_half {
                let phase = ((fy - torso_top) / ident.stripe_period) as usize;
                Some(if phase % 2 == 0 { ident.torso } else { ident.stripe })
            } else if fy >= torso_bottom && fy < legs_bottom && dx.abs() <= body_half * 0.85 && dx.abs() >= body_half * 0.1 {
                Some(ident.legs)
            } else {
                None
            };
            let base = match px {
                Some(c) => c,
                None => background_px(cam, x, y, h, rng),
            };
            for c in 0..3 {
                let noise = rng.random_range(-0.03..0.03);
                let v = base[c] * cam.tint[c] + cam.brightness + light + noise;
                data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    RgbImage { width: w, height: h, data }
}

/// Renders a single image in memory.
pub fn synth_image(seed: u64, id: usize, cam: usize, index: usize, height: usize, width: usize) -> RgbImage {
    let mut rng = stream(&[seed, TAG_IMAGE, id as u64, cam as u64, index as u64]);
    render(&identity(seed, id), &camera(seed, cam), height, width, &mut rng)
}

/// Writes `num_ids * imgs_per_id` images and `manifest.csv` into `out_dir`.
/// Image `j` of an identity is seen by camera `j % num_cams`. Returns the
/// manifest path.
pub fn synth_generate(
    num_ids: usize,
    num_cams: usize,
    imgs_per_id: usize,
    height: usize,
    width: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    if num_ids == 0 || num_cams == 0 || imgs_per_id == 0 || height == 0 || width == 0 {
        return Err(Error::Config("synthetic dataset counts and sizes must be positive".into()));
    }
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::with_capacity(num_ids * imgs_per_id);
    for id in 0..num_ids {
        for j in 0..imgs_per_id {
            let cam = j % num_cams;
            let idx = j / num_cams;
            let file = format!("id{id:04}_c{cam}_{idx:03}.ppm");
            write_ppm(out.join(&file), &synth_image(seed, id, cam, idx, height, width))?;
            rows.push((file, id as u64, cam));
        }
    }
    let manifest = out.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}
