use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::raycam::{Image84, IMAGE_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Crop side length as a fraction of the image side, drawn uniformly.
    pub crop_scale: (f64, f64),
    /// Brightness, contrast and saturation factors are drawn from `1 ± jitter`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            crop_scale: (0.6, 1.0),
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
        }
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        }
    }
}

/// Concrete augmentation parameters drawn for one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    /// Crop side in pixels and top-left corner, continuous.
    pub side: f64,
    pub x0: f64,
    pub y0: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

fn factor(rng: &mut ChaCha8Rng, jitter: f64) -> f64 {
    if jitter > 0.0 {
        rng.gen_range(1.0 - jitter..=1.0 + jitter)
    } else {
        1.0
    }
}

pub fn draw(spec: &AugmentSpec, seed: u64) -> AugmentDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = spec.crop_scale;
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let n = IMAGE_SIZE as f64;
    let side = scale * n;
    let slack = n - side;
    let (x0, y0) = if slack > 0.0 {
        (rng.gen_range(0.0..=slack), rng.gen_range(0.0..=slack))
    } else {
        (0.0, 0.0)
    };
    AugmentDraw {
        side,
        x0,
        y0,
        brightness: factor(&mut rng, spec.brightness),
        contrast: factor(&mut rng, spec.contrast),
        saturation: factor(&mut rng, spec.saturation),
    }
}

/// Bilinear resample of the square crop `(x0, y0, side)` back to 84×84, sampling at
/// pixel centers with edge clamping.
pub fn crop_resize(img: &Image84, x0: f64, y0: f64, side: f64) -> Vec<f32> {
    let n = IMAGE_SIZE;
    let src = img.pixels();
    let s = side / n as f64;
    let mut out = vec![0f32; src.len()];
    let coord = |dst: usize, off: f64| {
        let f = (off + (dst as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, f - i0 as f64)
    };
    for r in 0..n {
        let (r0, r1, fy) = coord(r, y0);
        for c in 0..n {
            let (c0, c1, fx) = coord(c, x0);
            for k in 0..3 {
                let p = |rr: usize, cc: usize| src[(rr * n + cc) * 3 + k] as f64;
                let top = p(r0, c0) * (1.0 - fx) + p(r0, c1) * fx;
                let bot = p(r1, c0) * (1.0 - fx) + p(r1, c1) * fx;
                out[(r * n + c) * 3 + k] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    out
}

fn luma(p: &[f32]) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

/// Applies brightness, contrast and saturation factors; a factor of exactly 1 skips
/// its stage.
pub fn color_jitter(pixels: &mut [f32], brightness: f64, contrast: f64, saturation: f64) {
    if brightness != 1.0 {
        for v in pixels.iter_mut() {
            *v = (*v as f64 * brightness).clamp(0.0, 1.0) as f32;
        }
    }
    if contrast != 1.0 {
        let mean = pixels.chunks(3).map(luma).sum::<f64>() / (pixels.len() / 3) as f64;
        for v in pixels.iter_mut() {
            *v = ((*v as f64 - mean) * contrast + mean).clamp(0.0, 1.0) as f32;
        }
    }
    if saturation != 1.0 {
        for px in pixels.chunks_mut(3) {
            let g = luma(px);
            for v in px.iter_mut() {
                *v = ((*v as f64 - g) * saturation + g).clamp(0.0, 1.0) as f32;
            }
        }
    }
}

/// Random crop-and-resize followed by color jitter. Deterministic in `seed`; the
/// identity spec returns the input unchanged.
pub fn augment(img: &Image84, spec: &AugmentSpec, seed: u64) -> Image84 {
    let d = draw(spec, seed);
    let mut px = if d.side == IMAGE_SIZE as f64 && d.x0 == 0.0 && d.y0 == 0.0 {
        img.pixels().to_vec()
    } else {
        crop_resize(img, d.x0, d.y0, d.side)
    };
    color_jitter(&mut px, d.brightness, d.contrast, d.saturation);
    Image84::from_pixels(px).expect("augmented pixels stay in range")
}
