//! First-person 84×84 RGB rendering by per-column raycasting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{HitFace, Rect, Vec2};
use crate::worldsim::{DiscAgent, Pose2D, TargetObject, TargetShape, WorldScenario};

pub const IMAGE_SIZE: usize = 84;
pub const IMAGE_LEN: usize = IMAGE_SIZE * IMAGE_SIZE * 3;

pub const WALL_HEIGHT: f64 = 1.0;
pub const CAMERA_HEIGHT: f64 = 0.5;
pub const AGENT_HEIGHT: f64 = 0.6;

pub const CEILING_RGB: [f64; 3] = [0.78, 0.82, 0.88];
pub const FLOOR_RGB: [f64; 3] = [0.36, 0.30, 0.26];
pub const AGENT_RGB: [f64; 3] = [1.0, 0.55, 0.1];
pub const TARGET_BACKGROUND: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fov: f64,
    pub max_range: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            fov: std::f64::consts::FRAC_PI_2,
            max_range: 20.0,
        }
    }
}

impl Camera {
    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        IMAGE_SIZE as f64 / 2.0 / (self.fov / 2.0).tan()
    }

    /// Camera-plane offset of column `c`; the ray direction is `forward + right·u`.
    pub fn column_offset(&self, c: usize) -> f64 {
        (2.0 * (c as f64 + 0.5) / IMAGE_SIZE as f64 - 1.0) * (self.fov / 2.0).tan()
    }

    /// Unit vector pointing to the right of the heading.
    pub fn right(pose: &Pose2D) -> Vec2 {
        Vec2::new(pose.theta.sin(), -pose.theta.cos())
    }

    /// Ray direction for column `c`. Its forward component has unit length, so the
    /// ray parameter equals perpendicular depth.
    pub fn ray_dir(&self, pose: &Pose2D, c: usize) -> Vec2 {
        pose.heading() + Self::right(pose) * self.column_offset(c)
    }

    /// Row span `[top, bottom)` covered by a vertical extent `[z0, z1]` at `depth`,
    /// in continuous pixel units.
    pub fn project_span(&self, depth: f64, z0: f64, z1: f64) -> (f64, f64) {
        let h = IMAGE_SIZE as f64 / 2.0;
        let f = self.focal();
        (h - f * (z1 - CAMERA_HEIGHT) / depth, h - f * (z0 - CAMERA_HEIGHT) / depth)
    }
}

/// An 84×84×3 image with channels in `[0, 1]`, stored row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct Image84 {
    pixels: Vec<f32>,
}

impl Image84 {
    pub fn filled(rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(IMAGE_LEN);
        for _ in 0..IMAGE_SIZE * IMAGE_SIZE {
            pixels.extend(rgb.iter().map(|&v| quantize(v)));
        }
        Self { pixels }
    }

    pub fn from_pixels(pixels: Vec<f32>) -> Option<Self> {
        (pixels.len() == IMAGE_LEN && pixels.iter().all(|v| (0.0..=1.0).contains(v))).then_some(Self { pixels })
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * IMAGE_SIZE + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * IMAGE_SIZE + col) * 3;
        for k in 0..3 {
            self.pixels[i + k] = quantize(rgb[k]);
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_u8(bytes: &[u8]) -> Option<Self> {
        (bytes.len() == IMAGE_LEN).then(|| Self {
            pixels: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    pub fn channel_mean(&self, k: usize) -> f64 {
        self.pixels.iter().skip(k).step_by(3).map(|&v| v as f64).sum::<f64>() / (IMAGE_SIZE * IMAGE_SIZE) as f64
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> image::ImageResult<()> {
        let buf = image::RgbImage::from_raw(IMAGE_SIZE as u32, IMAGE_SIZE as u32, self.to_u8()).expect("fixed size");
        buf.save(path)
    }
}

/// Rounds to the nearest multiple of 1/255 so byte storage round-trips exactly.
fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Gray level of wall `index` in a scenario with `seed`.
pub fn wall_brightness(seed: u64, index: usize) -> f64 {
    let h = splitmix(seed ^ splitmix(index as u64 + 1));
    0.45 + 0.3 * ((h >> 11) as f64 / (1u64 << 53) as f64)
}

struct Slice {
    depth: f64,
    top: f64,
    bottom: f64,
    rgb: [f64; 3],
}

fn shade(rgb: [f64; 3], depth: f64, face: HitFace) -> [f64; 3] {
    let face_k = match face {
        HitFace::X => 1.0,
        HitFace::Y => 0.8,
    };
    let fog = (1.0 - depth / 30.0).max(0.3);
    rgb.map(|c| c * face_k * fog)
}

/// Renders the view from `pose`, drawing walls, targets and the given discs.
pub fn render_view(scenario: &WorldScenario, pose: &Pose2D, agents: &[DiscAgent], camera: &Camera) -> Image84 {
    let mut img = Image84::filled(CEILING_RGB);
    let half = IMAGE_SIZE / 2;
    for row in half..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            img.set(row, col, FLOOR_RGB);
        }
    }
    let origin = pose.xy();
    let fwd = pose.heading();
    let right = Camera::right(pose);
    let near = 1e-3;
    let mut slices: Vec<Slice> = Vec::new();
    for col in 0..IMAGE_SIZE {
        slices.clear();
        let u = camera.column_offset(col);
        let dir = fwd + right * u;

        let mut wall: Option<(f64, HitFace, usize)> = None;
        for (i, w) in scenario.walls.iter().enumerate() {
            if let Some((t, face)) = w.ray_hit(origin, dir) {
                if t > near && t <= camera.max_range && wall.is_none_or(|(bt, _, _)| t < bt) {
                    wall = Some((t, face, i));
                }
            }
        }
        if let Some((t, face, i)) = wall {
            let g = wall_brightness(scenario.seed, i);
            let (top, bottom) = camera.project_span(t, 0.0, WALL_HEIGHT);
            slices.push(Slice {
                depth: t,
                top,
                bottom,
                rgb: shade([g, g, g], t, face),
            });
        }

        for t in &scenario.targets {
            if let Some(s) = target_slice(t, origin, dir, camera) {
                slices.push(s);
            }
        }

        for a in agents {
            let rel = a.pose.xy() - origin;
            let depth = rel.dot(fwd);
            if depth <= near || depth > camera.max_range {
                continue;
            }
            let lateral = rel.dot(right) - u * depth;
            if lateral.abs() <= a.radius {
                let (top, bottom) = camera.project_span(depth, 0.0, AGENT_HEIGHT);
                slices.push(Slice {
                    depth,
                    top,
                    bottom,
                    rgb: AGENT_RGB,
                });
            }
        }

        // far to near, ties keep insertion order
        slices.sort_by(|a, b| b.depth.total_cmp(&a.depth));
        for s in &slices {
            for row in 0..IMAGE_SIZE {
                let yc = row as f64 + 0.5;
                if yc >= s.top && yc < s.bottom {
                    img.set(row, col, s.rgb);
                }
            }
        }
    }
    img
}

fn target_slice(t: &TargetObject, origin: Vec2, dir: Vec2, camera: &Camera) -> Option<Slice> {
    let r = t.footprint_radius;
    match t.shape {
        TargetShape::Sphere => {
            let depth = ray_disc_depth(origin, dir, t.location, r)?;
            if depth > camera.max_range {
                return None;
            }
            // vertical chord of the sphere through this column's ray
            let perp = (t.location - origin).cross(dir).abs() / dir.norm();
            let half = (r * r - perp * perp).max(0.0).sqrt();
            let (top, bottom) = camera.project_span(depth, r - half, r + half);
            Some(Slice {
                depth,
                top,
                bottom,
                rgb: t.color.rgb(),
            })
        }
        TargetShape::Box => {
            let b = Rect::new(t.location.x - r, t.location.y - r, t.location.x + r, t.location.y + r);
            let (depth, face) = b.ray_hit(origin, dir)?;
            if depth <= 1e-3 || depth > camera.max_range {
                return None;
            }
            let (top, bottom) = camera.project_span(depth, 0.0, 2.0 * r);
            Some(Slice {
                depth,
                top,
                bottom,
                rgb: shade(t.color.rgb(), 0.0, face),
            })
        }
    }
}

fn ray_disc_depth(origin: Vec2, dir: Vec2, c: Vec2, r: f64) -> Option<f64> {
    crate::geometry::ray_disc(origin, dir, c, r).filter(|&t| t > 1e-3)
}

/// Renders the scenario from `pose`; `include_dynamic` toggles the scenario's
/// dynamic obstacles.
pub fn render(scenario: &WorldScenario, pose: &Pose2D, include_dynamic: bool) -> Image84 {
    let agents: &[DiscAgent] = if include_dynamic { &scenario.dynamic_obstacles } else { &[] };
    render_view(scenario, pose, agents, &Camera::default())
}

/// Canonical target image: the target's silhouette, 42 px across, centered on a
/// neutral gray background.
pub fn render_target_image(target: &TargetObject) -> Image84 {
    let mut img = Image84::filled([TARGET_BACKGROUND; 3]);
    let c = IMAGE_SIZE as f64 / 2.0;
    let half = IMAGE_SIZE as f64 / 4.0;
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let (y, x) = (row as f64 + 0.5 - c, col as f64 + 0.5 - c);
            let inside = match target.shape {
                TargetShape::Sphere => x * x + y * y <= half * half,
                TargetShape::Box => x.abs() <= half && y.abs() <= half,
            };
            if inside {
                img.set(row, col, target.color.rgb());
            }
        }
    }
    img
}
