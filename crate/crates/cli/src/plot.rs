//! PNG figures: top-down trial overlays, SR/SPL bars and loss curves.

use std::path::Path;

use image::{Rgb, RgbImage};
use navformer::evalkit::SummaryCell;
use navformer::trainkit::LossRecord;
use navformer::worldsim::{Pose2D, WorldScenario, SUCCESS_RADIUS};

const ROBOT_COLORS: [[u8; 3]; 6] = [
    [220, 40, 40],
    [40, 90, 220],
    [30, 160, 60],
    [200, 120, 0],
    [140, 40, 180],
    [0, 150, 150],
];

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
    for y in y0.min(y1)..=y0.max(y1) {
        for x in x0.min(x1)..=x0.max(x1) {
            put(img, x, y, c);
        }
    }
}

fn circle(img: &mut RgbImage, cx: i64, cy: i64, r: i64, c: [u8; 3]) {
    let n = (r * 8).max(16);
    let mut prev = (cx + r, cy);
    for k in 1..=n {
        let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
        let p = (cx + (r as f64 * a.cos()).round() as i64, cy + (r as f64 * a.sin()).round() as i64);
        line(img, prev, p, c);
        prev = p;
    }
}

/// Top-down view of a trial: walls, targets with their success radius, and one
/// colored path per robot (start marked by a filled square).
pub fn trial_overlay(scenario: &WorldScenario, paths: &[Vec<Pose2D>], out: &Path) -> image::ImageResult<()> {
    let px = 480u32;
    let scale = px as f64 / scenario.size;
    let to = |x: f64, y: f64| ((x * scale).round() as i64, (px as f64 - y * scale).round() as i64);
    let mut img = RgbImage::from_pixel(px, px, Rgb([255, 255, 255]));
    for w in &scenario.walls {
        let (a, b) = (to(w.min_x, w.min_y), to(w.max_x, w.max_y));
        fill_rect(&mut img, a.0, a.1, b.0, b.1, [60, 60, 60]);
    }
    for (i, t) in scenario.targets.iter().enumerate() {
        let c = ROBOT_COLORS[i % ROBOT_COLORS.len()];
        let (cx, cy) = to(t.location.x, t.location.y);
        circle(&mut img, cx, cy, (SUCCESS_RADIUS * scale) as i64, c);
        let r = (t.footprint_radius * scale) as i64;
        fill_rect(&mut img, cx - r - 1, cy - r - 1, cx + r + 1, cy + r + 1, [0, 0, 0]);
        fill_rect(&mut img, cx - r, cy - r, cx + r, cy + r, t.color.rgb().map(|v| (v * 255.0) as u8));
    }
    for (i, path) in paths.iter().enumerate() {
        let c = ROBOT_COLORS[i % ROBOT_COLORS.len()];
        if let Some(s) = path.first() {
            let (x, y) = to(s.x, s.y);
            fill_rect(&mut img, x - 4, y - 4, x + 4, y + 4, c);
        }
        for w in path.windows(2) {
            line(&mut img, to(w[0].x, w[0].y), to(w[1].x, w[1].y), c);
        }
    }
    img.save(out)
}

/// Paired bars per summary cell: SR (dark) and SPL (light), both on [0, 1].
pub fn summary_chart(cells: &[SummaryCell], out: &Path) -> image::ImageResult<()> {
    let (w, h) = (120 + 80 * cells.len().max(1) as u32, 320u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let base = h as i64 - 30;
    let top = 20i64;
    line(&mut img, (40, top), (40, base), [0, 0, 0]);
    line(&mut img, (40, base), (w as i64 - 10, base), [0, 0, 0]);
    for k in 0..=4 {
        let y = base - (base - top) * k / 4;
        line(&mut img, (35, y), (40, y), [0, 0, 0]);
    }
    for (i, c) in cells.iter().enumerate() {
        let x = 60 + 80 * i as i64;
        let bar = |v: f64| base - ((base - top) as f64 * v.clamp(0.0, 1.0)).round() as i64;
        fill_rect(&mut img, x, bar(c.success_rate), x + 28, base, [40, 90, 200]);
        fill_rect(&mut img, x + 32, bar(c.spl), x + 60, base, [140, 180, 240]);
    }
    img.save(out)
}

/// DT loss (red) and BYOL loss (blue) against iteration, each scaled to its own
/// maximum.
pub fn loss_curve(records: &[LossRecord], out: &Path) -> image::ImageResult<()> {
    let (w, h) = (640u32, 320u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let (l, r, t, b) = (40i64, w as i64 - 10, 10i64, h as i64 - 30);
    line(&mut img, (l, t), (l, b), [0, 0, 0]);
    line(&mut img, (l, b), (r, b), [0, 0, 0]);
    let n = records.len().max(2) as f64 - 1.0;
    let series: [(Vec<f64>, [u8; 3]); 2] = [
        (records.iter().map(|x| x.dt_loss).collect(), [200, 40, 40]),
        (records.iter().filter_map(|x| x.byol_loss).collect(), [40, 90, 200]),
    ];
    for (vals, c) in series {
        let max = vals.iter().copied().fold(0.0, f64::max);
        if vals.is_empty() || max <= 0.0 {
            continue;
        }
        let pt = |i: usize, v: f64| {
            (
                l + ((r - l) as f64 * i as f64 / n) as i64,
                b - ((b - t) as f64 * v / max) as i64,
            )
        };
        for i in 1..vals.len() {
            line(&mut img, pt(i - 1, vals[i - 1]), pt(i, vals[i]), c);
        }
    }
    img.save(out)
}
