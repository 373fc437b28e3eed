//! Continuous 2-D world: maze generation, unicycle kinematics, collision queries and
//! the success/reward predicates.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Rect, Vec2};

/// Robot footprint radius, meters.
pub const ROBOT_RADIUS: f64 = 0.3;
/// Distance at which a target counts as found, meters (inclusive).
pub const SUCCESS_RADIUS: f64 = 1.5;
/// Control period, seconds.
pub const DT: f64 = 0.2;
pub const MIN_WORLD_SIZE: f64 = 5.0;
pub const MAX_WORLD_SIZE: f64 = 17.5;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("world size {0} outside [{MIN_WORLD_SIZE}, {MAX_WORLD_SIZE}] m")]
    InvalidSize(f64),
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("seed {seed}: could not place {what} after {tries} attempts")]
    Placement { seed: u64, what: String, tries: usize },
    #[error("scenario file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn xy(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn heading(&self) -> Vec2 {
        Vec2::from_angle(self.theta)
    }
}

/// Velocity command: linear `v` (m/s) and angular `w` (rad/s).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub v: f64,
    pub w: f64,
}

impl Action {
    pub const fn new(v: f64, w: f64) -> Self {
        Self { v, w }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionLimits {
    pub v_max: f64,
    pub w_max: f64,
}

impl Default for ActionLimits {
    fn default() -> Self {
        Self { v_max: 1.0, w_max: 1.0 }
    }
}

impl ActionLimits {
    pub fn clamp(&self, a: Action) -> Action {
        Action::new(a.v.clamp(0.0, self.v_max), a.w.clamp(-self.w_max, self.w_max))
    }

    pub fn contains(&self, a: Action) -> bool {
        (0.0..=self.v_max).contains(&a.v) && (-self.w_max..=self.w_max).contains(&a.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetShape {
    Sphere,
    Box,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetColor {
    Green,
    Red,
    White,
    Yellow,
    Blue,
}

impl TargetColor {
    pub const ALL: [TargetColor; 5] = [
        TargetColor::Green,
        TargetColor::Red,
        TargetColor::White,
        TargetColor::Yellow,
        TargetColor::Blue,
    ];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            TargetColor::Green => [0.1, 0.8, 0.2],
            TargetColor::Red => [0.85, 0.1, 0.1],
            TargetColor::White => [0.95, 0.95, 0.95],
            TargetColor::Yellow => [0.95, 0.85, 0.1],
            TargetColor::Blue => [0.1, 0.25, 0.9],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetObject {
    pub shape: TargetShape,
    pub color: TargetColor,
    pub location: Vec2,
    pub footprint_radius: f64,
}

/// A moving disc (another robot).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscAgent {
    pub pose: Pose2D,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldScenario {
    pub seed: u64,
    /// Side length of the square world, meters.
    pub size: f64,
    pub walls: Vec<Rect>,
    pub targets: Vec<TargetObject>,
    pub robot_starts: Vec<Pose2D>,
    pub dynamic_obstacles: Vec<DiscAgent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// When false only the boundary walls are built.
    pub interior_walls: bool,
    pub wall_thickness: f64,
    /// Minimum free corridor width (3 robot diameters).
    pub min_corridor: f64,
    /// Chance of leaving a chamber of at most four cells undivided.
    pub open_chamber_prob: f64,
    pub n_dynamic: usize,
    /// Minimum distance between a robot start and its own target.
    pub min_target_distance: f64,
    pub target_radius: f64,
    pub max_tries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            interior_walls: true,
            wall_thickness: 0.1,
            min_corridor: 6.0 * ROBOT_RADIUS,
            open_chamber_prob: 0.25,
            n_dynamic: 0,
            min_target_distance: 2.0,
            target_radius: 0.25,
            max_tries: 5000,
        }
    }
}

/// Builds a random maze scenario. Identical arguments give identical scenarios.
pub fn generate_scenario(
    seed: u64,
    size: f64,
    n_robots: usize,
    n_targets: usize,
    cfg: &GenConfig,
) -> Result<WorldScenario, WorldError> {
    if !(MIN_WORLD_SIZE..=MAX_WORLD_SIZE).contains(&size) {
        return Err(WorldError::InvalidSize(size));
    }
    if n_robots == 0 || n_targets < n_robots {
        return Err(WorldError::InvalidCounts(format!(
            "need n_robots >= 1 and n_targets >= n_robots, got {n_robots} robots / {n_targets} targets"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let walls = if cfg.interior_walls {
        maze_walls(&mut rng, size, cfg)
    } else {
        boundary_walls(size, cfg.wall_thickness)
    };
    let mut sc = WorldScenario {
        seed,
        size,
        walls,
        targets: Vec::new(),
        robot_starts: Vec::new(),
        dynamic_obstacles: Vec::new(),
    };

    place_entities(&mut sc, &mut rng, n_robots, n_targets, cfg)?;
    Ok(sc)
}

/// Places robot starts, targets and dynamic obstacles into `sc` (replacing any
/// present), drawing from `rng`.
pub fn place_entities(
    sc: &mut WorldScenario,
    rng: &mut ChaCha8Rng,
    n_robots: usize,
    n_targets: usize,
    cfg: &GenConfig,
) -> Result<(), WorldError> {
    let (seed, size) = (sc.seed, sc.size);
    sc.robot_starts.clear();
    sc.targets.clear();
    sc.dynamic_obstacles.clear();
    let clearance = ROBOT_RADIUS + 0.1;
    let mut occupied: Vec<(Vec2, f64)> = Vec::new();
    let sample = |rng: &mut ChaCha8Rng, sc: &WorldScenario, occupied: &[(Vec2, f64)], r: f64, extra: &dyn Fn(Vec2) -> bool, what: &str| {
        for _ in 0..cfg.max_tries {
            let p = Vec2::new(rng.gen_range(clearance..size - clearance), rng.gen_range(clearance..size - clearance));
            let wall_ok = sc.walls.iter().all(|w| w.distance(p) >= clearance.max(r + 0.05));
            let free = occupied.iter().all(|&(q, rq)| p.distance(q) >= r + rq + 0.2);
            if wall_ok && free && extra(p) {
                return Ok(p);
            }
        }
        Err(WorldError::Placement {
            seed,
            what: what.to_string(),
            tries: cfg.max_tries,
        })
    };

    for i in 0..n_robots {
        let p = sample(rng, sc, &occupied, ROBOT_RADIUS, &|_| true, &format!("robot start {i}"))?;
        let theta = rng.gen_range(-PI..PI);
        sc.robot_starts.push(Pose2D::new(p.x, p.y, theta));
        occupied.push((p, ROBOT_RADIUS));
    }
    for i in 0..n_targets {
        let own_start = sc.robot_starts.get(i).map(|s| s.xy());
        let min_d = cfg.min_target_distance;
        let far_enough = move |p: Vec2| own_start.is_none_or(|s| s.distance(p) >= min_d);
        let p = sample(rng, sc, &occupied, cfg.target_radius, &far_enough, &format!("target {i}"))?;
        let shape = if rng.gen_bool(0.5) { TargetShape::Sphere } else { TargetShape::Box };
        let color = TargetColor::ALL[rng.gen_range(0..TargetColor::ALL.len())];
        sc.targets.push(TargetObject {
            shape,
            color,
            location: p,
            footprint_radius: cfg.target_radius,
        });
        occupied.push((p, cfg.target_radius));
    }
    for i in 0..cfg.n_dynamic {
        let p = sample(rng, sc, &occupied, ROBOT_RADIUS, &|_| true, &format!("dynamic obstacle {i}"))?;
        let theta = rng.gen_range(-PI..PI);
        sc.dynamic_obstacles.push(DiscAgent {
            pose: Pose2D::new(p.x, p.y, theta),
            radius: ROBOT_RADIUS,
        });
        occupied.push((p, ROBOT_RADIUS));
    }
    Ok(())
}

fn boundary_walls(size: f64, t: f64) -> Vec<Rect> {
    vec![
        Rect::new(0.0, 0.0, size, t),
        Rect::new(0.0, size - t, size, size),
        Rect::new(0.0, 0.0, t, size),
        Rect::new(size - t, 0.0, size, size),
    ]
}

/// Recursive division on a square cell lattice; the result is a spanning tree of
/// cells, so free space is connected.
fn maze_walls(rng: &mut ChaCha8Rng, size: f64, cfg: &GenConfig) -> Vec<Rect> {
    let t = cfg.wall_thickness;
    let n = ((size / (cfg.min_corridor + t)).floor() as usize).max(1);
    let cell = size / n as f64;
    // h_wall[r][c]: wall on the line y = r·cell spanning column c (r in 1..n)
    let mut h_wall = vec![vec![false; n]; n + 1];
    // v_wall[c][r]: wall on the line x = c·cell spanning row r (c in 1..n)
    let mut v_wall = vec![vec![false; n]; n + 1];

    let mut stack = vec![(0usize, 0usize, n, n)];
    while let Some((c0, r0, c1, r1)) = stack.pop() {
        let (w, h) = (c1 - c0, r1 - r0);
        if w < 2 && h < 2 {
            continue;
        }
        if w * h <= 4 && rng.gen_bool(cfg.open_chamber_prob) {
            continue;
        }
        let horizontal = if w < h {
            true
        } else if h < w {
            false
        } else {
            rng.gen_bool(0.5)
        };
        if horizontal {
            let line = rng.gen_range(r0 + 1..r1);
            let gap = rng.gen_range(c0..c1);
            for c in c0..c1 {
                h_wall[line][c] = c != gap;
            }
            stack.push((c0, r0, c1, line));
            stack.push((c0, line, c1, r1));
        } else {
            let line = rng.gen_range(c0 + 1..c1);
            let gap = rng.gen_range(r0..r1);
            for r in r0..r1 {
                v_wall[line][r] = r != gap;
            }
            stack.push((c0, r0, line, r1));
            stack.push((line, r0, c1, r1));
        }
    }

    let mut walls = boundary_walls(size, t);
    let half = t / 2.0;
    for (line, row) in h_wall.iter().enumerate().take(n).skip(1) {
        let y = line as f64 * cell;
        for (a, b) in runs(row) {
            walls.push(Rect::new(
                (a as f64 * cell - half).max(0.0),
                y - half,
                (b as f64 * cell + half).min(size),
                y + half,
            ));
        }
    }
    for (line, col) in v_wall.iter().enumerate().take(n).skip(1) {
        let x = line as f64 * cell;
        for (a, b) in runs(col) {
            walls.push(Rect::new(
                x - half,
                (a as f64 * cell - half).max(0.0),
                x + half,
                (b as f64 * cell + half).min(size),
            ));
        }
    }
    walls
}

/// Maximal runs of `true` as half-open index ranges.
fn runs(flags: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &f) in flags.iter().chain(std::iter::once(&false)).enumerate() {
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    out
}

impl WorldScenario {
    /// An empty square world with no walls at all.
    pub fn empty(size: f64) -> Self {
        Self {
            seed: 0,
            size,
            walls: Vec::new(),
            targets: Vec::new(),
            robot_starts: Vec::new(),
            dynamic_obstacles: Vec::new(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self, WorldError> {
        toml::from_str(s).map_err(|e| WorldError::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WorldError> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WorldError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Smallest distance from `p` to any wall.
    pub fn wall_distance(&self, p: Vec2) -> f64 {
        self.walls
            .iter()
            .map(|w| w.distance(p))
            .fold(f64::INFINITY, f64::min)
    }
}

/// True iff a disc at `pose` overlaps no wall and no other disc. Touching counts as
/// free.
pub fn collision_free(scenario: &WorldScenario, pose: &Pose2D, radius: f64, others: &[DiscAgent]) -> bool {
    let p = pose.xy();
    scenario.walls.iter().all(|w| w.distance(p) >= radius)
        && others.iter().all(|o| p.distance(o.pose.xy()) >= radius + o.radius)
}

/// Exact unicycle arc integration (no obstacles).
pub fn step(pose: &Pose2D, action: Action, dt: f64) -> Pose2D {
    let (v, w) = (action.v, action.w);
    let th = pose.theta;
    if w.abs() < 1e-12 {
        Pose2D::new(pose.x + v * dt * th.cos(), pose.y + v * dt * th.sin(), th + w * dt)
    } else {
        let th1 = th + w * dt;
        Pose2D::new(
            pose.x + v / w * (th1.sin() - th.sin()),
            pose.y - v / w * (th1.cos() - th.cos()),
            th1,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub pose: Pose2D,
    /// Translation was cut short by a wall or another disc.
    pub contact: bool,
    /// The blocking contact involved another disc.
    pub agent_contact: bool,
}

/// Moves along the unicycle arc and stops translation at the first contact. The
/// rotation is always applied in full: a disc turning in place cannot collide.
pub fn step_in(
    scenario: &WorldScenario,
    pose: &Pose2D,
    action: Action,
    dt: f64,
    radius: f64,
    others: &[DiscAgent],
) -> StepOutcome {
    let full = step(pose, action, dt);
    let at = |s: f64| step(pose, action, s * dt);
    let free = |p: &Pose2D| collision_free(scenario, p, radius, others);
    let turned = Pose2D::new(pose.x, pose.y, full.theta);
    if !free(pose) {
        return StepOutcome {
            pose: turned,
            contact: true,
            agent_contact: !collision_free(scenario, pose, radius, &[]) || !others.is_empty(),
        };
    }
    let arc_len = action.v.abs() * dt;
    let n = ((arc_len / 0.02).ceil() as usize).max(1);
    let mut hit = None;
    for k in 1..=n {
        let s = k as f64 / n as f64;
        if !free(&at(s)) {
            hit = Some(s);
            break;
        }
    }
    let Some(s_hit) = hit else {
        return StepOutcome {
            pose: full,
            contact: false,
            agent_contact: false,
        };
    };
    let (mut lo, mut hi) = (s_hit - 1.0 / n as f64, s_hit);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if free(&at(mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let stop = at(lo);
    let blocked_by_wall = !collision_free(scenario, &at(hi), radius, &[]);
    StepOutcome {
        pose: Pose2D::new(stop.x, stop.y, full.theta),
        contact: true,
        agent_contact: !blocked_by_wall,
    }
}

pub fn target_reached(pose: &Pose2D, target: &TargetObject) -> bool {
    pose.xy().distance(target.location) <= SUCCESS_RADIUS
}

/// Sparse reward: 1 on the first timestep the target is reached, else 0. `prev_pose`
/// is `None` on the first timestep of an episode.
pub fn reward(prev_pose: Option<&Pose2D>, pose: &Pose2D, target: &TargetObject) -> f64 {
    let before = prev_pose.is_some_and(|p| target_reached(p, target));
    if !before && target_reached(pose, target) {
        1.0
    } else {
        0.0
    }
}
