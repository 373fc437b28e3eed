use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;
use crate::worldsim::{collision_free, step, wrap_angle, Action, DiscAgent, Pose2D, WorldScenario, ROBOT_RADIUS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DwaParams {
    pub v_max: f64,
    pub w_max: f64,
    /// Reachable change per control period comes from these accelerations.
    pub accel_v: f64,
    pub accel_w: f64,
    pub control_dt: f64,
    pub horizon: f64,
    pub sim_step: f64,
    pub samples_v: usize,
    pub samples_w: usize,
    pub w_heading: f64,
    pub w_clearance: f64,
    pub w_speed: f64,
    pub clearance_cap: f64,
    pub radius: f64,
    /// Distance along the path of the waypoint used for the heading term.
    pub lookahead: f64,
}

impl Default for DwaParams {
    fn default() -> Self {
        Self {
            v_max: 1.0,
            w_max: 1.0,
            accel_v: 2.5,
            accel_w: 5.0,
            control_dt: 0.2,
            horizon: 1.0,
            sim_step: 0.1,
            samples_v: 11,
            samples_w: 11,
            w_heading: 0.8,
            w_clearance: 0.2,
            w_speed: 0.2,
            clearance_cap: 1.0,
            radius: ROBOT_RADIUS,
            lookahead: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DwaSample {
    pub action: Action,
    /// `None` when the simulated arc collides.
    pub score: Option<f64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 || hi <= lo {
        return vec![lo; n.max(1)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Sampled velocities reachable within one control period, `v` outer and `w` inner.
pub fn dwa_window(velocity: Action, p: &DwaParams) -> Vec<Action> {
    let dv = p.accel_v * p.control_dt;
    let dw = p.accel_w * p.control_dt;
    let v0 = velocity.v.clamp(0.0, p.v_max);
    let w0 = velocity.w.clamp(-p.w_max, p.w_max);
    let vs = linspace((v0 - dv).max(0.0), (v0 + dv).min(p.v_max), p.samples_v);
    let ws = linspace((w0 - dw).max(-p.w_max), (w0 + dw).min(p.w_max), p.samples_w);
    vs.iter().flat_map(|&v| ws.iter().map(move |&w| Action::new(v, w))).collect()
}

/// Farthest waypoint within `lookahead` of `pos`, searched forward from the closest
/// one, that the disc can reach along a straight segment. Falls back to the waypoint
/// after the closest one.
pub fn lookahead_point(pos: Vec2, waypoints: &[Vec2], lookahead: f64, scenario: &WorldScenario, radius: f64) -> Vec2 {
    let closest = waypoints
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.distance(pos).total_cmp(&b.1.distance(pos)))
        .map_or(0, |(i, _)| i);
    let mut pick = (closest + 1).min(waypoints.len() - 1);
    for (i, w) in waypoints.iter().enumerate().skip(closest) {
        if w.distance(pos) > lookahead {
            break;
        }
        if segment_clear(scenario, pos, *w, radius) {
            pick = i;
        }
    }
    waypoints[pick]
}

fn segment_clear(scenario: &WorldScenario, a: Vec2, b: Vec2, radius: f64) -> bool {
    let n = ((a.distance(b) / 0.05).ceil() as usize).max(1);
    (1..=n).all(|k| scenario.wall_distance(a + (b - a) * (k as f64 / n as f64)) >= radius)
}

fn clearance(scenario: &WorldScenario, others: &[DiscAgent], p: Vec2) -> f64 {
    others
        .iter()
        .map(|o| p.distance(o.pose.xy()) - o.radius)
        .fold(scenario.wall_distance(p), f64::min)
}

/// Scores every window sample against `goal`.
pub fn dwa_evaluate(
    pose: &Pose2D,
    velocity: Action,
    goal: Vec2,
    scenario: &WorldScenario,
    others: &[DiscAgent],
    p: &DwaParams,
) -> Vec<DwaSample> {
    let n_steps = (p.horizon / p.sim_step).round() as usize;
    dwa_window(velocity, p)
        .into_iter()
        .map(|a| {
            let mut min_clear = f64::INFINITY;
            let mut end = *pose;
            for k in 1..=n_steps {
                end = step(pose, a, k as f64 * p.sim_step);
                if !collision_free(scenario, &end, p.radius, others) {
                    return DwaSample { action: a, score: None };
                }
                min_clear = min_clear.min(clearance(scenario, others, end.xy()) - p.radius);
            }
            let to_goal = goal - end.xy();
            let err = wrap_angle(to_goal.angle() - end.theta).abs();
            let heading = 1.0 - err / std::f64::consts::PI;
            let clear = min_clear.min(p.clearance_cap) / p.clearance_cap;
            let speed = a.v / p.v_max;
            DwaSample {
                action: a,
                score: Some(p.w_heading * heading + p.w_clearance * clear + p.w_speed * speed),
            }
        })
        .collect()
}

/// Dynamic-window local control toward the lookahead point of `waypoints`. The first
/// maximal sample wins; if every sample collides the robot spins in place.
pub fn dwa(
    pose: &Pose2D,
    velocity: Action,
    waypoints: &[Vec2],
    scenario: &WorldScenario,
    others: &[DiscAgent],
    p: &DwaParams,
) -> Action {
    let goal = lookahead_point(pose.xy(), waypoints, p.lookahead, scenario, p.radius);
    let mut best: Option<(f64, Action)> = None;
    for s in dwa_evaluate(pose, velocity, goal, scenario, others, p) {
        if let Some(score) = s.score {
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, s.action));
            }
        }
    }
    best.map_or(Action::new(0.0, p.w_max), |(_, a)| a)
}
