//! Reciprocal velocity obstacles (ORCA) for disc robots, with a heading controller
//! that turns the holonomic solution into a unicycle command.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;
use crate::worldsim::{wrap_angle, Action, Pose2D};

const EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrcaAgent {
    pub pose: Pose2D,
    /// Current world-frame velocity.
    pub velocity: Vec2,
    pub radius: f64,
    pub goal: Vec2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrcaParams {
    pub time_horizon: f64,
    pub reciprocity: f64,
    /// Added to each radius when building constraints, absorbing heading-tracking error.
    pub radius_margin: f64,
    pub neighbor_dist: f64,
    pub heading_gain: f64,
    pub v_max: f64,
    pub w_max: f64,
    /// Preferred speed is capped at distance-to-goal divided by this time.
    pub arrival_time: f64,
    /// Preferred velocity is rotated clockwise by this angle so symmetric encounters
    /// resolve to the same side.
    pub pass_bias: f64,
}

impl Default for OrcaParams {
    fn default() -> Self {
        Self {
            time_horizon: 2.0,
            reciprocity: 0.5,
            radius_margin: 0.1,
            neighbor_dist: 5.0,
            heading_gain: 2.0,
            v_max: 1.0,
            w_max: 1.0,
            arrival_time: 1.0,
            pass_bias: 0.05,
        }
    }
}

/// Half-plane `{u : (u − point)·normal ≥ 0}` in velocity space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrcaConstraint {
    pub point: Vec2,
    /// Boundary direction; the feasible side is to its left.
    pub direction: Vec2,
}

impl OrcaConstraint {
    pub fn normal(&self) -> Vec2 {
        self.direction.perp()
    }

    /// Signed violation: positive when `u` lies outside the half-plane.
    pub fn violation(&self, u: Vec2) -> f64 {
        self.direction.cross(self.point - u)
    }

    pub fn satisfied(&self, u: Vec2) -> bool {
        self.violation(u) <= 0.0
    }
}

/// Constraints induced on agent `index` by every neighbor within range.
pub fn orca_constraints(agents: &[OrcaAgent], index: usize, dt: f64, p: &OrcaParams) -> Vec<OrcaConstraint> {
    orca_constraints_with_margin(agents, index, dt, p, p.radius_margin)
}

fn orca_constraints_with_margin(
    agents: &[OrcaAgent],
    index: usize,
    dt: f64,
    p: &OrcaParams,
    margin: f64,
) -> Vec<OrcaConstraint> {
    let me = &agents[index];
    let inv_tau = 1.0 / p.time_horizon;
    let mut lines = Vec::new();
    for (j, other) in agents.iter().enumerate() {
        if j == index {
            continue;
        }
        let rel_pos = other.pose.xy() - me.pose.xy();
        if rel_pos.norm() > p.neighbor_dist {
            continue;
        }
        let rel_vel = me.velocity - other.velocity;
        let dist_sq = rel_pos.norm_sq();
        let r = me.radius + other.radius + 2.0 * margin;
        let r_sq = r * r;
        let (direction, u);
        if dist_sq > r_sq {
            let w = rel_vel - rel_pos * inv_tau;
            let w_len_sq = w.norm_sq();
            let dot1 = w.dot(rel_pos);
            if dot1 < 0.0 && dot1 * dot1 > r_sq * w_len_sq {
                // project on the cutoff circle
                let w_len = w_len_sq.sqrt();
                let unit_w = w * (1.0 / w_len);
                direction = Vec2::new(unit_w.y, -unit_w.x);
                u = unit_w * (r * inv_tau - w_len);
            } else {
                // project on a leg
                let leg = (dist_sq - r_sq).sqrt();
                let d = if rel_pos.cross(w) > 0.0 {
                    Vec2::new(rel_pos.x * leg - rel_pos.y * r, rel_pos.x * r + rel_pos.y * leg) * (1.0 / dist_sq)
                } else {
                    -(Vec2::new(rel_pos.x * leg + rel_pos.y * r, -rel_pos.x * r + rel_pos.y * leg) * (1.0 / dist_sq))
                };
                direction = d;
                u = d * rel_vel.dot(d) - rel_vel;
            }
        } else {
            // already overlapping: resolve within one step
            let inv_dt = 1.0 / dt;
            let w = rel_vel - rel_pos * inv_dt;
            let w_len = w.norm();
            let unit_w = if w_len > 0.0 { w * (1.0 / w_len) } else { -rel_pos.normalized() };
            direction = Vec2::new(unit_w.y, -unit_w.x);
            u = unit_w * (r * inv_dt - w_len);
        }
        lines.push(OrcaConstraint {
            point: me.velocity + u * p.reciprocity,
            direction,
        });
    }
    lines
}

fn lp1(lines: &[OrcaConstraint], no: usize, radius: f64, opt: Vec2, dir_opt: bool, result: &mut Vec2) -> bool {
    let line = lines[no];
    let dot = line.point.dot(line.direction);
    let disc = dot * dot + radius * radius - line.point.norm_sq();
    if disc < 0.0 {
        return false;
    }
    let sq = disc.sqrt();
    let (mut t_left, mut t_right) = (-dot - sq, -dot + sq);
    for prev in &lines[..no] {
        let denom = line.direction.cross(prev.direction);
        let numer = prev.direction.cross(line.point - prev.point);
        if denom.abs() <= EPS {
            if numer < 0.0 {
                return false;
            }
            continue;
        }
        let t = numer / denom;
        if denom >= 0.0 {
            t_right = t_right.min(t);
        } else {
            t_left = t_left.max(t);
        }
        if t_left > t_right {
            return false;
        }
    }
    *result = if dir_opt {
        if opt.dot(line.direction) > 0.0 {
            line.point + line.direction * t_right
        } else {
            line.point + line.direction * t_left
        }
    } else {
        let t = line.direction.dot(opt - line.point).clamp(t_left, t_right);
        line.point + line.direction * t
    };
    true
}

fn lp2(lines: &[OrcaConstraint], radius: f64, opt: Vec2, dir_opt: bool, result: &mut Vec2) -> usize {
    *result = if dir_opt {
        opt * radius
    } else if opt.norm_sq() > radius * radius {
        opt.normalized() * radius
    } else {
        opt
    };
    for i in 0..lines.len() {
        if lines[i].violation(*result) > 0.0 {
            let saved = *result;
            if !lp1(lines, i, radius, opt, dir_opt, result) {
                *result = saved;
                return i;
            }
        }
    }
    lines.len()
}

fn lp3(lines: &[OrcaConstraint], begin: usize, radius: f64, result: &mut Vec2) {
    let mut distance = 0.0;
    for i in begin..lines.len() {
        if lines[i].violation(*result) > distance {
            let mut proj = Vec::with_capacity(i);
            for j in 0..i {
                let det = lines[i].direction.cross(lines[j].direction);
                let point = if det.abs() <= EPS {
                    if lines[i].direction.dot(lines[j].direction) > 0.0 {
                        continue;
                    }
                    (lines[i].point + lines[j].point) * 0.5
                } else {
                    lines[i].point
                        + lines[i].direction * (lines[j].direction.cross(lines[i].point - lines[j].point) / det)
                };
                proj.push(OrcaConstraint {
                    point,
                    direction: (lines[j].direction - lines[i].direction).normalized(),
                });
            }
            let saved = *result;
            let dir = lines[i].direction.perp();
            if lp2(&proj, radius, dir, true, result) < proj.len() {
                *result = saved;
            }
            distance = lines[i].violation(*result);
        }
    }
}

/// Velocity within `max_speed` closest to `preferred` that satisfies every
/// constraint; when none does, the velocity minimizing the largest violation.
pub fn solve_orca(lines: &[OrcaConstraint], preferred: Vec2, max_speed: f64) -> Vec2 {
    let mut result = Vec2::ZERO;
    let fail = lp2(lines, max_speed, preferred, false, &mut result);
    if fail < lines.len() {
        lp3(lines, fail, max_speed, &mut result);
    }
    result
}

/// Goal-directed preferred velocity for agent `a`.
pub fn preferred_velocity(a: &OrcaAgent, p: &OrcaParams) -> Vec2 {
    let to_goal = a.goal - a.pose.xy();
    let d = to_goal.norm();
    if d < 1e-9 {
        return Vec2::ZERO;
    }
    let speed = p.v_max.min(d / p.arrival_time);
    let (s, c) = (-p.pass_bias).sin_cos();
    let u = to_goal * (speed / d);
    Vec2::new(c * u.x - s * u.y, s * u.x + c * u.y)
}

/// Heading controller: turn toward `u` at `gain × error`, drive at `|u|·cos(error)`
/// (never backwards), both clamped to the action limits.
pub fn nh_project(pose: &Pose2D, u: Vec2, p: &OrcaParams) -> Action {
    let speed = u.norm();
    if speed < 1e-9 {
        return Action::new(0.0, 0.0);
    }
    let err = wrap_angle(u.angle() - pose.theta);
    let w = (p.heading_gain * err).clamp(-p.w_max, p.w_max);
    let v = (speed * err.cos().max(0.0)).clamp(0.0, p.v_max);
    Action::new(v, w)
}

/// Unicycle command for agent `index`. The forward speed is further halved until the
/// resulting heading-aligned velocity satisfies the constraints built without the
/// radius margin, so tracking error cannot eat into the true separation.
pub fn nh_orca(agents: &[OrcaAgent], index: usize, dt: f64, p: &OrcaParams) -> Action {
    let me = &agents[index];
    let lines = orca_constraints(agents, index, dt, p);
    let u = solve_orca(&lines, preferred_velocity(me, p), p.v_max);
    let mut a = nh_project(&me.pose, u, p);
    let tight = orca_constraints_with_margin(agents, index, dt, p, 0.0);
    let heading = me.pose.heading();
    let ok = |v: f64| tight.iter().all(|l| l.violation(heading * v) <= 1e-9);
    if !ok(a.v) {
        let mut v = a.v;
        while v > 1e-3 && !ok(v) {
            v *= 0.5;
        }
        a.v = if ok(v) { v } else { 0.0 };
    }
    a
}
