use navformer::evalkit::{
    run_evaluation, run_trial, shortest_path_length, spl, success_rate, Controller, EvalConfig, EvalError,
    RandomController,
};
use navformer::geometry::{Rect, Vec2};
use navformer::raycam::{Camera, Image84};
use navformer::worldsim::{
    Action, ActionLimits, Pose2D, TargetColor, TargetObject, TargetShape, WorldScenario, ROBOT_RADIUS,
};

/// Every robot always sends the same command.
struct Constant(Action);

impl Controller for Constant {
    fn reset(&mut self, _robots: usize, _targets: &[Image84]) {}

    fn act(&mut self, active: &[usize], _obs: &[Image84], _rtgs: &[f64]) -> Result<Vec<Action>, EvalError> {
        Ok(vec![self.0; active.len()])
    }
}

fn target_at(x: f64, y: f64) -> TargetObject {
    TargetObject {
        shape: TargetShape::Sphere,
        color: TargetColor::Red,
        location: Vec2::new(x, y),
        footprint_radius: 0.25,
    }
}

fn open_world(starts: &[Pose2D], targets: &[(f64, f64)]) -> WorldScenario {
    let mut sc = WorldScenario::empty(10.0);
    sc.robot_starts = starts.to_vec();
    sc.targets = targets.iter().map(|&(x, y)| target_at(x, y)).collect();
    sc
}

#[test]
fn start_at_target_succeeds_without_moving() {
    let sc = open_world(&[Pose2D::new(3.0, 3.0, 0.0)], &[(3.5, 3.0)]);
    let out = run_trial(&mut Constant(Action::new(1.0, 0.0)), &sc, &EvalConfig::default(), &Camera::default()).unwrap();
    let r = &out.results[0];
    assert!(r.success);
    assert_eq!(r.steps, 1);
    assert_eq!(r.path_length, 0.0);
    assert_eq!(out.paths[0].len(), 1);
    assert_eq!(spl(&out.results), 1.0);
}

#[test]
fn grid_shortest_path_is_octile_distance() {
    let sc = WorldScenario::empty(10.0);
    let l = shortest_path_length(&sc, Vec2::new(1.0, 1.0), Vec2::new(4.0, 5.0)).unwrap();
    assert!((l - (3.0 * 2f64.sqrt() + 1.0)).abs() < 1e-9, "{l}");

    let mut walled = WorldScenario::empty(10.0);
    walled.walls.push(Rect::new(0.0, 4.9, 10.0, 5.1));
    assert!(shortest_path_length(&walled, Vec2::new(1.0, 1.0), Vec2::new(4.0, 8.0)).is_none());
}

#[test]
fn straight_drive_reaches_target() {
    let sc = open_world(&[Pose2D::new(2.0, 2.0, 0.0)], &[(5.0, 2.0)]);
    let out = run_trial(&mut Constant(Action::new(1.0, 0.0)), &sc, &EvalConfig::default(), &Camera::default()).unwrap();
    let r = &out.results[0];
    // 0.2 m per tick, success within 1.5 m of a target 3 m away
    assert!(r.success);
    assert_eq!(r.steps, 8);
    assert!((r.path_length - 1.6).abs() < 1e-9);
    assert!((r.shortest_path - 3.0).abs() < 1e-9);
    assert_eq!(r.collisions, 0);
    assert_eq!(out.rtg_history[0], vec![1.0; 8]);
}

#[test]
fn stationary_robot_times_out() {
    let sc = open_world(&[Pose2D::new(2.0, 2.0, 0.0)], &[(8.0, 8.0)]);
    let cfg = EvalConfig { step_cap: 20, ..EvalConfig::default() };
    let out = run_trial(&mut Constant(Action::new(0.0, 0.5)), &sc, &cfg, &Camera::default()).unwrap();
    let r = &out.results[0];
    assert!(!r.success);
    assert_eq!(r.steps, 20);
    assert_eq!(r.path_length, 0.0);
    assert_eq!(success_rate(&out.results), 0.0);
}

#[test]
fn simultaneous_overlapping_moves_are_reverted() {
    let gap = 2.0 * ROBOT_RADIUS + 0.1;
    let sc = open_world(
        &[Pose2D::new(4.0, 5.0, 0.0), Pose2D::new(4.0 + gap, 5.0, std::f64::consts::PI)],
        &[(9.0, 9.0), (1.0, 1.0)],
    );
    let cfg = EvalConfig { step_cap: 1, ..EvalConfig::default() };
    let out = run_trial(&mut Constant(Action::new(1.0, 0.0)), &sc, &cfg, &Camera::default()).unwrap();
    for (r, path) in out.results.iter().zip(&out.paths) {
        assert_eq!(r.path_length, 0.0);
        assert!(r.collisions >= 1);
        assert_eq!(path[1], path[0]);
    }
}

#[test]
fn evaluation_is_deterministic() {
    let cfg = EvalConfig {
        n_envs: 1,
        trials_per_env: 2,
        step_cap: 15,
        seed: 5,
        ..EvalConfig::default()
    };
    let cam = Camera::default();
    let run = || {
        run_evaluation(&cfg, &cam, |s| Box::new(RandomController::new(ActionLimits::default(), s)), |_, _| {}).unwrap()
    };
    let (a, ex_a) = run();
    let (b, ex_b) = run();
    assert_eq!(a, b);
    assert_eq!(ex_a, ex_b);
    let robots = cfg.n_robots[0];
    assert_eq!(a.len() + ex_a.len() * robots, cfg.n_envs * cfg.trials_per_env * robots);
    assert!(a.iter().all(|r| r.steps <= cfg.step_cap && r.path_length <= r.steps as f64 * 0.2 + 1e-9));
}

#[test]
fn off_protocol_settings_are_rejected() {
    let cam = Camera::default();
    for bad in [
        EvalConfig { dt: 0.1, ..EvalConfig::default() },
        EvalConfig { success_radius: 1.0, ..EvalConfig::default() },
        EvalConfig { n_envs: 0, ..EvalConfig::default() },
    ] {
        let r = run_evaluation(&bad, &cam, |s| Box::new(RandomController::new(ActionLimits::default(), s)), |_, _| {});
        assert!(r.is_err());
    }
}
