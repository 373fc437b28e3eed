//! Closed-loop multi-robot evaluation: return-conditioned rollouts, SR and SPL.

use std::collections::BTreeMap;

use navformer_autograd::{ParamStore, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::PackedImage;
use crate::expert::{astar, OccupancyGrid};
use crate::policy::{NavFormer, PolicyError, WindowSpec};
use crate::raycam::{render_target_image, render_view, Camera, Image84};
use crate::trainkit::Real;
use crate::worldsim::{
    generate_scenario, place_entities, reward, step_in, target_reached, Action, ActionLimits, DiscAgent, GenConfig,
    Pose2D, WorldError, WorldScenario, DT, ROBOT_RADIUS, SUCCESS_RADIUS,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub env_sizes: Vec<f64>,
    pub n_robots: Vec<usize>,
    pub step_cap: usize,
    pub dt: f64,
    pub success_radius: f64,
    pub trials_per_env: usize,
    pub n_envs: usize,
    pub seed: u64,
    /// Desired total return `R̂_1` given to the policy.
    pub target_return: f64,
    /// Timesteps of history fed to the policy; the training window when absent.
    pub context: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            env_sizes: vec![7.5],
            n_robots: vec![2],
            step_cap: 500,
            dt: DT,
            success_radius: SUCCESS_RADIUS,
            trials_per_env: 10,
            n_envs: 2,
            seed: 0,
            target_return: 1.0,
            context: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Config(m));
        if self.env_sizes.is_empty() || self.n_robots.is_empty() {
            return bad("env_sizes and n_robots must be non-empty".into());
        }
        if self.n_robots.contains(&0) || self.step_cap == 0 || self.trials_per_env == 0 || self.n_envs == 0 {
            return bad("counts must be positive".into());
        }
        if self.dt != DT || self.success_radius != SUCCESS_RADIUS {
            return bad(format!(
                "the simulator runs at dt = {DT} s with a {SUCCESS_RADIUS} m success radius"
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub success: bool,
    /// Sum of per-step displacements (m).
    pub path_length: f64,
    /// Grid shortest path from start to target (m).
    pub shortest_path: f64,
    pub steps: usize,
    pub collisions: usize,
    pub robot: usize,
    pub n_robots: usize,
    pub env_size: f64,
    pub env_index: usize,
    pub trial_index: usize,
    pub scenario_seed: u64,
}

/// Success weighted by normalized inverse path length:
/// `(1/N) Σ S_i · ℓ_i / max(p_i, ℓ_i)`.
pub fn spl(results: &[TrialResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let s: f64 = results
        .iter()
        .filter(|r| r.success)
        .map(|r| {
            let denom = r.path_length.max(r.shortest_path);
            if denom > 0.0 {
                r.shortest_path / denom
            } else {
                1.0
            }
        })
        .sum();
    s / results.len() as f64
}

pub fn success_rate(results: &[TrialResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| r.success).count() as f64 / results.len() as f64
}

/// Length (m) of the 8-connected grid shortest path on the rasterized map, `None` when
/// the target cell cannot be reached.
pub fn shortest_path_length(scenario: &WorldScenario, start: crate::geometry::Vec2, target: crate::geometry::Vec2) -> Option<f64> {
    let grid = OccupancyGrid::rasterize(scenario);
    let (s, t) = (grid.clamp_cell(start), grid.clamp_cell(target));
    astar(&grid, s, t, false).map(|p| p.cost * grid.resolution)
}

/// A controller driving every robot of an episode.
pub trait Controller {
    /// Called once per robot before the first tick.
    fn reset(&mut self, robots: usize, target_images: &[Image84]);
    /// Actions for the `active` robots given their observations and current `R̂`.
    fn act(&mut self, active: &[usize], observations: &[Image84], rtgs: &[f64]) -> Result<Vec<Action>, EvalError>;
    /// Records the action each active robot actually took.
    fn record(&mut self, _robot: usize, _action: Action) {}
}

/// Uniformly random actions within the limits.
pub struct RandomController {
    pub limits: ActionLimits,
    rng: ChaCha8Rng,
}

impl RandomController {
    pub fn new(limits: ActionLimits, seed: u64) -> Self {
        Self {
            limits,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Controller for RandomController {
    fn reset(&mut self, _robots: usize, _targets: &[Image84]) {}

    fn act(&mut self, active: &[usize], _obs: &[Image84], _rtgs: &[f64]) -> Result<Vec<Action>, EvalError> {
        Ok(active
            .iter()
            .map(|_| {
                Action::new(
                    self.rng.gen_range(0.0..=self.limits.v_max),
                    self.rng.gen_range(-self.limits.w_max..=self.limits.w_max),
                )
            })
            .collect())
    }
}

#[derive(Clone, Debug, Default)]
struct RobotMemory {
    target: Vec<Real>,
    obs_static: Vec<Vec<Real>>,
    obs_general: Vec<Vec<Real>>,
    rtgs: Vec<f64>,
    actions: Vec<Action>,
}

/// The trained transformer with per-robot histories; embeddings are computed once
/// per frame and cached.
pub struct LearnedController<'a> {
    pub model: &'a NavFormer,
    pub store: &'a ParamStore<Real>,
    pub context: usize,
    memory: Vec<RobotMemory>,
}

impl<'a> LearnedController<'a> {
    pub fn new(model: &'a NavFormer, store: &'a ParamStore<Real>, context: usize) -> Self {
        Self {
            model,
            store,
            context: context.clamp(1, model.cfg.max_timesteps()),
            memory: Vec::new(),
        }
    }
}

impl Controller for LearnedController<'_> {
    fn reset(&mut self, robots: usize, target_images: &[Image84]) {
        let packed: Vec<PackedImage> = target_images.iter().map(PackedImage::pack).collect();
        let refs: Vec<&PackedImage> = packed.iter().collect();
        let emb = self
            .model
            .encoders
            .general_encoder()
            .encode_packed(self.store, &refs)
            .expect("target embedding");
        self.memory = (0..robots)
            .map(|i| RobotMemory {
                target: emb[i].clone(),
                ..RobotMemory::default()
            })
            .collect();
    }

    fn act(&mut self, active: &[usize], observations: &[Image84], rtgs: &[f64]) -> Result<Vec<Action>, EvalError> {
        let packed: Vec<PackedImage> = observations.iter().map(PackedImage::pack).collect();
        let refs: Vec<&PackedImage> = packed.iter().collect();
        let s = self.model.encoders.static_encoder().encode_packed(self.store, &refs)?;
        let ca = self.model.encoders.general_encoder().encode_packed(self.store, &refs)?;
        let mut out = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            let mem = &mut self.memory[i];
            mem.obs_static.push(s[k].clone());
            mem.obs_general.push(ca[k].clone());
            mem.rtgs.push(rtgs[k]);
            let t = mem.rtgs.len();
            let lo = t.saturating_sub(self.context);
            let window = WindowSpec {
                first_timestep: lo + 1,
                rtgs: mem.rtgs[lo..].to_vec(),
                prev_actions: mem.actions[lo..].to_vec(),
            };
            let a = self.model.act(
                self.store,
                &mem.target,
                &mem.obs_static[lo..],
                &mem.obs_general[lo..],
                &window,
            )?;
            out.push(a);
        }
        Ok(out)
    }

    fn record(&mut self, robot: usize, action: Action) {
        self.memory[robot].actions.push(action);
    }
}

/// Per-robot outcome of one multi-robot episode.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub results: Vec<TrialResult>,
    /// Pose sequence per robot, starting at its start pose.
    pub paths: Vec<Vec<Pose2D>>,
    /// `R̂_t` values fed to the policy, per robot.
    pub rtg_history: Vec<Vec<f64>>,
}

/// One synchronized episode: all active robots observe a snapshot, all act, then the
/// world moves. Robots that reach their target stop and remain as obstacles. Robot
/// `i` pursues `targets[i]`.
pub fn run_trial(
    controller: &mut dyn Controller,
    scenario: &WorldScenario,
    cfg: &EvalConfig,
    camera: &Camera,
) -> Result<EpisodeOutcome, EvalError> {
    let n = scenario.robot_starts.len();
    if scenario.targets.len() < n {
        return Err(EvalError::Config("fewer targets than robots".into()));
    }
    let targets: Vec<_> = scenario.targets[..n].to_vec();
    controller.reset(n, &targets.iter().map(render_target_image).collect::<Vec<_>>());
    let mut poses: Vec<Pose2D> = scenario.robot_starts.clone();
    let mut paths: Vec<Vec<Pose2D>> = poses.iter().map(|p| vec![*p]).collect();
    let mut rtg = vec![cfg.target_return; n];
    let mut rtg_history = vec![Vec::new(); n];
    let mut done = vec![false; n];
    let mut steps = vec![0usize; n];
    let mut length = vec![0.0; n];
    let mut collisions = vec![0usize; n];
    let disc = |p: &Pose2D| DiscAgent {
        pose: *p,
        radius: ROBOT_RADIUS,
    };

    for tick in 0..cfg.step_cap {
        let active: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let snapshot = poses.clone();
        let others_of = |i: usize| -> Vec<DiscAgent> {
            snapshot.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, p)| disc(p)).collect()
        };
        let observations: Vec<Image84> = active
            .iter()
            .map(|&i| render_view(scenario, &snapshot[i], &others_of(i), camera))
            .collect();
        let rtgs: Vec<f64> = active.iter().map(|&i| rtg[i]).collect();
        for &i in &active {
            rtg_history[i].push(rtg[i]);
        }

        // Start-at-target: success on the first step without moving.
        let mut acting = Vec::new();
        for (k, &i) in active.iter().enumerate() {
            if tick == 0 && reward(None, &snapshot[i], &targets[i]) > 0.0 {
                rtg[i] -= 1.0;
                done[i] = true;
                steps[i] = 1;
            } else {
                acting.push(k);
            }
        }
        let act_ids: Vec<usize> = acting.iter().map(|&k| active[k]).collect();
        if act_ids.is_empty() {
            continue;
        }
        let act_obs: Vec<Image84> = acting.iter().map(|&k| observations[k].clone()).collect();
        let act_rtg: Vec<f64> = acting.iter().map(|&k| rtgs[k]).collect();
        let actions = controller.act(&act_ids, &act_obs, &act_rtg)?;

        let mut proposed = snapshot.clone();
        for (&i, a) in act_ids.iter().zip(&actions) {
            let out = step_in(scenario, &snapshot[i], *a, cfg.dt, ROBOT_RADIUS, &others_of(i));
            proposed[i] = out.pose;
            if out.contact {
                collisions[i] += 1;
            }
        }
        // Moves that overlap each other are undone for both robots.
        loop {
            let mut reverted = false;
            for i in 0..n {
                for j in i + 1..n {
                    let sep = proposed[i].xy().distance(proposed[j].xy());
                    if sep < 2.0 * ROBOT_RADIUS && (proposed[i] != snapshot[i] || proposed[j] != snapshot[j]) {
                        for k in [i, j] {
                            if proposed[k] != snapshot[k] {
                                proposed[k] = snapshot[k];
                                collisions[k] += 1;
                            }
                        }
                        reverted = true;
                    }
                }
            }
            if !reverted {
                break;
            }
        }
        for (&i, a) in act_ids.iter().zip(&actions) {
            controller.record(i, *a);
            let r = reward(Some(&snapshot[i]), &proposed[i], &targets[i]);
            length[i] += snapshot[i].xy().distance(proposed[i].xy());
            poses[i] = proposed[i];
            paths[i].push(proposed[i]);
            rtg[i] -= r;
            steps[i] = tick + 1;
            if r > 0.0 || target_reached(&proposed[i], &targets[i]) {
                done[i] = true;
            }
        }
    }

    let results = (0..n)
        .map(|i| TrialResult {
            success: done[i],
            path_length: length[i],
            shortest_path: shortest_path_length(scenario, scenario.robot_starts[i].xy(), targets[i].location)
                .unwrap_or(f64::NAN),
            steps: steps[i],
            collisions: collisions[i],
            robot: i,
            n_robots: n,
            env_size: scenario.size,
            env_index: 0,
            trial_index: 0,
            scenario_seed: scenario.seed,
        })
        .collect();
    Ok(EpisodeOutcome {
        results,
        paths,
        rtg_history,
    })
}

/// Result for one robot of a synchronized episode.
pub fn run_episode(
    controller: &mut dyn Controller,
    scenario: &WorldScenario,
    robot: usize,
    cfg: &EvalConfig,
    camera: &Camera,
) -> Result<TrialResult, EvalError> {
    let out = run_trial(controller, scenario, cfg, camera)?;
    out.results
        .into_iter()
        .nth(robot)
        .ok_or_else(|| EvalError::Config(format!("robot {robot} not in scenario")))
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scenario for `trial` of environment `env`: walls depend on the environment only,
/// robot starts and targets are redrawn per trial.
pub fn trial_scenario(cfg: &EvalConfig, size: f64, n_robots: usize, env: usize, trial: usize) -> Result<WorldScenario, EvalError> {
    let env_seed = mix(cfg.seed, ((size * 2.0) as u64) << 40 | (n_robots as u64) << 32 | env as u64);
    let gen = GenConfig::default();
    let mut sc = generate_scenario(env_seed, size, n_robots, n_robots, &gen)?;
    if trial > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(env_seed, trial as u64));
        place_entities(&mut sc, &mut rng, n_robots, n_robots, &gen)?;
    }
    Ok(sc)
}

/// Every (size, robot count, environment, trial) cell of the protocol. Trials whose
/// targets are unreachable on the grid are skipped and listed in the second value.
pub fn run_evaluation<'c>(
    cfg: &EvalConfig,
    camera: &Camera,
    mut make_controller: impl FnMut(u64) -> Box<dyn Controller + 'c>,
    mut on_trial: impl FnMut(&WorldScenario, &EpisodeOutcome),
) -> Result<(Vec<TrialResult>, Vec<String>), EvalError> {
    cfg.validate()?;
    let mut all = Vec::new();
    let mut excluded = Vec::new();
    for &size in &cfg.env_sizes {
        for &n in &cfg.n_robots {
            for env in 0..cfg.n_envs {
                for trial in 0..cfg.trials_per_env {
                    let sc = trial_scenario(cfg, size, n, env, trial)?;
                    let unreachable: Vec<usize> = (0..n)
                        .filter(|&i| shortest_path_length(&sc, sc.robot_starts[i].xy(), sc.targets[i].location).is_none())
                        .collect();
                    if !unreachable.is_empty() {
                        excluded.push(format!(
                            "size {size} robots {n} env {env} trial {trial}: robots {unreachable:?} cannot reach their targets"
                        ));
                        continue;
                    }
                    let mut ctl = make_controller(mix(sc.seed, trial as u64));
                    let mut out = run_trial(ctl.as_mut(), &sc, cfg, camera)?;
                    for r in &mut out.results {
                        r.env_index = env;
                        r.trial_index = trial;
                    }
                    on_trial(&sc, &out);
                    all.extend(out.results);
                }
            }
        }
    }
    Ok((all, excluded))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub env_size: f64,
    pub n_robots: usize,
    pub trials: usize,
    pub success_rate: f64,
    pub spl: f64,
    pub mean_collisions: f64,
}

/// SR and SPL per (environment size, robot count) cell.
pub fn summarize(results: &[TrialResult]) -> Vec<SummaryCell> {
    let mut groups: BTreeMap<(u64, usize), Vec<TrialResult>> = BTreeMap::new();
    for r in results {
        groups
            .entry(((r.env_size * 1000.0) as u64, r.n_robots))
            .or_default()
            .push(r.clone());
    }
    groups
        .into_values()
        .map(|g| SummaryCell {
            env_size: g[0].env_size,
            n_robots: g[0].n_robots,
            trials: g.len(),
            success_rate: success_rate(&g),
            spl: spl(&g),
            mean_collisions: g.iter().map(|r| r.collisions as f64).sum::<f64>() / g.len() as f64,
        })
        .collect()
}
