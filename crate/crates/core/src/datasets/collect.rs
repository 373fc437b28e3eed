use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{compute_returns_to_go, PackedImage, SslPair, Step, TaskTag, Trajectory, TrajectoryMeta, MAX_EPISODE_STEPS};
use crate::expert::{
    astar, dwa, nh_orca, select_nearest_frontier_excluding, Cell, DwaParams, OccupancyGrid, OrcaAgent, OrcaParams,
};
use crate::geometry::Vec2;
use crate::raycam::{render_target_image, render_view, Camera};
use crate::worldsim::{
    generate_scenario, reward, step_in, wrap_angle, Action, DiscAgent, GenConfig, Pose2D, TargetObject, WorldError,
    WorldScenario, DT, ROBOT_RADIUS,
};

#[derive(Debug, Error)]
pub enum CollectError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("seed {0}: target unreachable from start")]
    Unreachable(u64),
    #[error("invalid collection request: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationCollectConfig {
    pub size_min: f64,
    pub size_max: f64,
    pub sensor_range: f64,
    pub sensor_rays: usize,
    pub proximity_radius: f64,
    /// A frontier this close to the robot that is still unresolved is abandoned.
    pub frontier_reached: f64,
}

impl Default for ExplorationCollectConfig {
    fn default() -> Self {
        Self {
            size_min: 5.0,
            size_max: 17.5,
            sensor_range: 5.0,
            sensor_rays: 720,
            proximity_radius: 0.75,
            frontier_reached: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionCollectConfig {
    pub arena_size: f64,
    pub n_obstacles_min: usize,
    pub n_obstacles_max: usize,
    /// An obstacle robot picks a fresh goal once this close to its current one.
    pub goal_tolerance: f64,
}

impl Default for CollisionCollectConfig {
    fn default() -> Self {
        Self {
            arena_size: 12.5,
            n_obstacles_min: 2,
            n_obstacles_max: 8,
            goal_tolerance: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslCollectConfig {
    pub size_min: f64,
    pub size_max: f64,
    pub n_obstacles_min: usize,
    pub n_obstacles_max: usize,
}

impl Default for SslCollectConfig {
    fn default() -> Self {
        Self {
            size_min: 5.0,
            size_max: 12.5,
            n_obstacles_min: 4,
            n_obstacles_max: 25,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub max_steps: Option<usize>,
    pub exploration: ExplorationCollectConfig,
    pub collision: CollisionCollectConfig,
    pub ssl: SslCollectConfig,
    pub dwa: DwaParams,
    pub orca: OrcaParams,
    pub camera: Camera,
}

impl CollectConfig {
    pub fn step_cap(&self) -> usize {
        self.max_steps.unwrap_or(MAX_EPISODE_STEPS).min(MAX_EPISODE_STEPS)
    }
}

/// True when the target lies inside the camera's field of view and range with an
/// unobstructed line of sight.
pub fn target_visible(scenario: &WorldScenario, pose: &Pose2D, target: &TargetObject, camera: &Camera) -> bool {
    let d = target.location - pose.xy();
    let dist = d.norm();
    if dist > camera.max_range {
        return false;
    }
    if dist < 1e-9 {
        return true;
    }
    if wrap_angle(d.angle() - pose.theta).abs() > camera.fov / 2.0 {
        return false;
    }
    let dir = d * (1.0 / dist);
    !scenario
        .walls
        .iter()
        .any(|w| w.ray_hit(pose.xy(), dir).is_some_and(|(t, _)| t < dist))
}

/// Frontier-exploring expert with a latched switch to direct target pursuit once
/// the target has been seen.
pub struct ExplorationExpert<'a> {
    scenario: &'a WorldScenario,
    target: TargetObject,
    truth: OccupancyGrid,
    known: OccupancyGrid,
    pursuing: bool,
    /// Frontier cells already visited without being resolved.
    spent: Vec<Cell>,
    cfg: &'a CollectConfig,
}

impl<'a> ExplorationExpert<'a> {
    pub fn new(scenario: &'a WorldScenario, target: TargetObject, cfg: &'a CollectConfig) -> Self {
        Self {
            scenario,
            target,
            truth: OccupancyGrid::rasterize(scenario),
            known: OccupancyGrid::unknown_for(scenario),
            pursuing: false,
            spent: Vec::new(),
            cfg,
        }
    }

    pub fn pursuing(&self) -> bool {
        self.pursuing
    }

    pub fn known_grid(&self) -> &OccupancyGrid {
        &self.known
    }

    pub fn act(&mut self, pose: &Pose2D, velocity: Action) -> Action {
        let ec = &self.cfg.exploration;
        self.known.update_exploration(&self.truth, pose, ec.sensor_range, ec.sensor_rays);
        self.known.reveal_disc(&self.truth, pose.xy(), ec.proximity_radius);
        if !self.pursuing && target_visible(self.scenario, pose, &self.target, &self.cfg.camera) {
            self.pursuing = true;
        }
        let plan = self.known.inflate(ROBOT_RADIUS);
        let start = self.known.clamp_cell(pose.xy());
        let mut waypoints = None;
        if !self.pursuing {
            loop {
                match select_nearest_frontier_excluding(&self.known, &plan, pose.xy(), &self.spent) {
                    Some((cell, at)) if at.distance(pose.xy()) < ec.frontier_reached => self.spent.push(cell),
                    Some((cell, _)) => {
                        waypoints = astar(&plan, start, cell, false).map(|p| p.waypoints);
                        break;
                    }
                    None => {
                        self.pursuing = true;
                        break;
                    }
                }
            }
        }
        if self.pursuing {
            let goal = self.known.clamp_cell(self.target.location);
            waypoints = astar(&plan, start, goal, true).map(|p| {
                let mut w = p.waypoints;
                w.push(self.target.location);
                w
            });
        }
        let waypoints = waypoints.unwrap_or_else(|| vec![self.target.location]);
        dwa(pose, velocity, &waypoints, self.scenario, &[], &self.cfg.dwa)
    }
}

fn scenario_reachable(sc: &WorldScenario, start: Vec2, goal: Vec2) -> bool {
    let grid = OccupancyGrid::rasterize(sc).inflate(ROBOT_RADIUS);
    astar(&grid, grid.clamp_cell(start), grid.clamp_cell(goal), false).is_some()
}

fn finish(
    task: TaskTag,
    target: &TargetObject,
    poses: Vec<Pose2D>,
    obs: Vec<PackedImage>,
    actions: Vec<Action>,
    rewards: Vec<f64>,
    meta: TrajectoryMeta,
) -> Trajectory {
    let rtg = compute_returns_to_go(&rewards);
    let success = rtg.first().copied() == Some(1.0);
    let steps = poses
        .into_iter()
        .zip(obs)
        .zip(actions)
        .zip(rewards)
        .zip(rtg)
        .map(|((((pose, observation), action), reward), rtg)| Step {
            rtg,
            observation,
            action,
            reward,
            pose,
        })
        .collect();
    Trajectory {
        task,
        target_image: PackedImage::pack(&render_target_image(target)),
        steps,
        success,
        meta,
    }
}

/// One single-robot exploration episode in a random maze, driven by the frontier
/// expert.
pub fn collect_exploration_trajectory(seed: u64, cfg: &CollectConfig) -> Result<Trajectory, CollectError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE0E0_0001);
    let ec = &cfg.exploration;
    let size = if ec.size_max > ec.size_min {
        (rng.gen_range(ec.size_min..=ec.size_max) * 2.0).round() / 2.0
    } else {
        ec.size_min
    };
    let scenario = generate_scenario(seed, size, 1, 1, &GenConfig::default())?;
    collect_exploration_in(&scenario, cfg)
}

/// Exploration episode in a given scenario (robot 0 seeks target 0).
pub fn collect_exploration_in(scenario: &WorldScenario, cfg: &CollectConfig) -> Result<Trajectory, CollectError> {
    let target = scenario.targets[0];
    let mut pose = scenario.robot_starts[0];
    if !scenario_reachable(scenario, pose.xy(), target.location) {
        return Err(CollectError::Unreachable(scenario.seed));
    }
    let mut expert = ExplorationExpert::new(scenario, target, cfg);
    let (mut poses, mut obs, mut actions, mut rewards) = (vec![], vec![], vec![], vec![]);
    let mut velocity = Action::default();
    let meta = TrajectoryMeta {
        seed: scenario.seed,
        env_size: scenario.size,
        n_obstacles: 0,
    };
    for t in 0..cfg.step_cap() {
        obs.push(PackedImage::pack(&render_view(scenario, &pose, &[], &cfg.camera)));
        poses.push(pose);
        if t == 0 && reward(None, &pose, &target) > 0.0 {
            actions.push(Action::default());
            rewards.push(1.0);
            break;
        }
        let a = expert.act(&pose, velocity);
        let next = step_in(scenario, &pose, a, DT, ROBOT_RADIUS, &[]).pose;
        let r = reward(Some(&pose), &next, &target);
        actions.push(a);
        rewards.push(r);
        velocity = a;
        pose = next;
        if r > 0.0 {
            break;
        }
    }
    Ok(finish(TaskTag::Exploration, &target, poses, obs, actions, rewards, meta))
}

fn random_goal(rng: &mut ChaCha8Rng, size: f64) -> Vec2 {
    let m = 1.0;
    Vec2::new(rng.gen_range(m..size - m), rng.gen_range(m..size - m))
}

/// One collision-avoidance episode: a focal robot and `n_obstacles` other robots,
/// all driven by NH-ORCA, in an open arena. The focal robot's goal is its target.
pub fn collect_collision_avoidance_trajectory(
    seed: u64,
    n_obstacles: usize,
    cfg: &CollectConfig,
) -> Result<Trajectory, CollectError> {
    let cc = &cfg.collision;
    if !(cc.n_obstacles_min..=cc.n_obstacles_max).contains(&n_obstacles) {
        return Err(CollectError::Invalid(format!(
            "n_obstacles {n_obstacles} outside [{}, {}]",
            cc.n_obstacles_min, cc.n_obstacles_max
        )));
    }
    let gen = GenConfig {
        interior_walls: false,
        n_dynamic: n_obstacles,
        min_target_distance: 4.0,
        ..GenConfig::default()
    };
    let scenario = generate_scenario(seed, cc.arena_size, 1, 1, &gen)?;
    Ok(collision_episode(&scenario, seed, cfg).0)
}

/// Runs the collision-avoidance episode and also returns every agent's pose per tick
/// (focal robot first).
pub fn collision_episode(scenario: &WorldScenario, seed: u64, cfg: &CollectConfig) -> (Trajectory, Vec<Vec<Pose2D>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCA00_0002);
    let target = scenario.targets[0];
    let size = scenario.size;
    let mut agents: Vec<OrcaAgent> = std::iter::once(scenario.robot_starts[0])
        .chain(scenario.dynamic_obstacles.iter().map(|d| d.pose))
        .enumerate()
        .map(|(i, pose)| OrcaAgent {
            pose,
            velocity: Vec2::ZERO,
            radius: ROBOT_RADIUS,
            goal: if i == 0 { target.location } else { random_goal(&mut rng, size) },
        })
        .collect();
    let meta = TrajectoryMeta {
        seed: scenario.seed,
        env_size: size,
        n_obstacles: scenario.dynamic_obstacles.len() as u32,
    };
    let (mut poses, mut obs, mut actions, mut rewards) = (vec![], vec![], vec![], vec![]);
    let mut history = vec![agents.iter().map(|a| a.pose).collect::<Vec<_>>()];
    for t in 0..cfg.step_cap() {
        let focal = agents[0].pose;
        let others: Vec<DiscAgent> = agents[1..]
            .iter()
            .map(|a| DiscAgent {
                pose: a.pose,
                radius: a.radius,
            })
            .collect();
        obs.push(PackedImage::pack(&render_view(scenario, &focal, &others, &cfg.camera)));
        poses.push(focal);
        if t == 0 && reward(None, &focal, &target) > 0.0 {
            actions.push(Action::default());
            rewards.push(1.0);
            break;
        }
        let cmds: Vec<Action> = (0..agents.len()).map(|i| nh_orca(&agents, i, DT, &cfg.orca)).collect();
        // sequential clamped moves keep the configuration overlap-free
        for i in 0..agents.len() {
            let others: Vec<DiscAgent> = agents
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, a)| DiscAgent {
                    pose: a.pose,
                    radius: a.radius,
                })
                .collect();
            let old = agents[i].pose;
            let new = step_in(scenario, &old, cmds[i], DT, ROBOT_RADIUS, &others).pose;
            agents[i].velocity = (new.xy() - old.xy()) * (1.0 / DT);
            agents[i].pose = new;
            if i > 0 && new.xy().distance(agents[i].goal) < cfg.collision.goal_tolerance {
                agents[i].goal = random_goal(&mut rng, size);
            }
        }
        history.push(agents.iter().map(|a| a.pose).collect());
        let r = reward(Some(&focal), &agents[0].pose, &target);
        actions.push(cmds[0]);
        rewards.push(r);
        if r > 0.0 {
            break;
        }
    }
    let traj = finish(TaskTag::CollisionAvoidance, &target, poses, obs, actions, rewards, meta);
    (traj, history)
}

/// Two-phase SSL capture: each obstacle robot's view with the other robots present,
/// then the same view with every dynamic obstacle removed.
pub fn collect_ssl_pairs(seed: u64, n_obstacles: usize, cfg: &CollectConfig) -> Result<Vec<SslPair>, CollectError> {
    let sc = &cfg.ssl;
    if !(sc.n_obstacles_min..=sc.n_obstacles_max).contains(&n_obstacles) {
        return Err(CollectError::Invalid(format!(
            "n_obstacles {n_obstacles} outside [{}, {}]",
            sc.n_obstacles_min, sc.n_obstacles_max
        )));
    }
    let gen = GenConfig {
        n_dynamic: n_obstacles,
        ..GenConfig::default()
    };
    let scenario = generate_scenario(seed, ssl_world_size(seed, cfg), 1, 1, &gen)?;
    Ok(ssl_pairs_in(&scenario, cfg))
}

fn ssl_world_size(seed: u64, cfg: &CollectConfig) -> f64 {
    let sc = &cfg.ssl;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x551_0003);
    if sc.size_max > sc.size_min {
        (rng.gen_range(sc.size_min..=sc.size_max) * 2.0).round() / 2.0
    } else {
        sc.size_min
    }
}

/// The SSL scenario for `seed` without its dynamic obstacles. Walls and targets are
/// placed before obstacles, so static views re-render identically from it.
pub fn ssl_static_scenario(seed: u64, cfg: &CollectConfig) -> Result<WorldScenario, CollectError> {
    Ok(generate_scenario(seed, ssl_world_size(seed, cfg), 1, 1, &GenConfig::default())?)
}

pub fn ssl_pairs_in(scenario: &WorldScenario, cfg: &CollectConfig) -> Vec<SslPair> {
    let obstacles = &scenario.dynamic_obstacles;
    let dynamic: Vec<PackedImage> = (0..obstacles.len())
        .map(|i| {
            let others: Vec<DiscAgent> = obstacles
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, d)| *d)
                .collect();
            PackedImage::pack(&render_view(scenario, &obstacles[i].pose, &others, &cfg.camera))
        })
        .collect();
    obstacles
        .iter()
        .zip(dynamic)
        .map(|(d, dynamic_image)| SslPair {
            static_image: PackedImage::pack(&render_view(scenario, &d.pose, &[], &cfg.camera)),
            dynamic_image,
            pose: d.pose,
            scenario_seed: scenario.seed,
        })
        .collect()
}

fn seed_mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Obstacle count used for `seed` within `[lo, hi]`.
pub fn obstacle_count_for_seed(seed: u64, lo: usize, hi: usize) -> usize {
    lo + (seed_mix(seed, 0x0B57) % (hi - lo + 1) as u64) as usize
}

/// Outcome of a multi-seed collection run.
#[derive(Clone, Debug)]
pub struct CollectionRun {
    pub records: super::Records,
    /// Seeds that produced records, in order.
    pub seeds: Vec<u64>,
    /// Seeds that failed, with the reason.
    pub failures: Vec<(u64, String)>,
}

/// Collects `count` records of `kind` from consecutive seeds starting at
/// `seed_start`. Failing seeds are reported and skipped; SSL collection stops once
/// `count` pairs exist and truncates the last scenario's pairs.
pub fn collect_records(
    kind: super::DatasetKind,
    seed_start: u64,
    count: usize,
    cfg: &CollectConfig,
    mut progress: impl FnMut(usize, usize),
) -> CollectionRun {
    use super::{DatasetKind, Records};
    let max_attempts = count * 4 + 16;
    let mut seeds = Vec::new();
    let mut failures = Vec::new();
    let mut trajs = Vec::new();
    let mut pairs = Vec::new();
    let mut seed = seed_start;
    let have = |t: &Vec<Trajectory>, p: &Vec<SslPair>| t.len() + p.len();
    while have(&trajs, &pairs) < count && seeds.len() + failures.len() < max_attempts {
        let result = match kind {
            DatasetKind::Exploration => collect_exploration_trajectory(seed, cfg).map(|t| trajs.push(t)),
            DatasetKind::CollisionAvoidance => {
                let c = &cfg.collision;
                let n = obstacle_count_for_seed(seed, c.n_obstacles_min, c.n_obstacles_max);
                collect_collision_avoidance_trajectory(seed, n, cfg).map(|t| trajs.push(t))
            }
            DatasetKind::Ssl => {
                let c = &cfg.ssl;
                let n = obstacle_count_for_seed(seed, c.n_obstacles_min, c.n_obstacles_max);
                collect_ssl_pairs(seed, n, cfg).map(|p| pairs.extend(p))
            }
        };
        match result {
            Ok(()) => seeds.push(seed),
            Err(e) => failures.push((seed, e.to_string())),
        }
        progress(have(&trajs, &pairs).min(count), count);
        seed += 1;
    }
    pairs.truncate(count);
    let records = match kind {
        DatasetKind::Ssl => Records::SslPairs(pairs),
        _ => Records::Trajectories(trajs),
    };
    CollectionRun {
        records,
        seeds,
        failures,
    }
}
