//! Cross-task training: alternating exploration / collision-avoidance batches, the
//! joint DT + BYOL objective, two optimizer groups, EMA targets, logging and
//! checkpoints.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use navformer_autograd::{AdamConfig, AdamState, Checkpoint, Graph, ParamId, ParamStore, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{config_hash, DatasetKind, PackedImage, SslPair, Trajectory};
use crate::policy::{dt_loss, unsquash, NavFormer, PolicyConfig, PolicyError, WindowSpec};
use crate::vision::{AugmentSpec, ByolViews};

/// Parameter element type used for training and inference.
pub type Real = f32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("non-finite value at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Train on the DT loss only.
    pub disable_ssl: bool,
    pub exclude_exploration: bool,
    pub exclude_collision_avoidance: bool,
    /// Action head reads only the observation hidden state.
    pub disable_target_concat: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_e: usize,
    pub batch_ca: usize,
    pub ssl_batch: usize,
    /// Timesteps per sampled sub-window (also the evaluation context).
    pub window: usize,
    pub byol_lr: f64,
    pub byol_weight_decay: f64,
    pub nav_lr: f64,
    pub nav_weight_decay: f64,
    pub ema_momentum: f64,
    /// Global-norm clip applied to each optimizer group separately.
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub stop_dt_grad_to_encoders: bool,
    pub ablation: Ablation,
    pub augment: AugmentSpec,
    pub policy: PolicyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2_000,
            batch_e: 25,
            batch_ca: 150,
            ssl_batch: 64,
            window: 8,
            byol_lr: 4e-4,
            byol_weight_decay: 4e-4,
            nav_lr: 2e-4,
            nav_weight_decay: 1e-4,
            ema_momentum: 0.99,
            grad_clip: 1.0,
            checkpoint_every: 500,
            seed: 0,
            stop_dt_grad_to_encoders: false,
            ablation: Ablation::default(),
            augment: AugmentSpec::default(),
            policy: PolicyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_e == 0 || self.batch_ca == 0 || self.ssl_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.window == 0 || self.window > self.policy.max_timesteps() {
            return bad("window must be in 1..=max_tokens/4");
        }
        if self.ablation.exclude_exploration && self.ablation.exclude_collision_avoidance {
            return bad("at least one trajectory dataset must be enabled");
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad("ema_momentum must lie in [0, 1]");
        }
        if !(self.grad_clip > 0.0 && self.grad_clip.is_finite()) {
            return bad("grad_clip must be positive");
        }
        let rates = [self.byol_lr, self.byol_weight_decay, self.nav_lr, self.nav_weight_decay];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("learning rates and weight decays must be non-negative");
        }
        Ok(())
    }

    /// Model configuration with the ablation flag applied.
    pub fn effective_policy(&self) -> PolicyConfig {
        PolicyConfig {
            disable_target_concat: self.policy.disable_target_concat || self.ablation.disable_target_concat,
            ..self.policy.clone()
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }
}

/// Trajectory source of one iteration.
pub fn schedule_source(iteration: usize, ablation: &Ablation) -> DatasetKind {
    if ablation.exclude_collision_avoidance {
        DatasetKind::Exploration
    } else if ablation.exclude_exploration {
        DatasetKind::CollisionAvoidance
    } else if iteration % 2 == 1 {
        DatasetKind::Exploration
    } else {
        DatasetKind::CollisionAvoidance
    }
}

/// Training data held in memory.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub exploration: Vec<Trajectory>,
    pub collision: Vec<Trajectory>,
    pub ssl: Vec<SslPair>,
}

impl TrainData {
    pub fn check(&self, cfg: &TrainConfig) -> Result<(), TrainError> {
        if !cfg.ablation.exclude_exploration && self.exploration.is_empty() {
            return Err(TrainError::Config("exploration dataset is empty".into()));
        }
        if !cfg.ablation.exclude_collision_avoidance && self.collision.is_empty() {
            return Err(TrainError::Config("collision-avoidance dataset is empty".into()));
        }
        if !cfg.ablation.disable_ssl && self.ssl.is_empty() {
            return Err(TrainError::Config("SSL dataset is empty".into()));
        }
        Ok(())
    }

    fn pool(&self, kind: DatasetKind) -> &[Trajectory] {
        match kind {
            DatasetKind::Exploration => &self.exploration,
            _ => &self.collision,
        }
    }
}

/// Sampled trajectory windows for one iteration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub source: DatasetKind,
    /// `(trajectory index, window start)` pairs.
    pub windows: Vec<(usize, usize)>,
}

/// Fresh random stream for `iteration`, independent of everything before it.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(iteration as u64);
    r
}

/// Draws trajectories (with replacement) and window starts for `iteration`.
pub fn sample_cross_task_batch<R: Rng + ?Sized>(
    iteration: usize,
    cfg: &TrainConfig,
    data: &TrainData,
    rng: &mut R,
) -> Result<BatchPlan, TrainError> {
    let source = schedule_source(iteration, &cfg.ablation);
    let pool = data.pool(source);
    if pool.is_empty() {
        return Err(TrainError::Config(format!("dataset {source:?} is empty")));
    }
    let n = match source {
        DatasetKind::Exploration => cfg.batch_e,
        _ => cfg.batch_ca,
    };
    let windows = (0..n)
        .map(|_| {
            let i = rng.gen_range(0..pool.len());
            let len = pool[i].len();
            let start = rng.gen_range(0..=len.saturating_sub(cfg.window));
            (i, start)
        })
        .collect();
    Ok(BatchPlan { source, windows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub source: DatasetKind,
    pub batch_size: usize,
    pub dt_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub byol_loss: Option<f64>,
    pub total_loss: f64,
    pub head_input_dim: usize,
}

/// Model, parameters and both optimizer groups.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: NavFormer,
    pub store: ParamStore<Real>,
    pub nav_opt: AdamState<Real>,
    pub enc_opt: AdamState<Real>,
    /// Last completed iteration.
    pub iteration: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = NavFormer::new(&mut store, cfg.effective_policy(), &mut rng);
        let nav_opt = AdamState::new(AdamConfig::new(cfg.nav_lr, cfg.nav_weight_decay), &store, model.nav_ids());
        let enc_opt = AdamState::new(
            AdamConfig::new(cfg.byol_lr, cfg.byol_weight_decay),
            &store,
            Self::enc_group(&model, &cfg),
        );
        Ok(Self {
            cfg,
            model,
            store,
            nav_opt,
            enc_opt,
            iteration: 0,
        })
    }

    /// Encoders always; projectors and predictors only when BYOL is on.
    fn enc_group(model: &NavFormer, cfg: &TrainConfig) -> Vec<ParamId> {
        let mut ids = model.encoders.encoder_ids();
        if !cfg.ablation.disable_ssl {
            ids.extend(model.encoders.head_ids());
        }
        ids
    }

    /// One optimizer step for `iteration` (1-based).
    pub fn train_step(&mut self, iteration: usize, data: &TrainData) -> Result<LossRecord, TrainError> {
        let mut rng = iteration_rng(self.cfg.seed, iteration);
        let plan = sample_cross_task_batch(iteration, &self.cfg, data, &mut rng)?;
        let pool = data.pool(plan.source);
        let ssl_pairs: Vec<&SslPair> = if self.cfg.ablation.disable_ssl {
            Vec::new()
        } else {
            (0..self.cfg.ssl_batch)
                .map(|_| &data.ssl[rng.gen_range(0..data.ssl.len())])
                .collect()
        };
        let view_seed: u64 = rng.gen();
        self.step_on(iteration, &plan, pool, &ssl_pairs, view_seed, &mut rng)
    }

    fn step_on(
        &mut self,
        iteration: usize,
        plan: &BatchPlan,
        pool: &[Trajectory],
        ssl_pairs: &[&SslPair],
        view_seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossRecord, TrainError> {
        let cfg = &self.cfg;
        let limits = self.model.cfg.limits;
        let mut targets: Vec<&PackedImage> = Vec::new();
        let mut obs: Vec<&PackedImage> = Vec::new();
        let mut windows = Vec::new();
        let mut labels: Vec<Real> = Vec::new();
        for &(ti, start) in &plan.windows {
            let traj = &pool[ti];
            let end = (start + cfg.window).min(traj.len());
            let steps = &traj.steps[start..end];
            targets.push(&traj.target_image);
            obs.extend(steps.iter().map(|s| &s.observation));
            windows.push(WindowSpec {
                first_timestep: start + 1,
                rtgs: steps.iter().map(|s| s.rtg).collect(),
                prev_actions: steps[..steps.len() - 1].iter().map(|s| s.action).collect(),
            });
            for s in steps {
                labels.extend(unsquash(s.action, &limits).map(|x| x as Real));
            }
        }
        let m = obs.len();

        let (dt_val, byol_val, total_val, grads) = {
            let mut g = Graph::with_params(&self.store);
            let enc = self
                .model
                .encode_windows(&mut g, &targets, &obs, cfg.stop_dt_grad_to_encoders)?;
            let pred = self.model.forward_windows(&mut g, &enc, &windows, true, rng)?;
            let truth = g.constant(Tensor::new(&[m, 2], labels)?);
            let l_dt = dt_loss(&mut g, pred, truth)?;
            let (total, l_byol) = if ssl_pairs.is_empty() {
                (l_dt, None)
            } else {
                let views = ByolViews::build(ssl_pairs, &cfg.augment, view_seed);
                let lb = self.model.encoders.byol_total_loss(&mut g, &views)?;
                (g.add(l_dt, lb)?, Some(lb))
            };
            g.backward(total)?;
            let dt_val = g.value(l_dt).item() as f64;
            let byol_val = l_byol.map(|v| g.value(v).item() as f64);
            let total_val = g.value(total).item() as f64;
            (dt_val, byol_val, total_val, g.into_gradients())
        };
        if !total_val.is_finite() {
            return Err(TrainError::NonFinite {
                iteration,
                detail: "loss".into(),
            });
        }
        self.store.zero_grad();
        self.store.accumulate(&grads);
        let nav_ids = self.nav_opt.params().to_vec();
        let enc_ids = self.enc_opt.params().to_vec();
        self.store.clip_grad_norm(&nav_ids, cfg.grad_clip);
        self.store.clip_grad_norm(&enc_ids, cfg.grad_clip);
        self.nav_opt.adamw_step(&mut self.store)?;
        self.enc_opt.adam_step(&mut self.store)?;
        if !cfg.ablation.disable_ssl {
            self.model.encoders.ema_update(&mut self.store, cfg.ema_momentum);
        }
        self.iteration = iteration;
        Ok(LossRecord {
            iteration,
            source: plan.source,
            batch_size: plan.windows.len(),
            dt_loss: dt_val,
            byol_loss: byol_val,
            total_loss: total_val,
            head_input_dim: if self.model.cfg.disable_target_concat {
                self.model.cfg.d_model
            } else {
                2 * self.model.cfg.d_model
            },
        })
    }

    /// DT loss over fixed windows with dropout off and no parameter change.
    pub fn evaluate_dt(&self, trajectories: &[Trajectory]) -> Result<f64, TrainError> {
        let limits = self.model.cfg.limits;
        let mut total = 0.0;
        let mut count = 0usize;
        for traj in trajectories {
            for chunk_start in (0..traj.len()).step_by(self.cfg.window) {
                let end = (chunk_start + self.cfg.window).min(traj.len());
                let steps = &traj.steps[chunk_start..end];
                let mut g = Graph::with_params(&self.store);
                let obs: Vec<&PackedImage> = steps.iter().map(|s| &s.observation).collect();
                let enc = self.model.encode_windows(&mut g, &[&traj.target_image], &obs, true)?;
                let w = WindowSpec {
                    first_timestep: chunk_start + 1,
                    rtgs: steps.iter().map(|s| s.rtg).collect(),
                    prev_actions: steps[..steps.len() - 1].iter().map(|s| s.action).collect(),
                };
                let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
                let pred = self.model.forward_windows(&mut g, &enc, &[w], false, &mut no_rng)?;
                let p = g.value(pred).data();
                for (k, s) in steps.iter().enumerate() {
                    let t = unsquash(s.action, &limits);
                    total += (p[2 * k] as f64 - t[0]).powi(2) + (p[2 * k + 1] as f64 - t[1]).powi(2);
                    count += 1;
                }
            }
        }
        Ok(total / count.max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<Real> {
        let mut ck = Checkpoint::new();
        ck.metadata.insert("iteration".into(), self.iteration.to_string());
        ck.metadata.insert("config_hash".into(), self.cfg.hash());
        ck.metadata.insert("train_config".into(), self.cfg.to_toml());
        ck.add_params(&self.store);
        self.nav_opt.save_into("opt.nav", &self.store, &mut ck);
        self.enc_opt.save_into("opt.enc", &self.store, &mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<Real>) -> Result<Self, TrainError> {
        let text = ck
            .metadata
            .get("train_config")
            .ok_or_else(|| TrainError::Checkpoint("missing train_config".into()))?;
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if ck.metadata.get("config_hash") != Some(&cfg.hash()) {
            return Err(TrainError::Checkpoint("config hash does not match stored config".into()));
        }
        let mut t = Self::new(cfg)?;
        ck.load_params(&mut t.store)?;
        t.nav_opt.load_from("opt.nav", &t.store, ck)?;
        t.enc_opt.load_from("opt.enc", &t.store, ck)?;
        t.iteration = ck
            .metadata
            .get("iteration")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TrainError::Checkpoint("missing iteration".into()))?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        self.to_checkpoint().save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(iteration: usize) -> String {
    format!("iter_{iteration:06}.ckpt")
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>, TrainError> {
    let f = File::open(path).map_err(io_err(path))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(io_err(path))?;
            serde_json::from_str(&l).map_err(|e| TrainError::Checkpoint(format!("loss log: {e}")))
        })
        .collect()
}

/// Runs (or resumes) training, writing a JSONL loss log, periodic checkpoints and a
/// final checkpoint into `out_dir`. `progress` sees every record.
pub fn run_training(
    trainer: &mut Trainer,
    data: &TrainData,
    out_dir: &Path,
    mut progress: impl FnMut(&LossRecord),
) -> Result<PathBuf, TrainError> {
    data.check(&trainer.cfg)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let log_path = out_dir.join(LOSS_LOG);
    let mut kept = Vec::new();
    if trainer.iteration > 0 && log_path.exists() {
        kept = read_loss_log(&log_path)?;
        kept.retain(|r| r.iteration <= trainer.iteration);
    }
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let write = |log: &mut BufWriter<File>, r: &LossRecord| -> Result<(), TrainError> {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(log, "{line}").map_err(io_err(&log_path))
    };
    for r in &kept {
        write(&mut log, r)?;
    }
    for it in trainer.iteration + 1..=trainer.cfg.iterations {
        let rec = trainer.train_step(it, data)?;
        write(&mut log, &rec)?;
        progress(&rec);
        if trainer.cfg.checkpoint_every > 0 && it % trainer.cfg.checkpoint_every == 0 {
            log.flush().map_err(io_err(&log_path))?;
            trainer.save(&out_dir.join(checkpoint_name(it)))?;
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    trainer.save(&final_path)?;
    Ok(final_path)
}
