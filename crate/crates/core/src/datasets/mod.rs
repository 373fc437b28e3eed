//! Trajectory and SSL-pair data, the expert collection pipelines, and their on-disk
//! format.

mod collect;
mod format;

use serde::{Deserialize, Serialize};

use crate::raycam::{Image84, IMAGE_LEN};
use crate::worldsim::{Action, Pose2D};

pub use collect::{
    collect_collision_avoidance_trajectory, collect_records, obstacle_count_for_seed, CollectionRun, collect_exploration_in, collect_exploration_trajectory,
    collect_ssl_pairs, collision_episode, ssl_pairs_in, ssl_static_scenario, target_visible, CollectConfig,
    CollectError, CollisionCollectConfig, ExplorationCollectConfig, ExplorationExpert, SslCollectConfig,
};
pub use format::{
    config_hash, read_dataset, verify_dataset, write_dataset, DatasetError, DatasetKind, DatasetManifest, Records,
    FORMAT_VERSION,
};

/// Longest stored episode.
pub const MAX_EPISODE_STEPS: usize = 500;

/// An image stored as bytes; channel value = byte / 255.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedImage(pub Box<[u8]>);

impl PackedImage {
    pub fn pack(img: &Image84) -> Self {
        Self(img.to_u8().into_boxed_slice())
    }

    pub fn unpack(&self) -> Image84 {
        Image84::from_u8(&self.0).expect("packed image has fixed length")
    }

    pub fn bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn is_valid(&self) -> bool {
        self.0.len() == IMAGE_LEN
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Exploration,
    CollisionAvoidance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub rtg: f64,
    pub observation: PackedImage,
    pub action: Action,
    pub reward: f64,
    /// Pose at which the observation was taken.
    pub pose: Pose2D,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub env_size: f64,
    pub n_obstacles: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub task: TaskTag,
    pub target_image: PackedImage,
    pub steps: Vec<Step>,
    pub success: bool,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    /// Checks the stored returns-to-go, reward sparsity, action bounds, image sizes
    /// and length cap. Returns a description of the first violation.
    pub fn validate(&self, limits: &crate::worldsim::ActionLimits) -> Result<(), String> {
        if self.steps.is_empty() || self.steps.len() > MAX_EPISODE_STEPS {
            return Err(format!("length {} outside 1..={MAX_EPISODE_STEPS}", self.steps.len()));
        }
        let rtg = compute_returns_to_go(&self.rewards());
        for (t, (s, r)) in self.steps.iter().zip(&rtg).enumerate() {
            if s.rtg != *r {
                return Err(format!("step {t}: stored return-to-go {} != suffix sum {r}", s.rtg));
            }
            if !limits.contains(s.action) {
                return Err(format!("step {t}: action {:?} out of bounds", s.action));
            }
            if !s.observation.is_valid() {
                return Err(format!("step {t}: bad observation size"));
            }
        }
        let total = rtg[0];
        let expected = if self.success { 1.0 } else { 0.0 };
        if total != expected {
            return Err(format!("total return {total} inconsistent with success={}", self.success));
        }
        if !self.target_image.is_valid() {
            return Err("bad target image size".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslPair {
    pub static_image: PackedImage,
    pub dynamic_image: PackedImage,
    pub pose: Pose2D,
    pub scenario_seed: u64,
}

/// Suffix sums: `out[t] = Σ_{k≥t} rewards[k]`.
pub fn compute_returns_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    out
}
