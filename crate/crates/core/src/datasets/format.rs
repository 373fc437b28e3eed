//! Binary dataset file (`*.bin`) plus a TOML manifest beside it (`*.toml`).
//!
//! Layout: magic `NAVDATA\0`, version u32, kind u8, record count u32, then per record
//! `len: u32 | payload | crc32(payload): u32`. Scalars are little-endian; images are
//! raw 84×84×3 bytes, row-major.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{PackedImage, SslPair, Step, TaskTag, Trajectory, TrajectoryMeta};
use crate::raycam::IMAGE_LEN;
use crate::worldsim::{Action, Pose2D};

const MAGIC: &[u8; 8] = b"NAVDATA\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: u64 = 17;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad header: {0}")]
    Header(String),
    #[error("record {index}: {reason}")]
    Corrupt { index: usize, reason: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("records are not all of kind {0:?}")]
    MixedKinds(DatasetKind),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "D_e")]
    Exploration,
    #[serde(rename = "D_ca")]
    CollisionAvoidance,
    #[serde(rename = "D_ssl")]
    Ssl,
}

impl DatasetKind {
    fn code(self) -> u8 {
        match self {
            DatasetKind::Exploration => 0,
            DatasetKind::CollisionAvoidance => 1,
            DatasetKind::Ssl => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [DatasetKind::Exploration, DatasetKind::CollisionAvoidance, DatasetKind::Ssl]
            .into_iter()
            .find(|k| k.code() == c)
    }

    /// Record count of the full-scale collection this kind mirrors.
    pub fn reference_full_scale(self) -> u64 {
        match self {
            DatasetKind::Exploration => 3_496,
            DatasetKind::CollisionAvoidance => 7_467,
            DatasetKind::Ssl => 98_000,
        }
    }

    pub fn task(self) -> Option<TaskTag> {
        match self {
            DatasetKind::Exploration => Some(TaskTag::Exploration),
            DatasetKind::CollisionAvoidance => Some(TaskTag::CollisionAvoidance),
            DatasetKind::Ssl => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_kind: DatasetKind,
    pub format_version: u32,
    pub data_file: String,
    pub record_count: u64,
    /// Sum of trajectory lengths (pair count for SSL data).
    pub total_timesteps: u64,
    pub config_hash: String,
    pub reference_full_scale: u64,
    pub offsets: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Records {
    Trajectories(Vec<Trajectory>),
    SslPairs(Vec<SslPair>),
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::Trajectories(v) => v.len(),
            Records::SslPairs(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_timesteps(&self) -> u64 {
        match self {
            Records::Trajectories(v) => v.iter().map(|t| t.len() as u64).sum(),
            Records::SslPairs(v) => v.len() as u64,
        }
    }

    pub fn into_trajectories(self) -> Option<Vec<Trajectory>> {
        match self {
            Records::Trajectories(v) => Some(v),
            Records::SslPairs(_) => None,
        }
    }

    pub fn into_pairs(self) -> Option<Vec<SslPair>> {
        match self {
            Records::SslPairs(v) => Some(v),
            Records::Trajectories(_) => None,
        }
    }
}

/// Hex SHA-256 of a serializable configuration's TOML text.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let text = toml::to_string(cfg).expect("configuration serializes");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn manifest_path(data: &Path) -> PathBuf {
    data.with_extension("toml")
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn image(&mut self, img: &PackedImage) {
        self.0.extend_from_slice(img.bytes());
    }
    fn pose(&mut self, p: &Pose2D) {
        self.f64(p.x);
        self.f64(p.y);
        self.f64(p.theta);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!("unexpected end of data at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn image(&mut self) -> Result<PackedImage, String> {
        Ok(PackedImage(self.take(IMAGE_LEN)?.to_vec().into_boxed_slice()))
    }
    // raw fields, bypassing the wrapping constructor so values round-trip exactly
    fn pose(&mut self) -> Result<Pose2D, String> {
        Ok(Pose2D {
            x: self.f64()?,
            y: self.f64()?,
            theta: self.f64()?,
        })
    }
}

fn encode_trajectory(t: &Trajectory, w: &mut Writer) {
    w.u8(match t.task {
        TaskTag::Exploration => 0,
        TaskTag::CollisionAvoidance => 1,
    });
    w.u8(t.success as u8);
    w.u64(t.meta.seed);
    w.f64(t.meta.env_size);
    w.u32(t.meta.n_obstacles);
    w.image(&t.target_image);
    w.u32(t.steps.len() as u32);
    for s in &t.steps {
        w.f64(s.rtg);
        w.f64(s.reward);
        w.f64(s.action.v);
        w.f64(s.action.w);
        w.pose(&s.pose);
        w.image(&s.observation);
    }
}

fn decode_trajectory(r: &mut Reader) -> Result<Trajectory, String> {
    let task = match r.u8()? {
        0 => TaskTag::Exploration,
        1 => TaskTag::CollisionAvoidance,
        x => return Err(format!("unknown task tag {x}")),
    };
    let success = match r.u8()? {
        0 => false,
        1 => true,
        x => return Err(format!("bad success flag {x}")),
    };
    let meta = TrajectoryMeta {
        seed: r.u64()?,
        env_size: r.f64()?,
        n_obstacles: r.u32()?,
    };
    let target_image = r.image()?;
    let n = r.u32()? as usize;
    if n > super::MAX_EPISODE_STEPS {
        return Err(format!("trajectory length {n} exceeds cap"));
    }
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let rtg = r.f64()?;
        let reward = r.f64()?;
        let action = Action::new(r.f64()?, r.f64()?);
        let pose = r.pose()?;
        let observation = r.image()?;
        steps.push(Step {
            rtg,
            observation,
            action,
            reward,
            pose,
        });
    }
    Ok(Trajectory {
        task,
        target_image,
        steps,
        success,
        meta,
    })
}

fn encode_pair(p: &SslPair, w: &mut Writer) {
    w.u64(p.scenario_seed);
    w.pose(&p.pose);
    w.image(&p.static_image);
    w.image(&p.dynamic_image);
}

fn decode_pair(r: &mut Reader) -> Result<SslPair, String> {
    Ok(SslPair {
        scenario_seed: r.u64()?,
        pose: r.pose()?,
        static_image: r.image()?,
        dynamic_image: r.image()?,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes records to `path` and the manifest next to it; returns the manifest.
pub fn write_dataset(
    path: impl AsRef<Path>,
    kind: DatasetKind,
    records: &Records,
    config_hash: &str,
) -> Result<DatasetManifest, DatasetError> {
    let path = path.as_ref();
    match (kind, records) {
        (DatasetKind::Ssl, Records::SslPairs(_)) => {}
        (k, Records::Trajectories(v)) if k != DatasetKind::Ssl => {
            if v.iter().any(|t| Some(t.task) != k.task()) {
                return Err(DatasetError::MixedKinds(k));
            }
        }
        _ => return Err(DatasetError::MixedKinds(kind)),
    }
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u8(kind.code());
    w.u32(records.len() as u32);
    let mut offsets = Vec::with_capacity(records.len());
    let mut payload = Writer(Vec::new());
    for i in 0..records.len() {
        payload.0.clear();
        match records {
            Records::Trajectories(v) => encode_trajectory(&v[i], &mut payload),
            Records::SslPairs(v) => encode_pair(&v[i], &mut payload),
        }
        offsets.push(w.0.len() as u64);
        w.u32(payload.0.len() as u32);
        w.0.extend_from_slice(&payload.0);
        w.u32(crc32fast::hash(&payload.0));
    }
    std::fs::write(path, &w.0).map_err(io_err(path))?;
    let manifest = DatasetManifest {
        dataset_kind: kind,
        format_version: FORMAT_VERSION,
        data_file: path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        record_count: records.len() as u64,
        total_timesteps: records.total_timesteps(),
        config_hash: config_hash.to_string(),
        reference_full_scale: kind.reference_full_scale(),
        offsets,
    };
    let mpath = manifest_path(path);
    let text = toml::to_string(&manifest).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    std::fs::write(&mpath, text).map_err(io_err(&mpath))?;
    Ok(manifest)
}

/// Reads a dataset and its manifest, checking framing, checksums and counts.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<(DatasetManifest, Records), DatasetError> {
    let path = path.as_ref();
    let mpath = manifest_path(path);
    let mtext = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: DatasetManifest = toml::from_str(&mtext).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    let buf = std::fs::read(path).map_err(io_err(path))?;
    if buf.len() < HEADER_LEN as usize || &buf[..8] != MAGIC {
        return Err(DatasetError::Header("missing magic".into()));
    }
    let mut r = Reader { buf: &buf, pos: 8 };
    let version = r.u32().map_err(DatasetError::Header)?;
    if version != FORMAT_VERSION {
        return Err(DatasetError::Header(format!("unsupported version {version}")));
    }
    let kind = DatasetKind::from_code(r.u8().map_err(DatasetError::Header)?)
        .ok_or_else(|| DatasetError::Header("unknown dataset kind".into()))?;
    let count = r.u32().map_err(DatasetError::Header)? as usize;
    if kind != manifest.dataset_kind || count as u64 != manifest.record_count || manifest.offsets.len() != count {
        return Err(DatasetError::Manifest(format!(
            "manifest ({:?}, {} records) disagrees with data file ({kind:?}, {count} records)",
            manifest.dataset_kind, manifest.record_count
        )));
    }
    let mut trajs = Vec::new();
    let mut pairs = Vec::new();
    for index in 0..count {
        let corrupt = |reason: String| DatasetError::Corrupt { index, reason };
        if r.pos as u64 != manifest.offsets[index] {
            return Err(corrupt(format!("offset {} != manifest offset {}", r.pos, manifest.offsets[index])));
        }
        let len = r.u32().map_err(corrupt)? as usize;
        let payload = r.take(len).map_err(corrupt)?;
        let crc = r.u32().map_err(corrupt)?;
        if crc32fast::hash(payload) != crc {
            return Err(corrupt("checksum mismatch".into()));
        }
        let mut pr = Reader { buf: payload, pos: 0 };
        match kind {
            DatasetKind::Ssl => pairs.push(decode_pair(&mut pr).map_err(corrupt)?),
            _ => {
                let t = decode_trajectory(&mut pr).map_err(corrupt)?;
                if Some(t.task) != kind.task() {
                    return Err(corrupt("task tag does not match dataset kind".into()));
                }
                trajs.push(t);
            }
        }
        if pr.pos != payload.len() {
            return Err(corrupt("trailing bytes in record".into()));
        }
    }
    if r.pos != buf.len() {
        return Err(DatasetError::Corrupt {
            index: count,
            reason: "trailing bytes after last record".into(),
        });
    }
    let records = if kind == DatasetKind::Ssl {
        Records::SslPairs(pairs)
    } else {
        Records::Trajectories(trajs)
    };
    if records.total_timesteps() != manifest.total_timesteps {
        return Err(DatasetError::Manifest(format!(
            "total_timesteps {} but records hold {}",
            manifest.total_timesteps,
            records.total_timesteps()
        )));
    }
    Ok((manifest, records))
}

/// Re-checks every stored invariant; returns one line per problem found.
pub fn verify_dataset(
    path: impl AsRef<Path>,
    collect: Option<&super::CollectConfig>,
    expected_hash: Option<&str>,
) -> Result<Vec<String>, DatasetError> {
    let (manifest, records) = read_dataset(path)?;
    let mut problems = Vec::new();
    if let Some(h) = expected_hash {
        if h != manifest.config_hash {
            problems.push(format!("config hash {} != expected {h}", manifest.config_hash));
        }
    }
    let limits = crate::worldsim::ActionLimits::default();
    match &records {
        Records::Trajectories(v) => {
            for (i, t) in v.iter().enumerate() {
                if let Err(e) = t.validate(&limits) {
                    problems.push(format!("trajectory {i}: {e}"));
                }
            }
        }
        Records::SslPairs(v) => {
            let mut cache: Option<(u64, crate::worldsim::WorldScenario)> = None;
            for (i, p) in v.iter().enumerate() {
                if !p.static_image.is_valid() || !p.dynamic_image.is_valid() {
                    problems.push(format!("pair {i}: bad image size"));
                    continue;
                }
                let Some(cfg) = collect else { continue };
                if cache.as_ref().map(|c| c.0) != Some(p.scenario_seed) {
                    match super::ssl_static_scenario(p.scenario_seed, cfg) {
                        Ok(sc) => cache = Some((p.scenario_seed, sc)),
                        Err(e) => {
                            problems.push(format!("pair {i}: {e}"));
                            continue;
                        }
                    }
                }
                let sc = &cache.as_ref().unwrap().1;
                let img = crate::raycam::render_view(sc, &p.pose, &[], &cfg.camera);
                if PackedImage::pack(&img) != p.static_image {
                    problems.push(format!("pair {i}: static view does not re-render from stored pose"));
                }
            }
        }
    }
    Ok(problems)
}
