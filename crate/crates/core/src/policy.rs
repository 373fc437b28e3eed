//! Return-conditioned causal transformer over (target, return, observation, action)
//! tokens, with a target-concatenated action head.

use navformer_autograd::{Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::PackedImage;
use crate::nn::{init_uniform, LayerNorm, Linear};
use crate::vision::{packed_tensor, DualEncoders, EMBED_DIM};
use crate::worldsim::{Action, ActionLimits};

/// Inverse-mapped targets are clamped to this fraction of the tanh range.
pub const SQUASH_CLAMP: f64 = 0.995;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("window of {timesteps} timesteps needs {tokens} tokens, limit is {limit}")]
    WindowTooLong { timesteps: usize, tokens: usize, limit: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty window")]
    EmptyWindow,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Rows in the timestep embedding table; later timesteps share the last row.
    pub timestep_table: usize,
    pub max_tokens: usize,
    pub dropout: f64,
    pub disable_target_concat: bool,
    pub limits: ActionLimits,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_model: EMBED_DIM,
            n_layers: 3,
            heads: 2,
            mlp_hidden: 512,
            timestep_table: 512,
            max_tokens: 1024,
            dropout: 0.1,
            disable_target_concat: false,
            limits: ActionLimits::default(),
        }
    }
}

impl PolicyConfig {
    /// Most timesteps a single window may hold.
    pub fn max_timesteps(&self) -> usize {
        self.max_tokens / 4
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Target,
    Rtg,
    ObsStatic,
    ObsGeneral,
    Action,
}

impl Modality {
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenTag {
    pub timestep: usize,
    pub modality: Modality,
}

/// One window of consecutive timesteps from a trajectory or a live episode.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSpec {
    /// 1-based in-trajectory index of the first timestep.
    pub first_timestep: usize,
    pub rtgs: Vec<f64>,
    /// Actions taken before the last timestep; one fewer than `rtgs`.
    pub prev_actions: Vec<Action>,
}

impl WindowSpec {
    pub fn len(&self) -> usize {
        self.rtgs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rtgs.is_empty()
    }
}

/// Per-window embeddings already laid out as rows: one target row per window and one
/// static/general row per timestep, windows concatenated in order.
#[derive(Clone, Copy, Debug)]
pub struct EncodedWindows {
    pub target: Var,
    pub obs_static: Var,
    pub obs_general: Var,
}

/// Packed token matrix `[L, 128]` with its layout.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub tags: Vec<TokenTag>,
    /// `(start, len)` row range of each window.
    pub segments: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Rows of the target token and of each general-observation token, per window.
    pub fn head_rows(&self) -> Vec<(usize, Vec<usize>)> {
        self.segments
            .iter()
            .map(|&(s, n)| {
                let ca = (s..s + n).filter(|&r| self.tags[r].modality == Modality::ObsGeneral).collect();
                (s, ca)
            })
            .collect()
    }
}

/// Modality/timestep layout of a `t`-step window: target, then `(R, s, ca)` per step
/// with an action token between steps.
pub fn token_layout(first_timestep: usize, t: usize, table: usize) -> Vec<TokenTag> {
    let cap = |ts: usize| ts.min(table - 1);
    let mut tags = vec![TokenTag {
        timestep: 0,
        modality: Modality::Target,
    }];
    for i in 0..t {
        let ts = cap(first_timestep + i);
        for m in [Modality::Rtg, Modality::ObsStatic, Modality::ObsGeneral] {
            tags.push(TokenTag { timestep: ts, modality: m });
        }
        if i + 1 < t {
            tags.push(TokenTag {
                timestep: ts,
                modality: Modality::Action,
            });
        }
    }
    tags
}

/// Bounded map from raw head outputs to an action:
/// `v = v_max·(tanh x₀ + 1)/2`, `w = w_max·tanh x₁`.
pub fn squash(raw: [f64; 2], limits: &ActionLimits) -> Action {
    Action::new(
        limits.v_max * (raw[0].tanh() + 1.0) / 2.0,
        limits.w_max * raw[1].tanh(),
    )
}

/// Inverse of [`squash`], with the tanh argument clamped to `±SQUASH_CLAMP`.
pub fn unsquash(a: Action, limits: &ActionLimits) -> [f64; 2] {
    let c = |x: f64| x.clamp(-SQUASH_CLAMP, SQUASH_CLAMP).atanh();
    [c(2.0 * a.v / limits.v_max - 1.0), c(a.w / limits.w_max)]
}

/// `(1/T) Σ ‖a_t − â_t‖²` over plain values.
pub fn dt_loss_values(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(PolicyError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(PolicyError::EmptyWindow);
    }
    let s: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2))
        .sum();
    Ok(s / pred.len() as f64)
}

/// `(1/T) Σ ‖a_t − â_t‖²` on the tape; both inputs `[T, 2]`.
pub fn dt_loss<F: Scalar>(g: &mut Graph<'_, F>, pred: Var, truth: Var) -> Result<Var> {
    let (ps, ts) = (g.shape(pred).to_vec(), g.shape(truth).to_vec());
    if ps != ts {
        return Err(PolicyError::LengthMismatch(ps[0], ts.first().copied().unwrap_or(0)));
    }
    let d = g.sub(pred, truth)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq)?;
    Ok(g.scale(s, F::from_f64(1.0 / ps[0] as f64))?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, cfg: &PolicyConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, rng, true),
            proj: Linear::new(store, &format!("{name}.proj"), d, d, rng, true),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            fc1: Linear::new(store, &format!("{name}.fc1"), d, cfg.mlp_hidden, rng, true),
            fc2: Linear::new(store, &format!("{name}.fc2"), cfg.mlp_hidden, d, rng, true),
        }
    }

    /// Pre-norm block: masked attention and a GELU MLP, each with a residual.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, segments: &[(usize, usize)], heads: usize) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let a = g.causal_attention(qkv, segments, heads)?;
        let a = self.proj.forward(g, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, h)?;
        Ok(g.add(x, h)?)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [
            self.ln1.ids(),
            self.qkv.ids(),
            self.proj.ids(),
            self.ln2.ids(),
            self.fc1.ids(),
            self.fc2.ids(),
        ]
        .concat()
    }
}

/// Dual encoders plus the transformer, all parameters in one store.
#[derive(Clone, Debug, PartialEq)]
pub struct NavFormer {
    pub cfg: PolicyConfig,
    pub encoders: DualEncoders,
    pub rtg_proj: Linear,
    pub action_proj: Linear,
    pub timestep_emb: ParamId,
    pub modality_emb: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

impl NavFormer {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: PolicyConfig, rng: &mut R) -> Self {
        let encoders = DualEncoders::new(store, rng);
        let d = cfg.d_model;
        let rtg_proj = Linear::new(store, "nav.rtg_proj", 1, d, rng, true);
        let action_proj = Linear::new(store, "nav.action_proj", 2, d, rng, true);
        let timestep_emb = store.add("nav.timestep_emb", init_uniform(rng, &[cfg.timestep_table, d], d), true);
        let modality_emb = store.add("nav.modality_emb", init_uniform(rng, &[Modality::COUNT, d], d), true);
        let blocks = (0..cfg.n_layers)
            .map(|i| Block::new(store, &format!("nav.block{i}"), &cfg, rng))
            .collect();
        let ln_f = LayerNorm::new(store, "nav.ln_f", d);
        let head_in = if cfg.disable_target_concat { d } else { 2 * d };
        let head = Linear::new(store, "nav.head", head_in, 2, rng, true);
        Self {
            cfg,
            encoders,
            rtg_proj,
            action_proj,
            timestep_emb,
            modality_emb,
            blocks,
            ln_f,
            head,
        }
    }

    /// Transformer, projection, positional and head parameters.
    pub fn nav_ids(&self) -> Vec<ParamId> {
        let mut v = [self.rtg_proj.ids(), self.action_proj.ids()].concat();
        v.extend([self.timestep_emb, self.modality_emb]);
        for b in &self.blocks {
            v.extend(b.ids());
        }
        v.extend(self.ln_f.ids());
        v.extend(self.head.ids());
        v
    }

    /// Runs both online encoders on observation frames and the general encoder on
    /// target images. With `detach`, no DT gradient reaches the encoders.
    pub fn encode_windows<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        targets: &[&PackedImage],
        observations: &[&PackedImage],
        detach: bool,
    ) -> Result<EncodedWindows> {
        let obs = g.constant(packed_tensor(observations));
        let tgt = g.constant(packed_tensor(targets));
        let mut s = self.encoders.static_encoder().forward(g, obs)?;
        let mut ca = self.encoders.general_encoder().forward(g, obs)?;
        let mut t = self.encoders.general_encoder().forward(g, tgt)?;
        if detach {
            s = g.detach(s);
            ca = g.detach(ca);
            t = g.detach(t);
        }
        Ok(EncodedWindows {
            target: t,
            obs_static: s,
            obs_general: ca,
        })
    }

    /// Builds the packed token matrix for `windows`: each token is its content
    /// projection plus timestep and modality embeddings, followed by embedding dropout.
    pub fn embed_sequence<F: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, F>,
        enc: &EncodedWindows,
        windows: &[WindowSpec],
        train: bool,
        rng: &mut R,
    ) -> Result<TokenSequence> {
        let b = windows.len();
        let m: usize = windows.iter().map(|w| w.len()).sum();
        for w in windows {
            if w.is_empty() {
                return Err(PolicyError::EmptyWindow);
            }
            if w.len() > self.cfg.max_timesteps() {
                return Err(PolicyError::WindowTooLong {
                    timesteps: w.len(),
                    tokens: 4 * w.len(),
                    limit: self.cfg.max_tokens,
                });
            }
            if w.prev_actions.len() + 1 != w.len() {
                return Err(PolicyError::LengthMismatch(w.prev_actions.len() + 1, w.len()));
            }
        }
        for (v, rows) in [(enc.target, b), (enc.obs_static, m), (enc.obs_general, m)] {
            if g.shape(v)[0] != rows {
                return Err(PolicyError::LengthMismatch(g.shape(v)[0], rows));
            }
        }

        let rtg_col: Vec<F> = windows.iter().flat_map(|w| w.rtgs.iter().map(|&r| F::from_f64(r))).collect();
        let rtg_in = g.constant(Tensor::new(&[m, 1], rtg_col)?);
        let rtg_e = self.rtg_proj.forward(g, rtg_in)?;
        let k: usize = m - b;
        let mut parts = vec![enc.target, rtg_e, enc.obs_static, enc.obs_general];
        if k > 0 {
            let act: Vec<F> = windows
                .iter()
                .flat_map(|w| w.prev_actions.iter().flat_map(|a| [F::from_f64(a.v), F::from_f64(a.w)]))
                .collect();
            let act_in = g.constant(Tensor::new(&[k, 2], act)?);
            parts.push(self.action_proj.forward(g, act_in)?);
        }
        let content = g.concat(&parts, 0)?;

        let mut order = Vec::with_capacity(4 * m);
        let mut tags = Vec::with_capacity(4 * m);
        let mut segments = Vec::with_capacity(b);
        let (mut row, mut act_row) = (0, 0);
        for (wi, w) in windows.iter().enumerate() {
            let start = tags.len();
            let layout = token_layout(w.first_timestep, w.len(), self.cfg.timestep_table);
            let mut step = 0;
            for tag in &layout {
                let src = match tag.modality {
                    Modality::Target => wi,
                    Modality::Rtg => b + row + step,
                    Modality::ObsStatic => b + m + row + step,
                    Modality::ObsGeneral => b + 2 * m + row + step,
                    Modality::Action => {
                        step += 1;
                        act_row += 1;
                        b + 3 * m + act_row - 1
                    }
                };
                order.push(src);
            }
            row += w.len();
            tags.extend(layout);
            segments.push((start, tags.len() - start));
        }
        let tok = g.gather_rows(content, &order)?;
        let ts_idx: Vec<usize> = tags.iter().map(|t| t.timestep).collect();
        let md_idx: Vec<usize> = tags.iter().map(|t| t.modality.index()).collect();
        let ts_table = g.param(self.timestep_emb);
        let md_table = g.param(self.modality_emb);
        let ts = g.gather_rows(ts_table, &ts_idx)?;
        let md = g.gather_rows(md_table, &md_idx)?;
        let x = g.add(tok, ts)?;
        let x = g.add(x, md)?;
        let x = g.dropout(x, self.cfg.dropout, train, rng)?;
        Ok(TokenSequence { tokens: x, tags, segments })
    }

    /// Hidden states, one per token, after the block stack and final norm.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, seq: &TokenSequence) -> Result<Var> {
        self.forward_tokens(g, seq.tokens, &seq.segments)
    }

    pub fn forward_tokens<F: Scalar>(&self, g: &mut Graph<'_, F>, tokens: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let mut x = tokens;
        for b in &self.blocks {
            x = b.forward(g, x, segments, self.cfg.heads)?;
        }
        Ok(self.ln_f.forward(g, x)?)
    }

    /// Raw (pre-squash) head outputs `[T, 2]`, one per general-observation token in
    /// window order, from `[h_g; h^ca]` (or `h^ca` alone without target concat).
    pub fn predict_raw<F: Scalar>(&self, g: &mut Graph<'_, F>, hidden: Var, seq: &TokenSequence) -> Result<Var> {
        let rows = seq.head_rows();
        let ca: Vec<usize> = rows.iter().flat_map(|(_, c)| c.iter().copied()).collect();
        let h_ca = g.gather_rows(hidden, &ca)?;
        let input = if self.cfg.disable_target_concat {
            h_ca
        } else {
            let tg: Vec<usize> = rows.iter().flat_map(|(t, c)| std::iter::repeat_n(*t, c.len())).collect();
            let h_g = g.gather_rows(hidden, &tg)?;
            g.concat(&[h_g, h_ca], 1)?
        };
        Ok(self.head.forward(g, input)?)
    }

    /// Embeds, runs the transformer and returns raw predictions for every timestep.
    pub fn forward_windows<F: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, F>,
        enc: &EncodedWindows,
        windows: &[WindowSpec],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let seq = self.embed_sequence(g, enc, windows, train, rng)?;
        let h = self.forward(g, &seq)?;
        self.predict_raw(g, h, &seq)
    }

    /// Action for the last timestep of a single window from cached embeddings.
    pub fn act<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        target: &[F],
        obs_static: &[Vec<F>],
        obs_general: &[Vec<F>],
        window: &WindowSpec,
    ) -> Result<Action> {
        let mut g = Graph::with_params(store);
        let d = self.cfg.d_model;
        let t = window.len();
        let target = g.constant(Tensor::new(&[1, d], target.to_vec())?);
        let s = g.constant(Tensor::new(&[t, d], obs_static.concat())?);
        let ca = g.constant(Tensor::new(&[t, d], obs_general.concat())?);
        let enc = EncodedWindows {
            target,
            obs_static: s,
            obs_general: ca,
        };
        let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
        let raw = self.forward_windows(&mut g, &enc, std::slice::from_ref(window), false, &mut no_rng)?;
        let last = g.value(raw).row(t - 1);
        Ok(squash([last[0].as_f64(), last[1].as_f64()], &self.cfg.limits))
    }
}
