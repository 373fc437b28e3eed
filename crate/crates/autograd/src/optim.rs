//! Adam with coupled L2 decay and AdamW with decoupled decay.

use crate::checkpoint::Checkpoint;
use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed group of parameters.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    step: u64,
    params: Vec<ParamId>,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(config: AdamConfig, store: &ParamStore<F>, params: Vec<ParamId>) -> Self {
        let m = params.iter().map(|&p| vec![F::zero(); store.value(p).numel()]).collect();
        let v = params.iter().map(|&p| vec![F::zero(); store.value(p).numel()]).collect();
        Self {
            config,
            step: 0,
            params,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn first_moment(&self, i: usize) -> &[F] {
        &self.m[i]
    }

    /// Adam update; weight decay enters the gradient as an L2 term.
    pub fn adam_step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        self.update(store, false)
    }

    /// AdamW update; weight decay shrinks parameters directly, outside the moments.
    pub fn adamw_step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        self.update(store, true)
    }

    fn update(&mut self, store: &mut ParamStore<F>, decoupled: bool) -> Result<()> {
        for &p in &self.params {
            if store.grad(p).is_none() {
                return Err(TensorError::MissingGradient(store.name(p).to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = F::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = F::from_f64(1.0 - c.beta2.powi(t));
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (lr, wd, eps) = (F::from_f64(c.lr), F::from_f64(c.weight_decay), F::from_f64(c.eps));
        let one = F::one();
        for (i, &p) in self.params.iter().enumerate() {
            let param = store.get_mut(p);
            let grad = param.grad.as_ref().expect("checked above").data();
            let value = param.value.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..value.len() {
                let mut g = grad[j];
                if decoupled {
                    value[j] *= one - lr * wd;
                } else {
                    g += wd * value[j];
                }
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                value[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Writes moments and the step counter under `prefix` into a checkpoint.
    pub fn save_into(&self, prefix: &str, store: &ParamStore<F>, ckpt: &mut Checkpoint<F>) {
        ckpt.metadata.insert(format!("{prefix}.step"), self.step.to_string());
        for (i, &p) in self.params.iter().enumerate() {
            let shape = store.value(p).shape();
            let name = store.name(p);
            ckpt.push(format!("{prefix}.m.{name}"), Tensor::new(shape, self.m[i].clone()).unwrap());
            ckpt.push(format!("{prefix}.v.{name}"), Tensor::new(shape, self.v[i].clone()).unwrap());
        }
    }

    /// Restores state written by [`AdamState::save_into`].
    pub fn load_from(&mut self, prefix: &str, store: &ParamStore<F>, ckpt: &Checkpoint<F>) -> Result<()> {
        let step = ckpt
            .metadata
            .get(&format!("{prefix}.step"))
            .ok_or_else(|| TensorError::Checkpoint(format!("missing {prefix}.step")))?;
        self.step = step
            .parse()
            .map_err(|_| TensorError::Checkpoint(format!("bad {prefix}.step `{step}`")))?;
        for (i, &p) in self.params.iter().enumerate() {
            let name = store.name(p);
            for (slot, kind) in [(&mut self.m[i], "m"), (&mut self.v[i], "v")] {
                let key = format!("{prefix}.{kind}.{name}");
                let t = ckpt
                    .get(&key)
                    .ok_or_else(|| TensorError::Checkpoint(format!("missing {key}")))?;
                if t.numel() != slot.len() {
                    return Err(TensorError::Checkpoint(format!("size mismatch for {key}")));
                }
                slot.copy_from_slice(t.data());
            }
        }
        Ok(())
    }
}
