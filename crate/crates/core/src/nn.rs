//! Parameterized layers shared by the encoders and the transformer.

use navformer_autograd::{Graph, ParamId, ParamStore, Result, Scalar, Tensor, Var};
use rand::Rng;

/// Uniform `±1/sqrt(fan_in)` initialization.
pub fn init_uniform<F: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Uniform `±sqrt(6/fan_in)` initialization, variance-preserving under ReLU.
pub fn init_he_uniform<F: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
        trainable: bool,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.w"), init_uniform(rng, &[d_in, d_out], d_in), trainable),
            b: store.add(format!("{name}.b"), init_uniform(rng, &[d_out], d_in), trainable),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], F::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d]), true),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, Self::EPS)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

/// Two-layer perceptron with a ReLU hidden layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dims: [usize; 3],
        rng: &mut R,
        trainable: bool,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims[0], dims[1], rng, trainable),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims[1], dims[2], rng, trainable),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h)?;
        self.fc2.forward(g, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.fc1.ids(), self.fc2.ids()].concat()
    }
}
