//! Dual visual encoders and the BYOL machinery that trains them.

mod augment;

use navformer_autograd::{conv_out_size, Graph, ParamId, ParamStore, Result, Scalar, Tensor, Var};
use rand::Rng;

pub use augment::{augment, color_jitter, crop_resize, draw, AugmentDraw, AugmentSpec};

use crate::datasets::{PackedImage, SslPair};
use crate::nn::{init_he_uniform, Linear, Mlp};
use crate::raycam::{Image84, IMAGE_LEN, IMAGE_SIZE};

pub const EMBED_DIM: usize = 128;
/// (kernel, stride, output channels) per convolution.
pub const CONV_LAYERS: [(usize, usize, usize); 3] = [(8, 4, 32), (4, 2, 64), (3, 2, 64)];
pub const BYOL_HIDDEN: usize = 256;
/// Added under the square root when normalizing projections.
pub const NORM_EPS: f64 = 1e-12;

/// Spatial shape `(h, w, c)` after each convolution, starting from 84×84×3.
pub fn conv_shape_chain() -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut h = IMAGE_SIZE;
    for (k, s, c) in CONV_LAYERS {
        h = conv_out_size(h, k, s);
        out.push((h, h, c));
    }
    out
}

pub fn flat_dim() -> usize {
    let (h, w, c) = *conv_shape_chain().last().unwrap();
    h * w * c
}

/// Subtracted from every channel value before encoding, so inputs lie in `[-0.5, 0.5]`.
pub const INPUT_CENTER: f64 = 0.5;

/// Stacks images into a centered `[N, 84, 84, 3]` encoder input.
pub fn images_tensor<F: Scalar>(imgs: &[&Image84]) -> Tensor<F> {
    let mut data = Vec::with_capacity(imgs.len() * IMAGE_LEN);
    for img in imgs {
        data.extend(img.pixels().iter().map(|&v| F::from_f64(v as f64 - INPUT_CENTER)));
    }
    Tensor::new(&[imgs.len(), IMAGE_SIZE, IMAGE_SIZE, 3], data).expect("image batch shape")
}

/// Stacks stored byte images into a centered `[N, 84, 84, 3]` encoder input.
pub fn packed_tensor<F: Scalar>(imgs: &[&PackedImage]) -> Tensor<F> {
    let mut data = Vec::with_capacity(imgs.len() * IMAGE_LEN);
    for img in imgs {
        data.extend(img.bytes().iter().map(|&b| F::from_f64(b as f64 / 255.0 - INPUT_CENTER)));
    }
    Tensor::new(&[imgs.len(), IMAGE_SIZE, IMAGE_SIZE, 3], data).expect("image batch shape")
}

/// Three ReLU convolutions, flatten, linear projection to 128.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvEncoder {
    pub convs: Vec<(ParamId, ParamId, usize)>,
    pub fc: Linear,
}

impl ConvEncoder {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, rng: &mut R, trainable: bool) -> Self {
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, (k, s, c)) in CONV_LAYERS.into_iter().enumerate() {
            let fan_in = k * k * c_in;
            let w = store.add(format!("{name}.conv{}.w", i + 1), init_he_uniform(rng, &[k, k, c_in, c], fan_in), trainable);
            let b = store.add(format!("{name}.conv{}.b", i + 1), Tensor::zeros(&[c]), trainable);
            convs.push((w, b, s));
            c_in = c;
        }
        let fc = Linear::new(store, &format!("{name}.fc"), flat_dim(), EMBED_DIM, rng, trainable);
        Self { convs, fc }
    }

    /// `x: [N, 84, 84, 3]` → `[N, 128]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let mut h = x;
        for &(w, b, s) in &self.convs {
            let (wv, bv) = (g.param(w), g.param(b));
            h = g.conv2d(h, wv, bv, s)?;
            h = g.relu(h)?;
        }
        let flat = g.reshape(h, &[n, flat_dim()])?;
        self.fc.forward(g, flat)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.convs.iter().flat_map(|&(w, b, _)| [w, b]).collect();
        v.extend(self.fc.ids());
        v
    }

    /// Embeds images with a throwaway graph.
    pub fn encode<F: Scalar>(&self, store: &ParamStore<F>, imgs: &[&Image84]) -> Result<Vec<Vec<F>>> {
        self.encode_tensor(store, images_tensor(imgs))
    }

    pub fn encode_packed<F: Scalar>(&self, store: &ParamStore<F>, imgs: &[&PackedImage]) -> Result<Vec<Vec<F>>> {
        self.encode_tensor(store, packed_tensor(imgs))
    }

    fn encode_tensor<F: Scalar>(&self, store: &ParamStore<F>, x: Tensor<F>) -> Result<Vec<Vec<F>>> {
        let mut g = Graph::with_params(store);
        let x = g.constant(x);
        let e = self.forward(&mut g, x)?;
        Ok(g.value(e).data().chunks(EMBED_DIM).map(|c| c.to_vec()).collect())
    }
}

/// Online (encoder, projector, predictor) and momentum target (encoder, projector).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByolBranch {
    pub online: ConvEncoder,
    pub projector: Mlp,
    pub predictor: Mlp,
    pub target: ConvEncoder,
    pub target_projector: Mlp,
}

impl ByolBranch {
    /// Builds the branch; the target starts as a copy of the online network.
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, rng: &mut R) -> Self {
        let dims = [EMBED_DIM, BYOL_HIDDEN, EMBED_DIM];
        let online = ConvEncoder::new(store, &format!("{name}.encoder"), rng, true);
        let projector = Mlp::new(store, &format!("{name}.projector"), dims, rng, true);
        let predictor = Mlp::new(store, &format!("{name}.predictor"), dims, rng, true);
        let target = ConvEncoder::new(store, &format!("{name}.target_encoder"), rng, false);
        let target_projector = Mlp::new(store, &format!("{name}.target_projector"), dims, rng, false);
        let b = Self {
            online,
            projector,
            predictor,
            target,
            target_projector,
        };
        b.ema_update(store, 0.0);
        b
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.online.ids()
    }

    /// Projector and predictor parameters.
    pub fn head_ids(&self) -> Vec<ParamId> {
        [self.projector.ids(), self.predictor.ids()].concat()
    }

    pub fn target_ids(&self) -> Vec<ParamId> {
        [self.target.ids(), self.target_projector.ids()].concat()
    }

    fn ema_pairs(&self) -> Vec<(ParamId, ParamId)> {
        let online = [self.online.ids(), self.projector.ids()].concat();
        self.target_ids().into_iter().zip(online).collect()
    }

    /// `ξ ← m·ξ + (1−m)·φ` over encoder and projector.
    pub fn ema_update<F: Scalar>(&self, store: &mut ParamStore<F>, m: f64) {
        let m = F::from_f64(m);
        let one_m = F::one() - m;
        for (t, o) in self.ema_pairs() {
            let src = store.value(o).data().to_vec();
            for (x, &y) in store.value_mut(t).data_mut().iter_mut().zip(&src) {
                *x = m * *x + one_m * y;
            }
        }
    }

    /// Normalized online predictions `[N, 128]` for a batch of views.
    pub fn online_prediction<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let e = self.online.forward(g, x)?;
        let z = self.projector.forward(g, e)?;
        let q = self.predictor.forward(g, z)?;
        g.l2_normalize(q, NORM_EPS)
    }

    /// Normalized target projections, cut from the gradient tape.
    pub fn target_projection<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let e = self.target.forward(g, x)?;
        let z = self.target_projector.forward(g, e)?;
        let z = g.l2_normalize(z, NORM_EPS)?;
        Ok(g.detach(z))
    }

    /// Symmetric loss `‖q(v) − z′(v′)‖² + ‖q(v′) − z′(v)‖²`, averaged over the batch.
    /// `v`, `v2`: `[N, 84, 84, 3]`.
    pub fn pair_loss<F: Scalar>(&self, g: &mut Graph<'_, F>, v: Var, v2: Var) -> Result<Var> {
        let n = g.shape(v)[0];
        let online_in = g.concat(&[v, v2], 0)?;
        let target_in = g.concat(&[v2, v], 0)?;
        let p = self.online_prediction(g, online_in)?;
        let z = self.target_projection(g, target_in)?;
        let d = g.sub(p, z)?;
        let sq = g.mul(d, d)?;
        let s = g.sum(sq)?;
        g.scale(s, F::from_f64(1.0 / n as f64))
    }
}

/// Static (`f_s`) and general (`f_g`) branches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DualEncoders {
    pub static_branch: ByolBranch,
    pub general_branch: ByolBranch,
}

impl DualEncoders {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, rng: &mut R) -> Self {
        Self {
            static_branch: ByolBranch::new(store, "static", rng),
            general_branch: ByolBranch::new(store, "general", rng),
        }
    }

    pub fn static_encoder(&self) -> &ConvEncoder {
        &self.static_branch.online
    }

    pub fn general_encoder(&self) -> &ConvEncoder {
        &self.general_branch.online
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        [self.static_branch.encoder_ids(), self.general_branch.encoder_ids()].concat()
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        [self.static_branch.head_ids(), self.general_branch.head_ids()].concat()
    }

    pub fn target_ids(&self) -> Vec<ParamId> {
        [self.static_branch.target_ids(), self.general_branch.target_ids()].concat()
    }

    pub fn ema_update<F: Scalar>(&self, store: &mut ParamStore<F>, m: f64) {
        self.static_branch.ema_update(store, m);
        self.general_branch.ema_update(store, m);
    }

    /// Static-branch loss on paired views plus general-branch loss on views of the
    /// dynamic image, each averaged over the batch.
    pub fn byol_total_loss<F: Scalar>(&self, g: &mut Graph<'_, F>, views: &ByolViews) -> Result<Var> {
        let sv = g.constant(images_tensor(&views.static_v.iter().collect::<Vec<_>>()));
        let sv2 = g.constant(images_tensor(&views.static_v2.iter().collect::<Vec<_>>()));
        let gv = g.constant(images_tensor(&views.general_v.iter().collect::<Vec<_>>()));
        let gv2 = g.constant(images_tensor(&views.general_v2.iter().collect::<Vec<_>>()));
        let ls = self.static_branch.pair_loss(g, sv, sv2)?;
        let lg = self.general_branch.pair_loss(g, gv, gv2)?;
        g.add(ls, lg)
    }
}

fn mix(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Views for the static branch: `o^s` and `o^d`, augmented with independent seeds.
pub fn make_views_static(pair: &SslPair, spec: &AugmentSpec, seed: u64) -> (Image84, Image84) {
    (
        augment(&pair.static_image.unpack(), spec, mix(seed, 1)),
        augment(&pair.dynamic_image.unpack(), spec, mix(seed, 2)),
    )
}

/// Views for the general branch: two augmentations of `o^d`.
pub fn make_views_general(dynamic: &Image84, spec: &AugmentSpec, seed: u64) -> (Image84, Image84) {
    (augment(dynamic, spec, mix(seed, 3)), augment(dynamic, spec, mix(seed, 4)))
}

/// Augmented views for a batch of SSL pairs.
#[derive(Clone, Debug, Default)]
pub struct ByolViews {
    pub static_v: Vec<Image84>,
    pub static_v2: Vec<Image84>,
    pub general_v: Vec<Image84>,
    pub general_v2: Vec<Image84>,
}

impl ByolViews {
    pub fn build(pairs: &[&SslPair], spec: &AugmentSpec, seed: u64) -> Self {
        let mut v = Self::default();
        for (i, p) in pairs.iter().enumerate() {
            let s = mix(seed, 100 + i as u64);
            let (a, b) = make_views_static(p, spec, s);
            let (c, d) = make_views_general(&p.dynamic_image.unpack(), spec, s);
            v.static_v.push(a);
            v.static_v2.push(b);
            v.general_v.push(c);
            v.general_v2.push(d);
        }
        v
    }
}

/// Mean cosine similarity between embeddings of paired images.
pub fn mean_pair_cosine<F: Scalar>(
    enc: &ConvEncoder,
    store: &ParamStore<F>,
    a: &[&Image84],
    b: &[&Image84],
) -> Result<f64> {
    let mut total = 0.0;
    for (ca, cb) in a.chunks(32).zip(b.chunks(32)) {
        let ea = enc.encode(store, ca)?;
        let eb = enc.encode(store, cb)?;
        for (x, y) in ea.iter().zip(&eb) {
            total += cosine(x, y);
        }
    }
    Ok(total / a.len().max(1) as f64)
}

pub fn cosine<F: Scalar>(x: &[F], y: &[F]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
    let nx: f64 = x.iter().map(|a| a.as_f64().powi(2)).sum::<f64>().sqrt();
    let ny: f64 = y.iter().map(|a| a.as_f64().powi(2)).sum::<f64>().sqrt();
    dot / (nx * ny).max(1e-300)
}
