use navformer::datasets::PackedImage;
use navformer::nn::{LayerNorm, Linear};
use navformer::policy::{squash, EncodedWindows, NavFormer, PolicyConfig, WindowSpec};
use navformer::raycam::{Image84, IMAGE_SIZE};
use navformer::worldsim::Action;
use navformer_autograd::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64, cfg: PolicyConfig) -> (ParamStore<f64>, NavFormer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = NavFormer::new(&mut store, cfg, &mut rng);
    (store, m)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

// plain-array reference layers

fn ref_linear(store: &ParamStore<f64>, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.value(l.w);
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    let b = store.value(l.b).data();
    (0..n_out)
        .map(|o| b[o] + (0..n_in).map(|i| x[i] * w.data()[i * n_out + o]).sum::<f64>())
        .collect()
}

fn ref_layer_norm(store: &ParamStore<f64>, l: &LayerNorm, x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let (g, b) = (store.value(l.gamma).data(), store.value(l.beta).data());
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + LayerNorm::EPS).sqrt() * g[i] + b[i])
        .collect()
}

fn ref_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// A lone token attends only to itself, so attention reduces to its value vector.
#[test]
fn single_token_forward_matches_reference() {
    let (store, m) = model(1, PolicyConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = m.cfg.d_model;
    let x0 = rand_vec(&mut rng, d);

    let mut x = x0.clone();
    for b in &m.blocks {
        let h = ref_layer_norm(&store, &b.ln1, &x);
        let qkv = ref_linear(&store, &b.qkv, &h);
        let a = ref_linear(&store, &b.proj, &qkv[2 * d..3 * d]);
        x = x.iter().zip(&a).map(|(p, q)| p + q).collect();
        let h = ref_layer_norm(&store, &b.ln2, &x);
        let h: Vec<f64> = ref_linear(&store, &b.fc1, &h).into_iter().map(ref_gelu).collect();
        let h = ref_linear(&store, &b.fc2, &h);
        x = x.iter().zip(&h).map(|(p, q)| p + q).collect();
    }
    let expect = ref_layer_norm(&store, &m.ln_f, &x);

    let mut g = Graph::with_params(&store);
    let t = g.constant(Tensor::new(&[1, d], x0).unwrap());
    let out = m.forward_tokens(&mut g, t, &[(0, 1)]).unwrap();
    for (a, b) in g.value(out).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn packed_segments_do_not_interact() {
    let (store, m) = model(3, PolicyConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = m.cfg.d_model;
    let (n1, n2) = (8, 12);
    let a = rand_vec(&mut rng, n1 * d);
    let b = rand_vec(&mut rng, n2 * d);
    let run = |data: Vec<f64>, segs: &[(usize, usize)]| {
        let mut g = Graph::with_params(&store);
        let n = data.len() / d;
        let t = g.constant(Tensor::new(&[n, d], data).unwrap());
        let h = m.forward_tokens(&mut g, t, segs).unwrap();
        g.value(h).data().to_vec()
    };
    let packed = run([a.clone(), b.clone()].concat(), &[(0, n1), (n1, n2)]);
    let alone_a = run(a, &[(0, n1)]);
    let alone_b = run(b, &[(0, n2)]);
    for (x, y) in packed.iter().zip(alone_a.iter().chain(&alone_b)) {
        assert!((x - y).abs() < 1e-12);
    }
}

fn encoded(g: &mut Graph<'_, f64>, rng: &mut ChaCha8Rng, d: usize, lens: &[usize]) -> (EncodedWindows, Vec<Vec<f64>>) {
    let m: usize = lens.iter().sum();
    let tgt = rand_vec(rng, lens.len() * d);
    let s = rand_vec(rng, m * d);
    let ca = rand_vec(rng, m * d);
    let enc = EncodedWindows {
        target: g.constant(Tensor::new(&[lens.len(), d], tgt.clone()).unwrap()),
        obs_static: g.constant(Tensor::new(&[m, d], s.clone()).unwrap()),
        obs_general: g.constant(Tensor::new(&[m, d], ca.clone()).unwrap()),
    };
    (enc, vec![tgt, s, ca])
}

fn window(rng: &mut ChaCha8Rng, first: usize, t: usize) -> WindowSpec {
    WindowSpec {
        first_timestep: first,
        rtgs: (0..t).map(|_| rng.gen_range(0.0..1.0)).collect(),
        prev_actions: (0..t - 1).map(|_| Action::new(rng.gen_range(0.0..1.0), rng.gen_range(-1.0..1.0))).collect(),
    }
}

#[test]
fn batched_windows_predict_like_single_windows() {
    for concat_off in [false, true] {
        let cfg = PolicyConfig { disable_target_concat: concat_off, ..PolicyConfig::default() };
        let (store, m) = model(5, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = m.cfg.d_model;
        let lens = [3, 5];
        let windows = [window(&mut rng, 1, 3), window(&mut rng, 40, 5)];
        let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);

        let mut g = Graph::with_params(&store);
        let (enc, parts) = encoded(&mut g, &mut rng, d, &lens);
        let both = m.forward_windows(&mut g, &enc, &windows, false, &mut no_rng).unwrap();
        let both = g.value(both).data().to_vec();
        assert_eq!(both.len(), 2 * 8);

        let mut singles = Vec::new();
        let mut off = 0;
        for (k, &t) in lens.iter().enumerate() {
            let mut g = Graph::with_params(&store);
            let enc = EncodedWindows {
                target: g.constant(Tensor::new(&[1, d], parts[0][k * d..(k + 1) * d].to_vec()).unwrap()),
                obs_static: g.constant(Tensor::new(&[t, d], parts[1][off * d..(off + t) * d].to_vec()).unwrap()),
                obs_general: g.constant(Tensor::new(&[t, d], parts[2][off * d..(off + t) * d].to_vec()).unwrap()),
            };
            let p = m.forward_windows(&mut g, &enc, std::slice::from_ref(&windows[k]), false, &mut no_rng).unwrap();
            singles.extend_from_slice(g.value(p).data());
            off += t;
        }
        for (a, b) in both.iter().zip(&singles) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn act_is_deterministic_and_bounded() {
    let (store, m) = model(7, PolicyConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = m.cfg.d_model;
    let t = 4;
    let target = rand_vec(&mut rng, d);
    let s: Vec<Vec<f64>> = (0..t).map(|_| rand_vec(&mut rng, d)).collect();
    let ca: Vec<Vec<f64>> = (0..t).map(|_| rand_vec(&mut rng, d)).collect();
    let w = window(&mut rng, 1, t);
    let a = m.act(&store, &target, &s, &ca, &w).unwrap();
    let b = m.act(&store, &target, &s, &ca, &w).unwrap();
    assert_eq!(a, b);
    assert!(m.cfg.limits.contains(a));

    // act() agrees with the last row of the batched forward pass
    let mut g = Graph::with_params(&store);
    let enc = EncodedWindows {
        target: g.constant(Tensor::new(&[1, d], target).unwrap()),
        obs_static: g.constant(Tensor::new(&[t, d], s.concat()).unwrap()),
        obs_general: g.constant(Tensor::new(&[t, d], ca.concat()).unwrap()),
    };
    let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
    let raw = m.forward_windows(&mut g, &enc, &[w], false, &mut no_rng).unwrap();
    let last = g.value(raw).row(t - 1);
    assert_eq!(squash([last[0], last[1]], &m.cfg.limits), a);
}

#[test]
fn overlong_window_is_rejected() {
    let cfg = PolicyConfig { max_tokens: 16, ..PolicyConfig::default() };
    let (store, m) = model(9, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = Graph::with_params(&store);
    let (enc, _) = encoded(&mut g, &mut rng, m.cfg.d_model, &[5]);
    let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
    let w = window(&mut rng, 1, 5);
    assert!(m.embed_sequence(&mut g, &enc, &[w], false, &mut no_rng).is_err());
}

#[test]
fn detached_encoding_blocks_dt_gradient() {
    let (store, m) = model(11, PolicyConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let img = Image84::from_pixels((0..IMAGE_SIZE * IMAGE_SIZE * 3).map(|_| rng.gen::<f32>()).collect()).unwrap();
    let packed = PackedImage::pack(&img);
    for detach in [true, false] {
        let mut g = Graph::with_params(&store);
        let enc = m.encode_windows(&mut g, &[&packed], &[&packed, &packed], detach).unwrap();
        let w = window(&mut rng, 1, 2);
        let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
        let p = m.forward_windows(&mut g, &enc, &[w], false, &mut no_rng).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        let grads = g.into_gradients();
        let enc_grad = m
            .encoders
            .encoder_ids()
            .iter()
            .any(|&id| grads.get(id).is_some_and(|t| t.data().iter().any(|&x| x != 0.0)));
        assert_eq!(enc_grad, !detach);
        let head_grad = grads.get(m.head.w).is_some_and(|t| t.data().iter().any(|&x| x != 0.0));
        assert!(head_grad);
    }
}
