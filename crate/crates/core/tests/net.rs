use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxflow::autodiff::{Tape, Tensor};
use voxflow::net::{cond_embedding, film, forward_tape, time_features, ModelParams, NetConfig, NetInput};
use voxflow::volume::{ChannelRole, GridSpec, VoxelGrid};
use voxflow::Error;

fn toy_config() -> NetConfig {
    NetConfig {
        state_channels: 2,
        extra_channels: 0,
        layout_channels: 2,
        attr_channels: 3,
        base_width: 4,
        depth: 2,
        attention_at: vec![1, 2],
        embed_dim: 8,
        groups: 2,
    }
}

/// Replaces every parameter with small random values so that no path is dead.
fn perturbed(cfg: &NetConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for t in &mut p.tensors {
        for v in &mut t.data {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    p
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn input(cfg: &NetConfig, n: usize, d: usize, seed: u64) -> NetInput<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NetInput {
        x: rand_tensor(&mut rng, vec![n, d, d, d, cfg.state_channels + cfg.extra_channels]),
        layout: Some(rand_tensor(&mut rng, vec![n, d, d, d, cfg.layout_channels])),
        attrs: Some(rand_tensor(&mut rng, vec![n, cfg.attr_channels])),
        t: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
    }
}

fn conv(k: usize, cin: usize, cout: usize) -> usize {
    k * k * k * cin * cout + cout
}

fn lin(cin: usize, cout: usize) -> usize {
    cin * cout + cout
}

fn res(cin: usize, cout: usize, e: usize) -> usize {
    let skip = if cin != cout { conv(1, cin, cout) } else { 0 };
    2 * cin + conv(3, cin, cout) + 2 * cout + 2 * lin(e, cout) + conv(3, cout, cout) + skip
}

fn attn(c: usize) -> usize {
    2 * c + 4 * conv(1, c, c)
}

#[test]
fn parameter_count_matches_closed_form() {
    let cfg = NetConfig::new(4, 3, 4);
    let p = ModelParams::init(&cfg, 0).unwrap();
    let (e, w) = (128, [32, 64, 128, 128]);
    let mut want = 2 * lin(e, e) + lin(3, e) + lin(e, e) + lin(4, e);
    want += conv(3, 4 + 3 + 4, 32);
    for l in 0..3 {
        want += res(w[l], w[l], e) + conv(3, w[l], w[l + 1]);
    }
    want += 2 * res(128, 128, e) + attn(128);
    for l in 0..3 {
        want += conv(3, w[l + 1], w[l]) + res(2 * w[l], w[l], e);
    }
    want += 2 * 32 + conv(3, 32, 4);
    assert_eq!(p.count(), want);
}

#[test]
fn untrained_network_outputs_zero() {
    let cfg = toy_config();
    let p = ModelParams::init(&cfg, 3).unwrap();
    let out = p.forward_batch(&input(&cfg, 2, 4, 1)).unwrap();
    assert_eq!(out.shape, vec![2, 4, 4, 4, 2]);
    assert!(out.data.iter().all(|&v| v == 0.0));
}

#[test]
fn input_guards() {
    let cfg = toy_config();
    let p = ModelParams::init(&cfg, 3).unwrap();
    let mut bad = input(&cfg, 1, 4, 1);
    bad.x.data[5] = f32::NAN;
    assert!(matches!(p.forward_batch(&bad), Err(Error::Validation(_))));
    let odd = input(&cfg, 1, 6, 1);
    match p.forward_batch(&odd) {
        Err(Error::Shape(m)) => assert!(m.contains("pad")),
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn forward_is_deterministic_and_batch_independent() {
    let cfg = toy_config();
    let p = perturbed(&cfg, 4);
    let inp = input(&cfg, 2, 4, 9);
    let a = p.forward_batch(&inp).unwrap();
    assert_eq!(a, p.forward_batch(&inp).unwrap());
    assert!(a.data.iter().any(|&v| v != 0.0));

    // Swap the two batch items.
    let swap = |t: &Tensor<f32>| {
        let half = t.len() / 2;
        let mut data = t.data[half..].to_vec();
        data.extend_from_slice(&t.data[..half]);
        Tensor::new(t.shape.clone(), data).unwrap()
    };
    let swapped = NetInput {
        x: swap(&inp.x),
        layout: inp.layout.as_ref().map(swap),
        attrs: inp.attrs.as_ref().map(swap),
        t: vec![inp.t[1], inp.t[0]],
    };
    let b = p.forward_batch(&swapped).unwrap();
    let half = a.len() / 2;
    for i in 0..half {
        assert!((a.data[i] - b.data[half + i]).abs() < 1e-5);
        assert!((a.data[half + i] - b.data[i]).abs() < 1e-5);
    }

    let mut doubled = inp.clone();
    doubled.attrs.as_mut().unwrap().data.iter_mut().for_each(|v| *v *= 2.0);
    let c = p.forward_batch(&doubled).unwrap();
    assert!(a.data.iter().zip(&c.data).any(|(x, y)| (x - y).abs() > 1e-4));
}

#[test]
fn zero_film_projections_ignore_the_embedding() {
    let cfg = toy_config();
    let mut p = perturbed(&cfg, 5);
    for (n, t) in p.names.iter().zip(p.tensors.iter_mut()) {
        if n.ends_with(".fs.w") || n.ends_with(".fs.b") || n.ends_with(".fh.w") || n.ends_with(".fh.b") {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut a = input(&cfg, 1, 4, 2);
    let base = p.forward_batch(&a).unwrap();
    a.t = vec![0.77];
    assert_eq!(p.forward_batch(&a).unwrap(), base);
}

#[test]
fn time_features_at_zero() {
    let f = time_features(0.0f64, 128);
    assert_eq!(f.len(), 128);
    assert!(f[..64].iter().all(|&v| v == 0.0));
    assert!(f[64..].iter().all(|&v| v == 1.0));
}

#[test]
fn time_embedding_is_smooth() {
    let cfg = NetConfig::new(1, 3, 4);
    let p = ModelParams::init(&cfg, 0).unwrap();
    for t in [0.0f32, 0.3, 0.9] {
        let a = p.time_embed(t).unwrap();
        let b = p.time_embed(t + 1e-6).unwrap();
        let d = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(d < 1e-3, "t={t}: {d}");
    }
}

#[test]
fn film_examples() {
    let spec = GridSpec::new([2, 1, 1], 1.0, [0.0; 3]).unwrap();
    let g = VoxelGrid::filled(spec, vec![ChannelRole::Udf, ChannelRole::Red], 3.0).unwrap();
    assert_eq!(film(&g, &[0.0, 0.0], &[0.0, 0.0]).unwrap(), g);
    assert!(film(&g, &[-1.0, -1.0], &[0.0, 0.0]).unwrap().data.iter().all(|&v| v == 0.0));
    assert!(film(&g, &[1.0, 1.0], &[2.0, 2.0]).unwrap().data.iter().all(|&v| v == 8.0));
    assert!(matches!(film(&g, &[1.0], &[2.0, 2.0]), Err(Error::Shape(_))));
}

fn layout_grid(seed: u64, permute: bool) -> VoxelGrid {
    let spec = GridSpec::new([4, 4, 4], 1.0, [0.0; 3]).unwrap();
    let roles = vec![ChannelRole::Layout(0), ChannelRole::Layout(1)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut voxels: Vec<[f32; 2]> = (0..64).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
    if permute {
        voxels.reverse();
        voxels.swap(3, 40);
    }
    VoxelGrid::from_data(spec, roles, voxels.concat()).unwrap()
}

#[test]
fn conditioning_embedding_properties() {
    let cfg = toy_config();
    let p = perturbed(&cfg, 6);
    let attrs = [1.0, 0.0, 1.0];
    let zero = VoxelGrid::zeros(layout_grid(0, false).spec, layout_grid(0, false).roles).unwrap();
    let l = layout_grid(1, false);
    let lp = layout_grid(1, true);
    let e = |t: f32, g: &VoxelGrid| cond_embedding(&p, t, Some(g), &attrs).unwrap();
    let close = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-5);

    // Pooling is permutation invariant.
    assert!(close(&e(0.3, &l), &e(0.3, &lp)));
    // Zero layout gives the same offset for every scene; missing layout equals zero layout.
    assert!(close(&e(0.3, &zero), &cond_embedding(&p, 0.3, None, &attrs).unwrap()));
    // Additive decomposition: the layout term does not depend on t.
    let d1: Vec<f32> = e(0.1, &l).iter().zip(e(0.1, &zero)).map(|(a, b)| a - b).collect();
    let d2: Vec<f32> = e(0.8, &l).iter().zip(e(0.8, &zero)).map(|(a, b)| a - b).collect();
    assert!(close(&d1, &d2));
    assert_eq!(e(0.5, &l).len(), cfg.embed_dim);
}

#[test]
fn whole_network_gradients_match_finite_differences() {
    let cfg = toy_config();
    let p = perturbed(&cfg, 8);
    let inp32 = input(&cfg, 1, 4, 3);
    let inp = NetInput {
        x: inp32.x.cast::<f64>(),
        layout: inp32.layout.as_ref().map(|t| t.cast()),
        attrs: inp32.attrs.as_ref().map(|t| t.cast()),
        t: inp32.t.iter().map(|&t| t as f64).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let target: Vec<f64> = (0..4 * 4 * 4 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let params64: Vec<Tensor<f64>> = p.tensors.iter().map(|t| t.cast()).collect();

    let loss_of = |params: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<_> = params.iter().map(|t| tape.param(t.clone())).collect();
        let bound = voxflow::net::BoundParams::from_vars(p.names.clone(), vars.clone());
        let out = forward_tape(&mut tape, &bound, &cfg, &inp).unwrap();
        let shape = tape.value(out).shape.clone();
        let loss = tape
            .masked_mse(
                out,
                Tensor::new(shape.clone(), target.clone()).unwrap(),
                Tensor::full(shape, 1.0),
                128.0,
            )
            .unwrap();
        let value = tape.value(loss).data[0];
        let g = tape.backward(loss).unwrap();
        (value, vars.iter().map(|&v| g.get_or_zero(v)).collect())
    };
    let (_, grads) = loss_of(&params64);
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..params64.len() {
        // Every element of small tensors, a strided sample of large ones.
        let n = params64[i].len();
        let stride = (n / 24).max(1);
        for j in (0..n).step_by(stride) {
            let mut plus = params64.clone();
            plus[i].data[j] += h;
            let mut minus = params64.clone();
            minus[i].data[j] -= h;
            let num = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
            let ana = grads[i].data[j];
            let scale = ana.abs().max(num.abs());
            let err = if scale > 1e-7 { (ana - num).abs() / scale } else { 0.0 };
            assert!(err <= 1e-3, "{}[{j}]: analytic {ana} numeric {num}", p.names[i]);
            worst = worst.max(err);
            checked += 1;
        }
    }
    assert!(checked > 1000);
    eprintln!("checked {checked} parameter elements, worst relative error {worst:.2e}");
}
