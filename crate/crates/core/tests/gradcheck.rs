use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxflow::autodiff::{Tape, Tensor, Var};
use voxflow::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Appends a random quadratic read-out so every output element reaches the loss.
fn readout(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape.clone();
    let target = rand_tensor(&mut rng, &shape);
    let mut mask = rand_tensor(&mut rng, &shape);
    mask.data.iter_mut().for_each(|m| *m = m.abs() + 0.1);
    let n = target.len() as f64;
    tape.masked_mse(y, target, mask, n).unwrap()
}

fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let eval = |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let loss = readout(&mut tape, out, 99);
        (tape, vars, loss)
    };
    let (tape, vars, loss) = eval(&inputs);
    let grads = tape.backward(loss).unwrap();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get_or_zero(*v);
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data[j] += h;
            let mut minus = inputs.clone();
            minus[i].data[j] -= h;
            let (tp, _, lp) = eval(&plus);
            let (tm, _, lm) = eval(&minus);
            let num = (tp.value(lp).data[0] - tm.value(lm).data[0]) / (2.0 * h);
            let ana = g.data[j];
            let scale = ana.abs().max(num.abs());
            let err = if scale > 1e-6 { (ana - num).abs() / scale } else { (ana - num).abs() };
            worst = worst.max(err);
            assert!(err <= 1e-3, "input {i} element {j}: analytic {ana} vs numeric {num}");
        }
    }
    assert!(worst <= 1e-3);
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn conv3x3_stride1() {
    let mut r = rng();
    let inputs = vec![
        rand_tensor(&mut r, &[2, 3, 2, 4, 2]),
        rand_tensor(&mut r, &[3, 3, 3, 2, 3]),
        rand_tensor(&mut r, &[3]),
    ];
    check(inputs, |t, v| t.conv3d(v[0], v[1], v[2], 1).unwrap());
}

#[test]
fn conv3x3_stride2() {
    let mut r = rng();
    let inputs = vec![
        rand_tensor(&mut r, &[1, 4, 2, 4, 2]),
        rand_tensor(&mut r, &[3, 3, 3, 2, 2]),
        rand_tensor(&mut r, &[2]),
    ];
    check(inputs, |t, v| t.conv3d(v[0], v[1], v[2], 2).unwrap());
}

#[test]
fn conv1x1() {
    let mut r = rng();
    let inputs = vec![
        rand_tensor(&mut r, &[2, 2, 3, 2, 3]),
        rand_tensor(&mut r, &[1, 1, 1, 3, 2]),
        rand_tensor(&mut r, &[2]),
    ];
    check(inputs, |t, v| t.conv3d(v[0], v[1], v[2], 1).unwrap());
}

#[test]
fn upsample() {
    let mut r = rng();
    check(vec![rand_tensor(&mut r, &[2, 2, 1, 2, 3])], |t, v| t.upsample2(v[0]).unwrap());
}

#[test]
fn group_norm() {
    let mut r = rng();
    let inputs = vec![
        rand_tensor(&mut r, &[2, 2, 2, 2, 4]),
        rand_tensor(&mut r, &[4]),
        rand_tensor(&mut r, &[4]),
    ];
    check(inputs, |t, v| t.group_norm(v[0], v[1], v[2], 2).unwrap());
}

#[test]
fn silu_film() {
    let mut r = rng();
    let inputs = vec![
        rand_tensor(&mut r, &[2, 2, 2, 1, 3]),
        rand_tensor(&mut r, &[2, 3]),
        rand_tensor(&mut r, &[2, 3]),
    ];
    check(inputs, |t, v| {
        let s = t.silu(v[0]);
        t.film(s, v[1], v[2]).unwrap()
    });
}

#[test]
fn attention() {
    let mut r = rng();
    let inputs = vec![
        rand_tensor(&mut r, &[2, 2, 2, 1, 3]),
        rand_tensor(&mut r, &[2, 2, 2, 1, 3]),
        rand_tensor(&mut r, &[2, 2, 2, 1, 3]),
    ];
    check(inputs, |t, v| t.attention(v[0], v[1], v[2]).unwrap());
}

#[test]
fn self_attention_shared_input() {
    let mut r = rng();
    check(vec![rand_tensor(&mut r, &[1, 2, 2, 1, 2])], |t, v| t.attention(v[0], v[0], v[0]).unwrap());
}

#[test]
fn linear_pool_broadcast() {
    let mut r = rng();
    let inputs = vec![
        rand_tensor(&mut r, &[2, 2, 1, 2, 3]),
        rand_tensor(&mut r, &[3, 2]),
        rand_tensor(&mut r, &[2]),
    ];
    check(inputs, |t, v| {
        let p = t.mean_pool(v[0]);
        let l = t.linear(p, v[1], v[2]).unwrap();
        t.broadcast(l, [2, 1, 1]).unwrap()
    });
}

#[test]
fn add_mul_scale_concat() {
    let mut r = rng();
    let inputs = vec![rand_tensor(&mut r, &[2, 1, 2, 1, 2]), rand_tensor(&mut r, &[2, 1, 2, 1, 2])];
    check(inputs, |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let m = t.mul(s, v[0]).unwrap();
        let sq = t.mul(v[1], v[1]).unwrap();
        let d = t.add(m, m).unwrap();
        let c = t.scale(d, -0.5);
        t.concat(c, sq).unwrap()
    });
}

#[test]
fn mean_square_gradient() {
    let x = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let mut tape = Tape::<f64>::new();
    let v = tape.param(x.clone());
    let loss = tape
        .masked_mse(v, Tensor::zeros(vec![4]), Tensor::full(vec![4], 1.0), 4.0)
        .unwrap();
    let g = tape.backward(loss).unwrap();
    let want: Vec<f64> = x.data.iter().map(|x| 2.0 * x / 4.0).collect();
    assert_eq!(g.get(v).unwrap().data, want);
}

#[test]
fn unused_parameter_has_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(Tensor::full(vec![3], 2.0));
    let unused = tape.param(Tensor::full(vec![2], 5.0));
    let loss = tape
        .masked_mse(a, Tensor::zeros(vec![3]), Tensor::full(vec![3], 1.0), 1.0)
        .unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.get_or_zero(unused).data, vec![0.0; 2]);
}

#[test]
fn opaque_op_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(Tensor::full(vec![2], 1.0));
    let o = tape.opaque("median_filter", Tensor::full(vec![2], 1.0), &[a]);
    let loss = tape
        .masked_mse(o, Tensor::zeros(vec![2]), Tensor::full(vec![2], 1.0), 1.0)
        .unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::UnsupportedOp(_))));
}

#[test]
fn conv_matches_direct_sum() {
    let mut r = rng();
    let (n, d, cin, cout) = (2usize, [4usize, 2, 4], 3usize, 2usize);
    let x = rand_tensor(&mut r, &[n, d[0], d[1], d[2], cin]);
    let w = rand_tensor(&mut r, &[3, 3, 3, cin, cout]);
    let b = rand_tensor(&mut r, &[cout]);
    for stride in [1usize, 2] {
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv3d(xv, wv, bv, stride).unwrap();
        let y = tape.value(y);
        let o = d.map(|v| v / stride);
        assert_eq!(y.shape, vec![n, o[0], o[1], o[2], cout]);
        let xi = |b: usize, i: isize, j: isize, k: isize, c: usize| -> f64 {
            if i < 0 || j < 0 || k < 0 || i >= d[0] as isize || j >= d[1] as isize || k >= d[2] as isize {
                return 0.0;
            }
            x.data[(((b * d[0] + i as usize) * d[1] + j as usize) * d[2] + k as usize) * cin + c]
        };
        for bi in 0..n {
            for i in 0..o[0] {
                for j in 0..o[1] {
                    for k in 0..o[2] {
                        for co in 0..cout {
                            let mut s = b.data[co];
                            for (di, dj, dk) in (0..27).map(|t| (t / 9, t / 3 % 3, t % 3)) {
                                for ci in 0..cin {
                                    let wv = w.data[(((di * 3 + dj) * 3 + dk) * cin + ci) * cout + co];
                                    let (pi, pj, pk) = (
                                        (i * stride + di) as isize - 1,
                                        (j * stride + dj) as isize - 1,
                                        (k * stride + dk) as isize - 1,
                                    );
                                    s += wv * xi(bi, pi, pj, pk, ci);
                                }
                            }
                            let got = y.data[(((bi * o[0] + i) * o[1] + j) * o[2] + k) * cout + co];
                            assert!((got - s).abs() < 1e-12, "stride {stride}: {got} vs {s}");
                        }
                    }
                }
            }
        }
    }
}
