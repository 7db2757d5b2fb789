use gfk_autodiff::gradcheck::{check_inputs, check_params};
use gfk_autodiff::{Graph, ParamStore, Tensor, Var};
use gfk_core::nn::Builder;
use gfk_core::temporal::{positional_encoding, TemporalBlock, TemporalConfig, TemporalKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KINDS: [TemporalKind; 3] = [TemporalKind::Conv, TemporalKind::Ltae, TemporalKind::Gru];

fn small_cfg(kind: TemporalKind, c: usize) -> TemporalConfig {
    TemporalConfig {
        heads: 2,
        groups: 2.min(c),
        ..TemporalConfig::new(kind)
    }
}

fn build(kind: TemporalKind, c: usize, seed: u64) -> (TemporalBlock, ParamStore) {
    let mut b = Builder::new(seed);
    let blk = TemporalBlock::new(&mut b, "t", &small_cfg(kind, c), c).unwrap();
    (blk, b.finish())
}

/// Moves every parameter away from its initial value so no branch is trivially zero.
fn randomize(ps: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        for v in ps.get_mut(id).data_mut() {
            *v = rng.random_range(-0.6..0.6);
        }
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn run(blk: &TemporalBlock, ps: &ParamStore, x: &Tensor, dates: &[f64]) -> Tensor {
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let y = blk.forward(&mut g, ps, v, dates).unwrap();
    g.value(y).clone()
}

fn days(n: usize, t: usize) -> Vec<f64> {
    (0..n * t).map(|i| ((i % t) * 12) as f64).collect()
}

fn at(x: &Tensor, idx: [usize; 4]) -> f64 {
    let s = x.shape();
    x.data()[((idx[0] * s[1] + idx[1]) * s[2] + idx[2]) * s[3] + idx[3]]
}

fn param(ps: &ParamStore, name: &str) -> Tensor {
    ps.get(ps.find(name).unwrap_or_else(|| panic!("no parameter {name}"))).clone()
}

#[test]
fn identity_at_init() {
    for kind in KINDS {
        let (blk, ps) = build(kind, 8, 3);
        let x = random(&[2, 5, 3, 8], 1);
        let y = run(&blk, &ps, &x, &days(2, 5));
        let tol = if kind == TemporalKind::Ltae { 1e-12 } else { 0.0 };
        assert!(y.max_abs_diff(&x) <= tol, "{kind:?}: {}", y.max_abs_diff(&x));
        // frame by frame gives the same
        for t in 0..5 {
            let mut frame = Vec::new();
            for n in 0..2 {
                for p in 0..3 {
                    for c in 0..8 {
                        frame.push(at(&x, [n, t, p, c]));
                    }
                }
            }
            let f = Tensor::new(&[2, 1, 3, 8], frame).unwrap();
            let yf = run(&blk, &ps, &f, &[0.0, 0.0]);
            for n in 0..2 {
                for p in 0..3 {
                    for c in 0..8 {
                        assert!((at(&yf, [n, 0, p, c]) - at(&y, [n, t, p, c])).abs() <= tol);
                    }
                }
            }
        }
    }
}

#[test]
fn shapes_are_preserved() {
    for kind in KINDS {
        let (blk, mut ps) = build(kind, 4, 0);
        randomize(&mut ps, 1);
        for t in [1, 2, 5] {
            let x = random(&[3, t, 2, 4], t as u64);
            assert_eq!(run(&blk, &ps, &x, &days(3, t)).shape(), &[3, t, 2, 4]);
        }
    }
}

#[test]
fn positions_do_not_interact() {
    for kind in KINDS {
        let (blk, mut ps) = build(kind, 4, 0);
        randomize(&mut ps, 2);
        let x = random(&[2, 4, 5, 4], 3);
        let y = run(&blk, &ps, &x, &days(2, 4));
        let mut x2 = x.clone();
        let s = x.shape().to_vec();
        for t in 0..4 {
            for c in 0..4 {
                x2.data_mut()[((s[1] + t) * s[2] + 2) * s[3] + c] += 0.5;
            }
        }
        let y2 = run(&blk, &ps, &x2, &days(2, 4));
        let mut moved = false;
        for n in 0..2 {
            for t in 0..4 {
                for p in 0..5 {
                    for c in 0..4 {
                        let d = at(&y, [n, t, p, c]) - at(&y2, [n, t, p, c]);
                        if n == 1 && p == 2 {
                            moved |= d != 0.0;
                        } else {
                            assert_eq!(d, 0.0, "{kind:?} leaked into n={n} p={p}");
                        }
                    }
                }
            }
        }
        assert!(moved, "{kind:?} ignored its input");
    }
}

#[test]
fn conv_single_frame_uses_center_tap() {
    let (blk, mut ps) = build(TemporalKind::Conv, 4, 0);
    randomize(&mut ps, 5);
    let TemporalBlock::Conv(conv) = &blk else { unreachable!() };
    let x = random(&[2, 1, 3, 4], 6);
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let y = conv.conv(&mut g, &ps, v).unwrap();
    let y = g.value(y).clone();
    let w = param(&ps, "t.conv.weight");
    let b = param(&ps, "t.conv.bias");
    for n in 0..2 {
        for p in 0..3 {
            for o in 0..4 {
                let mut want = b.data()[o];
                for i in 0..4 {
                    want += at(&x, [n, 0, p, i]) * w.data()[(4 + i) * 4 + o];
                }
                assert!((at(&y, [n, 0, p, o]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv_constant_series_gives_constant_interior() {
    let (blk, mut ps) = build(TemporalKind::Conv, 4, 0);
    randomize(&mut ps, 7);
    let TemporalBlock::Conv(conv) = &blk else { unreachable!() };
    let frame = random(&[1, 1, 3, 4], 8);
    let t = 6;
    let x = Tensor::new(&[1, t, 3, 4], frame.data().repeat(t)).unwrap();
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let pre = conv.conv(&mut g, &ps, v).unwrap();
    let pre = g.value(pre).clone();
    let out = run(&blk, &ps, &x, &days(1, t));
    // zero padding only affects the first and last step
    for y in [&pre, &out] {
        for ti in 2..t - 1 {
            for p in 0..3 {
                for c in 0..4 {
                    assert!((at(y, [0, ti, p, c]) - at(y, [0, 1, p, c])).abs() < 1e-12);
                }
            }
        }
    }
    // the interior pre-activation is the tap sum applied to the frame
    let w = param(&ps, "t.conv.weight");
    let b = param(&ps, "t.conv.bias");
    for p in 0..3 {
        for o in 0..4 {
            let mut want = b.data()[o];
            for i in 0..4 {
                let tap: f64 = (0..3).map(|k| w.data()[(k * 4 + i) * 4 + o]).sum();
                want += at(&frame, [0, 0, p, i]) * tap;
            }
            assert!((at(&pre, [0, 2, p, o]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn ltae_single_frame() {
    let (blk, mut ps) = build(TemporalKind::Ltae, 4, 0);
    randomize(&mut ps, 9);
    let TemporalBlock::Ltae(m) = &blk else { unreachable!() };
    let x = random(&[2, 1, 3, 4], 10);
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let (y, attn) = m.forward_with_attention(&mut g, &ps, v, &[40.0, 7.0]).unwrap();
    assert!(g.value(attn).data().iter().all(|&a| a == 1.0));
    let y = g.value(y).clone();
    let alpha = param(&ps, "t.alpha").data()[0];
    let w = param(&ps, "t.mlp.weight");
    let b = param(&ps, "t.mlp.bias");
    // two heads of width 2, each encoded at offset zero
    let pe = positional_encoding(0.0, 2, 1000.0).repeat(2);
    for n in 0..2 {
        for p in 0..3 {
            for o in 0..4 {
                let mut mlp = b.data()[o];
                for i in 0..4 {
                    mlp += (at(&x, [n, 0, p, i]) + pe[i]) * w.data()[i * 4 + o];
                }
                let want = at(&x, [n, 0, p, o]) + alpha * mlp;
                assert!((at(&y, [n, 0, p, o]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn ltae_attention_is_a_distribution() {
    let (blk, mut ps) = build(TemporalKind::Ltae, 8, 0);
    randomize(&mut ps, 11);
    let TemporalBlock::Ltae(m) = &blk else { unreachable!() };
    let x = random(&[2, 5, 3, 8], 12);
    let mut g = Graph::inference();
    let v = g.constant(x);
    let (_, attn) = m.forward_with_attention(&mut g, &ps, v, &days(2, 5)).unwrap();
    let a = g.value(attn);
    assert_eq!(a.shape(), &[2, 6, 5, 5]);
    for row in a.data().chunks(5) {
        assert!(row.iter().all(|&w| w >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn ltae_permutes_with_its_input_on_equal_dates() {
    let (blk, mut ps) = build(TemporalKind::Ltae, 4, 0);
    randomize(&mut ps, 13);
    let t = 5;
    let x = random(&[1, t, 3, 4], 14);
    let perm = [3, 0, 4, 1, 2];
    let mut xp = Vec::new();
    for &src in &perm {
        for p in 0..3 {
            for c in 0..4 {
                xp.push(at(&x, [0, src, p, c]));
            }
        }
    }
    let xp = Tensor::new(&[1, t, 3, 4], xp).unwrap();
    let dates = vec![100.0; t];
    let y = run(&blk, &ps, &x, &dates);
    let yp = run(&blk, &ps, &xp, &dates);
    for (ti, &src) in perm.iter().enumerate() {
        for p in 0..3 {
            for c in 0..4 {
                assert!((at(&yp, [0, ti, p, c]) - at(&y, [0, src, p, c])).abs() < 1e-12);
            }
        }
    }
}

/// GRU block with the backward direction sharing the forward weights.
fn tied_gru(seed: u64) -> (TemporalBlock, ParamStore) {
    let (blk, mut ps) = build(TemporalKind::Gru, 4, 0);
    randomize(&mut ps, seed);
    for w in ["weight_ih", "bias_ih", "weight_hh", "bias_hh"] {
        let src = param(&ps, &format!("t.gru_fwd.{w}"));
        let dst = ps.find(&format!("t.gru_bwd.{w}")).unwrap();
        *ps.get_mut(dst) = src;
    }
    (blk, ps)
}

fn gru_states(blk: &TemporalBlock, ps: &ParamStore, x: &Tensor) -> (Tensor, Tensor) {
    let TemporalBlock::Gru(m) = blk else { unreachable!() };
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let (f, b) = m.directions(&mut g, ps, v).unwrap();
    (g.value(f).clone(), g.value(b).clone())
}

#[test]
fn gru_reversed_series() {
    let (blk, ps) = tied_gru(15);
    let t = 6;
    let x = random(&[2, t, 3, 4], 16);
    let mut xr = Vec::new();
    for n in 0..2 {
        for ti in (0..t).rev() {
            for p in 0..3 {
                for c in 0..4 {
                    xr.push(at(&x, [n, ti, p, c]));
                }
            }
        }
    }
    let xr = Tensor::new(&[2, t, 3, 4], xr).unwrap();
    let (_, bwd) = gru_states(&blk, &ps, &x);
    let (fwd_r, _) = gru_states(&blk, &ps, &xr);
    let step = 2 * 3 * 2;
    for ti in 0..t {
        let a = &fwd_r.data()[ti * step..(ti + 1) * step];
        let b = &bwd.data()[(t - 1 - ti) * step..(t - ti) * step];
        for (u, v) in a.iter().zip(b) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn gru_single_frame_is_one_step() {
    let (blk, ps) = tied_gru(17);
    let x = random(&[1, 1, 2, 4], 18);
    let (f, b) = gru_states(&blk, &ps, &x);
    assert_eq!(f.data(), b.data());
    let wm = param(&ps, "t.mlp_in.weight");
    let bm = param(&ps, "t.mlp_in.bias");
    let wi = param(&ps, "t.gru_fwd.weight_ih");
    let bi = param(&ps, "t.gru_fwd.bias_ih");
    let bh = param(&ps, "t.gru_fwd.bias_hh");
    let h = 2;
    for p in 0..2 {
        let hx: Vec<f64> = (0..h)
            .map(|o| bm.data()[o] + (0..4).map(|i| at(&x, [0, 0, p, i]) * wm.data()[i * h + o]).sum::<f64>())
            .collect();
        let gate = |k: usize| -> f64 { bi.data()[k] + (0..h).map(|i| hx[i] * wi.data()[i * 3 * h + k]).sum::<f64>() };
        for j in 0..h {
            let r = sigmoid(gate(j) + bh.data()[j]);
            let z = sigmoid(gate(h + j) + bh.data()[h + j]);
            let n = (gate(2 * h + j) + r * bh.data()[2 * h + j]).tanh();
            let want = (1.0 - z) * n;
            assert!((f.data()[p * h + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn module_gradients_match_finite_differences() {
    for kind in KINDS {
        let (blk, mut ps) = build(kind, 4, 0);
        randomize(&mut ps, 19);
        let (n, t, p, c) = (2, 3, 2, 4);
        let x = random(&[n, t, p, c], 20);
        let r = random(&[n, t, p, c], 21);
        let dates = vec![0.0, 30.0, 70.0, 5.0, 9.0, 400.0];
        let coords: Vec<_> = ps
            .ids()
            .flat_map(|id| (0..ps.get(id).numel()).map(move |e| (id, e)))
            .collect();
        let scores = |g: &mut Graph, ps: &ParamStore, xv| -> gfk_autodiff::Result<Var> {
            let y = blk.forward(g, ps, xv, &dates).unwrap();
            let rv = g.constant(r.clone());
            let y = g.mul(y, rv)?;
            Ok(g.sum(y))
        };
        let rep = check_params(
            &mut ps,
            &coords,
            |g, ps| {
                let xv = g.constant(x.clone());
                scores(g, ps, xv)
            },
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_err <= 1e-4, "{kind:?} params: {rep:?}");
        let frozen = ps.clone();
        let rep = check_inputs(&[x.clone()], |g, v| scores(g, &frozen, v[0]), 1e-5).unwrap();
        assert!(rep.max_rel_err <= 1e-4, "{kind:?} inputs: {rep:?}");
    }
}
