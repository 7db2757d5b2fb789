use gfk_autodiff::checkpoint::{decode, encode};
use gfk_autodiff::gradcheck::check_params;
use gfk_autodiff::{Graph, ParamStore, Tensor};
use gfk_core::network::{added_temporal_params, crop_for_eval, flops_estimate, param_count, ModelConfig, Network};
use gfk_core::temporal::TemporalKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VARIANTS: [Option<TemporalKind>; 4] = [None, Some(TemporalKind::Conv), Some(TemporalKind::Ltae), Some(TemporalKind::Gru)];

fn images(n: usize, t: usize, side: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, t, 1, side, side], |_| rng.random_range(0.0..1.0))
}

fn dates(n: usize, t: usize) -> Vec<f64> {
    (0..n * t).map(|i| (i % t) as f64 * 11.0 + (i / t) as f64).collect()
}

/// Frame `t` of every series, as a length-one series batch.
fn frame(x: &Tensor, t: usize) -> Tensor {
    let s = x.shape();
    let plane = s[2] * s[3] * s[4];
    let mut out = Vec::new();
    for n in 0..s[0] {
        let at = (n * s[1] + t) * plane;
        out.extend_from_slice(&x.data()[at..at + plane]);
    }
    Tensor::new(&[s[0], 1, s[2], s[3], s[4]], out).unwrap()
}

/// Gives every zero-initialized parameter a small random value, so that
/// temporal branches are active.
fn wake(ps: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let t = ps.get_mut(id);
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
}

fn tiny(kind: Option<TemporalKind>, t: usize) -> ModelConfig {
    let mut cfg = ModelConfig::tiny().with_temporal(kind, t);
    if let Some(tc) = &mut cfg.temporal {
        tc.groups = 2;
        tc.heads = 2;
    }
    cfg
}

#[test]
fn multi_temporal_equals_framewise_at_init() {
    for kind in VARIANTS.into_iter().flatten() {
        let net = Network::new(&tiny(Some(kind), 3)).unwrap();
        let x = images(2, 3, 16, 1);
        let d = dates(2, 3);
        let y = net.predict(&x, &d).unwrap();
        let tol = if kind == TemporalKind::Ltae { 1e-12 } else { 0.0 };
        for t in 0..3 {
            let yt = net.predict(&frame(&x, t), &[d[t], d[3 + t]]).unwrap();
            let diff = frame(&y, t).max_abs_diff(&yt);
            assert!(diff <= tol, "{kind:?} frame {t}: {diff}");
        }
    }
}

#[test]
fn frames_are_isolated_at_init() {
    for kind in VARIANTS.into_iter().flatten() {
        let net = Network::new(&tiny(Some(kind), 3)).unwrap();
        let x = images(1, 3, 16, 2);
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[256..512] {
            *v = 1.0 - *v;
        }
        let y = net.predict(&x, &dates(1, 3)).unwrap();
        let y2 = net.predict(&x2, &dates(1, 3)).unwrap();
        assert_eq!(frame(&y, 0).data(), frame(&y2, 0).data());
        assert_eq!(frame(&y, 2).data(), frame(&y2, 2).data());
        assert!(frame(&y, 1).max_abs_diff(&frame(&y2, 1)) > 0.0);
    }
}

#[test]
fn batch_permutation() {
    for kind in VARIANTS {
        let t = if kind.is_some() { 3 } else { 1 };
        let mut net = Network::new(&tiny(kind, t)).unwrap();
        wake(&mut net.params, 3);
        let x = images(3, t, 16, 4);
        let d = dates(3, t);
        let y = net.predict(&x, &d).unwrap();
        let per = x.numel() / 3;
        let order = [2, 0, 1];
        let xp: Vec<f64> = order.iter().flat_map(|&i| x.data()[i * per..(i + 1) * per].to_vec()).collect();
        let dp: Vec<f64> = order.iter().flat_map(|&i| d[i * t..(i + 1) * t].to_vec()).collect();
        let yp = net.predict(&Tensor::new(x.shape(), xp).unwrap(), &dp).unwrap();
        let out = y.numel() / 3;
        for (k, &i) in order.iter().enumerate() {
            let a = &yp.data()[k * out..(k + 1) * out];
            let b = &y.data()[i * out..(i + 1) * out];
            let diff = a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "{kind:?}: {diff}");
        }
    }
}

#[test]
fn desk_output_shape() {
    let net = Network::new(&ModelConfig::desk().with_temporal(Some(TemporalKind::Ltae), 4)).unwrap();
    let y = net.predict(&images(2, 4, 128, 5), &dates(2, 4)).unwrap();
    assert_eq!(y.shape(), &[2, 4, 4, 128, 128]);
    assert!(y.is_finite());
    let c = crop_for_eval(&y, 64).unwrap();
    assert_eq!(c.shape(), &[2, 4, 4, 64, 64]);
    // rows and columns 32..96 are kept
    assert_eq!(c.data()[0], y.data()[32 * 128 + 32]);
    assert_eq!(c.data()[63 * 64 + 63], y.data()[95 * 128 + 95]);
}

#[test]
fn wrong_inputs_are_rejected() {
    let mono = Network::new(&ModelConfig::tiny()).unwrap();
    assert!(mono.predict(&images(1, 2, 16, 0), &dates(1, 2)).is_err());
    assert!(mono.predict(&images(1, 1, 8, 0), &dates(1, 1)).is_err());
    assert!(mono.predict(&images(1, 1, 16, 0), &[]).is_err());
    let rect = Tensor::zeros(&[1, 1, 1, 16, 8]);
    assert!(mono.predict(&rect, &[0.0]).is_err());
}

#[test]
fn end_to_end_gradients() {
    for kind in VARIANTS {
        let t = if kind.is_some() { 2 } else { 1 };
        let mut cfg = tiny(kind, t);
        cfg.context = 64;
        cfg.eval_crop = 32;
        let mut net = Network::new(&cfg).unwrap();
        wake(&mut net.params, 6);
        let x = images(1, t, 64, 7);
        let d = dates(1, t);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = Tensor::from_fn(&[1, t, 4, 64, 64], |_| rng.random_range(-1.0..1.0));
        // a sampled 1% of all scalars, at least one per tensor
        let mut coords = Vec::new();
        for id in net.params.ids() {
            let n = net.params.get(id).numel();
            coords.push((id, rng.random_range(0..n)));
            for e in 0..n {
                if rng.random_bool(0.01) {
                    coords.push((id, e));
                }
            }
        }
        let shell = net.clone();
        let rep = check_params(
            &mut net.params,
            &coords,
            |g: &mut Graph, ps: &ParamStore| {
                let xv = g.constant(x.clone());
                let y = shell.forward_with(g, ps, xv, &d).unwrap();
                let rv = g.constant(r.clone());
                let y = g.mul(y, rv)?;
                Ok(g.sum(y))
            },
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_err <= 1e-4, "{kind:?}: {rep:?}");
    }
}

#[test]
fn counted_macs_match_the_estimate() {
    for kind in VARIANTS {
        let t = if kind.is_some() { 3 } else { 1 };
        for base in [tiny(kind, t), ModelConfig::desk().with_temporal(kind, t)] {
            let net = Network::new(&base).unwrap();
            let mut g = Graph::inference();
            let xv = g.constant(images(1, t, base.context, 9));
            net.forward(&mut g, xv, &dates(1, t)).unwrap();
            let est = flops_estimate(&base).unwrap() * t as f64;
            assert_eq!(g.macs() as f64, est, "{kind:?} context {}", base.context);
        }
    }
}

#[test]
fn param_count_matches_checkpoint() {
    for kind in VARIANTS {
        let cfg = ModelConfig::desk().with_temporal(kind, if kind.is_some() { 8 } else { 1 });
        let net = Network::new(&cfg).unwrap();
        let back = decode(&encode(&net.params)).unwrap();
        let stored: usize = back.iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(param_count(&cfg).unwrap(), stored);
        assert_eq!(net.params.num_scalars(), stored);
    }
}

#[test]
fn temporal_parameter_ordering() {
    for base in [ModelConfig::full(), ModelConfig::desk()] {
        let add = |k| added_temporal_params(&base.clone().with_temporal(Some(k), 8)).unwrap();
        let (conv, ltae, gru) = (add(TemporalKind::Conv), add(TemporalKind::Ltae), add(TemporalKind::Gru));
        assert!(ltae < conv && conv < gru, "{ltae} {conv} {gru}");
        assert_eq!(added_temporal_params(&base).unwrap(), 0);
    }
}

#[test]
fn doubling_width_quadruples_cost() {
    let mut c = ModelConfig::full();
    let one = flops_estimate(&c).unwrap();
    c.base_channels *= 2;
    let two = flops_estimate(&c).unwrap();
    assert!((two / one - 4.0).abs() < 0.25, "{}", two / one);
}
