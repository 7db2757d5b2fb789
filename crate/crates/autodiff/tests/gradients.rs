//! Every op against central finite differences (h = 1e-5, rel. err <= 1e-4).

use gfk_autodiff::gradcheck::check_inputs;
use gfk_autodiff::{Graph, Result, Tensor, Unary, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.5..2.0))
}

/// Reduces an arbitrary output to a scalar through a fixed random projection so
/// every output element gets a distinct weight.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn assert_ok(name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let r = check_inputs(inputs, f, H).unwrap();
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(r.max_rel_err <= TOL, "{name}: max rel err {} at {:?}", r.max_rel_err, r.worst);
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kind in [
        Unary::Exp,
        Unary::Tanh,
        Unary::Sigmoid,
        Unary::Gelu,
        Unary::Silu,
        Unary::Neg,
    ] {
        let x = rand_tensor(&mut rng, &[3, 5]);
        assert_ok(&format!("{kind:?}"), &[x], |g, v| {
            let y = g.unary(kind, v[0]);
            project(g, y, 2)
        });
    }
    for kind in [Unary::Log, Unary::Sqrt] {
        let x = positive(&mut rng, &[4, 4]);
        assert_ok(&format!("{kind:?}"), &[x], |g, v| {
            let y = g.unary(kind, v[0]);
            project(g, y, 3)
        });
    }
    // relu away from the kink
    let x = Tensor::from_fn(&[10], |i| if i % 2 == 0 { 0.3 + i as f64 } else { -0.4 - i as f64 });
    assert_ok("relu", &[x], |g, v| {
        let y = g.relu(v[0]);
        project(g, y, 4)
    });
}

#[test]
fn binary_and_scalar_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 3, 4]);
    let d = positive(&mut rng, &[2, 3, 4]);
    assert_ok("add", &[a.clone(), b.clone()], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 6)
    });
    assert_ok("sub", &[a.clone(), b.clone()], |g, v| {
        let y = g.sub(v[0], v[1])?;
        project(g, y, 7)
    });
    assert_ok("mul", &[a.clone(), b.clone()], |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 8)
    });
    assert_ok("div", &[a.clone(), d], |g, v| {
        let y = g.div(v[0], v[1])?;
        project(g, y, 9)
    });
    assert_ok("scalar", &[a.clone()], |g, v| {
        let y = g.mul_scalar(v[0], -1.7);
        let y = g.add_scalar(y, 0.3);
        project(g, y, 10)
    });
    assert_ok("scale_by", &[a, Tensor::scalar(0.7)], |g, v| {
        let y = g.scale_by(v[0], v[1])?;
        project(g, y, 11)
    });
}

#[test]
fn products() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 5]);
    assert_ok("matmul", &[a, b], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 13)
    });
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 4, 2]);
    assert_ok("bmm", &[a, b], |g, v| {
        let y = g.bmm(v[0], v[1])?;
        project(g, y, 14)
    });
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let w = rand_tensor(&mut rng, &[4, 3]);
    let bias = rand_tensor(&mut rng, &[3]);
    assert_ok("linear", &[x, w, bias], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        project(g, y, 15)
    });
}

#[test]
fn convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 0, 2), (1, 0, 1)] {
        let x = rand_tensor(&mut rng, &[2, 4, 4, 2]);
        let w = rand_tensor(&mut rng, &[k, k, 2, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        assert_ok(&format!("conv2d s{stride} p{pad} k{k}"), &[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(g, y, 17)
        });
    }
    for axis in [0usize, 1] {
        let x = rand_tensor(&mut rng, &[3, 4, 2]);
        let w = rand_tensor(&mut rng, &[3, 2, 2]);
        let b = rand_tensor(&mut rng, &[2]);
        assert_ok(&format!("conv1d axis {axis}"), &[x, w, b], |g, v| {
            let y = g.conv1d(v[0], v[1], Some(v[2]), axis, 1)?;
            project(g, y, 18)
        });
    }
}

#[test]
fn normalisations_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for axis in 0..3 {
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        assert_ok(&format!("softmax axis {axis}"), &[x], |g, v| {
            let y = g.softmax(v[0], axis)?;
            project(g, y, 20)
        });
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        assert_ok(&format!("log_softmax axis {axis}"), &[x], |g, v| {
            let y = g.log_softmax(v[0], axis)?;
            project(g, y, 23)
        });
    }
    let x = rand_tensor(&mut rng, &[3, 6]);
    let gm = rand_tensor(&mut rng, &[6]);
    let bt = rand_tensor(&mut rng, &[6]);
    assert_ok("layer_norm", &[x, gm, bt], |g, v| {
        let y = g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)?;
        project(g, y, 21)
    });
    let x = rand_tensor(&mut rng, &[2, 3, 2, 4]);
    let gm = rand_tensor(&mut rng, &[4]);
    let bt = rand_tensor(&mut rng, &[4]);
    assert_ok("group_norm", &[x, gm, bt], |g, v| {
        let y = g.group_norm(v[0], 2, Some(v[1]), Some(v[2]), 1e-5)?;
        project(g, y, 22)
    });
}

#[test]
fn layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    assert_ok("reshape", &[x.clone()], |g, v| {
        let y = g.reshape(v[0], &[4, 6])?;
        project(g, y, 24)
    });
    assert_ok("permute", &[x.clone()], |g, v| {
        let y = g.permute(v[0], &[2, 0, 1])?;
        project(g, y, 25)
    });
    let y2 = rand_tensor(&mut rng, &[2, 1, 4]);
    assert_ok("concat", &[x.clone(), y2], |g, v| {
        let y = g.concat(&[v[0], v[1]], 1)?;
        project(g, y, 26)
    });
    assert_ok("slice", &[x.clone()], |g, v| {
        let y = g.slice(v[0], 2, 1, 2)?;
        project(g, y, 27)
    });
    assert_ok("roll", &[x.clone()], |g, v| {
        let y = g.roll(v[0], 1, -2)?;
        project(g, y, 28)
    });
    let im = rand_tensor(&mut rng, &[1, 2, 3, 2]);
    assert_ok("upsample2x", &[im], |g, v| {
        let y = g.upsample2x(v[0])?;
        project(g, y, 29)
    });
    assert_ok("reductions", &[x], |g, v| {
        let s = g.sum_axis(v[0], 1)?;
        let m = g.mean_axis(s, 0)?;
        let a = project(g, m, 30)?;
        let b = g.mean(v[0]);
        let c = g.add(a, b)?;
        Ok(c)
    });
}

#[test]
fn composite_graph() {
    // A small attention-like composite exercising shared inputs.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = rand_tensor(&mut rng, &[2, 4, 3]);
    let wq = rand_tensor(&mut rng, &[3, 3]);
    assert_ok("composite", &[x, wq], |g, v| {
        let q = g.linear(v[0], v[1], None)?;
        let kt = g.permute(v[0], &[0, 2, 1])?;
        let s = g.bmm(q, kt)?;
        let a = g.softmax(s, 2)?;
        let o = g.bmm(a, v[0])?;
        let o = g.gelu(o);
        let o = g.layer_norm(o, None, None, 1e-5)?;
        project(g, o, 32)
    });
}

#[test]
fn linearity_of_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let xt = rand_tensor(&mut rng, &[3, 4]);
    let grads = |a: f64, b: f64| -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.leaf(xt.clone().with_requires_grad(true));
        let t = g.tanh(x);
        let l1 = g.sum(t);
        let sq = g.mul(x, x).unwrap();
        let e = g.exp(sq);
        let l2 = g.mean(e);
        let l1 = g.mul_scalar(l1, a);
        let l2 = g.mul_scalar(l2, b);
        let l = g.add(l1, l2).unwrap();
        g.backward(l).unwrap();
        g.grad(x).unwrap().to_vec()
    };
    let (a, b) = (0.7, -2.3);
    let combined = grads(a, b);
    let g1 = grads(1.0, 0.0);
    let g2 = grads(0.0, 1.0);
    for i in 0..combined.len() {
        assert!((combined[i] - (a * g1[i] + b * g2[i])).abs() <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_sums_to_one(vals in proptest::collection::vec(-20.0f64..20.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], vals).unwrap());
        for axis in 0..2 {
            let y = g.softmax(x, axis).unwrap();
            let s = g.sum_axis(y, axis).unwrap();
            for v in g.value(s).data() {
                prop_assert!((v - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax(vals in proptest::collection::vec(-20.0f64..20.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], vals).unwrap());
        for axis in 0..2 {
            let a = g.log_softmax(x, axis).unwrap();
            let b = g.softmax(x, axis).unwrap();
            let b = g.log(b);
            prop_assert!(g.value(a).max_abs_diff(g.value(b)) <= 1e-12);
        }
    }

    #[test]
    fn norms_standardise(vals in proptest::collection::vec(-5.0f64..5.0, 48), shift in -3.0f64..3.0) {
        let vals: Vec<f64> = vals.iter().enumerate().map(|(i, v)| v + shift + 0.01 * i as f64).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 6, 4], vals).unwrap());
        let gn = g.group_norm(x, 2, None, None, 1e-12).unwrap();
        let d = g.value(gn).data().to_vec();
        for n in 0..2 {
            for grp in 0..2 {
                let items: Vec<f64> = (0..6)
                    .flat_map(|s| (0..2).map(move |j| (n * 6 + s) * 4 + grp * 2 + j))
                    .map(|i| d[i])
                    .collect();
                let mean = items.iter().sum::<f64>() / items.len() as f64;
                let var = items.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / items.len() as f64;
                prop_assert!(mean.abs() <= 1e-9);
                prop_assert!((var - 1.0).abs() <= 1e-6);
            }
        }
        let ln = g.layer_norm(x, None, None, 1e-12).unwrap();
        for row in g.value(ln).data().chunks(4) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            prop_assert!(mean.abs() <= 1e-9);
            prop_assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn random_elementwise_chain_matches_fd(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=64usize);
        let x = rand_tensor(&mut rng, &[n]);
        let y = rand_tensor(&mut rng, &[n]);
        let r = check_inputs(&[x, y], |g, v| {
            let a = g.mul(v[0], v[1])?;
            let b = g.sigmoid(a);
            let c = g.gelu(v[0]);
            let d = g.add(b, c)?;
            project(g, d, seed)
        }, H).unwrap();
        prop_assert!(r.max_rel_err <= TOL);
    }
}
