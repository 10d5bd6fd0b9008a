//! Finite-difference verification of every graph operation.
//!
//! Each test registers the operation's inputs as parameters, builds a
//! scalar reduction of the op's output, and compares analytic gradients
//! from the backward sweep against central differences, across many
//! seeds. This is the ground-truth oracle for the autodiff core: any
//! backward-pass mistake shows up here before it can bias training.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::gradcheck::{check_gradients, GradReport};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::params::{Init, ParamStore};
use crate::tensor::Tensor;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;
const SEEDS: u64 = 20;

/// Builds a store with the named matrices filled from `seed`, entries
/// uniform in `lo..hi`.
fn store_with(seed: u64, specs: &[(&str, &[usize], f64, f64)]) -> ParamStore {
    let mut store = ParamStore::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9));
    for &(name, shape, lo, hi) in specs {
        store.register(name, shape, Init::Zeros).unwrap();
        for v in store.get_mut(name).unwrap().value.data_mut() {
            *v = rng.gen_range(lo..hi);
        }
    }
    store
}

/// Runs `build` through the checker and asserts the report passes.
fn assert_grads(store: &ParamStore, build: impl Fn(&mut Graph, &ParamStore) -> Result<Var> + Sync) {
    let report: GradReport = check_gradients(store, STEP, build).unwrap();
    assert!(report.checked > 0);
    assert!(
        report.passes(TOL),
        "max rel err {

:e} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

/// A scalar that mixes the entries of `v` with non-uniform weights, so
/// gradient errors cannot cancel by symmetry.
fn spice(g: &mut Graph, v: Var) -> Result<Var> {
    let numel: usize = g.shape(v).iter().product();
    let weights: Vec<f64> = (0..numel).map(|i| 0.3 + 0.11 * i as f64).collect();
    let shape = g.shape(v).to_vec();
    let w = g.constant(Tensor::new(shape, weights).unwrap());
    let prod = g.mul(v, w)?;
    Ok(g.sum(prod))
}

#[test]
fn grad_matmul() {
    for seed in 0..SEEDS {
        let store =
            store_with(seed, &[("a", &[3, 4], -1.0, 1.0), ("b", &[4, 5], -1.0, 1.0)]);
        assert_grads(&store, |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let c = g.matmul(a, b)?;
            spice(g, c)
        });
    }
}

#[test]
fn grad_matmul_shared_operand() {
    // c = a . a^T exercises double accumulation into one leaf.
    for seed in 0..SEEDS {
        let store = store_with(seed, &[("a", &[3, 3], -1.0, 1.0)]);
        assert_grads(&store, |g, s| {
            let a = g.param(s, "a")?;
            let at = g.transpose(a)?;
            let c = g.matmul(a, at)?;
            spice(g, c)
        });
    }
}

#[test]
fn grad_transpose() {
    for seed in 0..SEEDS {
        let store = store_with(seed, &[("a", &[2, 5], -1.0, 1.0)]);
        assert_grads(&store, |g, s| {
            let a = g.param(s, "a")?;
            let t = g.transpose(a)?;
            spice(g, t)
        });
    }
}

#[test]
fn grad_elementwise_binary() {
    type BinOp = fn(&mut Graph, Var, Var) -> Result<Var>;
    let cases: Vec<(&str, BinOp)> = vec![
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
    ];
    for (name, op) in cases {
        for seed in 0..SEEDS {
            let store =
                store_with(seed, &[("a", &[3, 4], -1.0, 1.0), ("b", &[3, 4], -1.0, 1.0)]);
            assert_grads(&store, |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let c = op(g, a, b)?;
                spice(g, c)
            });
        }
        let _ = name;
    }
}

#[test]
fn grad_div() {
    for seed in 0..SEEDS {
        // Denominator bounded away from zero.
        let store = store_with(seed, &[("a", &[3, 4], -1.0, 1.0), ("b", &[3, 4], 0.5, 2.0)]);
        assert_grads(&store, |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let c = g.div(a, b)?;
            spice(g, c)
        });
    }
}

#[test]
fn grad_min_max_elem() {
    for seed in 0..SEEDS {
        let store = store_with(seed, &[("a", &[4, 4], -1.0, 1.0), ("b", &[4, 4], -1.0, 1.0)]);
        assert_grads(&store, |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let lo = g.min_elem(a, b)?;
            let hi = g.max_elem(a, b)?;
            let both = g.add(lo, hi)?;
            spice(g, both)
        });
    }
}

#[test]
fn grad_add_row_and_scale_rows() {
    for seed in 0..SEEDS {
        let store = store_with(
            seed,
            &[
                ("x", &[4, 3], -1.0, 1.0),
                ("r", &[1, 3], -1.0, 1.0),
                ("s", &[4, 1], -1.0, 1.0),
            ],
        );
        assert_grads(&store, |g, s| {
            let x = g.param(s, "x")?;
            let r = g.param(s, "r")?;
            let sc = g.param(s, "s")?;
            let xr = g.add_row(x, r)?;
            let xs = g.scale_rows(xr, sc)?;
            spice(g, xs)
        });
    }
}

#[test]
fn grad_scalar_and_unary_smooth() {
    type UnOp = fn(&mut Graph, Var) -> Var;
    let cases: Vec<UnOp> = vec![
        |g, a| g.scalar_mul(a, 2.5),
        |g, a| g.scalar_add(a, -0.7),
        |g, a| g.neg(a),
        |g, a| g.gelu(a),
        |g, a| g.sigmoid(a),
    ];
    for op in cases {
        for seed in 0..SEEDS {
            let store = store_with(seed, &[("a", &[3, 4], -2.0, 2.0)]);
            assert_grads(&store, |g, s| {
                let a = g.param(s, "a")?;
                let c = op(g, a);
                spice(g, c)
            });
        }
    }
}

#[test]
fn grad_relu_abs_off_kink() {
    // Keep inputs away from the non-differentiable point at zero.
    for seed in 0..SEEDS {
        let mut store = store_with(seed, &[("a", &[3, 4], 0.1, 2.0)]);
        for (i, v) in store.get_mut("a").unwrap().value.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        assert_grads(&store, |g, s| {
            let a = g.param(s, "a")?;
            let r = g.relu(a);
            let b = g.abs(a);
            let both = g.add(r, b)?;
            spice(g, both)
        });
    }
}

#[test]
fn grad_ln_pow_clamp() {
    for seed in 0..SEEDS {
        let store = store_with(seed, &[("a", &[3, 4], 0.2, 1.8)]);
        assert_grads(&store, |g, s| {
            let a = g.param(s, "a")?;
            // Values sit strictly inside the clamp interval, away from
            // the kink, so the gradient is the identity there.
            let c = g.clamp(a, 0.05, 2.5);
            let l = g.ln(c);
            let p = g.pow_const(c, 3.0);
            let both = g.add(l, p)?;
            spice(g, both)
        });
    }
}

#[test]
fn grad_softmax_rows() {
    for seed in 0..SEEDS {
        let store = store_with(seed, &[("a", &[3, 5], -3.0, 3.0)]);
        assert_grads(&store, |g, s| {
            let a = g.param(s, "a")?;
            let y = g.softmax_rows(a)?;
            spice(g, y)
        });
    }
}

#[test]
fn grad_layer_norm() {
    for seed in 0..SEEDS {
        let store = store_with(
            seed,
            &[
                ("x", &[4, 6], -2.0, 2.0),
                ("gain", &[1, 6], 0.5, 1.5),
                ("bias", &[1, 6], -0.5, 0.5),
            ],
        );
        assert_grads(&store, |g, s| {
            let x = g.param(s, "x")?;
            let gain = g.param(s, "gain")?;
            let bias = g.param(s, "bias")?;
            let y = g.layer_norm(x, gain, bias)?;
            spice(g, y)
        });
    }
}

#[test]
fn grad_instance_norm() {
    for seed in 0..SEEDS {
        let store = store_with(
            seed,
            &[
                ("x", &[3, 4, 4], -2.0, 2.0),
                ("gain", &[1, 3], 0.5, 1.5),
                ("bias", &[1, 3], -0.5, 0.5),
            ],
        );
        assert_grads(&store, |g, s| {
            let x = g.param(s, "x")?;
            let gain = g.param(s, "gain")?;
            let bias = g.param(s, "bias")?;
            let y = g.instance_norm(x, gain, bias)?;
            spice(g, y)
        });
    }
}

#[test]
fn grad_conv3x3() {
    for seed in 0..SEEDS {
        let store = store_with(
            seed,
            &[
                ("x", &[2, 4, 5], -1.0, 1.0),
                ("w", &[3, 2, 3, 3], -0.7, 0.7),
                ("b", &[1, 3], -0.3, 0.3),
            ],
        );
        assert_grads(&store, |g, s| {
            let x = g.param(s, "x")?;
            let w = g.param(s, "w")?;
            let b = g.param(s, "b")?;
            let y = g.conv3x3(x, w, b)?;
            spice(g, y)
        });
    }
}

#[test]
fn grad_embed_with_repeats() {
    for seed in 0..SEEDS {
        let store = store_with(seed, &[("table", &[6, 4], -1.0, 1.0)]);
        assert_grads(&store, |g, s| {
            let t = g.param(s, "table")?;
            // Repeated ids force scatter-add accumulation.
            let e = g.embed(t, &[1, 3, 1, 5, 0, 1])?;
            spice(g, e)
        });
    }
}

#[test]
fn grad_concat_slice_reshape() {
    for seed in 0..SEEDS {
        let store =
            store_with(seed, &[("a", &[2, 3], -1.0, 1.0), ("b", &[3, 3], -1.0, 1.0)]);
        assert_grads(&store, |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let cat = g.concat_rows(&[a, b, a])?;
            let cut = g.slice_rows(cat, 1, 7)?;
            let rs = g.reshape(cut, &[9, 2])?;
            spice(g, rs)
        });
    }
}

#[test]
fn grad_reductions() {
    for seed in 0..SEEDS {
        let store = store_with(seed, &[("a", &[4, 3], -1.0, 1.0)]);
        assert_grads(&store, |g, s| {
            let a = g.param(s, "a")?;
            let rm = g.row_mean(a)?;
            let srm = spice(g, rm)?;
            let sm = g.sum(a);
            let mn = g.mean(a);
            let t1 = g.add(srm, sm)?;
            g.add(t1, mn)
        });
    }
}

#[test]
fn grad_attention_like_composite() {
    // A miniature single-head cross-attention: the composition stresses
    // interaction of matmul, transpose, softmax, scaling and add.
    for seed in 0..SEEDS {
        let store = store_with(
            seed,
            &[
                ("q", &[3, 4], -1.0, 1.0),
                ("k", &[5, 4], -1.0, 1.0),
                ("v", &[5, 4], -1.0, 1.0),
            ],
        );
        assert_grads(&store, |g, s| {
            let q = g.param(s, "q")?;
            let k = g.param(s, "k")?;
            let v = g.param(s, "v")?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scaled = g.scalar_mul(scores, 0.5);
            let attn = g.softmax_rows(scaled)?;
            let out = g.matmul(attn, v)?;
            let res = g.add(out, q)?;
            spice(g, res)
        });
    }
}

// ----- forward-value and contract tests ---------------------------------

#[test]
fn matmul_matches_hand_example() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let b = g.constant(Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &[58.0, 64.0, 139.0, 154.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "unhelpful message: {msg}");
}

#[test]
fn softmax_rows_sum_to_one_and_tolerate_large_inputs() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(2, 3, vec![700.0, 710.0, 705.0, -700.0, -710.0, -705.0]).unwrap());
    let y = g.softmax_rows(a).unwrap();
    let v = g.value(y);
    assert!(v.iter().all(|x| x.is_finite()));
    for row in v.chunks(3) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
    }
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]).unwrap());
    let gain = g.constant(Tensor::matrix(1, 4, vec![1.0; 4]).unwrap());
    let bias = g.constant(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
    let y = g.layer_norm(x, gain, bias).unwrap();
    for row in g.value(y).chunks(4) {
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4, "variance {var}");
    }
}

#[test]
fn layer_norm_rejects_width_one() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 1]));
    let gain = g.constant(Tensor::zeros(&[1, 1]));
    let bias = g.constant(Tensor::zeros(&[1, 1]));
    assert!(g.layer_norm(x, gain, bias).is_err());
}

#[test]
fn input_rejects_non_finite() {
    let mut g = Graph::new();
    let mut t = Tensor::zeros(&[2, 2]);
    t.data_mut()[0] = f64::NAN;
    assert!(g.input(&t).is_err());
}

#[test]
fn backward_twice_is_rejected() {
    let mut store = ParamStore::new(0);
    store.register("a", &[2, 2], Init::Ones).unwrap();
    let mut g = Graph::new();
    let a = g.param(&store, "a").unwrap();
    let s = g.sum(a);
    g.backward(s).unwrap();
    assert!(g.backward(s).is_err());
}

#[test]
fn backward_requires_scalar() {
    let mut store = ParamStore::new(0);
    store.register("a", &[2, 2], Init::Ones).unwrap();
    let mut g = Graph::new();
    let a = g.param(&store, "a").unwrap();
    assert!(g.backward(a).is_err());
}

#[test]
fn param_staging_dedups_by_name() {
    let mut store = ParamStore::new(0);
    store.register("a", &[2, 2], Init::Ones).unwrap();
    let mut g = Graph::new();
    let v1 = g.param(&store, "a").unwrap();
    let v2 = g.param(&store, "a").unwrap();
    assert_eq!(v1, v2);
    // Using the same handle twice accumulates both contributions.
    let s1 = g.sum(v1);
    let s2 = g.sum(v2);
    let both = g.add(s1, s2).unwrap();
    g.backward(both).unwrap();
    assert_eq!(g.grad(v1).unwrap(), &[2.0, 2.0, 2.0, 2.0]);
}

#[test]
fn untracked_inputs_get_no_gradient() {
    let mut g = Graph::new();
    let a = g.input(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
    let s = g.sum(a);
    g.backward(s).unwrap();
    assert!(g.grad(a).is_none());
}

#[test]
fn conv3x3_identity_kernel_preserves_input() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap());
    let mut wdata = vec![0.0; 9];
    wdata[4] = 1.0; // center tap only
    let w = g.constant(Tensor::new(vec![1, 1, 3, 3], wdata).unwrap());
    let b = g.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
    let y = g.conv3x3(x, w, b).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn conv3x3_zero_padding_at_borders() {
    // An all-ones 3x3 kernel on an all-ones 3x3 image counts the live
    // neighborhood of each pixel: 4 in corners, 6 on edges, 9 in the
    // middle.
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 3, 3], vec![1.0; 9]).unwrap());
    let w = g.constant(Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap());
    let b = g.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
    let y = g.conv3x3(x, w, b).unwrap();
    assert_eq!(g.value(y), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn gelu_matches_reference_points() {
    // Reference values for the tanh approximation.
    let g = super::graph::gelu(1.0);
    assert!((g - 0.841192).abs() < 1e-5, "gelu(1) = {g}");
    assert!(super::graph::gelu(0.0).abs() < 1e-15);
    let gm = super::graph::gelu(-1.0);
    assert!((gm + 0.158808).abs() < 1e-5, "gelu(-1) = {gm}");
}
