//! Property tests and finite-difference checks for the differentiable
//! primitives and the adapter-stream operations.

use drl_core::graph::{Graph, Val};
use drl_core::ipa::{
    adapter_forward, fuse, gate_mask, reusable_attention_apply, transfer_block_forward,
    AdapterParams, AttentionMode, FusionMode, GateParams, ReuseCollapse, SAttParams,
    TransferBlockParams,
};
use drl_core::param::Param;
use drl_core::rng::rng_for;
use drl_core::supervision::{
    bce_graph, ce_graph, cosface_graph, das_terms_graph, head_graph, kd_graph, LogitHead,
};
use drl_core::tensor::{self, Tensor};
use proptest::prelude::*;
use rand::Rng;

// -- helpers -----------------------------------------------------------------

/// Max relative error of the analytic gradient of `build`'s scalar output
/// with respect to `input`, against central differences.
fn fd_check_var(
    build: &dyn Fn(&mut Graph, Val) -> Val,
    input: &Tensor,
    h: f64,
) -> f64 {
    let eval = |t: &Tensor| {
        let mut g = Graph::new();
        let v = g.var(t.clone());
        let out = build(&mut g, v);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let v = g.var(input.clone());
    let out = build(&mut g, v);
    g.backward(out, 1.0).unwrap();
    let analytic = g.grad(v);

    let mut worst = 0.0f64;
    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Reduce a tensor-valued node to a scalar with fixed quasi-random weights
/// so every output coordinate influences the loss.
fn weighted_sum(g: &mut Graph, v: Val) -> Val {
    let t = g.value(v).clone();
    let n = t.numel();
    let weights: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7).sin() + 1.5).collect();
    let flat = g.reshape(v, vec![n]).unwrap();
    let w = g.constant(Tensor::vector(weights));
    let prod = g.mul(flat, w).unwrap();
    g.sum(prod).unwrap()
}

fn random_tensor(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = rng_for(seed, "ops-prop", 0);
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

fn stochastic_stack(heads: usize, t: usize, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, "stoch", 0);
    let mut data = Vec::with_capacity(heads * t * t);
    for _ in 0..heads {
        for _ in 0..t {
            let raw: Vec<f64> = (0..t).map(|_| rng.gen_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            data.extend(raw.into_iter().map(|v| v / s));
        }
    }
    Tensor::new(vec![heads, t, t], data).unwrap()
}

// -- finite differences over every primitive --------------------------------

#[test]
fn primitive_ops_match_finite_differences_at_random_points() {
    let h = 1e-5;
    let tol = 1e-4;
    type B = Box<dyn Fn(&mut Graph, Val) -> Val>;
    let cases: Vec<(&str, Vec<usize>, (f64, f64), B)> = vec![
        ("matmul_left", vec![3, 4], (-2.0, 2.0), Box::new(|g, v| {
            let b = g.constant(random_tensor(vec![4, 2], 7, -1.0, 1.0));
            let out = g.matmul(v, b).unwrap();
            weighted_sum(g, out)
        })),
        ("matmul_right", vec![4, 2], (-2.0, 2.0), Box::new(|g, v| {
            let a = g.constant(random_tensor(vec![3, 4], 8, -1.0, 1.0));
            let out = g.matmul(a, v).unwrap();
            weighted_sum(g, out)
        })),
        ("transpose", vec![3, 4], (-2.0, 2.0), Box::new(|g, v| {
            let out = g.transpose(v).unwrap();
            weighted_sum(g, out)
        })),
        ("add", vec![2, 3], (-2.0, 2.0), Box::new(|g, v| {
            let b = g.constant(random_tensor(vec![2, 3], 9, -1.0, 1.0));
            let out = g.add(v, b).unwrap();
            weighted_sum(g, out)
        })),
        ("sub", vec![2, 3], (-2.0, 2.0), Box::new(|g, v| {
            let b = g.constant(random_tensor(vec![2, 3], 10, -1.0, 1.0));
            let out = g.sub(v, b).unwrap();
            weighted_sum(g, out)
        })),
        ("mul", vec![2, 3], (-2.0, 2.0), Box::new(|g, v| {
            let b = g.constant(random_tensor(vec![2, 3], 11, -1.0, 1.0));
            let out = g.mul(v, b).unwrap();
            weighted_sum(g, out)
        })),
        ("div", vec![2, 3], (0.5, 2.0), Box::new(|g, v| {
            let b = g.constant(random_tensor(vec![2, 3], 12, 0.5, 2.0));
            let out = g.div(v, b).unwrap();
            weighted_sum(g, out)
        })),
        ("div_denominator", vec![2, 3], (0.5, 2.0), Box::new(|g, v| {
            let a = g.constant(random_tensor(vec![2, 3], 13, -1.0, 1.0));
            let out = g.div(a, v).unwrap();
            weighted_sum(g, out)
        })),
        ("add_row", vec![4], (-2.0, 2.0), Box::new(|g, v| {
            let a = g.constant(random_tensor(vec![3, 4], 14, -1.0, 1.0));
            let out = g.add_row(a, v).unwrap();
            weighted_sum(g, out)
        })),
        ("scale_addconst", vec![2, 2], (-2.0, 2.0), Box::new(|g, v| {
            let s = g.scale(v, -1.7).unwrap();
            let out = g.add_const(s, 0.3).unwrap();
            weighted_sum(g, out)
        })),
        ("exp", vec![5], (-1.5, 1.5), Box::new(|g, v| {
            let out = g.exp(v).unwrap();
            weighted_sum(g, out)
        })),
        ("ln", vec![5], (0.3, 3.0), Box::new(|g, v| {
            let out = g.ln(v).unwrap();
            weighted_sum(g, out)
        })),
        ("sqrt", vec![5], (0.3, 3.0), Box::new(|g, v| {
            let out = g.sqrt(v).unwrap();
            weighted_sum(g, out)
        })),
        ("gelu", vec![6], (-2.5, 2.5), Box::new(|g, v| {
            let out = g.gelu(v).unwrap();
            weighted_sum(g, out)
        })),
        ("sigmoid", vec![6], (-3.0, 3.0), Box::new(|g, v| {
            let out = g.sigmoid(v).unwrap();
            weighted_sum(g, out)
        })),
        ("softplus", vec![6], (-3.0, 3.0), Box::new(|g, v| {
            let out = g.softplus(v).unwrap();
            weighted_sum(g, out)
        })),
        ("softmax_rows", vec![2, 4], (-2.0, 2.0), Box::new(|g, v| {
            let out = g.softmax_rows(v).unwrap();
            weighted_sum(g, out)
        })),
        ("layer_norm_x", vec![3, 5], (-2.0, 2.0), Box::new(|g, v| {
            let gain = g.constant(random_tensor(vec![5], 15, 0.5, 1.5));
            let bias = g.constant(random_tensor(vec![5], 16, -0.3, 0.3));
            let out = g.layer_norm(v, gain, bias).unwrap();
            weighted_sum(g, out)
        })),
        ("layer_norm_gain", vec![5], (0.5, 1.5), Box::new(|g, v| {
            let x = g.constant(random_tensor(vec![3, 5], 17, -1.0, 1.0));
            let bias = g.constant(random_tensor(vec![5], 18, -0.3, 0.3));
            let out = g.layer_norm(x, v, bias).unwrap();
            weighted_sum(g, out)
        })),
        ("sum_mean", vec![7], (-2.0, 2.0), Box::new(|g, v| {
            let s = g.sum(v).unwrap();
            let m = g.mean(v).unwrap();
            g.add(s, m).unwrap()
        })),
        ("col_sums", vec![3, 4], (-2.0, 2.0), Box::new(|g, v| {
            let out = g.col_sums(v).unwrap();
            weighted_sum(g, out)
        })),
        ("row_select", vec![3, 4], (-2.0, 2.0), Box::new(|g, v| {
            let out = g.row(v, 1).unwrap();
            weighted_sum(g, out)
        })),
        ("slice_concat_cols", vec![3, 6], (-2.0, 2.0), Box::new(|g, v| {
            let left = g.slice_cols(v, 0, 2).unwrap();
            let right = g.slice_cols(v, 2, 6).unwrap();
            let out = g.concat_cols(&[right, left]).unwrap();
            weighted_sum(g, out)
        })),
        ("concat_rows", vec![2, 3], (-2.0, 2.0), Box::new(|g, v| {
            let other = g.constant(random_tensor(vec![1, 3], 19, -1.0, 1.0));
            let out = g.concat_rows(&[v, other]).unwrap();
            weighted_sum(g, out)
        })),
        ("elem_drop_concat", vec![5], (-2.0, 2.0), Box::new(|g, v| {
            let e = g.elem(v, 2).unwrap();
            let rest = g.drop_elem(v, 2).unwrap();
            let cat = g.concat(&[rest, e]).unwrap();
            weighted_sum(g, cat)
        })),
        ("logsumexp", vec![5], (-3.0, 3.0), Box::new(|g, v| {
            g.logsumexp(v).unwrap()
        })),
        ("bscale", vec![4], (-2.0, 2.0), Box::new(|g, v| {
            let s = g.constant(Tensor::scalar(1.3));
            let out = g.bscale(v, s).unwrap();
            weighted_sum(g, out)
        })),
        ("bscale_scalar_side", vec![1], (0.5, 2.0), Box::new(|g, v| {
            let a = g.constant(random_tensor(vec![4], 20, -1.0, 1.0));
            let out = g.bscale(a, v).unwrap();
            weighted_sum(g, out)
        })),
    ];

    for (name, shape, (lo, hi), build) in cases {
        for point in 0..10u64 {
            let input = random_tensor(shape.clone(), 1000 + point, lo, hi);
            let worst = fd_check_var(build.as_ref(), &input, h);
            assert!(
                worst <= tol,
                "{name} point {point}: max rel err {worst:.3e}"
            );
        }
    }
}

// -- adapter-stream ops -------------------------------------------------------

#[test]
fn ipa_ops_match_finite_differences() {
    let h = 1e-5;
    let tol = 1e-4;
    let d = 8;
    let t = 4;
    let mut rng = rng_for(3, "ipa-fd", 0);

    // adapter and gate: check gradient w.r.t. the token input
    let adapter = AdapterParams::init("fd.adapter", d, 4, &mut rng);
    scale_params(&adapter.params(), 10.0); // healthy magnitudes
    let gate = GateParams::init("fd.gate", d, 4, &mut rng);
    scale_params(&gate.params(), 10.0);
    let stack = stochastic_stack(2, t, 5);
    let tb = TransferBlockParams::init("fd.tb", d, &mut rng);
    scale_params(&tb.params(), 10.0);
    let satt = SAttParams::init("fd.satt", d, &mut rng);
    scale_params(&satt.params(), 5.0);

    let cases: Vec<(&str, Box<dyn Fn(&mut Graph, Val) -> Val>)> = vec![
        ("adapter_forward", Box::new({
            let adapter = adapter;
            move |g: &mut Graph, v: Val| {
                let out = adapter_forward(g, v, &adapter).unwrap();
                weighted_sum(g, out)
            }
        })),
        ("gate_mask", Box::new({
            let gate = gate;
            move |g: &mut Graph, v: Val| {
                let out = gate_mask(g, v, &gate).unwrap();
                weighted_sum(g, out)
            }
        })),
        ("reusable_attention_head_mean", Box::new({
            let stack = stack.clone();
            move |g: &mut Graph, v: Val| {
                let out = reusable_attention_apply(
                    g,
                    v,
                    &stack,
                    AttentionMode::RAtt,
                    ReuseCollapse::HeadMean,
                    None,
                )
                .unwrap();
                weighted_sum(g, out)
            }
        })),
        ("reusable_attention_per_head", Box::new({
            let stack = stack.clone();
            move |g: &mut Graph, v: Val| {
                let out = reusable_attention_apply(
                    g,
                    v,
                    &stack,
                    AttentionMode::RAtt,
                    ReuseCollapse::PerHead,
                    None,
                )
                .unwrap();
                weighted_sum(g, out)
            }
        })),
        ("self_attention", Box::new({
            let stack = stack.clone();
            let satt = satt;
            move |g: &mut Graph, v: Val| {
                let out = reusable_attention_apply(
                    g,
                    v,
                    &stack,
                    AttentionMode::SAtt,
                    ReuseCollapse::HeadMean,
                    Some(&satt),
                )
                .unwrap();
                weighted_sum(g, out)
            }
        })),
        ("fuse_gate_adapt", Box::new(|g: &mut Graph, v: Val| {
            let g_in = g.constant(random_tensor(vec![4, 8], 30, -1.0, 1.0));
            let mask = g.constant(random_tensor(vec![4, 8], 31, 0.1, 0.9));
            let out = fuse(g, v, g_in, Some(mask), g_in, g_in, None, FusionMode::GateAdapt)
                .unwrap();
            weighted_sum(g, out)
        })),
        ("fuse_gate_extra", Box::new(|g: &mut Graph, v: Val| {
            let g_in = g.constant(random_tensor(vec![4, 8], 32, -1.0, 1.0));
            let prev = g.constant(random_tensor(vec![4, 8], 33, -1.0, 1.0));
            let ptm = g.constant(random_tensor(vec![4, 8], 34, -1.0, 1.0));
            let mask = g.constant(random_tensor(vec![4, 8], 35, 0.1, 0.9));
            let mask0 = g.constant(random_tensor(vec![4, 8], 36, 0.1, 0.9));
            let out = fuse(
                g,
                v,
                g_in,
                Some(mask),
                prev,
                ptm,
                Some(mask0),
                FusionMode::GateExtra,
            )
            .unwrap();
            weighted_sum(g, out)
        })),
        ("transfer_block", Box::new({
            let stack = stack.clone();
            let tb = tb;
            move |g: &mut Graph, v: Val| {
                let out = transfer_block_forward(
                    g,
                    v,
                    &tb,
                    &stack,
                    AttentionMode::RAtt,
                    ReuseCollapse::HeadMean,
                    None,
                )
                .unwrap();
                weighted_sum(g, out)
            }
        })),
    ];

    for (name, build) in cases {
        for point in 0..10u64 {
            let input = random_tensor(vec![t, d], 2000 + point, -1.5, 1.5);
            let worst = fd_check_var(build.as_ref(), &input, h);
            assert!(worst <= tol, "{name} point {point}: max rel err {worst:.3e}");
        }
    }
}

fn scale_params(params: &[Param], factor: f64) {
    for p in params {
        let mut t = p.value_clone();
        for v in t.data_mut() {
            *v *= factor;
        }
        p.set_value(t);
    }
}

// -- loss gradients at 1e-6 on scalar probes ----------------------------------

#[test]
fn loss_gradients_match_fd_to_1e6() {
    let h = 1e-5;
    let tol = 1e-6;
    let z_probe = |seed: u64| random_tensor(vec![4], seed, -2.5, 2.5);

    for point in 0..10u64 {
        let z = z_probe(4000 + point);
        let das = |g: &mut Graph, v: Val| {
            let (lp, ln) = das_terms_graph(g, v, 1, 1.0, 1.0).unwrap();
            let lp3 = g.scale(lp, 3.0).unwrap();
            g.add(lp3, ln).unwrap()
        };
        let worst = fd_check_var(&das, &z, h);
        assert!(worst <= tol, "das point {point}: {worst:.3e}");

        let ce = |g: &mut Graph, v: Val| ce_graph(g, v, 1).unwrap();
        let worst = fd_check_var(&ce, &z, h);
        assert!(worst <= tol, "ce point {point}: {worst:.3e}");

        let bce = |g: &mut Graph, v: Val| bce_graph(g, v, 1).unwrap();
        let worst = fd_check_var(&bce, &z, h);
        assert!(worst <= tol, "bce point {point}: {worst:.3e}");
    }

    for point in 0..10u64 {
        let cos = random_tensor(vec![4], 5000 + point, -0.9, 0.9);
        let cf = |g: &mut Graph, v: Val| {
            let s = g.constant(Tensor::scalar(8.0));
            cosface_graph(g, v, s, 2, 0.35).unwrap()
        };
        let worst = fd_check_var(&cf, &cos, h);
        assert!(worst <= tol, "cosface point {point}: {worst:.3e}");

        let f_ptm = random_tensor(vec![6], 6000 + point, -1.0, 1.0);
        let f_new = random_tensor(vec![6], 7000 + point, 0.2, 1.2);
        let kd = move |g: &mut Graph, v: Val| kd_graph(g, v, &f_ptm).unwrap();
        let worst = fd_check_var(&kd, &f_new, h);
        assert!(worst <= tol, "kd point {point}: {worst:.3e}");
    }
}

#[test]
fn head_gradients_match_fd_including_scale() {
    // feature-side gradient of the scaled-cosine head
    let head = LogitHead::new("fd.head", 6, (0..3).map(drl_core::datagen::ClassId).collect(), 1);
    let build = |g: &mut Graph, v: Val| {
        let outs = head_graph(g, v, &head).unwrap();
        let loss = ce_graph(g, outs.z, 1).unwrap();
        loss
    };
    for point in 0..10u64 {
        let f = random_tensor(vec![6], 8000 + point, 0.3, 1.5);
        let worst = fd_check_var(&build, &f, 1e-5);
        assert!(worst <= 1e-4, "head point {point}: {worst:.3e}");
    }
}

// -- properties ----------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..4, cols in 1usize..6, seed in 0u64..1000, spread in 1.0f64..1000.0) {
        let mut t = random_tensor(vec![rows, cols], seed, -1.0, 1.0);
        for v in t.data_mut() {
            *v *= spread;
        }
        let p = tensor::softmax_rows(&t).unwrap();
        for i in 0..rows {
            let s: f64 = p.row_slice(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            prop_assert!(p.row_slice(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gate_adapt_fusion_is_elementwise_convex(seed in 0u64..1000) {
        let f_bar = random_tensor(vec![3, 4], seed, -2.0, 2.0);
        let g_in = random_tensor(vec![3, 4], seed + 1, -2.0, 2.0);
        let mask = random_tensor(vec![3, 4], seed + 2, 0.0, 1.0);
        let mut g = Graph::new();
        let fb = g.constant(f_bar.clone());
        let gi = g.constant(g_in.clone());
        let m = g.constant(mask);
        let out = fuse(&mut g, fb, gi, Some(m), gi, gi, None, FusionMode::GateAdapt).unwrap();
        let o = g.value(out);
        for k in 0..12 {
            let lo = f_bar.data()[k].min(g_in.data()[k]);
            let hi = f_bar.data()[k].max(g_in.data()[k]);
            prop_assert!(o.data()[k] >= lo - 1e-12 && o.data()[k] <= hi + 1e-12);
        }
    }

    #[test]
    fn cosine_is_bounded_and_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let u = random_tensor(vec![5], seed, -2.0, 2.0);
        let v = random_tensor(vec![5], seed + 7, -2.0, 2.0);
        prop_assume!(u.l2_norm() > 1e-6 && v.l2_norm() > 1e-6);
        let c = tensor::cosine_similarity(&u, &v).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        let su = Tensor::vector(u.data().iter().map(|x| x * scale).collect());
        let c2 = tensor::cosine_similarity(&su, &v).unwrap();
        prop_assert!((c - c2).abs() <= 1e-10);
    }

    #[test]
    fn sgd_never_touches_frozen_params(seed in 0u64..1000) {
        use drl_core::optim::{sgd_step, OptimizerConfig};
        let mut rng = rng_for(seed, "frozen-prop", 0);
        let params: Vec<Param> = (0..4)
            .map(|i| {
                Param::new(
                    format!("p{i}"),
                    random_tensor(vec![3], seed + i as u64, -1.0, 1.0),
                    true,
                )
            })
            .collect();
        for p in &params {
            p.add_grad(&random_tensor(vec![3], seed + 50, -1.0, 1.0), 1.0);
            if rng.gen_bool(0.5) {
                p.freeze();
            }
        }
        let before: Vec<(bool, u64)> = params.iter().map(|p| (p.frozen(), p.checksum())).collect();
        sgd_step(&params, &OptimizerConfig::default(), 3);
        for (p, (frozen, checksum)) in params.iter().zip(before.iter()) {
            if *frozen {
                prop_assert_eq!(p.checksum(), *checksum);
            }
        }
    }

    #[test]
    fn das_terms_are_finite_and_nonnegative(seed in 0u64..2000, k in -1.0f64..3.0) {
        let z = random_tensor(vec![5], seed, -20.0, 20.0);
        let mut g = Graph::new();
        let zv = g.constant(z);
        let (lp, ln) = das_terms_graph(&mut g, zv, 2, k, k).unwrap();
        let (lp, ln) = (g.value(lp).item(), g.value(ln).item());
        prop_assert!(lp.is_finite() && lp >= 0.0);
        prop_assert!(ln.is_finite() && ln >= 0.0);
    }
}
