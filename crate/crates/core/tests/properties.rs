use dppt_core::accountant::{account, default_orders, rdp_at_order, MechanismParams};
use dppt_core::checkpoint::{decode, encode};
use dppt_core::dp::{ClipMode, ClipSpec, Clipper};
use dppt_core::freeze::{apply_freeze, rank_layers, select_layers, FreezePlan, LayerScore};
use dppt_core::planner::{plan_scale, sweep_curves, PlanBase, ScaleMode, ScalePlan};
use dppt_core::{GradTree, ParamTree, Tensor};
use proptest::prelude::*;

/// `A_α` by composite Simpson integration of the subsampled Gaussian
/// moment against the N(0, z²) density.
fn a_alpha_by_quadrature(q: f64, z: f64, alpha: f64) -> f64 {
    let (lo, hi) = (-40.0 * z, 40.0 * z + alpha);
    let n = 400_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        let density = (-x * x / (2.0 * z * z)).exp() / (z * (2.0 * std::f64::consts::PI).sqrt());
        let ratio = (1.0 - q) + q * ((2.0 * x - 1.0) / (2.0 * z * z)).exp();
        density * ratio.powf(alpha)
    };
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn rdp_matches_numerical_integration() {
    for (q, z, alpha) in [(0.01, 1.0, 8.0), (0.01, 1.0, 2.5), (0.05, 2.0, 1.5), (0.2, 0.9, 5.0)] {
        let expect = a_alpha_by_quadrature(q, z, alpha).ln() / (alpha - 1.0);
        let got = rdp_at_order(q, z, alpha).unwrap();
        assert!(
            (got - expect).abs() <= 1e-9 * expect.max(1e-12) + 1e-15,
            "q={q} z={z} α={alpha}: {got} vs {expect}"
        );
    }
}

#[test]
fn headstart_never_exceeds_equal_scale() {
    let base = PlanBase::default();
    let z0s = [1e-4, 1e-3, 1e-2];
    let ks = [1.0, 10.0, 52.0, 100.0, 530.0];
    let eq = sweep_curves(&z0s, &ks, &[ScaleMode::EqualScale], &base).unwrap();
    let hs = sweep_curves(&z0s, &ks, &[ScaleMode::DatasetHeadstart10x], &base).unwrap();
    assert_eq!(eq.len(), hs.len());
    for (e, h) in eq.iter().zip(&hs) {
        assert_eq!((e.z0, e.k), (h.z0, h.k));
        assert!(h.epsilon <= e.epsilon, "{h:?} vs {e:?}");
    }
}

#[test]
fn plan_round_trips_through_account() {
    let base = PlanBase::default();
    let orders = default_orders();
    for z0 in [1e-3, 1e-2] {
        let o = plan_scale(z0, 10.0, ScaleMode::EqualScale, &base).unwrap();
        assert!(o.result.epsilon <= 10.0);
        let prev = ScalePlan {
            k: o.plan.k - 1.0,
            ..o.plan
        };
        assert!(prev.account(&orders).unwrap().epsilon > 10.0);
    }
}

#[test]
fn equal_scale_keeps_sampling_rate() {
    let base = PlanBase::default();
    let q0 = base.b0 / base.n0;
    for k in [1.0, 3.0, 52.0, 530.0, 5450.0] {
        let p = ScalePlan {
            mode: ScaleMode::EqualScale,
            k,
            z0: 1e-3,
            base,
        };
        assert!((p.sampling_rate() - q0).abs() <= 1e-15 * q0);
    }
}

fn scores_and_dims() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    (1usize..12).prop_flat_map(|l| {
        (
            prop::collection::vec(prop_oneof![Just(0.25), Just(0.5), 0.0f64..2.0], l),
            prop::collection::vec(1usize..100, l),
        )
    })
}

fn tree_with(dims: &[usize]) -> ParamTree {
    let mut t = ParamTree::new();
    for (i, &d) in dims.iter().enumerate() {
        t.push(format!("l{i}"), Tensor::zeros(&[d]), false).unwrap();
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rdp_nonnegative_and_nondecreasing_in_order(q in 1e-5f64..0.5, z in 0.3f64..5.0) {
        let orders = default_orders();
        let r: Vec<f64> = orders.iter().map(|&a| rdp_at_order(q, z, a).unwrap()).collect();
        for w in r.windows(2) {
            prop_assert!(w[0] >= 0.0);
            prop_assert!(w[1] >= w[0] * (1.0 - 1e-9) - 1e-15, "{:?}", w);
        }
    }

    #[test]
    fn epsilon_is_nonnegative(q in 1e-6f64..1.0, z in 0.1f64..10.0, t in 0u64..100_000, d in 1e-12f64..0.1) {
        let r = account(&MechanismParams { q, z, steps: t }, d, &default_orders()).unwrap();
        prop_assert!(r.epsilon >= 0.0);
    }

    #[test]
    fn selection_is_scale_invariant_and_maximal((scores, dims) in scores_and_dims(), p in 0.001f64..1.0, k in 0.01f64..100.0) {
        let m: usize = dims.iter().sum();
        let sel = select_layers(&scores, &dims, p, m).unwrap();
        let scaled: Vec<f64> = scores.iter().map(|s| s * k).collect();
        prop_assert_eq!(&sel, &select_layers(&scaled, &dims, p, m).unwrap());
        let used: usize = sel.iter().map(|&i| dims[i]).sum();
        prop_assert!(used as f64 <= p * m as f64);
        let ranked = rank_layers(&scores);
        prop_assert_eq!(&ranked[..sel.len()], &sel[..]);
        if let Some(&next) = ranked.get(sel.len()) {
            prop_assert!((used + dims[next]) as f64 > p * m as f64);
        }
    }

    #[test]
    fn apply_freeze_is_idempotent((scores, dims) in scores_and_dims(), p in 0.001f64..1.0, top in any::<bool>()) {
        let tree = tree_with(&dims);
        let layer_scores = scores
            .iter()
            .zip(&dims)
            .enumerate()
            .map(|(i, (&score, &dim))| LayerScore { name: format!("l{i}"), dim, score })
            .collect();
        let plan = FreezePlan::build(layer_scores, p, top).unwrap();
        let once = apply_freeze(&tree, &plan).unwrap();
        prop_assert_eq!(&once, &apply_freeze(&once, &plan).unwrap());
        prop_assert_eq!(once.frozen_names().len(), plan.frozen_set.len());
    }

    #[test]
    fn clipped_norm_within_bound(
        vals in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..20), 1..6),
        bound in 0.001f64..10.0,
        mode in prop_oneof![Just(ClipMode::Global), Just(ClipMode::PerLayerUniform), Just(ClipMode::PerLayerDim)],
    ) {
        let dims: Vec<usize> = vals.iter().map(Vec::len).collect();
        let tree = tree_with(&dims);
        let g = GradTree::from_entries(
            vals.iter()
                .enumerate()
                .map(|(i, v)| (format!("l{i}"), Tensor::new(vec![v.len()], v.clone()).unwrap()))
                .collect(),
        );
        let clipper = Clipper::new(ClipSpec { mode, bound }, &tree).unwrap();
        let c = clipper.clip(&g).unwrap();
        prop_assert!(c.grad.norm() <= bound * (1.0 + 1e-12));
        if g.norm() <= bound && mode == ClipMode::Global {
            prop_assert_eq!(c.grad, g);
        }
    }

    #[test]
    fn checkpoint_round_trip(
        layers in prop::collection::vec((prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..30), any::<bool>()), 1..6)
    ) {
        let mut t = ParamTree::new();
        for (i, (v, frozen)) in layers.iter().enumerate() {
            t.push(format!("layer.{i}"), Tensor::new(vec![v.len()], v.clone()).unwrap(), *frozen).unwrap();
        }
        let bytes = encode(&t).unwrap();
        let back: ParamTree = decode(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(encode(&back).unwrap(), bytes);
        prop_assert_eq!(back, t);
    }
}
