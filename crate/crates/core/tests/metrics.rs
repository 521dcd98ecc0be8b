mod common;

use msm_core::metrics::{
    distance_matrix, l2_on_points, match_costs, mc_l2, resolve_distances, resolve_permutation, segmentation_f1,
    transition_l2, uniform_points,
};
use msm_core::rng::rng_from_seed;
use msm_core::transitions::random_transition;
use msm_core::{F1Pooling, MatchMethod, MatchMode, TransitionKind, TransitionOptions};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn perm_strategy(k: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..k).collect::<Vec<_>>()).prop_shuffle()
}

fn transitions(k: usize, m: usize, seed: u64) -> Vec<msm_core::TransitionFunction> {
    (0..k)
        .map(|a| {
            random_transition(
                TransitionKind::Mlp,
                m,
                seed * 31 + a as u64,
                &TransitionOptions::default(),
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn distance_to_origin_on_square() {
    // E‖x‖ for x ~ U([-1,1]²) is (√2 + asinh 1) / 3
    let exact = (2f64.sqrt() + 1f64.asinh()) / 3.0;
    let d = mc_l2(|x, o| o.copy_from_slice(x), |_, o| o.fill(0.0), 2, 100_000, 3).unwrap();
    assert!((d - exact).abs() < 5e-3, "{d} vs {exact}");
    // E|x| in one dimension is 1/2
    let d = mc_l2(|x, o| o[0] = x[0], |_, o| o[0] = 0.0, 1, 100_000, 4).unwrap();
    assert!((d - 0.5).abs() < 5e-3);
}

#[test]
fn constant_offsets_are_exact() {
    let c = [0.3, -0.4];
    let d = mc_l2(
        |x, o| o.copy_from_slice(x),
        |x, o| {
            o[0] = x[0] + c[0];
            o[1] = x[1] + c[1];
        },
        2,
        1000,
        1,
    )
    .unwrap();
    assert!((d - 0.5).abs() < 1e-15);
}

#[test]
fn zero_samples_rejected() {
    assert!(mc_l2(|_, _| {}, |_, _| {}, 1, 0, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pseudometric_axioms(seed in 0u64..1000) {
        let fs = transitions(3, 2, seed);
        let pts = uniform_points(2, 2000, seed, 1.0);
        let d = |i: usize, j: usize| l2_on_points(|x, o| fs[i].eval_into(x, o), |x, o| fs[j].eval_into(x, o), 2, &pts);
        prop_assert_eq!(d(0, 0), 0.0);
        prop_assert_eq!(d(0, 1), d(1, 0));
        prop_assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-12);
    }

    #[test]
    fn relabeled_components_resolve_exactly(seed in 0u64..1000, perm in (2usize..6).prop_flat_map(perm_strategy)) {
        let k = perm.len();
        let truth = transitions(k, 2, seed);
        let est: Vec<_> = (0..k).map(|j| truth[perm.iter().position(|&p| p == j).unwrap()].clone()).collect();
        // est[perm[i]] == truth[i]
        let r = resolve_permutation(&truth, &est, MatchMode::Exhaustive, 500, seed).unwrap();
        prop_assert_eq!(r.error, 0.0);
        prop_assert_eq!(&r.perm, &perm);
        let g = resolve_permutation(&truth, &est, MatchMode::Greedy, 500, seed).unwrap();
        prop_assert_eq!(g.error, 0.0);
    }

    #[test]
    fn f1_is_invariant_to_prediction_relabeling(
        labels in prop::collection::vec(0usize..4, 1..200),
        noise in prop::collection::vec(0usize..4, 200),
        flip in prop::collection::vec(any::<bool>(), 200),
        perm in perm_strategy(4),
    ) {
        let pred: Vec<usize> = labels.iter().enumerate().map(|(t, &l)| if flip[t] { noise[t] } else { l }).collect();
        let relabeled: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
        for pooling in [F1Pooling::Micro, F1Pooling::Macro] {
            let (a, _) = segmentation_f1(&labels, &pred, 4, pooling, MatchMode::Exhaustive).unwrap();
            let (b, _) = segmentation_f1(&labels, &relabeled, 4, pooling, MatchMode::Exhaustive).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
        let relabeled_truth: Vec<usize> = labels.iter().map(|&p| perm[p]).collect();
        let (one, _) = segmentation_f1(&labels, &relabeled_truth, 4, F1Pooling::Micro, MatchMode::Exhaustive).unwrap();
        prop_assert_eq!(one, 1.0);
    }
}

#[test]
fn greedy_never_beats_exhaustive() {
    let mut rng = rng_from_seed(77);
    let mut agree = 0;
    for case in 0..50 {
        let cost = DMatrix::from_fn(4, 4, |_, _| rng.random_range(0.0..1.0));
        let total = |p: &[usize]| (0..4).map(|i| cost[(i, p[i])]).sum::<f64>();
        let ex = match_costs(&cost, MatchMethod::Exhaustive);
        let gr = match_costs(&cost, MatchMethod::Greedy);
        let mut seen = gr.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3], "case {case}");
        assert!(total(&gr) >= total(&ex) - 1e-15, "case {case}");
        agree += ((total(&gr) - total(&ex)).abs() < 1e-15) as usize;
    }
    // the two agree on clearly separated costs but not in general
    assert!(agree < 50);
    let sep = DMatrix::from_fn(4, 4, |i, j| {
        if j == (i + 1) % 4 {
            0.01
        } else {
            1.0 + (i * 4 + j) as f64 * 1e-3
        }
    });
    assert_eq!(
        match_costs(&sep, MatchMethod::Greedy),
        match_costs(&sep, MatchMethod::Exhaustive)
    );
}

#[test]
fn auto_mode_switches_above_five() {
    let fs = transitions(6, 2, 3);
    let d = distance_matrix(&fs, &fs, 200, 1).unwrap();
    assert_eq!(resolve_distances(&d, MatchMode::Auto).method, MatchMethod::Greedy);
    let r = resolve_distances(&d.view((0, 0), (5, 5)).into_owned(), MatchMode::Auto);
    assert_eq!(r.method, MatchMethod::Exhaustive);
    assert_eq!(r.perm, vec![0, 1, 2, 3, 4]);
}

#[test]
fn ties_resolve_deterministically() {
    let cost = DMatrix::from_element(3, 3, 1.0);
    assert_eq!(match_costs(&cost, MatchMethod::Exhaustive), vec![0, 1, 2]);
    assert_eq!(match_costs(&cost, MatchMethod::Greedy), vec![0, 1, 2]);
}

#[test]
fn l2_uses_shared_samples() {
    let fs = transitions(2, 3, 9);
    let d = distance_matrix(&fs, &fs, 3000, 5).unwrap();
    let direct = transition_l2(&fs[0], &fs[1], 3000, 5).unwrap();
    assert!((d[(0, 1)] - direct).abs() <= 1e-12 * direct);
}

#[test]
fn label_range_checked() {
    assert!(segmentation_f1(&[0, 1], &[0, 2], 2, F1Pooling::Micro, MatchMode::Auto).is_err());
    assert!(segmentation_f1(&[0, 1], &[0], 2, F1Pooling::Micro, MatchMode::Auto).is_err());
}
