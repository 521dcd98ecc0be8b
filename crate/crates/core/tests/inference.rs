#![allow(clippy::needless_range_loop)]

mod common;

use common::{all_paths, batch, logsumexp, model, path_logjoint, KINDS};
use msm_core::inference::{brute_force_loglik, forward_backward, forward_loglik, segment};
use msm_core::model::sample_sequence;
use msm_core::{estimation, FitConfig, MsmError, TransitionKind};

#[test]
fn forward_matches_path_enumeration() {
    let mut case = 0u64;
    for kind in KINDS {
        for k in 1..=3 {
            for m in 1..=2 {
                for t in [1, 2, 5] {
                    case += 1;
                    let md = model(k, m, kind, case);
                    let (z, _) = sample_sequence(&md, t, 1000 + case).unwrap();
                    let terms: Vec<f64> = all_paths(k, t).iter().map(|p| path_logjoint(&md, &z, p)).collect();
                    let oracle = logsumexp(&terms);
                    let fwd = forward_loglik(&md, &z).unwrap();
                    assert!(
                        ((fwd - oracle) / oracle).abs() <= 1e-10,
                        "{kind:?} K={k} m={m} T={t}: {fwd} vs {oracle}"
                    );
                    let brute = brute_force_loglik(&md, &z).unwrap();
                    assert!(((brute - oracle) / oracle).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn posterior_marginals_match_enumeration() {
    for seed in 0..10u64 {
        let md = model(3, 2, TransitionKind::Linear, seed);
        let (z, _) = sample_sequence(&md, 4, seed + 50).unwrap();
        let paths = all_paths(3, 4);
        let terms: Vec<f64> = paths.iter().map(|p| path_logjoint(&md, &z, p)).collect();
        let norm = logsumexp(&terms);
        let mut gamma = [[0.0; 3]; 4];
        let mut xi = vec![[0.0; 9]; 4];
        for (p, lp) in paths.iter().zip(&terms) {
            let w = (lp - norm).exp();
            for t in 0..4 {
                gamma[t][p[t]] += w;
                if t > 0 {
                    xi[t][p[t] * 3 + p[t - 1]] += w;
                }
            }
        }
        let post = forward_backward(&md, &z).unwrap();
        for t in 0..4 {
            for a in 0..3 {
                assert!((post.gamma(t)[a] - gamma[t][a]).abs() < 1e-10);
            }
            if t > 0 {
                for i in 0..9 {
                    assert!((post.xi(t)[i] - xi[t][i]).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn identities_on_random_and_fitted_models() {
    for (i, kind) in KINDS.into_iter().enumerate() {
        let md = model(3, 2, kind, 7 + i as u64);
        let data = batch(&md, 8, 60, 3);
        for z in data.sequences() {
            assert!(forward_backward(&md, z).unwrap().identity_violation() <= 1e-9);
        }
    }
    let truth = model(2, 2, TransitionKind::Linear, 11);
    let data = batch(&truth, 20, 50, 4);
    let cfg = FitConfig {
        max_epochs: 10,
        seed: 2,
        ..Default::default()
    };
    let fitted = estimation::fit(&data, &cfg).unwrap().model;
    for z in data.sequences() {
        assert!(forward_backward(&fitted, z).unwrap().identity_violation() <= 1e-9);
    }
}

#[test]
fn relabeling_keeps_likelihood_and_permutes_posteriors() {
    let md = model(3, 2, TransitionKind::Mlp, 21);
    let (z, _) = sample_sequence(&md, 30, 9).unwrap();
    let perm = [2, 0, 1];
    let pm = md.permuted(&perm).unwrap();
    let a = forward_backward(&md, &z).unwrap();
    let b = forward_backward(&pm, &z).unwrap();
    assert!((a.loglik - b.loglik).abs() <= 1e-10 * a.loglik.abs());
    for t in 0..30 {
        for (i, &p) in perm.iter().enumerate() {
            assert!((b.gamma(t)[i] - a.gamma(t)[p]).abs() < 1e-12);
        }
    }
}

#[test]
fn long_sequences_stay_finite() {
    let md = model(3, 2, TransitionKind::Linear, 5);
    let (z, _) = sample_sequence(&md, 5000, 1).unwrap();
    let p = forward_backward(&md, &z).unwrap();
    assert!(p.loglik.is_finite());
    assert!(p.identity_violation() <= 1e-9);
    assert_eq!(segment(&p).len(), 5000);
}

#[test]
fn brute_force_refuses_large_spaces() {
    let md = model(3, 1, TransitionKind::Linear, 1);
    let (z, _) = sample_sequence(&md, 20, 1).unwrap();
    assert!(matches!(
        brute_force_loglik(&md, &z),
        Err(MsmError::TooManyPaths { .. })
    ));
}
