//! Analytic derivatives against central finite differences.

mod common;

use common::{batch, model, KINDS};
use msm_core::estimation::{transition_gradient, transition_objective};
use msm_core::inference::forward_backward_batch;
use msm_core::rng::rng_from_seed;
use msm_core::transitions::random_transition;
use msm_core::{Activation, Covariance, TransitionFunction, TransitionKind, TransitionOptions};
use nalgebra::DMatrix;
use rand::Rng;

const H: f64 = 1e-6;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-5 + 1e-4 * b.abs()
}

fn point(rng: &mut impl Rng, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn cases() -> Vec<(String, TransitionFunction)> {
    let mut out = Vec::new();
    for kind in KINDS {
        for act in [Activation::Cosine, Activation::Softplus, Activation::LeakyRelu] {
            if !kind.is_network() && act != Activation::Cosine {
                continue;
            }
            for seed in 0..50u64 {
                let m = 1 + (seed % 3) as usize;
                let opts = TransitionOptions {
                    degree: 1 + (seed % 3) as usize,
                    hidden: 4,
                    activation: act,
                    interactions: 1 + (seed as usize % m),
                };
                let f = random_transition(kind, m, seed, &opts).unwrap();
                out.push((format!("{kind:?}/{act:?}/{seed}"), f));
            }
        }
    }
    // affine-wrapped networks
    let mut rng = rng_from_seed(99);
    for seed in 0..50u64 {
        let inner = random_transition(TransitionKind::Mlp, 2, seed, &TransitionOptions::default()).unwrap();
        let a = DMatrix::from_fn(
            2,
            2,
            |i, j| if i == j { 1.5 } else { 0.0 } + rng.random_range(-0.5..0.5),
        );
        let b = point(&mut rng, 2);
        out.push((
            format!("Affine/{seed}"),
            TransitionFunction::affine_wrapped(inner, a, b).unwrap(),
        ));
    }
    out
}

#[test]
fn jacobian_matches_finite_differences() {
    let mut rng = rng_from_seed(1);
    for (name, f) in cases() {
        let m = f.dim();
        let z = point(&mut rng, m);
        let jac = f.jacobian(&z);
        for j in 0..m {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += H;
            zm[j] -= H;
            let (fp, fm) = (f.eval(&zp).unwrap(), f.eval(&zm).unwrap());
            for i in 0..m {
                let fd = (fp[i] - fm[i]) / (2.0 * H);
                assert!(close(jac[(i, j)], fd), "{name}: J[{i},{j}] = {} vs {fd}", jac[(i, j)]);
            }
        }
    }
}

#[test]
fn param_gradient_matches_finite_differences() {
    let mut rng = rng_from_seed(2);
    for (name, f) in cases() {
        let m = f.dim();
        let z_prev = point(&mut rng, m);
        let z_next = point(&mut rng, m);
        let noise = Covariance::diagonal(&(0..m).map(|_| rng.random_range(0.2..1.0)).collect::<Vec<_>>()).unwrap();
        let grad = f.param_gradient(&z_prev, &z_next, &noise);
        assert_eq!(grad.values.len(), f.param_count(), "{name}");
        assert_eq!(grad.layout, f.layout());
        let theta = f.params();
        let objective = |theta: &[f64]| {
            let mut g = f.clone();
            g.set_params(theta).unwrap();
            noise.log_density(&z_next, &g.eval(&z_prev).unwrap())
        };
        let mask = f.mask();
        for p in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[p] += H;
            tm[p] -= H;
            let fd = (objective(&tp) - objective(&tm)) / (2.0 * H);
            assert!(
                close(grad.values[p], fd),
                "{name}: dθ[{p}] = {} vs {fd}",
                grad.values[p]
            );
        }
        if let (Some(_), TransitionFunction::LocallyConnected(net)) = (mask, &f) {
            // masked first-layer weights receive no gradient
            let h = net.hidden;
            for i in 0..m {
                for u in 0..h {
                    for j in 0..m {
                        if !net.mask[i * m + j] {
                            let idx = ((i * h) + u) * m + j;
                            assert_eq!(grad.values[idx], 0.0, "{name}");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn batch_gradient_matches_objective() {
    for kind in [TransitionKind::Mlp, TransitionKind::LocallyConnectedMlp] {
        let md = model(2, 2, kind, 3);
        let data = batch(&md, 4, 20, 8);
        let posts = forward_backward_batch(&md, &data).unwrap();
        let grads = transition_gradient(&md, &data, &posts).unwrap();
        for a in 0..2 {
            let theta = md.trans_mean()[a].params();
            for p in (0..theta.len()).step_by(3) {
                let eval = |d: f64| {
                    let mut means = md.trans_mean().to_vec();
                    let mut t = theta.clone();
                    t[p] += d;
                    means[a].set_params(&t).unwrap();
                    let perturbed = msm_core::MsmModel::new(
                        md.chain().clone(),
                        md.initial().to_vec(),
                        means,
                        md.trans_noise().to_vec(),
                    )
                    .unwrap();
                    transition_objective(&perturbed, &data, &posts).unwrap()
                };
                let fd = (eval(H) - eval(-H)) / (2.0 * H);
                assert!(
                    close(grads[a][p], fd),
                    "{kind:?} state {a} θ[{p}]: {} vs {fd}",
                    grads[a][p]
                );
            }
        }
    }
}
