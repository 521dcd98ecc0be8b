#![allow(dead_code)]

use msm_core::datagen::random_model;
use msm_core::model::sample_sequence;
use msm_core::rng::derive_seed;
use msm_core::{CovarianceKind, MsmModel, SequenceBatch, TransitionKind, TransitionOptions};
use nalgebra::{DMatrix, DVector};

pub const KINDS: [TransitionKind; 4] = [
    TransitionKind::Linear,
    TransitionKind::Polynomial,
    TransitionKind::Mlp,
    TransitionKind::LocallyConnectedMlp,
];

pub fn small_options() -> TransitionOptions {
    TransitionOptions {
        degree: 2,
        hidden: 5,
        interactions: 2,
        ..Default::default()
    }
}

pub fn model(k: usize, m: usize, kind: TransitionKind, seed: u64) -> MsmModel {
    let cov = if seed % 2 == 0 {
        CovarianceKind::Diagonal
    } else {
        CovarianceKind::Full
    };
    let mut opts = small_options();
    opts.interactions = opts.interactions.min(m);
    random_model(k, m, kind, &opts, cov, seed).unwrap()
}

pub fn batch(model: &MsmModel, n: usize, t: usize, seed: u64) -> SequenceBatch {
    let (seqs, labels): (Vec<_>, Vec<_>) = (0..n)
        .map(|b| sample_sequence(model, t, derive_seed(seed, b as u64)).unwrap())
        .unzip();
    SequenceBatch::new(seqs, Some(labels)).unwrap()
}

/// Gaussian log-density through an explicit inverse and determinant.
pub fn gauss_logpdf(x: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> f64 {
    let m = x.len();
    let d = DVector::from_iterator(m, x.iter().zip(mean).map(|(a, b)| a - b));
    let inv = cov.clone().try_inverse().unwrap();
    let quad = (d.transpose() * inv * &d)[(0, 0)];
    -0.5 * quad - 0.5 * cov.determinant().ln() - 0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// `log p(z, s)` written out term by term.
pub fn path_logjoint(model: &MsmModel, z: &msm_core::Sequence, path: &[usize]) -> f64 {
    let c = model.chain();
    let g = &model.initial()[path[0]];
    let mut lp = c.pi()[path[0]].ln() + gauss_logpdf(z.row(0), &g.mean, g.cov.matrix());
    for t in 1..z.len() {
        let s = path[t];
        lp += c.q()[(path[t - 1], s)].ln();
        let mean = model.trans_mean()[s].eval(z.row(t - 1)).unwrap();
        lp += gauss_logpdf(z.row(t), &mean, model.trans_noise()[s].matrix());
    }
    lp
}

/// Every state path of length `t` over `k` states.
pub fn all_paths(k: usize, t: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..t {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..k).map(move |s| {
                    let mut q = p.clone();
                    q.push(s);
                    q
                })
            })
            .collect();
    }
    out
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}
