//! Equivalence-aware evaluation: Monte-Carlo L2 distances, permutation
//! matching, segmentation F1 and affine resolution.

use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MsmError, Result};
use crate::model::MarkovChain;
use crate::rng::rng_from_seed;
use crate::transitions::TransitionFunction;

pub const DEFAULT_SAMPLES: usize = 100_000;

/// Largest `K` matched exhaustively in [`MatchMode::Auto`].
pub const EXHAUSTIVE_MAX_K: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Exhaustive for `K ≤ 5`, greedy above.
    #[default]
    Auto,
    Exhaustive,
    Greedy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMethod {
    Exhaustive,
    Greedy,
}

impl std::fmt::Display for MatchMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MatchMethod::Exhaustive => "exhaustive",
            MatchMethod::Greedy => "greedy",
        })
    }
}

impl MatchMode {
    /// Concrete method for `k` components.
    pub fn method(self, k: usize) -> MatchMethod {
        match self {
            MatchMode::Exhaustive => MatchMethod::Exhaustive,
            MatchMode::Greedy => MatchMethod::Greedy,
            MatchMode::Auto if k <= EXHAUSTIVE_MAX_K => MatchMethod::Exhaustive,
            MatchMode::Auto => MatchMethod::Greedy,
        }
    }
}

/// Permutation-resolved comparison of two sets of `K` functions.
/// `perm[i]` is the estimated component matched to true component `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub perm: Vec<usize>,
    pub distances: Vec<f64>,
    pub error: f64,
    pub method: MatchMethod,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineResolution {
    pub a: DMatrix<f64>,
    pub b: Vec<f64>,
    /// Mean Euclidean residual of the fit.
    pub residual: f64,
}

// ---------------------------------------------------------------------------
// Monte-Carlo L2
// ---------------------------------------------------------------------------

/// `n` points uniform on `[-scale, scale]^m`, row-major.
pub fn uniform_points(m: usize, n: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..n * m).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
}

/// Mean Euclidean distance between `f` and `g` over the given points.
pub fn l2_on_points<F, G>(f: F, g: G, m: usize, points: &[f64]) -> f64
where
    F: Fn(&[f64], &mut [f64]) + Sync,
    G: Fn(&[f64], &mut [f64]) + Sync,
{
    let n = points.len() / m;
    if n == 0 {
        return 0.0;
    }
    let dists: Vec<f64> = points
        .par_chunks(m)
        .map(|x| {
            let mut a = vec![0.0; m];
            let mut b = vec![0.0; m];
            f(x, &mut a);
            g(x, &mut b);
            a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
        })
        .collect();
    dists.iter().sum::<f64>() / n as f64
}

/// Monte-Carlo estimate of `E‖f(x) − g(x)‖`, `x ~ Uniform([-1,1]^m)`.
pub fn mc_l2<F, G>(f: F, g: G, m: usize, samples: usize, seed: u64) -> Result<f64>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
    G: Fn(&[f64], &mut [f64]) + Sync,
{
    if samples == 0 {
        return Err(MsmError::InvalidParameter("sample count must be >= 1".into()));
    }
    Ok(l2_on_points(f, g, m, &uniform_points(m, samples, seed, 1.0)))
}

/// [`mc_l2`] between two transition means.
pub fn transition_l2(f: &TransitionFunction, g: &TransitionFunction, samples: usize, seed: u64) -> Result<f64> {
    if f.dim() != g.dim() {
        return Err(MsmError::dim("transition dimension", f.dim(), g.dim()));
    }
    mc_l2(
        |x, o| f.eval_into(x, o),
        |x, o| g.eval_into(x, o),
        f.dim(),
        samples,
        seed,
    )
}

// ---------------------------------------------------------------------------
// Permutation matching
// ---------------------------------------------------------------------------

fn permutations(k: usize) -> Vec<Vec<usize>> {
    // Heap's algorithm, iterative
    let mut a: Vec<usize> = (0..k).collect();
    let mut out = vec![a.clone()];
    let mut c = vec![0usize; k];
    let mut i = 1;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// Permutation minimizing `Σ_i cost[(i, perm[i])]` (rows: true components,
/// columns: estimated). Exhaustive ties keep the lexicographically smallest
/// permutation. Greedy visits estimated components in index order and takes
/// the cheapest unused true component, lowest index on ties.
pub fn match_costs(cost: &DMatrix<f64>, method: MatchMethod) -> Vec<usize> {
    let k = cost.nrows();
    match method {
        MatchMethod::Exhaustive => {
            let mut best: Option<(f64, Vec<usize>)> = None;
            for p in permutations(k) {
                let total: f64 = (0..k).map(|i| cost[(i, p[i])]).sum();
                let better = match &best {
                    None => true,
                    Some((b, bp)) => total < *b || (total == *b && p < *bp),
                };
                if better {
                    best = Some((total, p));
                }
            }
            best.map(|b| b.1).unwrap_or_default()
        }
        MatchMethod::Greedy => {
            let mut perm = vec![usize::MAX; k];
            for j in 0..k {
                let mut pick = None;
                for i in 0..k {
                    if perm[i] != usize::MAX {
                        continue;
                    }
                    match pick {
                        None => pick = Some(i),
                        Some(p) if cost[(i, j)] < cost[(p, j)] => pick = Some(i),
                        _ => {}
                    }
                }
                perm[pick.expect("an unused component remains")] = j;
            }
            perm
        }
    }
}

/// Match estimated to true components by pairwise distance.
pub fn resolve_distances(dist: &DMatrix<f64>, mode: MatchMode) -> MatchResult {
    let k = dist.nrows();
    let method = mode.method(k);
    let perm = match_costs(dist, method);
    let distances: Vec<f64> = (0..k).map(|i| dist[(i, perm[i])]).collect();
    let error = distances.iter().sum::<f64>() / k.max(1) as f64;
    MatchResult {
        perm,
        distances,
        error,
        method,
    }
}

/// Pairwise [`mc_l2`] distances, true components in rows. All pairs share
/// one sample set.
pub fn distance_matrix(
    truth: &[TransitionFunction],
    est: &[TransitionFunction],
    samples: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if truth.len() != est.len() {
        return Err(MsmError::dim("number of components", truth.len(), est.len()));
    }
    let k = truth.len();
    if k == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let m = truth[0].dim();
    for f in truth.iter().chain(est) {
        if f.dim() != m {
            return Err(MsmError::dim("transition dimension", m, f.dim()));
        }
    }
    if samples == 0 {
        return Err(MsmError::InvalidParameter("sample count must be >= 1".into()));
    }
    let points = uniform_points(m, samples, seed, 1.0);
    let evals = |fs: &[TransitionFunction]| -> Vec<Vec<f64>> {
        fs.iter()
            .map(|f| {
                let mut out = vec![0.0; points.len()];
                out.par_chunks_mut(m)
                    .zip(points.par_chunks(m))
                    .for_each(|(o, x)| f.eval_into(x, o));
                out
            })
            .collect()
    };
    let (ft, fe) = (evals(truth), evals(est));
    let n = samples as f64;
    Ok(DMatrix::from_fn(k, k, |i, j| {
        ft[i]
            .chunks(m)
            .zip(fe[j].chunks(m))
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
            .sum::<f64>()
            / n
    }))
}

/// Permutation-resolved transition error.
pub fn resolve_permutation(
    truth: &[TransitionFunction],
    est: &[TransitionFunction],
    mode: MatchMode,
    samples: usize,
    seed: u64,
) -> Result<MatchResult> {
    Ok(resolve_distances(&distance_matrix(truth, est, samples, seed)?, mode))
}

/// Largest absolute difference of `π` and `Q` after aligning `est` by `perm`.
pub fn chain_alignment_error(truth: &MarkovChain, est: &MarkovChain, perm: &[usize]) -> Result<f64> {
    if truth.n_states() != est.n_states() {
        return Err(MsmError::dim("number of states", truth.n_states(), est.n_states()));
    }
    let aligned = est.permuted(perm);
    let pi = truth
        .pi()
        .iter()
        .zip(aligned.pi())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let q = (truth.q() - aligned.q()).abs().max();
    Ok(pi.max(q))
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum F1Pooling {
    /// TP/FP/FN pooled over all steps and classes.
    #[default]
    Micro,
    /// Mean of per-class F1.
    Macro,
}

fn f1_score(tp: f64, fp: f64, fn_: f64) -> f64 {
    let denom = 2.0 * tp + fp + fn_;
    if denom == 0.0 {
        1.0
    } else {
        2.0 * tp / denom
    }
}

/// Segmentation F1 under the best relabeling of the prediction. Labels are
/// 0-based. Returns the score and `perm`, where `perm[i]` is the predicted
/// label identified with true label `i`.
pub fn segmentation_f1(
    truth: &[usize],
    pred: &[usize],
    k: usize,
    pooling: F1Pooling,
    mode: MatchMode,
) -> Result<(f64, Vec<usize>)> {
    if truth.len() != pred.len() {
        return Err(MsmError::dim("label sequence length", truth.len(), pred.len()));
    }
    for &l in truth.iter().chain(pred) {
        if l >= k {
            return Err(MsmError::LabelOutOfRange { label: l + 1, k });
        }
    }
    let mut conf = DMatrix::<f64>::zeros(k, k);
    for (&t, &p) in truth.iter().zip(pred) {
        conf[(t, p)] += 1.0;
    }
    let rows: Vec<f64> = (0..k).map(|i| conf.row(i).sum()).collect();
    let cols: Vec<f64> = (0..k).map(|j| conf.column(j).sum()).collect();
    let method = mode.method(k);
    let perm = match method {
        MatchMethod::Exhaustive => {
            // cost to minimize: negative score contribution per pair
            let cost = match pooling {
                F1Pooling::Micro => -conf.clone(),
                F1Pooling::Macro => DMatrix::from_fn(k, k, |i, j| {
                    -f1_score(conf[(i, j)], cols[j] - conf[(i, j)], rows[i] - conf[(i, j)])
                }),
            };
            match_costs(&cost, MatchMethod::Exhaustive)
        }
        MatchMethod::Greedy => match_costs(&-conf.clone(), MatchMethod::Greedy),
    };
    let n = truth.len() as f64;
    let score = match pooling {
        F1Pooling::Micro => {
            let tp: f64 = (0..k).map(|i| conf[(i, perm[i])]).sum();
            f1_score(tp, n - tp, n - tp)
        }
        F1Pooling::Macro => {
            (0..k)
                .map(|i| {
                    let tp = conf[(i, perm[i])];
                    f1_score(tp, cols[perm[i]] - tp, rows[i] - tp)
                })
                .sum::<f64>()
                / k as f64
        }
    };
    Ok((score, perm))
}

// ---------------------------------------------------------------------------
// Affine equivalence
// ---------------------------------------------------------------------------

/// Least-squares `target ≈ A · source + b`.
pub fn resolve_affine(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<AffineResolution> {
    if source.len() != target.len() {
        return Err(MsmError::dim("paired samples", source.len(), target.len()));
    }
    let n = source.len();
    let m = source.first().map(|r| r.len()).unwrap_or(0);
    if m == 0 {
        return Err(MsmError::InvalidParameter("no samples".into()));
    }
    if n < m + 1 {
        return Err(MsmError::RankDeficient(format!(
            "{n} pairs cannot determine an affine map in dimension {m}"
        )));
    }
    for (i, (s, t)) in source.iter().zip(target).enumerate() {
        if s.len() != m || t.len() != m {
            return Err(MsmError::dim(format!("pair {i} dimension"), m, s.len().max(t.len())));
        }
    }
    let x = DMatrix::from_fn(n, m + 1, |i, j| if j < m { source[i][j] } else { 1.0 });
    let y = DMatrix::from_fn(n, m, |i, j| target[i][j]);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-10 * (n as f64).sqrt()) {
        return Err(MsmError::RankDeficient(format!(
            "design singular values range {smin:e}..{smax:e}"
        )));
    }
    let coef = svd.solve(&y, 0.0).map_err(|e| MsmError::RankDeficient(e.to_string()))?; // (m+1) × m
    let a = coef.rows(0, m).transpose();
    let b: Vec<f64> = coef.row(m).iter().cloned().collect();
    if !(a.determinant().abs() > 0.0) {
        return Err(MsmError::Singular("resolved affine map is singular".into()));
    }
    let pred = &x * &coef;
    let residual = (0..n)
        .map(|i| (0..m).map(|j| (pred[(i, j)] - y[(i, j)]).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64;
    Ok(AffineResolution { a, b, residual })
}

/// [`resolve_affine`] on rows `src1..srcm, dst1..dstm`.
pub fn resolve_affine_pairs(pairs: &[Vec<f64>]) -> Result<AffineResolution> {
    let w = pairs.first().map(|r| r.len()).unwrap_or(0);
    if w == 0 || w % 2 != 0 {
        return Err(MsmError::InvalidParameter(
            "pairs need an even, positive number of columns".into(),
        ));
    }
    let m = w / 2;
    let mut src = Vec::with_capacity(pairs.len());
    let mut dst = Vec::with_capacity(pairs.len());
    for (i, r) in pairs.iter().enumerate() {
        if r.len() != w {
            return Err(MsmError::dim(format!("pair {i} width"), w, r.len()));
        }
        src.push(r[..m].to_vec());
        dst.push(r[m..].to_vec());
    }
    resolve_affine(&src, &dst)
}

/// Mean over `k` of the L2 distance between `m1[k]` and
/// `z ↦ A · m2[perm[k]](A⁻¹ (z − b)) + b`.
pub fn transition_equiv_error(
    m1: &[TransitionFunction],
    m2: &[TransitionFunction],
    a: &DMatrix<f64>,
    b: &[f64],
    perm: &[usize],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let k = m1.len();
    if m2.len() != k || perm.len() != k {
        return Err(MsmError::dim("number of components", k, m2.len().min(perm.len())));
    }
    let mut seen = vec![false; k];
    if perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
        return Err(MsmError::InvalidParameter(format!("{perm:?} is not a permutation")));
    }
    let mut total = 0.0;
    for i in 0..k {
        let mapped = TransitionFunction::affine_wrapped(m2[perm[i]].clone(), a.clone(), b.to_vec())?;
        total += transition_l2(&m1[i], &mapped, samples, seed)?;
    }
    Ok(total / k.max(1) as f64)
}
