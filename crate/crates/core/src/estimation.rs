//! EM / generalized-EM estimation.
//!
//! Exact M-steps for the chain, the initial Gaussians, the noise covariances
//! and linear/polynomial transition means; gradient steps for network means.
//! The E-step always smooths whole sequences.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MsmError, Result};
use crate::gaussian::{Covariance, CovarianceKind, COV_FLOOR};
use crate::inference::{forward_backward_batch, PosteriorMarginals};
use crate::model::{Gaussian, MarkovChain, MsmModel, SequenceBatch};
use crate::rng::{derive_seed, rng_from_seed};
use crate::transitions::{
    feature_count, polynomial_features, random_transition, TransitionFunction, TransitionKind, TransitionOptions,
};

/// Probability floor applied to `π` and `Q` entries before renormalizing.
pub const PROB_FLOOR: f64 = 1e-12;

/// States whose total responsibility is below this keep their parameters.
pub const MIN_WEIGHT: f64 = 1e-12;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Adam on the γ-weighted transition objective.
    #[default]
    Adam,
    /// Plain gradient ascent, `θ ← θ + η ∇`.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    #[serde(rename = "K")]
    pub n_states: usize,
    pub transition_kind: TransitionKind,
    pub transition_options: TransitionOptions,
    pub covariance: CovarianceKind,
    pub max_epochs: usize,
    /// Sequences per gradient step (network kinds).
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub max_lr_decays: usize,
    /// Plateau threshold: per-step improvement of the mean log-likelihood
    /// over its best value so far.
    pub plateau_tol: f64,
    pub patience: usize,
    pub restarts: usize,
    pub seed: u64,
    pub cov_floor: f64,
    pub optimizer: Optimizer,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            n_states: 2,
            transition_kind: TransitionKind::Linear,
            transition_options: TransitionOptions::default(),
            covariance: CovarianceKind::Diagonal,
            max_epochs: 100,
            batch_size: 64,
            learning_rate: 7e-3,
            lr_decay: 0.5,
            max_lr_decays: 2,
            plateau_tol: 1e-4,
            patience: 3,
            restarts: 1,
            seed: 0,
            cov_floor: COV_FLOOR,
            optimizer: Optimizer::Adam,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(MsmError::InvalidParameter(s.into()));
        if self.n_states == 0 {
            return bad("K must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.restarts == 0 {
            return bad("restarts must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.plateau_tol >= 0.0) {
            return bad("plateau_tol must be >= 0");
        }
        if !(self.cov_floor >= COV_FLOOR) {
            return Err(MsmError::InvalidParameter(format!(
                "cov_floor must be >= {COV_FLOOR:e}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Plateau,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::Plateau => "plateau",
        })
    }
}

/// Outcome of one restart.
#[derive(Clone, Debug)]
pub struct RestartSummary {
    pub seed: u64,
    pub final_loglik: f64,
    pub epochs: usize,
    pub reason: StopReason,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub model: MsmModel,
    /// Mean log-likelihood of the initialization.
    pub initial_loglik: f64,
    /// Full-batch mean log-likelihood after each epoch.
    pub trace: Vec<f64>,
    /// Learning rate in effect during each epoch (0 for exact kinds).
    pub lr_trace: Vec<f64>,
    pub restart: usize,
    pub epochs: usize,
    pub reason: StopReason,
    pub restarts: Vec<RestartSummary>,
    /// States that kept their previous parameters at some M-step.
    pub kept_previous: Vec<usize>,
}

impl FitReport {
    pub fn final_loglik(&self) -> f64 {
        self.trace.last().copied().unwrap_or(self.initial_loglik)
    }
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

fn check_shapes(model: &MsmModel, batch: &SequenceBatch, posteriors: &[PosteriorMarginals]) -> Result<()> {
    if posteriors.len() != batch.len() {
        return Err(MsmError::dim("posteriors", batch.len(), posteriors.len()));
    }
    if batch.dim() != model.dim() {
        return Err(MsmError::dim("sequence dimension", model.dim(), batch.dim()));
    }
    for (b, (p, s)) in posteriors.iter().zip(batch.sequences()).enumerate() {
        if p.len() != s.len() {
            return Err(MsmError::dim(
                format!("posterior length of sequence {b}"),
                s.len(),
                p.len(),
            ));
        }
        if p.n_states() != model.n_states() {
            return Err(MsmError::dim(
                format!("posterior states of sequence {b}"),
                model.n_states(),
                p.n_states(),
            ));
        }
    }
    Ok(())
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Expected complete-data log-likelihood, averaged over sequences.
pub fn expected_complete_loglik(
    model: &MsmModel,
    batch: &SequenceBatch,
    posteriors: &[PosteriorMarginals],
) -> Result<f64> {
    check_shapes(model, batch, posteriors)?;
    let k = model.n_states();
    let pi = model.chain().pi();
    let q = model.chain().q();
    let per_seq: Vec<f64> = batch
        .sequences()
        .par_iter()
        .zip(posteriors)
        .map(|(z, p)| {
            let mut acc = 0.0;
            let g1 = p.gamma(0);
            for a in 0..k {
                acc += xlogy(g1[a], pi[a]);
                if g1[a] != 0.0 {
                    acc += g1[a] * model.log_initial(a, z.row(0));
                }
            }
            for t in 1..z.len() {
                let xi = p.xi(t);
                let g = p.gamma(t);
                for a in 0..k {
                    for l in 0..k {
                        acc += xlogy(xi[a * k + l], q[(l, a)]);
                    }
                    if g[a] != 0.0 {
                        acc += g[a] * model.log_transition(a, z.row(t - 1), z.row(t));
                    }
                }
            }
            acc
        })
        .collect();
    Ok(per_seq.iter().sum::<f64>() / batch.len() as f64)
}

/// γ-weighted transition term of the complete-data objective, averaged over
/// sequences. This is the objective of [`gem_step_networks`].
pub fn transition_objective(model: &MsmModel, batch: &SequenceBatch, posteriors: &[PosteriorMarginals]) -> Result<f64> {
    check_shapes(model, batch, posteriors)?;
    let k = model.n_states();
    let per_seq: Vec<f64> = batch
        .sequences()
        .par_iter()
        .zip(posteriors)
        .map(|(z, p)| {
            let mut acc = 0.0;
            for t in 1..z.len() {
                let g = p.gamma(t);
                for a in 0..k {
                    if g[a] != 0.0 {
                        acc += g[a] * model.log_transition(a, z.row(t - 1), z.row(t));
                    }
                }
            }
            acc
        })
        .collect();
    Ok(per_seq.iter().sum::<f64>() / batch.len() as f64)
}

// ---------------------------------------------------------------------------
// Exact M-steps
// ---------------------------------------------------------------------------

fn floor_normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    } else {
        let n = v.len() as f64;
        v.iter_mut().for_each(|x| *x = 1.0 / n);
    }
    v.iter_mut().for_each(|x| *x = x.max(PROB_FLOOR));
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

/// Baum–Welch update of `π` and `Q`.
pub fn m_step_chain(posteriors: &[PosteriorMarginals]) -> Result<MarkovChain> {
    let first = posteriors
        .first()
        .ok_or_else(|| MsmError::InvalidParameter("no posteriors".into()))?;
    let k = first.n_states();
    let mut pi = vec![0.0; k];
    let mut counts = vec![0.0; k * k]; // [l * k + a]: from l to a
    for p in posteriors {
        if p.n_states() != k {
            return Err(MsmError::dim("posterior states", k, p.n_states()));
        }
        for (a, g) in p.gamma(0).iter().enumerate() {
            pi[a] += g;
        }
        for t in 1..p.len() {
            let xi = p.xi(t);
            for a in 0..k {
                for l in 0..k {
                    counts[l * k + a] += xi[a * k + l];
                }
            }
        }
    }
    floor_normalize(&mut pi);
    for l in 0..k {
        floor_normalize(&mut counts[l * k..(l + 1) * k]);
    }
    MarkovChain::new(pi, DMatrix::from_row_slice(k, k, &counts))
}

/// Weighted Gaussian MLE of the initial components from the first frames.
/// Returns the new components and the states that kept `previous`.
pub fn m_step_initial(
    batch: &SequenceBatch,
    posteriors: &[PosteriorMarginals],
    previous: &[Gaussian],
    kind: CovarianceKind,
    floor: f64,
) -> Result<(Vec<Gaussian>, Vec<usize>)> {
    let k = previous.len();
    let m = batch.dim();
    if posteriors.len() != batch.len() {
        return Err(MsmError::dim("posteriors", batch.len(), posteriors.len()));
    }
    let mut out = Vec::with_capacity(k);
    let mut kept = Vec::new();
    for a in 0..k {
        let mut w = 0.0;
        let mut mean = vec![0.0; m];
        for (z, p) in batch.sequences().iter().zip(posteriors) {
            let g = p.gamma(0)[a];
            w += g;
            for (mu, x) in mean.iter_mut().zip(z.row(0)) {
                *mu += g * x;
            }
        }
        if w < MIN_WEIGHT {
            kept.push(a);
            out.push(previous[a].clone());
            continue;
        }
        mean.iter_mut().for_each(|v| *v /= w);
        let mut scatter = DMatrix::zeros(m, m);
        for (z, p) in batch.sequences().iter().zip(posteriors) {
            let g = p.gamma(0)[a];
            let r: Vec<f64> = z.row(0).iter().zip(&mean).map(|(x, mu)| x - mu).collect();
            for i in 0..m {
                for j in 0..m {
                    scatter[(i, j)] += g * r[i] * r[j];
                }
            }
        }
        scatter /= w;
        out.push(Gaussian::new(mean, Covariance::from_scatter(&scatter, kind, floor)?)?);
    }
    Ok((out, kept))
}

/// Per-sequence sufficient statistics of one state's regression.
struct RegressionStats {
    gram: DMatrix<f64>,
    cross: DMatrix<f64>,
    weight: f64,
}

/// Exact weighted least-squares update of degree-`degree` polynomial means
/// (degree 1 gives the affine map `[b W]`). Returns one `m × C` coefficient
/// matrix per state, `None` for states without responsibility.
///
/// The Gram matrix is ridged by `1e-9 · trace / C` for the factorization;
/// two rounds of iterative refinement then remove the ridge bias whenever
/// the unregularized system is well posed.
pub fn m_step_polynomial(
    batch: &SequenceBatch,
    posteriors: &[PosteriorMarginals],
    degree: usize,
) -> Result<Vec<Option<DMatrix<f64>>>> {
    let first = posteriors
        .first()
        .ok_or_else(|| MsmError::InvalidParameter("no posteriors".into()))?;
    if posteriors.len() != batch.len() {
        return Err(MsmError::dim("posteriors", batch.len(), posteriors.len()));
    }
    let k = first.n_states();
    let m = batch.dim();
    let c = feature_count(m, degree);
    let per_seq: Vec<Vec<RegressionStats>> = batch
        .sequences()
        .par_iter()
        .zip(posteriors)
        .map(|(z, p)| {
            let mut stats: Vec<RegressionStats> = (0..k)
                .map(|_| RegressionStats {
                    gram: DMatrix::zeros(c, c),
                    cross: DMatrix::zeros(m, c),
                    weight: 0.0,
                })
                .collect();
            for t in 1..z.len() {
                let phi = polynomial_features(z.row(t - 1), degree);
                let next = z.row(t);
                for (a, s) in stats.iter_mut().enumerate() {
                    let g = p.gamma(t)[a];
                    if g == 0.0 {
                        continue;
                    }
                    s.weight += g;
                    for i in 0..c {
                        let gi = g * phi[i];
                        for j in i..c {
                            s.gram[(i, j)] += gi * phi[j];
                        }
                        for r in 0..m {
                            s.cross[(r, i)] += gi * next[r];
                        }
                    }
                }
            }
            stats
        })
        .collect();

    let mut out = Vec::with_capacity(k);
    for a in 0..k {
        let mut gram = DMatrix::zeros(c, c);
        let mut cross = DMatrix::zeros(m, c);
        let mut weight = 0.0;
        for seq in &per_seq {
            gram += &seq[a].gram;
            cross += &seq[a].cross;
            weight += seq[a].weight;
        }
        if weight < MIN_WEIGHT {
            out.push(None);
            continue;
        }
        for i in 0..c {
            for j in 0..i {
                gram[(i, j)] = gram[(j, i)];
            }
        }
        out.push(Some(solve_ridged(&gram, &cross, a)?));
    }
    Ok(out)
}

/// `X G = R` for symmetric PSD `G`, via a ridged Cholesky factorization with
/// iterative refinement.
fn solve_ridged(gram: &DMatrix<f64>, cross: &DMatrix<f64>, state: usize) -> Result<DMatrix<f64>> {
    let c = gram.nrows();
    let lambda = 1e-9 * gram.trace() / c as f64;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(MsmError::SingularGram { state });
    }
    let mut ridged = gram.clone();
    for i in 0..c {
        ridged[(i, i)] += lambda;
    }
    let chol = ridged.cholesky().ok_or(MsmError::SingularGram { state })?;
    let diag = chol.l().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if (hi / lo).powi(2) > 1e12 * c as f64 {
        return Err(MsmError::SingularGram { state });
    }
    // X (G + λI) = R  ⇔  (G + λI) Xᵀ = Rᵀ
    let mut xt = chol.solve(&cross.transpose());
    for _ in 0..2 {
        let resid = cross.transpose() - gram * &xt;
        xt += chol.solve(&resid);
    }
    if xt.iter().any(|v| !v.is_finite()) {
        return Err(MsmError::SingularGram { state });
    }
    Ok(xt.transpose())
}

/// Turn regression coefficients into a transition mean of the same family as
/// `previous`.
fn regression_to_transition(coeff: DMatrix<f64>, previous: &TransitionFunction) -> Result<TransitionFunction> {
    let m = coeff.nrows();
    match previous {
        TransitionFunction::Linear(_) => {
            let bias: Vec<f64> = coeff.column(0).iter().cloned().collect();
            let weight = coeff.columns(1, m).into_owned();
            TransitionFunction::linear(weight, bias)
        }
        TransitionFunction::Polynomial(p) => TransitionFunction::polynomial(m, p.degree(), coeff),
        _ => Err(MsmError::InvalidParameter(
            "closed-form update applies to linear and polynomial means only".into(),
        )),
    }
}

/// Constrained MLE of the per-state noise covariances given the current
/// transition means.
pub fn m_step_noise(
    batch: &SequenceBatch,
    posteriors: &[PosteriorMarginals],
    model: &MsmModel,
    kind: CovarianceKind,
    floor: f64,
) -> Result<(Vec<Covariance>, Vec<usize>)> {
    check_shapes(model, batch, posteriors)?;
    let k = model.n_states();
    let m = model.dim();
    let per_seq: Vec<(Vec<DMatrix<f64>>, Vec<f64>)> = batch
        .sequences()
        .par_iter()
        .zip(posteriors)
        .map(|(z, p)| {
            let mut scatter = vec![DMatrix::zeros(m, m); k];
            let mut weight = vec![0.0; k];
            let mut mean = vec![0.0; m];
            for t in 1..z.len() {
                for a in 0..k {
                    let g = p.gamma(t)[a];
                    if g == 0.0 {
                        continue;
                    }
                    model.trans_mean()[a].eval_into(z.row(t - 1), &mut mean);
                    weight[a] += g;
                    let r: Vec<f64> = z.row(t).iter().zip(&mean).map(|(x, mu)| x - mu).collect();
                    let s = &mut scatter[a];
                    for i in 0..m {
                        for j in 0..m {
                            s[(i, j)] += g * r[i] * r[j];
                        }
                    }
                }
            }
            (scatter, weight)
        })
        .collect();
    let mut out = Vec::with_capacity(k);
    let mut kept = Vec::new();
    for a in 0..k {
        let mut s = DMatrix::zeros(m, m);
        let mut w = 0.0;
        for (sc, wt) in &per_seq {
            s += &sc[a];
            w += wt[a];
        }
        if w < MIN_WEIGHT {
            kept.push(a);
            out.push(model.trans_noise()[a].clone());
            continue;
        }
        s /= w;
        out.push(Covariance::from_scatter(&s, kind, floor)?);
    }
    Ok((out, kept))
}

// ---------------------------------------------------------------------------
// Network step
// ---------------------------------------------------------------------------

/// Gradient of [`transition_objective`] with respect to each state's
/// flattened transition parameters.
pub fn transition_gradient(
    model: &MsmModel,
    batch: &SequenceBatch,
    posteriors: &[PosteriorMarginals],
) -> Result<Vec<Vec<f64>>> {
    check_shapes(model, batch, posteriors)?;
    let k = model.n_states();
    let m = model.dim();
    let sizes: Vec<usize> = model.trans_mean().iter().map(|f| f.param_count()).collect();
    let per_seq: Vec<Vec<Vec<f64>>> = batch
        .sequences()
        .par_iter()
        .zip(posteriors)
        .map(|(z, p)| {
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let mut mean = vec![0.0; m];
            let mut resid = vec![0.0; m];
            let mut upstream = vec![0.0; m];
            for t in 1..z.len() {
                let (prev, next) = (z.row(t - 1), z.row(t));
                for a in 0..k {
                    let g = p.gamma(t)[a];
                    if g == 0.0 {
                        continue;
                    }
                    let f = &model.trans_mean()[a];
                    f.eval_into(prev, &mut mean);
                    for i in 0..m {
                        resid[i] = next[i] - mean[i];
                    }
                    model.trans_noise()[a].precision_times(&resid, &mut upstream);
                    f.accumulate_param_vjp(prev, &upstream, g, &mut grads[a]);
                }
            }
            grads
        })
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut total: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    for seq in &per_seq {
        for (acc, g) in total.iter_mut().zip(seq) {
            for (x, y) in acc.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    for g in &mut total {
        g.iter_mut().for_each(|x| *x *= scale);
    }
    Ok(total)
}

fn apply_step(model: &MsmModel, step: impl Fn(usize, &[f64]) -> Vec<f64>) -> Result<Vec<TransitionFunction>> {
    model
        .trans_mean()
        .iter()
        .enumerate()
        .map(|(a, f)| {
            let mut f = f.clone();
            let theta = step(a, &f.params());
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(MsmError::GradientFailure(format!(
                    "non-finite parameters for state {a}"
                )));
            }
            f.set_params(&theta)?;
            Ok(f)
        })
        .collect()
}

/// One gradient-ascent step `θ_k ← θ_k + η ∇_k` on the γ-weighted transition
/// term. A non-finite step is rejected and retried once at `η / 2`.
pub fn gem_step_networks(
    model: &MsmModel,
    batch: &SequenceBatch,
    posteriors: &[PosteriorMarginals],
    eta: f64,
) -> Result<Vec<TransitionFunction>> {
    if model.trans_mean().iter().any(|f| !f.kind().is_network()) {
        return Err(MsmError::InvalidParameter(
            "gradient step requires network transition means".into(),
        ));
    }
    let grads = transition_gradient(model, batch, posteriors)?;
    let step = |eta: f64| {
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MsmError::GradientFailure("non-finite gradient".into()));
        }
        apply_step(model, |a, theta| {
            theta.iter().zip(&grads[a]).map(|(t, g)| t + eta * g).collect()
        })
    };
    step(eta).or_else(|_| step(0.5 * eta))
}

/// Adam state for every state's parameter vector.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, model: &MsmModel, grads: &[Vec<f64>], lr: f64) -> Result<Vec<TransitionFunction>> {
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MsmError::GradientFailure("non-finite gradient".into()));
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (a, g) in grads.iter().enumerate() {
            for (i, gi) in g.iter().enumerate() {
                self.m[a][i] = ADAM_BETA1 * self.m[a][i] + (1.0 - ADAM_BETA1) * gi;
                self.v[a][i] = ADAM_BETA2 * self.v[a][i] + (1.0 - ADAM_BETA2) * gi * gi;
            }
        }
        let (mm, vv) = (&self.m, &self.v);
        apply_step(model, |a, theta| {
            theta
                .iter()
                .enumerate()
                .map(|(i, t)| t + lr * (mm[a][i] / c1) / ((vv[a][i] / c2).sqrt() + ADAM_EPS))
                .collect()
        })
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by a few Lloyd iterations.
fn kmeans(points: &[&[f64]], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    let n = points.len();
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[idx].to_vec());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().unwrap()));
        }
    }
    let m = points[0].len();
    for _ in 0..10 {
        let mut sums = vec![vec![0.0; m]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .unwrap();
            counts[best] += 1;
            for (s, x) in sums[best].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for a in 0..k {
            if counts[a] > 0 {
                centers[a] = sums[a].iter().map(|s| s / counts[a] as f64).collect();
            }
        }
    }
    centers
}

fn pooled_covariance(points: &[&[f64]], kind: CovarianceKind, floor: f64) -> Result<Covariance> {
    let m = points[0].len();
    let n = points.len() as f64;
    let mut mean = vec![0.0; m];
    for p in points {
        for (mu, x) in mean.iter_mut().zip(p.iter()) {
            *mu += x / n;
        }
    }
    let mut s = DMatrix::zeros(m, m);
    for p in points {
        for i in 0..m {
            for j in 0..m {
                s[(i, j)] += (p[i] - mean[i]) * (p[j] - mean[j]) / n;
            }
        }
    }
    Covariance::from_scatter(&s, kind, floor)
}

/// Starting point of one restart: uniform `π`, `Q` with 0.9 on the diagonal,
/// k-means++ initial means, random transition means and pooled covariances.
pub fn initialize(batch: &SequenceBatch, config: &FitConfig, seed: u64) -> Result<MsmModel> {
    config.validate()?;
    let k = config.n_states;
    let m = batch.dim();
    let pi = vec![1.0 / k as f64; k];
    let q = if k == 1 {
        DMatrix::from_element(1, 1, 1.0)
    } else {
        DMatrix::from_fn(k, k, |i, j| if i == j { 0.9 } else { 0.1 / (k - 1) as f64 })
    };
    let chain = MarkovChain::new(pi, q)?;

    let firsts: Vec<&[f64]> = batch.sequences().iter().map(|s| s.row(0)).collect();
    let all: Vec<&[f64]> = batch
        .sequences()
        .iter()
        .flat_map(|s| (0..s.len()).map(move |t| s.row(t)))
        .collect();
    // too few sequences to seed K clusters from first frames alone
    let seeds_from = if firsts.len() >= k { &firsts } else { &all };
    let centers = kmeans(seeds_from, k, derive_seed(seed, 1));
    let init_cov = pooled_covariance(seeds_from, config.covariance, config.cov_floor)?;
    let initial = centers
        .into_iter()
        .map(|c| Gaussian::new(c, init_cov.clone()))
        .collect::<Result<Vec<_>>>()?;

    let means = (0..k)
        .map(|a| {
            random_transition(
                config.transition_kind,
                m,
                derive_seed(seed, 100 + a as u64),
                &config.transition_options,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let noise_cov = pooled_covariance(&all, config.covariance, config.cov_floor)?;
    MsmModel::new_unprobed(chain, initial, means, vec![noise_cov; k])
}

// ---------------------------------------------------------------------------
// Fit loop
// ---------------------------------------------------------------------------

fn mean_of(posteriors: &[PosteriorMarginals]) -> f64 {
    posteriors.iter().map(|p| p.loglik).sum::<f64>() / posteriors.len() as f64
}

struct RestartRun {
    model: MsmModel,
    initial_loglik: f64,
    trace: Vec<f64>,
    lr_trace: Vec<f64>,
    reason: StopReason,
    kept: Vec<usize>,
}

fn exact_epoch(
    model: &MsmModel,
    batch: &SequenceBatch,
    posts: &[PosteriorMarginals],
    config: &FitConfig,
    kept: &mut Vec<usize>,
) -> Result<MsmModel> {
    let chain = m_step_chain(posts)?;
    let (initial, k1) = m_step_initial(batch, posts, model.initial(), config.covariance, config.cov_floor)?;
    let degree = match &model.trans_mean()[0] {
        TransitionFunction::Polynomial(p) => p.degree(),
        _ => 1,
    };
    let coeffs = m_step_polynomial(batch, posts, degree)?;
    let means = coeffs
        .into_iter()
        .zip(model.trans_mean())
        .enumerate()
        .map(|(a, (c, prev))| match c {
            Some(c) => regression_to_transition(c, prev),
            None => {
                kept.push(a);
                Ok(prev.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let with_means = MsmModel::new_unprobed(chain, initial, means, model.trans_noise().to_vec())?;
    let (noise, k2) = m_step_noise(batch, posts, &with_means, config.covariance, config.cov_floor)?;
    kept.extend(k1);
    kept.extend(k2);
    let (chain, initial, means, _) = with_means.into_parts();
    MsmModel::new_unprobed(chain, initial, means, noise)
}

#[allow(clippy::too_many_arguments)]
fn network_epoch(
    model: &MsmModel,
    batch: &SequenceBatch,
    posts: &[PosteriorMarginals],
    config: &FitConfig,
    adam: &mut Adam,
    lr: f64,
    epoch_seed: u64,
    kept: &mut Vec<usize>,
) -> Result<MsmModel> {
    // chain, initials and noise from full-batch statistics
    let chain = m_step_chain(posts)?;
    let (initial, k1) = m_step_initial(batch, posts, model.initial(), config.covariance, config.cov_floor)?;
    let (noise, k2) = m_step_noise(batch, posts, model, config.covariance, config.cov_floor)?;
    kept.extend(k1);
    kept.extend(k2);
    let mut current = MsmModel::new_unprobed(chain, initial, model.trans_mean().to_vec(), noise)?;

    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.shuffle(&mut rng_from_seed(epoch_seed));
    for chunk in order.chunks(config.batch_size) {
        let mini = batch.select(chunk);
        let mini_posts = forward_backward_batch(&current, &mini)?;
        let means = match config.optimizer {
            Optimizer::Adam => {
                let grads = transition_gradient(&current, &mini, &mini_posts)?;
                adam.step(&current, &grads, lr)?
            }
            Optimizer::Sgd => gem_step_networks(&current, &mini, &mini_posts, lr)?,
        };
        let (chain, initial, _, noise) = current.into_parts();
        current = MsmModel::new_unprobed(chain, initial, means, noise)?;
    }
    Ok(current)
}

fn run_restart(batch: &SequenceBatch, config: &FitConfig, seed: u64, init: MsmModel) -> Result<RestartRun> {
    let mut model = init;
    let network = model.trans_mean().iter().any(|f| f.kind().is_network());
    let mut posts = forward_backward_batch(&model, batch)?;
    let initial_loglik = mean_of(&posts);
    let mean_len = batch.total_steps() as f64 / batch.len() as f64;

    let mut trace = Vec::new();
    let mut lr_trace = Vec::new();
    let mut kept = Vec::new();
    let mut lr = config.learning_rate;
    let mut decays = 0;
    let mut flat_epochs = 0;
    let mut best = initial_loglik;
    let mut adam = Adam::new(&model.trans_mean().iter().map(|f| f.param_count()).collect::<Vec<_>>());
    let mut reason = StopReason::MaxEpochs;

    for epoch in 0..config.max_epochs {
        model = if network {
            network_epoch(
                &model,
                batch,
                &posts,
                config,
                &mut adam,
                lr,
                derive_seed(seed, 1000 + epoch as u64),
                &mut kept,
            )?
        } else {
            exact_epoch(&model, batch, &posts, config, &mut kept)?
        };
        posts = forward_backward_batch(&model, batch)?;
        let ll = mean_of(&posts);
        if !ll.is_finite() {
            return Err(MsmError::NonFinite(format!("log-likelihood at epoch {}", epoch + 1)));
        }
        trace.push(ll);
        lr_trace.push(if network { lr } else { 0.0 });

        // improvement over the best value so far; equals the per-epoch
        // change for monotone EM and ignores minibatch jitter for GEM
        if (ll - best) / mean_len < config.plateau_tol {
            flat_epochs += 1;
        } else {
            flat_epochs = 0;
        }
        best = best.max(ll);
        if flat_epochs >= config.patience {
            if network && decays < config.max_lr_decays {
                decays += 1;
                lr *= config.lr_decay;
                flat_epochs = 0;
            } else {
                reason = StopReason::Plateau;
                break;
            }
        }
    }
    kept.sort_unstable();
    kept.dedup();
    Ok(RestartRun {
        model,
        initial_loglik,
        trace,
        lr_trace,
        reason,
        kept,
    })
}

/// Fit an MSM by EM (linear/polynomial means) or GEM (network means), keeping
/// the restart with the highest final mean log-likelihood.
pub fn fit(batch: &SequenceBatch, config: &FitConfig) -> Result<FitReport> {
    config.validate()?;
    if batch.is_empty() {
        return Err(MsmError::InvalidParameter("empty batch".into()));
    }
    let mut best: Option<(usize, RestartRun)> = None;
    let mut summaries = Vec::with_capacity(config.restarts);
    for r in 0..config.restarts {
        let seed = derive_seed(config.seed, r as u64);
        let run = initialize(batch, config, seed)
            .and_then(|init| run_restart(batch, config, seed, init))
            .map_err(|e| MsmError::Estimation {
                restart: r,
                source: Box::new(e),
            })?;
        let final_ll = run.trace.last().copied().unwrap_or(run.initial_loglik);
        summaries.push(RestartSummary {
            seed,
            final_loglik: final_ll,
            epochs: run.trace.len(),
            reason: run.reason,
        });
        let better = match &best {
            None => true,
            Some((_, b)) => final_ll > b.trace.last().copied().unwrap_or(b.initial_loglik),
        };
        if better {
            best = Some((r, run));
        }
    }
    let (restart, run) = best.expect("at least one restart");
    Ok(FitReport {
        model: run.model,
        initial_loglik: run.initial_loglik,
        epochs: run.trace.len(),
        trace: run.trace,
        lr_trace: run.lr_trace,
        restart,
        reason: run.reason,
        restarts: summaries,
        kept_previous: run.kept,
    })
}

/// Single run of the fit loop from a given starting model. `config.restarts`
/// is ignored; the shuffling seed is `config.seed`.
pub fn fit_from(batch: &SequenceBatch, config: &FitConfig, init: &MsmModel) -> Result<FitReport> {
    config.validate()?;
    if batch.is_empty() {
        return Err(MsmError::InvalidParameter("empty batch".into()));
    }
    if init.dim() != batch.dim() {
        return Err(MsmError::dim("model dimension", batch.dim(), init.dim()));
    }
    let run = run_restart(batch, config, config.seed, init.clone()).map_err(|e| MsmError::Estimation {
        restart: 0,
        source: Box::new(e),
    })?;
    let summary = RestartSummary {
        seed: config.seed,
        final_loglik: run.trace.last().copied().unwrap_or(run.initial_loglik),
        epochs: run.trace.len(),
        reason: run.reason,
    };
    Ok(FitReport {
        model: run.model,
        initial_loglik: run.initial_loglik,
        epochs: run.trace.len(),
        trace: run.trace,
        lr_trace: run.lr_trace,
        restart: 0,
        reason: run.reason,
        restarts: vec![summary],
        kept_previous: run.kept,
    })
}
