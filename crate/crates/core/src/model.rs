//! Markov switching model parameters, densities, sampling and the factored
//! affine transform.
//!
//! A model with `K` states over `m`-dimensional continuous variables is
//!
//! ```text
//! s_1 ~ π,            s_t | s_{t-1} = l ~ Q[l, ·]
//! z_1 | s_1 = k ~ N(μ_k, Σ1_k)
//! z_t | z_{t-1}, s_t = k ~ N(m(z_{t-1}, k), Σ_k)
//! ```
//!
//! States are 0-based throughout the library; file formats use 1-based labels.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MsmError, Result};
use crate::gaussian::Covariance;
use crate::rng::rng_from_seed;
use crate::transitions::TransitionFunction;

/// Tolerance on row sums of `π` and `Q`.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Points in the unique-indexing probe set.
pub const PROBE_POINTS: usize = 256;

/// Minimum distinguishing difference for unique indexing.
pub const PROBE_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Discrete chain
// ---------------------------------------------------------------------------

/// Initial distribution `π` and row-stochastic transition matrix
/// `Q[l][k] = p(s_t = k | s_{t-1} = l)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain {
    pi: Vec<f64>,
    q: DMatrix<f64>,
}

fn check_stochastic(values: &[f64], path: &str) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() || v < 0.0 {
            return Err(MsmError::field(
                format!("{path}[{i}]"),
                format!("entry {v} is not a probability"),
            ));
        }
    }
    let s: f64 = values.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL * values.len().max(1) as f64 {
        return Err(MsmError::field(path, format!("sums to {s}, expected 1")));
    }
    Ok(())
}

impl MarkovChain {
    pub fn new(pi: Vec<f64>, q: DMatrix<f64>) -> Result<Self> {
        let k = pi.len();
        if k == 0 {
            return Err(MsmError::InvalidParameter("K must be >= 1".into()));
        }
        if q.nrows() != k || q.ncols() != k {
            return Err(MsmError::dim("transition matrix", k, q.nrows()));
        }
        check_stochastic(&pi, "chain.pi")?;
        for l in 0..k {
            let row: Vec<f64> = q.row(l).iter().cloned().collect();
            check_stochastic(&row, &format!("chain.Q[{l}]"))?;
        }
        Ok(MarkovChain { pi, q })
    }

    pub fn n_states(&self) -> usize {
        self.pi.len()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.n_states();
        // new state i is old state perm[i]
        let pi = (0..k).map(|i| self.pi[perm[i]]).collect();
        let q = DMatrix::from_fn(k, k, |i, j| self.q[(perm[i], perm[j])]);
        MarkovChain { pi, q }
    }
}

/// Stationary distribution of an irreducible row-stochastic `Q`.
///
/// Power iteration runs on the lazy chain `(I + Q)/2`, which shares the
/// stationary law of `Q` but is aperiodic, until `‖πQ − π‖₁ < 1e-12`. A
/// direct linear solve is used if iteration stalls on a slowly mixing chain.
pub fn stationary_distribution(q: &DMatrix<f64>) -> Result<Vec<f64>> {
    let k = q.nrows();
    if k == 0 || q.ncols() != k {
        return Err(MsmError::dim("transition matrix columns", k, q.ncols()));
    }
    for l in 0..k {
        let row: Vec<f64> = q.row(l).iter().cloned().collect();
        check_stochastic(&row, &format!("Q[{l}]"))?;
    }
    // reachability from every state
    for start in 0..k {
        let mut seen = vec![false; k];
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(l) = stack.pop() {
            for j in 0..k {
                if q[(l, j)] > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        let unreachable: Vec<usize> = (0..k).filter(|&j| !seen[j]).collect();
        if !unreachable.is_empty() {
            return Err(MsmError::ReducibleChain {
                from: start,
                unreachable,
            });
        }
    }
    let residual = |pi: &[f64]| -> f64 {
        (0..k)
            .map(|j| ((0..k).map(|l| pi[l] * q[(l, j)]).sum::<f64>() - pi[j]).abs())
            .sum()
    };
    let mut pi = vec![1.0 / k as f64; k];
    let mut next = vec![0.0; k];
    for _ in 0..200_000 {
        if residual(&pi) < 1e-12 {
            return Ok(pi);
        }
        for j in 0..k {
            next[j] = 0.5 * pi[j] + 0.5 * (0..k).map(|l| pi[l] * q[(l, j)]).sum::<f64>();
        }
        let s: f64 = next.iter().sum();
        for j in 0..k {
            pi[j] = next[j] / s;
        }
    }
    // (Qᵀ − I) π = 0 with the last equation replaced by Σπ = 1
    let mut a = q.transpose() - DMatrix::identity(k, k);
    let mut rhs = nalgebra::DVector::zeros(k);
    for j in 0..k {
        a[(k - 1, j)] = 1.0;
    }
    rhs[k - 1] = 1.0;
    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| MsmError::Singular("stationary system".into()))?;
    Ok(sol.iter().map(|v| v.max(0.0)).collect())
}

// ---------------------------------------------------------------------------
// Gaussian components
// ---------------------------------------------------------------------------

/// `N(mean, cov)` used for the per-state initial distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub cov: Covariance,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, cov: Covariance) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(MsmError::dim("initial mean", cov.dim(), mean.len()));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(MsmError::NonFinite("initial mean".into()));
        }
        Ok(Gaussian { mean, cov })
    }

    #[inline]
    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.cov.log_density(x, &self.mean)
    }
}

// ---------------------------------------------------------------------------
// Sequences
// ---------------------------------------------------------------------------

/// One trajectory `z_{1:T}` stored row-major (`T × m`).
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    dim: usize,
    data: Vec<f64>,
}

impl Sequence {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(MsmError::InvalidParameter("sequence dimension must be >= 1".into()));
        }
        if data.is_empty() || data.len() % dim != 0 {
            return Err(MsmError::InvalidParameter(format!(
                "sequence data of length {} is not a positive multiple of m = {dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(MsmError::NonFinite(format!(
                "sequence entry (t={}, i={})",
                i / dim + 1,
                i % dim + 1
            )));
        }
        Ok(Sequence { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(MsmError::dim("sequence row", dim, r.len()));
        }
        Self::new(dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn map_rows(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Sequence> {
        let rows: Vec<Vec<f64>> = (0..self.len()).map(|t| f(self.row(t))).collect();
        Sequence::from_rows(&rows)
    }
}

/// `B` sequences of `m`-dimensional values with optional ground-truth state
/// labels (0-based), used for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    dim: usize,
    sequences: Vec<Sequence>,
    labels: Option<Vec<Vec<usize>>>,
}

impl SequenceBatch {
    pub fn new(sequences: Vec<Sequence>, labels: Option<Vec<Vec<usize>>>) -> Result<Self> {
        let dim = sequences
            .first()
            .map(|s| s.dim())
            .ok_or_else(|| MsmError::InvalidParameter("empty sequence batch".into()))?;
        for s in &sequences {
            if s.dim() != dim {
                return Err(MsmError::dim("sequence dimension", dim, s.dim()));
            }
        }
        if let Some(l) = &labels {
            if l.len() != sequences.len() {
                return Err(MsmError::dim("label sequences", sequences.len(), l.len()));
            }
            for (s, lab) in sequences.iter().zip(l) {
                if s.len() != lab.len() {
                    return Err(MsmError::dim("label sequence length", s.len(), lab.len()));
                }
            }
        }
        Ok(SequenceBatch { dim, sequences, labels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.sequences
    }

    pub fn labels(&self) -> Option<&[Vec<usize>]> {
        self.labels.as_deref()
    }

    pub fn total_steps(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    /// Sub-batch of the given sequence indices (labels dropped).
    pub fn select(&self, idx: &[usize]) -> SequenceBatch {
        SequenceBatch {
            dim: self.dim,
            sequences: idx.iter().map(|&i| self.sequences[i].clone()).collect(),
            labels: None,
        }
    }

    pub fn without_labels(&self) -> SequenceBatch {
        SequenceBatch {
            dim: self.dim,
            sequences: self.sequences.clone(),
            labels: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct MsmModel {
    chain: MarkovChain,
    initial: Vec<Gaussian>,
    trans_mean: Vec<TransitionFunction>,
    trans_noise: Vec<Covariance>,
    dim: usize,
}

impl MsmModel {
    /// Validate shapes and the unique-indexing probe, then build the model.
    pub fn new(
        chain: MarkovChain,
        initial: Vec<Gaussian>,
        trans_mean: Vec<TransitionFunction>,
        trans_noise: Vec<Covariance>,
    ) -> Result<Self> {
        let model = Self::new_unprobed(chain, initial, trans_mean, trans_noise)?;
        model.check_unique_indexing()?;
        Ok(model)
    }

    /// Shape validation only. Used by estimation, where intermediate iterates
    /// are allowed to pass through near-degenerate configurations.
    pub(crate) fn new_unprobed(
        chain: MarkovChain,
        initial: Vec<Gaussian>,
        trans_mean: Vec<TransitionFunction>,
        trans_noise: Vec<Covariance>,
    ) -> Result<Self> {
        let k = chain.n_states();
        if initial.len() != k {
            return Err(MsmError::dim("initial components", k, initial.len()));
        }
        if trans_mean.len() != k {
            return Err(MsmError::dim("transition means", k, trans_mean.len()));
        }
        if trans_noise.len() != k {
            return Err(MsmError::dim("transition noises", k, trans_noise.len()));
        }
        let dim = initial[0].mean.len();
        for (i, g) in initial.iter().enumerate() {
            if g.mean.len() != dim {
                return Err(MsmError::dim(format!("initial[{i}] dimension"), dim, g.mean.len()));
            }
        }
        for (i, f) in trans_mean.iter().enumerate() {
            if f.dim() != dim {
                return Err(MsmError::dim(format!("trans_mean[{i}] dimension"), dim, f.dim()));
            }
        }
        for (i, c) in trans_noise.iter().enumerate() {
            if c.dim() != dim {
                return Err(MsmError::dim(format!("trans_noise[{i}] dimension"), dim, c.dim()));
            }
        }
        Ok(MsmModel {
            chain,
            initial,
            trans_mean,
            trans_noise,
            dim,
        })
    }

    pub fn n_states(&self) -> usize {
        self.chain.n_states()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn chain(&self) -> &MarkovChain {
        &self.chain
    }

    pub fn initial(&self) -> &[Gaussian] {
        &self.initial
    }

    pub fn trans_mean(&self) -> &[TransitionFunction] {
        &self.trans_mean
    }

    pub fn trans_noise(&self) -> &[Covariance] {
        &self.trans_noise
    }

    pub(crate) fn into_parts(self) -> (MarkovChain, Vec<Gaussian>, Vec<TransitionFunction>, Vec<Covariance>) {
        (self.chain, self.initial, self.trans_mean, self.trans_noise)
    }

    /// `log p(z_1 | s_1 = k)`.
    #[inline]
    pub fn log_initial(&self, k: usize, z1: &[f64]) -> f64 {
        self.initial[k].log_density(z1)
    }

    /// `log p(z_t | z_{t-1}, s_t = k)`.
    #[inline]
    pub fn log_transition(&self, k: usize, prev: &[f64], next: &[f64]) -> f64 {
        let m = self.dim;
        let mut buf = [0.0f64; 16];
        if m <= 16 {
            self.trans_mean[k].eval_into(prev, &mut buf[..m]);
            self.trans_noise[k].log_density(next, &buf[..m])
        } else {
            let mut mean = vec![0.0; m];
            self.trans_mean[k].eval_into(prev, &mut mean);
            self.trans_noise[k].log_density(next, &mean)
        }
    }

    /// Relabel states: new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let k = self.n_states();
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(MsmError::InvalidParameter(format!(
                "{perm:?} is not a permutation of 0..{k}"
            )));
        }
        Ok(MsmModel {
            chain: self.chain.permuted(perm),
            initial: perm.iter().map(|&p| self.initial[p].clone()).collect(),
            trans_mean: perm.iter().map(|&p| self.trans_mean[p].clone()).collect(),
            trans_noise: perm.iter().map(|&p| self.trans_noise[p].clone()).collect(),
            dim: self.dim,
        })
    }

    /// Unique-indexing heuristic: every pair of states must differ in its
    /// initial moments and, somewhere on a 256-point Sobol probe of
    /// `[-1,1]^m`, in its transition mean or noise covariance.
    pub fn check_unique_indexing(&self) -> Result<()> {
        let k = self.n_states();
        if k < 2 {
            return Ok(());
        }
        let max_abs_diff =
            |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) };
        let probe = probe_points(self.dim);
        let means: Vec<Vec<Vec<f64>>> = self
            .trans_mean
            .iter()
            .map(|f| {
                probe
                    .iter()
                    .map(|z| {
                        let mut out = vec![0.0; self.dim];
                        f.eval_into(z, &mut out);
                        out
                    })
                    .collect()
            })
            .collect();
        for a in 0..k {
            for b in a + 1..k {
                let (ga, gb) = (&self.initial[a], &self.initial[b]);
                let init_diff = max_abs_diff(&ga.mean, &gb.mean)
                    .max(max_abs_diff(ga.cov.matrix().as_slice(), gb.cov.matrix().as_slice()));
                if init_diff <= PROBE_TOL {
                    return Err(MsmError::UniqueIndexing {
                        a,
                        b,
                        part: "initial moments",
                    });
                }
                let noise_diff = max_abs_diff(
                    self.trans_noise[a].matrix().as_slice(),
                    self.trans_noise[b].matrix().as_slice(),
                );
                let mean_diff = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| max_abs_diff(x, y))
                    .fold(0.0, f64::max);
                if mean_diff.max(noise_diff) <= PROBE_TOL {
                    return Err(MsmError::UniqueIndexing {
                        a,
                        b,
                        part: "transition moments on the probe set",
                    });
                }
            }
        }
        Ok(())
    }
}

/// Sobol points on `[-1,1]^m` (first point is the origin).
pub fn probe_points(dim: usize) -> Vec<Vec<f64>> {
    (0..PROBE_POINTS as u32)
        .map(|i| {
            (0..dim as u32)
                .map(|d| {
                    let u = if d < 256 {
                        sobol_burley::sample(i, d, 0) as f64
                    } else {
                        // beyond the tabulated dimensions fall back to a scrambled stream
                        sobol_burley::sample(i, d % 256, d / 256) as f64
                    };
                    2.0 * u - 1.0
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Densities
// ---------------------------------------------------------------------------

fn check_sequence(model: &MsmModel, z: &Sequence) -> Result<()> {
    if z.dim() != model.dim() {
        return Err(MsmError::dim("sequence dimension", model.dim(), z.dim()));
    }
    Ok(())
}

/// `log p(s_{1:T}) + log p(z_{1:T} | s_{1:T})` for one state path.
pub fn log_joint(model: &MsmModel, z: &Sequence, states: &[usize]) -> Result<f64> {
    check_sequence(model, z)?;
    if states.len() != z.len() {
        return Err(MsmError::dim("state path length", z.len(), states.len()));
    }
    let k = model.n_states();
    if let Some(&bad) = states.iter().find(|&&s| s >= k) {
        return Err(MsmError::StateOutOfRange { index: bad, k });
    }
    let chain = model.chain();
    let mut lp = chain.pi()[states[0]].ln() + model.log_initial(states[0], z.row(0));
    for t in 1..z.len() {
        lp += chain.q()[(states[t - 1], states[t])].ln();
        lp += model.log_transition(states[t], z.row(t - 1), z.row(t));
    }
    Ok(lp)
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

fn draw_categorical(rng: &mut crate::rng::Rng, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        acc += p;
        if p > 0.0 {
            last = i;
        }
        if u < acc {
            return i;
        }
    }
    last
}

fn draw_gaussian(rng: &mut crate::rng::Rng, mean: &[f64], cov: &Covariance, out: &mut [f64]) {
    let m = mean.len();
    let eps: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
    match cov.kind() {
        crate::gaussian::CovarianceKind::Diagonal => {
            for i in 0..m {
                out[i] = mean[i] + cov.matrix()[(i, i)].sqrt() * eps[i];
            }
        }
        crate::gaussian::CovarianceKind::Full => {
            let l = cov
                .matrix()
                .clone()
                .cholesky()
                .expect("validated covariance is positive definite")
                .l();
            for i in 0..m {
                out[i] = mean[i] + (0..=i).map(|j| l[(i, j)] * eps[j]).sum::<f64>();
            }
        }
    }
}

/// Draw a length-`len` trajectory and its 0-based state path. Deterministic
/// given the seed.
pub fn sample_sequence(model: &MsmModel, len: usize, seed: u64) -> Result<(Sequence, Vec<usize>)> {
    if len == 0 {
        return Err(MsmError::InvalidParameter("sequence length must be >= 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let m = model.dim();
    let chain = model.chain();
    let mut states = Vec::with_capacity(len);
    let mut data = vec![0.0; len * m];
    let mut s = draw_categorical(&mut rng, chain.pi().iter().cloned());
    states.push(s);
    let g = &model.initial()[s];
    draw_gaussian(&mut rng, &g.mean, &g.cov, &mut data[..m]);
    let mut mean = vec![0.0; m];
    for t in 1..len {
        s = draw_categorical(&mut rng, chain.q().row(s).iter().cloned());
        states.push(s);
        let (head, tail) = data.split_at_mut(t * m);
        model.trans_mean()[s].eval_into(&head[(t - 1) * m..], &mut mean);
        draw_gaussian(&mut rng, &mean, &model.trans_noise()[s], &mut tail[..m]);
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(MsmError::NonFinite("sampled trajectory diverged".into()));
    }
    Ok((Sequence { dim: m, data }, states))
}

// ---------------------------------------------------------------------------
// Affine transform
// ---------------------------------------------------------------------------

/// Push the model through `z' = A z + b` applied at every time step.
pub fn transform_model(model: &MsmModel, a: &DMatrix<f64>, b: &[f64]) -> Result<MsmModel> {
    let m = model.dim();
    if a.nrows() != m || a.ncols() != m {
        return Err(MsmError::dim("affine matrix", m, a.nrows()));
    }
    if b.len() != m {
        return Err(MsmError::dim("affine offset", m, b.len()));
    }
    let det = a.determinant();
    if !(det.abs() > 1e-12) {
        return Err(MsmError::Singular(format!("affine map has |det A| = {:e}", det.abs())));
    }
    let initial = model
        .initial()
        .iter()
        .map(|g| {
            let mean: Vec<f64> = (0..m)
                .map(|i| b[i] + (0..m).map(|j| a[(i, j)] * g.mean[j]).sum::<f64>())
                .collect();
            Gaussian::new(mean, g.cov.transformed(a)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let noise = model
        .trans_noise()
        .iter()
        .map(|c| c.transformed(a))
        .collect::<Result<Vec<_>>>()?;
    let means = model
        .trans_mean()
        .iter()
        .map(|f| TransitionFunction::affine_wrapped(f.clone(), a.clone(), b.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    MsmModel::new_unprobed(model.chain().clone(), initial, means, noise)
}
