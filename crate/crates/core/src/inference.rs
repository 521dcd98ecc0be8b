//! Exact discrete-state inference given a continuous trajectory.
//!
//! All recursions run in log space with log-sum-exp, so sequences of a few
//! hundred steps at small noise scales stay finite.

use rayon::prelude::*;

use crate::error::{MsmError, Result};
use crate::model::{log_joint, MsmModel, Sequence, SequenceBatch};

/// Largest number of state paths [`brute_force_loglik`] will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 1_000_000;

#[inline]
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Smoothed state posteriors of one sequence.
///
/// `gamma[t][k] = p(s_t = k | z_{1:T})`; `xi[t][k][l] = p(s_t = k, s_{t-1} = l | z_{1:T})`
/// for `t = 2..T`, stored as `T − 1` slices.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMarginals {
    n_states: usize,
    len: usize,
    gamma: Vec<f64>,
    xi: Vec<f64>,
    pub loglik: f64,
}

impl PosteriorMarginals {
    /// Assemble from explicit arrays (`gamma`: `T×K`, `xi`: `(T−1)×K×K`).
    pub fn from_parts(n_states: usize, gamma: Vec<f64>, xi: Vec<f64>, loglik: f64) -> Result<Self> {
        if n_states == 0 || gamma.is_empty() || gamma.len() % n_states != 0 {
            return Err(MsmError::InvalidParameter("gamma shape".into()));
        }
        let len = gamma.len() / n_states;
        let expected = (len - 1) * n_states * n_states;
        if xi.len() != expected {
            return Err(MsmError::dim("xi entries", expected, xi.len()));
        }
        Ok(PosteriorMarginals {
            n_states,
            len,
            gamma,
            xi,
            loglik,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Row `t` (0-based) of γ.
    #[inline]
    pub fn gamma(&self, t: usize) -> &[f64] {
        &self.gamma[t * self.n_states..(t + 1) * self.n_states]
    }

    /// ξ for the transition into 0-based step `t ≥ 1`, indexed `[k * K + l]`.
    #[inline]
    pub fn xi(&self, t: usize) -> &[f64] {
        let kk = self.n_states * self.n_states;
        &self.xi[(t - 1) * kk..t * kk]
    }

    /// Largest violation of the row-sum and marginalization identities.
    pub fn identity_violation(&self) -> f64 {
        let k = self.n_states;
        let mut worst: f64 = 0.0;
        for t in 0..self.len {
            worst = worst.max((self.gamma(t).iter().sum::<f64>() - 1.0).abs());
        }
        for t in 1..self.len {
            let xi = self.xi(t);
            for a in 0..k {
                let over_l: f64 = (0..k).map(|l| xi[a * k + l]).sum();
                worst = worst.max((over_l - self.gamma(t)[a]).abs());
                let over_k: f64 = (0..k).map(|kk| xi[kk * k + a]).sum();
                worst = worst.max((over_k - self.gamma(t - 1)[a]).abs());
            }
        }
        worst
    }

    /// Posterior with states relabeled so that new state `i` is old `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.n_states;
        let mut gamma = vec![0.0; self.gamma.len()];
        for t in 0..self.len {
            for i in 0..k {
                gamma[t * k + i] = self.gamma[t * k + perm[i]];
            }
        }
        let mut xi = vec![0.0; self.xi.len()];
        for t in 1..self.len {
            let src = self.xi(t);
            let base = (t - 1) * k * k;
            for a in 0..k {
                for b in 0..k {
                    xi[base + a * k + b] = src[perm[a] * k + perm[b]];
                }
            }
        }
        PosteriorMarginals {
            n_states: k,
            len: self.len,
            gamma,
            xi,
            loglik: self.loglik,
        }
    }
}

fn check_sequence(model: &MsmModel, z: &Sequence) -> Result<()> {
    if z.dim() != model.dim() {
        return Err(MsmError::dim("sequence dimension", model.dim(), z.dim()));
    }
    Ok(())
}

/// `T × K` table of per-step log emission terms: `log p(z_1 | k)` at `t = 0`
/// and `log p(z_t | z_{t-1}, k)` after.
fn log_emissions(model: &MsmModel, z: &Sequence) -> Vec<f64> {
    let k = model.n_states();
    let len = z.len();
    let mut out = vec![0.0; len * k];
    for s in 0..k {
        out[s] = model.log_initial(s, z.row(0));
    }
    for t in 1..len {
        for s in 0..k {
            out[t * k + s] = model.log_transition(s, z.row(t - 1), z.row(t));
        }
    }
    out
}

fn log_chain(model: &MsmModel) -> (Vec<f64>, Vec<f64>) {
    let k = model.n_states();
    let log_pi = model.chain().pi().iter().map(|p| p.ln()).collect();
    let q = model.chain().q();
    let mut log_q = vec![0.0; k * k];
    for l in 0..k {
        for j in 0..k {
            log_q[l * k + j] = q[(l, j)].ln();
        }
    }
    (log_pi, log_q)
}

/// Log forward messages `log α_{t,k} = log p(z_{1:t}, s_t = k)`.
fn forward(log_pi: &[f64], log_q: &[f64], log_b: &[f64], k: usize, len: usize) -> Vec<f64> {
    let mut alpha = vec![0.0; len * k];
    for s in 0..k {
        alpha[s] = log_pi[s] + log_b[s];
    }
    let mut scratch = vec![0.0; k];
    for t in 1..len {
        for s in 0..k {
            for l in 0..k {
                scratch[l] = alpha[(t - 1) * k + l] + log_q[l * k + s];
            }
            alpha[t * k + s] = log_b[t * k + s] + log_sum_exp(&scratch);
        }
    }
    alpha
}

/// `log p(z_{1:T})` by the forward recursion.
pub fn forward_loglik(model: &MsmModel, z: &Sequence) -> Result<f64> {
    check_sequence(model, z)?;
    let k = model.n_states();
    let len = z.len();
    let (log_pi, log_q) = log_chain(model);
    let log_b = log_emissions(model, z);
    let alpha = forward(&log_pi, &log_q, &log_b, k, len);
    Ok(log_sum_exp(&alpha[(len - 1) * k..]))
}

/// Smoothed posteriors by forward–backward.
pub fn forward_backward(model: &MsmModel, z: &Sequence) -> Result<PosteriorMarginals> {
    check_sequence(model, z)?;
    let k = model.n_states();
    let len = z.len();
    let (log_pi, log_q) = log_chain(model);
    let log_b = log_emissions(model, z);
    let alpha = forward(&log_pi, &log_q, &log_b, k, len);
    let loglik = log_sum_exp(&alpha[(len - 1) * k..]);
    if !loglik.is_finite() {
        return Err(MsmError::NonFinite("sequence log-likelihood".into()));
    }

    let mut beta = vec![0.0; len * k];
    let mut scratch = vec![0.0; k];
    for t in (0..len.saturating_sub(1)).rev() {
        for l in 0..k {
            for s in 0..k {
                scratch[s] = log_q[l * k + s] + log_b[(t + 1) * k + s] + beta[(t + 1) * k + s];
            }
            beta[t * k + l] = log_sum_exp(&scratch);
        }
    }

    let mut gamma = vec![0.0; len * k];
    for t in 0..len {
        let row = &mut gamma[t * k..(t + 1) * k];
        for s in 0..k {
            row[s] = (alpha[t * k + s] + beta[t * k + s] - loglik).exp();
        }
        // remove O(ε) drift from the exponentials
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }

    let mut xi = vec![0.0; len.saturating_sub(1) * k * k];
    for t in 1..len {
        let slice = &mut xi[(t - 1) * k * k..t * k * k];
        for s in 0..k {
            let tail = log_b[t * k + s] + beta[t * k + s] - loglik;
            for l in 0..k {
                slice[s * k + l] = (alpha[(t - 1) * k + l] + log_q[l * k + s] + tail).exp();
            }
        }
        let sum: f64 = slice.iter().sum();
        slice.iter_mut().for_each(|v| *v /= sum);
    }

    Ok(PosteriorMarginals {
        n_states: k,
        len,
        gamma,
        xi,
        loglik,
    })
}

/// Forward–backward over a batch, parallel over sequences, results in batch
/// order.
pub fn forward_backward_batch(model: &MsmModel, batch: &SequenceBatch) -> Result<Vec<PosteriorMarginals>> {
    batch
        .sequences()
        .par_iter()
        .map(|z| forward_backward(model, z))
        .collect()
}

/// Mean per-sequence log-likelihood, reduced in batch order.
pub fn mean_loglik(model: &MsmModel, batch: &SequenceBatch) -> Result<f64> {
    let lls: Vec<f64> = batch
        .sequences()
        .par_iter()
        .map(|z| forward_loglik(model, z))
        .collect::<Result<_>>()?;
    Ok(lls.iter().sum::<f64>() / lls.len() as f64)
}

/// Exact `log p(z_{1:T})` by enumerating all `K^T` state paths.
pub fn brute_force_loglik(model: &MsmModel, z: &Sequence) -> Result<f64> {
    check_sequence(model, z)?;
    let k = model.n_states();
    let len = z.len();
    let paths = (k as f64).powi(len as i32);
    if paths > BRUTE_FORCE_LIMIT as f64 {
        return Err(MsmError::TooManyPaths {
            paths,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut terms = Vec::with_capacity(paths as usize);
    let mut path = vec![0usize; len];
    loop {
        terms.push(log_joint(model, z, &path)?);
        // odometer increment
        let mut i = 0;
        while i < len {
            path[i] += 1;
            if path[i] < k {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == len {
            break;
        }
    }
    Ok(log_sum_exp(&terms))
}

/// Per-step MAP state from γ; ties go to the smaller index.
pub fn segment(posterior: &PosteriorMarginals) -> Vec<usize> {
    (0..posterior.len())
        .map(|t| {
            let row = posterior.gamma(t);
            let mut best = 0;
            for (s, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = s;
                }
            }
            best
        })
        .collect()
}
