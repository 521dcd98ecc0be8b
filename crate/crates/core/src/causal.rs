//! Regime-dependent causal graphs from averaged absolute Jacobians.
//!
//! `edges[k][(i, j)]` means `z_{t-1, j} → z_{t, i}` in regime `k`.

use std::io::{BufWriter, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{MsmError, Result};
use crate::inference::{forward_backward_batch, segment, PosteriorMarginals};
use crate::io::fmt_real;
use crate::metrics::{match_costs, MatchMode};
use crate::model::{MsmModel, SequenceBatch};

pub const DEFAULT_THRESHOLD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct RegimeGraph {
    /// Mean `|∂m_i/∂z_j|` per regime.
    pub weights: Vec<DMatrix<f64>>,
    pub edges: Vec<DMatrix<bool>>,
    /// Samples behind each regime's average; 0 marks an empty regime.
    pub counts: Vec<usize>,
    pub threshold: f64,
}

impl RegimeGraph {
    pub fn n_regimes(&self) -> usize {
        self.weights.len()
    }

    pub fn edge_count(&self, k: usize) -> usize {
        self.edges[k].iter().filter(|e| **e).count()
    }
}

/// Jacobian inputs `z_{t-1}` grouped by the MAP state at step `t` (`t ≥ 2`).
pub fn classify_from_posteriors(
    batch: &SequenceBatch,
    posteriors: &[PosteriorMarginals],
) -> Result<Vec<Vec<Vec<f64>>>> {
    if posteriors.len() != batch.len() {
        return Err(MsmError::dim("posteriors", batch.len(), posteriors.len()));
    }
    let k = posteriors.first().map(|p| p.n_states()).unwrap_or(0);
    let mut sets = vec![Vec::new(); k];
    for (z, p) in batch.sequences().iter().zip(posteriors) {
        if p.len() != z.len() {
            return Err(MsmError::dim("posterior length", z.len(), p.len()));
        }
        let path = segment(p);
        for t in 1..z.len() {
            sets[path[t]].push(z.row(t - 1).to_vec());
        }
    }
    Ok(sets)
}

/// [`classify_from_posteriors`] with posteriors from `model`.
pub fn classify_samples(model: &MsmModel, batch: &SequenceBatch) -> Result<Vec<Vec<Vec<f64>>>> {
    classify_from_posteriors(batch, &forward_backward_batch(model, batch)?)
}

/// Average absolute Jacobian per regime and its thresholded adjacency.
pub fn regime_graphs(model: &MsmModel, sets: &[Vec<Vec<f64>>], threshold: f64) -> Result<RegimeGraph> {
    let k = model.n_states();
    let m = model.dim();
    if sets.len() != k {
        return Err(MsmError::dim("sample sets", k, sets.len()));
    }
    if !(threshold >= 0.0) {
        return Err(MsmError::InvalidParameter("threshold must be >= 0".into()));
    }
    let mut weights = Vec::with_capacity(k);
    let mut counts = Vec::with_capacity(k);
    for (a, set) in sets.iter().enumerate() {
        let f = &model.trans_mean()[a];
        let partial: Vec<DMatrix<f64>> = set
            .par_chunks(1024)
            .map(|chunk| {
                let mut acc = DMatrix::zeros(m, m);
                for z in chunk {
                    acc += f.jacobian(z).abs();
                }
                acc
            })
            .collect();
        let mut w = DMatrix::zeros(m, m);
        for p in &partial {
            w += p;
        }
        if !set.is_empty() {
            w /= set.len() as f64;
        }
        weights.push(w);
        counts.push(set.len());
    }
    let edges = weights.iter().map(|w| w.map(|v| v > threshold)).collect();
    Ok(RegimeGraph {
        weights,
        edges,
        counts,
        threshold,
    })
}

fn edge_f1(truth: &DMatrix<bool>, est: &DMatrix<bool>) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (t, e) in truth.iter().zip(est.iter()) {
        match (*t, *e) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0.0 {
        1.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

/// Mean per-regime edge F1 under the best state permutation; `perm[i]` is
/// the estimated regime matched to true regime `i`.
pub fn graph_f1(truth: &[DMatrix<bool>], est: &[DMatrix<bool>], mode: MatchMode) -> Result<(f64, Vec<usize>)> {
    let k = truth.len();
    if est.len() != k {
        return Err(MsmError::dim("number of regimes", k, est.len()));
    }
    for g in truth.iter().chain(est) {
        if g.shape() != truth[0].shape() {
            return Err(MsmError::dim("graph size", truth[0].nrows(), g.nrows()));
        }
    }
    if k == 0 {
        return Ok((1.0, Vec::new()));
    }
    let scores = DMatrix::from_fn(k, k, |i, j| edge_f1(&truth[i], &est[j]));
    let perm = match_costs(&-scores.clone(), mode.method(k));
    let mean = (0..k).map(|i| scores[(i, perm[i])]).sum::<f64>() / k as f64;
    Ok((mean, perm))
}

/// CSV `regime,i,j,weight,edge` with 1-based indices.
pub fn write_graph_csv<W: Write>(out: W, graph: &RegimeGraph) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "regime,i,j,weight,edge")?;
    for (k, (wt, e)) in graph.weights.iter().zip(&graph.edges).enumerate() {
        for i in 0..wt.nrows() {
            for j in 0..wt.ncols() {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    k + 1,
                    i + 1,
                    j + 1,
                    fmt_real(wt[(i, j)]),
                    e[(i, j)] as u8
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// DOT digraph of one regime; edges run from lagged input to output.
pub fn graph_dot(graph: &RegimeGraph, k: usize) -> String {
    let w = &graph.weights[k];
    let m = w.nrows();
    let mut s = format!("digraph regime_{} {{\n", k + 1);
    for i in 0..m {
        s.push_str(&format!("  z{} [label=\"z{}\"];\n", i + 1, i + 1));
    }
    for i in 0..m {
        for j in 0..m {
            if graph.edges[k][(i, j)] {
                s.push_str(&format!("  z{} -> z{} [label=\"{:.3}\"];\n", j + 1, i + 1, w[(i, j)]));
            }
        }
    }
    s.push_str("}\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_edge_f1() {
        let truth = DMatrix::from_row_slice(2, 2, &[true, false, true, false]);
        let est = DMatrix::from_row_slice(2, 2, &[true, true, false, false]);
        assert_eq!(edge_f1(&truth, &est), 0.5);
    }

    #[test]
    fn relabeled_graphs_score_one() {
        let a = DMatrix::from_row_slice(2, 2, &[true, false, true, false]);
        let b = DMatrix::from_row_slice(2, 2, &[false, true, false, true]);
        let (f1, perm) = graph_f1(&[a.clone(), b.clone()], &[b, a], MatchMode::Auto).unwrap();
        assert_eq!(f1, 1.0);
        assert_eq!(perm, vec![1, 0]);
    }
}
