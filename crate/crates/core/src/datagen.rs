//! Synthetic ground truths and datasets.
//!
//! `Q` keeps the state with probability `p_stay` and otherwise moves to the
//! next state cyclically; `π` is its stationary distribution.

use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal::regime_graphs;
use crate::error::{MsmError, Result};
use crate::gaussian::{Covariance, CovarianceKind};
use crate::model::{
    sample_sequence, stationary_distribution, Gaussian, MarkovChain, MsmModel, Sequence, SequenceBatch,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::transitions::{random_transition, TransitionFunction, TransitionKind, TransitionOptions, LEAKY_SLOPE};
use rand_distr::{Distribution, StandardNormal};

pub const MAX_ATTEMPTS: usize = 10;

/// Coordinates must stay within `±BOUND` ...
pub const BOUND: f64 = 3.0;
/// ... for at least this fraction of pilot samples.
pub const BOUND_MASS: f64 = 0.999;
pub const PILOT_SAMPLES: usize = 100_000;

const DATA_STREAM: u64 = 0xDA7A;
const EMISSION_STREAM: u64 = 0xE417;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmissionSpec {
    pub hidden: usize,
    pub output_dim: usize,
    pub slope: f64,
    /// Add `z` to the first `m` outputs.
    pub skip: bool,
}

impl Default for EmissionSpec {
    fn default() -> Self {
        EmissionSpec {
            hidden: 8,
            output_dim: 2,
            slope: LEAKY_SLOPE,
            skip: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(rename = "K")]
    pub k: usize,
    pub m: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub transition_kind: TransitionKind,
    pub transition_options: TransitionOptions,
    pub p_stay: f64,
    pub init_mean_scale: f64,
    pub init_cov_scale: f64,
    pub noise_scale: f64,
    /// Multiplier on the first-layer weights and biases of network means.
    pub first_layer_gain: f64,
    /// Locally connected ground truths are redrawn until every unmasked
    /// averaged |Jacobian| entry (over pilot samples of its regime) reaches
    /// this value. 0 disables the check.
    pub min_edge_weight: f64,
    pub seed: u64,
    pub emission: Option<EmissionSpec>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            k: 3,
            m: 2,
            t: 200,
            n: 10_000,
            transition_kind: TransitionKind::Mlp,
            transition_options: TransitionOptions::default(),
            p_stay: 0.9,
            init_mean_scale: 0.7,
            init_cov_scale: 0.1,
            noise_scale: 0.05,
            first_layer_gain: 1.0,
            min_edge_weight: 0.0,
            seed: 0,
            emission: None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(MsmError::InvalidParameter(s));
        if self.k == 0 || self.m == 0 || self.t == 0 {
            return bad("K, m and T must be >= 1".into());
        }
        if !(self.p_stay > 0.0 && self.p_stay < 1.0) && self.k > 1 {
            return bad(format!("p_stay = {} outside (0, 1)", self.p_stay));
        }
        for (name, v) in [
            ("init_mean_scale", self.init_mean_scale),
            ("init_cov_scale", self.init_cov_scale),
            ("noise_scale", self.noise_scale),
            ("first_layer_gain", self.first_layer_gain),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.min_edge_weight >= 0.0) {
            return bad("min_edge_weight must be >= 0".into());
        }
        if let Some(e) = &self.emission {
            if e.output_dim < self.m {
                return bad(format!(
                    "emission output dimension {} below latent dimension {}",
                    e.output_dim, self.m
                ));
            }
            if e.hidden == 0 {
                return bad("emission hidden width must be >= 1".into());
            }
        }
        Ok(())
    }

    /// Transition options with the interaction count capped at `m`.
    fn effective_options(&self) -> TransitionOptions {
        let mut o = self.transition_options.clone();
        o.interactions = o.interactions.min(self.m);
        o
    }
}

/// `p_stay` on the diagonal, `1 − p_stay` on the cyclic next state.
pub fn cyclic_transition_matrix(k: usize, p_stay: f64) -> DMatrix<f64> {
    if k == 1 {
        return DMatrix::from_element(1, 1, 1.0);
    }
    DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            p_stay
        } else if j == (i + 1) % k {
            1.0 - p_stay
        } else {
            0.0
        }
    })
}

fn draw_model(spec: &SynthSpec, seed: u64) -> Result<MsmModel> {
    let q = cyclic_transition_matrix(spec.k, spec.p_stay);
    let pi = stationary_distribution(&q)?;
    let chain = MarkovChain::new(pi, q)?;
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let init_cov = Covariance::isotropic(spec.m, spec.init_cov_scale * spec.init_cov_scale)?;
    let initial = (0..spec.k)
        .map(|_| {
            let mean = (0..spec.m)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    spec.init_mean_scale * x
                })
                .collect();
            Gaussian::new(mean, init_cov.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let options = spec.effective_options();
    let means = (0..spec.k)
        .map(|a| {
            let mut f = random_transition(spec.transition_kind, spec.m, derive_seed(seed, 10 + a as u64), &options)?;
            scale_first_layer(&mut f, spec.first_layer_gain);
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    let noise = Covariance::isotropic(spec.m, spec.noise_scale * spec.noise_scale)?;
    MsmModel::new(chain, initial, means, vec![noise; spec.k])
}

/// Random model with generic parameters: `π` and the rows of `Q` from
/// uniform weights, initial means `N(0, 1)`, covariances of the requested
/// kind with variances in `[0.05, 0.5]` (initial) and `[0.01, 0.1]` (noise).
/// Intended for property tests and benchmarks.
pub fn random_model(
    k: usize,
    m: usize,
    kind: TransitionKind,
    options: &TransitionOptions,
    cov: CovarianceKind,
    seed: u64,
) -> Result<MsmModel> {
    if k == 0 || m == 0 {
        return Err(MsmError::InvalidParameter("K and m must be >= 1".into()));
    }
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let simplex = |n: usize, rng: &mut crate::rng::Rng| -> Vec<f64> {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter().map(|v| v / s).collect()
    };
    let pi = simplex(k, &mut rng);
    let rows: Vec<f64> = (0..k).flat_map(|_| simplex(k, &mut rng)).collect();
    let chain = MarkovChain::new(pi, DMatrix::from_row_slice(k, k, &rows))?;
    let draw_cov = |lo: f64, hi: f64, rng: &mut crate::rng::Rng| -> Result<Covariance> {
        match cov {
            CovarianceKind::Diagonal => {
                Covariance::diagonal(&(0..m).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>())
            }
            CovarianceKind::Full => {
                let l = DMatrix::from_fn(m, m, |i, j| {
                    if j < i {
                        rng.random_range(-0.5..0.5) * lo.sqrt()
                    } else if i == j {
                        rng.random_range(lo..hi).sqrt()
                    } else {
                        0.0
                    }
                });
                Covariance::full(&l * l.transpose())
            }
        }
    };
    let mut initial = Vec::with_capacity(k);
    let mut noise = Vec::with_capacity(k);
    for _ in 0..k {
        let mean = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
        initial.push(Gaussian::new(mean, draw_cov(0.05, 0.5, &mut rng)?)?);
        noise.push(draw_cov(0.01, 0.1, &mut rng)?);
    }
    let means = (0..k)
        .map(|a| random_transition(kind, m, derive_seed(seed, 10 + a as u64), options))
        .collect::<Result<Vec<_>>>()?;
    MsmModel::new(chain, initial, means, noise)
}

fn scale_first_layer(f: &mut TransitionFunction, gain: f64) {
    if gain == 1.0 {
        return;
    }
    match f {
        TransitionFunction::Mlp(n) => {
            n.w1.iter_mut().chain(n.b1.iter_mut()).for_each(|v| *v *= gain);
        }
        TransitionFunction::LocallyConnected(n) => {
            n.w1.iter_mut().chain(n.b1.iter_mut()).for_each(|v| *v *= gain);
        }
        _ => {}
    }
}

fn pilot(model: &MsmModel, spec: &SynthSpec, seed: u64) -> Result<Vec<(Sequence, Vec<usize>)>> {
    let n_seq = PILOT_SAMPLES.div_ceil(spec.t);
    (0..n_seq)
        .into_par_iter()
        .map(|b| sample_sequence(model, spec.t, derive_seed(seed, b as u64)))
        .collect()
}

/// Fraction of pilot coordinates inside `±BOUND`, worst coordinate.
fn bounded_mass(pilot: &[(Sequence, Vec<usize>)], m: usize) -> f64 {
    let mut inside = vec![0usize; m];
    let mut total = 0usize;
    for (s, _) in pilot {
        for row in s.data().chunks(m) {
            total += 1;
            for (c, v) in inside.iter_mut().zip(row) {
                if v.is_finite() && v.abs() <= BOUND {
                    *c += 1;
                }
            }
        }
    }
    inside.iter().map(|&c| c as f64 / total as f64).fold(1.0, f64::min)
}

/// Smallest unmasked averaged |Jacobian| entry, inputs grouped by the true
/// regime of each step.
fn weakest_edge(model: &MsmModel, pilot: &[(Sequence, Vec<usize>)]) -> Result<f64> {
    let mut sets = vec![Vec::new(); model.n_states()];
    for (s, labels) in pilot {
        for t in 1..s.len() {
            sets[labels[t]].push(s.row(t - 1).to_vec());
        }
    }
    let graph = regime_graphs(model, &sets, 0.0)?;
    let mut weakest = f64::INFINITY;
    for (f, w) in model.trans_mean().iter().zip(&graph.weights) {
        if let Some(mask) = f.mask() {
            for (mk, wk) in mask.iter().zip(w.iter()) {
                if *mk > 0.0 {
                    weakest = weakest.min(*wk);
                }
            }
        }
    }
    Ok(weakest)
}

/// Ground-truth model for `spec`, redrawn (at most [`MAX_ATTEMPTS`] times)
/// until it passes the unique-indexing probe and the boundedness pilot.
pub fn make_ground_truth(spec: &SynthSpec) -> Result<MsmModel> {
    spec.validate()?;
    let mut last = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        let seed = derive_seed(spec.seed, attempt as u64);
        let model = match draw_model(spec, seed) {
            Ok(m) => m,
            Err(e @ MsmError::UniqueIndexing { .. }) => {
                last = e.to_string();
                continue;
            }
            Err(e) => return Err(e),
        };
        let runs = match pilot(&model, spec, derive_seed(seed, 2)) {
            Ok(r) => r,
            Err(e @ MsmError::NonFinite(_)) => {
                last = e.to_string();
                continue;
            }
            Err(e) => return Err(e),
        };
        let mass = bounded_mass(&runs, spec.m);
        if mass < BOUND_MASS {
            last = format!("only {mass:.4} of pilot coordinates within ±{BOUND}");
            continue;
        }
        if spec.min_edge_weight > 0.0 {
            let weakest = weakest_edge(&model, &runs)?;
            if weakest < spec.min_edge_weight {
                last = format!("weakest causal edge {weakest:.4} below {}", spec.min_edge_weight);
                continue;
            }
        }
        return Ok(model);
    }
    Err(MsmError::GenerationFailed {
        attempts: MAX_ATTEMPTS,
        reason: last,
    })
}

/// `N` labelled sequences of length `T`, one seed stream per sequence.
pub fn make_dataset(model: &MsmModel, spec: &SynthSpec) -> Result<SequenceBatch> {
    spec.validate()?;
    if spec.n == 0 {
        return Err(MsmError::InvalidParameter("N must be >= 1".into()));
    }
    let base = derive_seed(spec.seed, DATA_STREAM);
    let drawn: Vec<(Sequence, Vec<usize>)> = (0..spec.n)
        .into_par_iter()
        .map(|b| sample_sequence(model, spec.t, derive_seed(base, b as u64)))
        .collect::<Result<Vec<_>>>()?;
    let (seqs, labels): (Vec<_>, Vec<_>) = drawn.into_iter().unzip();
    SequenceBatch::new(seqs, Some(labels))
}

/// Two-layer leaky-ReLU emission `x = W₂ lrelu(W₁ z + b₁) + b₂ [+ z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmissionNet {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: usize,
    pub slope: f64,
    pub w1: DMatrix<f64>,
    pub b1: Vec<f64>,
    pub w2: DMatrix<f64>,
    pub b2: Vec<f64>,
    pub skip: bool,
}

impl EmissionNet {
    pub fn random(input_dim: usize, spec: &EmissionSpec, seed: u64) -> Result<Self> {
        if spec.output_dim < input_dim || spec.hidden == 0 {
            return Err(MsmError::InvalidParameter(
                "emission needs n >= m and hidden >= 1".into(),
            ));
        }
        let mut rng = rng_from_seed(seed);
        let mut u = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let (m, h, n) = (input_dim, spec.hidden, spec.output_dim);
        let w1 = DMatrix::from_row_slice(h, m, &u(h * m, m));
        let b1 = u(h, m);
        let w2 = DMatrix::from_row_slice(n, h, &u(n * h, h));
        let b2 = u(n, h);
        Ok(EmissionNet {
            input_dim: m,
            output_dim: n,
            hidden: h,
            slope: spec.slope,
            w1,
            b1,
            w2,
            b2,
            skip: spec.skip,
        })
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|u| {
                let a = self.b1[u] + (0..self.input_dim).map(|j| self.w1[(u, j)] * z[j]).sum::<f64>();
                if a > 0.0 {
                    a
                } else {
                    self.slope * a
                }
            })
            .collect();
        (0..self.output_dim)
            .map(|i| {
                let mut x = self.b2[i] + (0..self.hidden).map(|u| self.w2[(i, u)] * hidden[u]).sum::<f64>();
                if self.skip && i < self.input_dim {
                    x += z[i];
                }
                x
            })
            .collect()
    }
}

/// Emission net for `spec`, seeded from the spec's master seed.
pub fn make_emission(spec: &SynthSpec) -> Result<Option<EmissionNet>> {
    spec.emission
        .as_ref()
        .map(|e| EmissionNet::random(spec.m, e, derive_seed(spec.seed, EMISSION_STREAM)))
        .transpose()
}

/// Apply the emission frame by frame; labels are kept.
pub fn emit_observations(batch: &SequenceBatch, net: &EmissionNet) -> Result<SequenceBatch> {
    if batch.dim() != net.input_dim {
        return Err(MsmError::dim("emission input", net.input_dim, batch.dim()));
    }
    let seqs = batch
        .sequences()
        .par_iter()
        .map(|s| {
            let mut data = Vec::with_capacity(s.len() * net.output_dim);
            for t in 0..s.len() {
                data.extend(net.apply(s.row(t)));
            }
            Sequence::new(net.output_dim, data)
        })
        .collect::<Result<Vec<_>>>()?;
    SequenceBatch::new(seqs, batch.labels().map(|l| l.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cyclic_rows() {
        let q = cyclic_transition_matrix(3, 0.9);
        for (got, want) in q.row(0).iter().zip([0.9, 0.1, 0.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!((q[(2, 0)] - 0.1).abs() < 1e-15);
        assert_eq!(cyclic_transition_matrix(1, 0.9)[(0, 0)], 1.0);
    }

    #[test]
    fn zero_hidden_weights_emit_bias() {
        let mut net = EmissionNet::random(2, &EmissionSpec::default(), 3).unwrap();
        net.w1.fill(0.0);
        net.b1.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(net.apply(&[0.4, -2.0]), net.b2);
    }
}
