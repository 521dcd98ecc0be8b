//! Identifiable Markov switching models.
//!
//! A Markov switching model (MSM) pairs a discrete Markov chain over `K`
//! regimes with regime-specific Gaussian autoregressive transitions
//! `z_t ~ N(m(z_{t-1}, s_t), Σ(s_t))`. This crate covers sampling, exact
//! forward–backward inference, EM/GEM estimation, permutation- and
//! affine-aware evaluation, and regime-dependent causal graph extraction.
//!
//! ```
//! use msm_core::{datagen, inference, SynthSpec, TransitionKind};
//!
//! let spec = SynthSpec { k: 2, m: 2, t: 50, n: 4, transition_kind: TransitionKind::Linear, ..Default::default() };
//! let model = datagen::make_ground_truth(&spec).unwrap();
//! let data = datagen::make_dataset(&model, &spec).unwrap();
//! let ll = inference::mean_loglik(&model, &data).unwrap();
//! assert!(ll.is_finite());
//! ```

// index loops mirror the formulas; `!(x > 0.0)` rejects NaN on purpose
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod causal;
pub mod datagen;
pub mod error;
pub mod estimation;
pub mod gaussian;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod transitions;

pub use causal::RegimeGraph;
pub use datagen::{EmissionNet, EmissionSpec, SynthSpec};
pub use error::{MsmError, Result};
pub use estimation::{FitConfig, FitReport, Optimizer, StopReason};
pub use gaussian::{Covariance, CovarianceKind, COV_FLOOR};
pub use inference::PosteriorMarginals;
pub use metrics::{AffineResolution, F1Pooling, MatchMethod, MatchMode, MatchResult};
pub use model::{Gaussian, MarkovChain, MsmModel, Sequence, SequenceBatch};
pub use transitions::{Activation, TransitionFunction, TransitionKind, TransitionOptions};
