//! Per-state transition mean functions `z_{t-1} ↦ m(z_{t-1}, k)`.
//!
//! Four families are supported: affine maps, multivariate polynomials over a
//! graded-lexicographic monomial basis, two-layer MLPs and locally connected
//! two-layer MLPs (one sub-network per output coordinate, gated by a binary
//! input mask). A fifth, [`AffineWrapped`], conjugates any of them by an
//! invertible affine change of coordinates and is what
//! [`crate::model::transform_model`] produces.
//!
//! Every family exposes evaluation, an analytic input Jacobian and the
//! vector-Jacobian product with respect to its flattened parameters.
//! Parameters are flattened per layer, weights row-major then biases; the
//! [`ParamLayout`] of a function names the blocks in order.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MsmError, Result};
use crate::gaussian::Covariance;
use crate::rng::rng_from_seed;

/// Negative-side slope of the leaky ReLU activation.
pub const LEAKY_SLOPE: f64 = 0.2;

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    #[default]
    Cosine,
    LeakyRelu,
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + x.max(0.0)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(x),
            Activation::Cosine => x.cos(),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }

    /// Derivative; for leaky ReLU the negative-branch slope is used at 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(x),
            Activation::Cosine => -x.sin(),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }

    pub fn is_analytic(self) -> bool {
        !matches!(self, Activation::LeakyRelu)
    }
}

impl std::str::FromStr for Activation {
    type Err = MsmError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softplus" => Ok(Activation::Softplus),
            "cosine" | "cos" => Ok(Activation::Cosine),
            "leaky_relu" | "leakyrelu" | "leaky-relu" => Ok(Activation::LeakyRelu),
            other => Err(MsmError::InvalidParameter(format!("unknown activation `{other}`"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    /// Bias-like block stored as a plain vector of `rows` entries.
    pub vector: bool,
}

/// Ordered parameter blocks of a flattened transition function.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout(pub Vec<ParamBlock>);

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.0.iter().map(|b| b.rows * b.cols).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Compact tag such as `w1[16x2],b1[16],w2[2x16],b2[2]`.
    pub fn tag(&self) -> String {
        self.0
            .iter()
            .map(|b| {
                if b.vector {
                    format!("{}[{}]", b.name, b.rows)
                } else {
                    format!("{}[{}x{}]", b.name, b.rows, b.cols)
                }
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Gradient of a scalar objective with respect to a function's flattened
/// parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradient {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

// ---------------------------------------------------------------------------
// Polynomial features
// ---------------------------------------------------------------------------

/// `binom(degree + dim, dim)`, the number of monomials of total degree at
/// most `degree` in `dim` variables.
pub fn feature_count(dim: usize, degree: usize) -> usize {
    let mut c: u128 = 1;
    for i in 1..=dim as u128 {
        c = c * (degree as u128 + i) / i;
    }
    c as usize
}

/// Graded-lexicographic monomial basis. Monomial `c > 0` is
/// `monomial(parent[c]) * z[last[c]]`.
#[derive(Clone, Debug)]
struct MonomialBasis {
    parent: Vec<usize>,
    last: Vec<usize>,
}

impl MonomialBasis {
    fn new(dim: usize, degree: usize) -> Self {
        // Each monomial is a nondecreasing tuple of variable indices; tuples
        // of one degree are listed lexicographically.
        let mut parent = vec![usize::MAX];
        let mut last = vec![usize::MAX];
        let mut prev: Vec<(usize, usize)> = vec![(0, 0)]; // (index, min next variable)
        for _ in 1..=degree {
            let mut next = Vec::new();
            for &(idx, min_var) in &prev {
                for v in min_var..dim {
                    parent.push(idx);
                    last.push(v);
                    next.push((parent.len() - 1, v));
                }
            }
            prev = next;
        }
        MonomialBasis { parent, last }
    }

    fn len(&self) -> usize {
        self.parent.len()
    }

    #[inline]
    fn features_into(&self, z: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        for c in 1..self.len() {
            out[c] = out[self.parent[c]] * z[self.last[c]];
        }
    }

    /// Row-major `C × dim` matrix of `∂φ_c/∂z_j`.
    fn feature_jacobian(&self, z: &[f64], phi: &[f64]) -> Vec<f64> {
        let dim = z.len();
        let c_len = self.len();
        let mut d = vec![0.0; c_len * dim];
        for c in 1..c_len {
            let p = self.parent[c];
            let v = self.last[c];
            for j in 0..dim {
                let mut val = d[p * dim + j] * z[v];
                if j == v {
                    val += phi[p];
                }
                d[c * dim + j] = val;
            }
        }
        d
    }

    fn degree_of(&self, c: usize) -> usize {
        let mut d = 0;
        let mut i = c;
        while i != 0 {
            i = self.parent[i];
            d += 1;
        }
        d
    }
}

/// Polynomial features of `z` up to total degree `degree`, graded
/// lexicographic: `1, z1..zm, z1², z1z2, …, zm², …`.
pub fn polynomial_features(z: &[f64], degree: usize) -> Vec<f64> {
    let basis = MonomialBasis::new(z.len(), degree);
    let mut out = vec![0.0; basis.len()];
    basis.features_into(z, &mut out);
    out
}

// ---------------------------------------------------------------------------
// Families
// ---------------------------------------------------------------------------

/// `z ↦ W z + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: DMatrix<f64>,
    pub bias: Vec<f64>,
}

/// `z ↦ A φ(z)` with `A` of shape `dim × C`.
#[derive(Clone, Debug)]
pub struct Polynomial {
    dim: usize,
    degree: usize,
    /// Row-major `dim × C`.
    coeff: Vec<f64>,
    basis: MonomialBasis,
}

impl PartialEq for Polynomial {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.degree == other.degree && self.coeff == other.coeff
    }
}

impl Polynomial {
    pub fn new(dim: usize, degree: usize, coeff: DMatrix<f64>) -> Result<Self> {
        if degree < 1 {
            return Err(MsmError::InvalidParameter("polynomial degree must be >= 1".into()));
        }
        let c = feature_count(dim, degree);
        if coeff.nrows() != dim || coeff.ncols() != c {
            return Err(MsmError::dim("polynomial coefficient columns", c, coeff.ncols()));
        }
        let mut flat = Vec::with_capacity(dim * c);
        for i in 0..dim {
            for j in 0..c {
                flat.push(coeff[(i, j)]);
            }
        }
        Ok(Polynomial {
            dim,
            degree,
            coeff: flat,
            basis: MonomialBasis::new(dim, degree),
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_features(&self) -> usize {
        self.basis.len()
    }

    pub fn coeff(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.basis.len(), &self.coeff)
    }
}

/// Two-layer perceptron `z ↦ W2 act(W1 z + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub dim: usize,
    pub hidden: usize,
    pub activation: Activation,
    /// Row-major `hidden × dim`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Row-major `dim × hidden`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// One two-layer sub-network per output coordinate `i`, reading only the
/// inputs `j` with `mask[i][j]` set:
/// `out_i = Σ_u w2[i,u] act(Σ_j w1[i,u,j] z_j + b1[i,u]) + b2[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocallyConnectedMlp {
    pub dim: usize,
    pub hidden: usize,
    pub activation: Activation,
    /// `dim × hidden × dim`, index `(i * hidden + u) * dim + j`.
    pub w1: Vec<f64>,
    /// `dim × hidden`.
    pub b1: Vec<f64>,
    /// `dim × hidden`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Row-major `dim × dim`; `mask[i * dim + j]` gates input `j` of output `i`.
    pub mask: Vec<bool>,
}

impl LocallyConnectedMlp {
    /// Zero every first-layer weight whose input is masked out.
    pub fn enforce_mask(&mut self) {
        let (d, h) = (self.dim, self.hidden);
        for i in 0..d {
            for u in 0..h {
                for j in 0..d {
                    if !self.mask[i * d + j] {
                        self.w1[(i * h + u) * d + j] = 0.0;
                    }
                }
            }
        }
    }

    pub fn mask_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(
            self.dim,
            self.dim,
            |i, j| {
                if self.mask[i * self.dim + j] {
                    1.0
                } else {
                    0.0
                }
            },
        )
    }
}

/// `z' ↦ A · inner(A⁻¹ (z' − b)) + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineWrapped {
    pub a: DMatrix<f64>,
    pub a_inv: DMatrix<f64>,
    pub b: Vec<f64>,
    pub inner: Box<TransitionFunction>,
}

impl AffineWrapped {
    pub fn new(inner: TransitionFunction, a: DMatrix<f64>, b: Vec<f64>) -> Result<Self> {
        let m = inner.dim();
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
        let a_inv = a
            .clone()
            .try_inverse()
            .ok_or_else(|| MsmError::Singular("affine map not invertible".into()))?;
        Ok(AffineWrapped {
            a,
            a_inv,
            b,
            inner: Box::new(inner),
        })
    }

    fn pull_back(&self, z: &[f64]) -> Vec<f64> {
        let m = z.len();
        (0..m)
            .map(|i| (0..m).map(|j| self.a_inv[(i, j)] * (z[j] - self.b[j])).sum())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// TransitionFunction
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    Linear,
    Polynomial,
    Mlp,
    LocallyConnectedMlp,
}

impl std::str::FromStr for TransitionKind {
    type Err = MsmError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "linear" => Ok(TransitionKind::Linear),
            "polynomial" | "poly" => Ok(TransitionKind::Polynomial),
            "mlp" => Ok(TransitionKind::Mlp),
            "locally_connected_mlp" | "lcmlp" | "locally_connected" => Ok(TransitionKind::LocallyConnectedMlp),
            other => Err(MsmError::InvalidParameter(format!("unknown transition kind `{other}`"))),
        }
    }
}

impl TransitionKind {
    pub fn is_network(self) -> bool {
        matches!(self, TransitionKind::Mlp | TransitionKind::LocallyConnectedMlp)
    }
}

/// Construction options for [`random_transition`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransitionOptions {
    /// Polynomial degree.
    pub degree: usize,
    /// Hidden width of the networks (per output for the locally connected kind).
    pub hidden: usize,
    pub activation: Activation,
    /// Mean number of inputs per output in a locally connected mask.
    pub interactions: usize,
}

impl Default for TransitionOptions {
    fn default() -> Self {
        TransitionOptions {
            degree: 3,
            hidden: 16,
            activation: Activation::Cosine,
            interactions: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TransitionFunction {
    Linear(Linear),
    Polynomial(Polynomial),
    Mlp(Mlp),
    LocallyConnected(LocallyConnectedMlp),
    Affine(AffineWrapped),
}

/// Run `f` with a zeroed scratch slice of length `n`.
#[inline]
fn with_scratch<R>(n: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    if n <= 64 {
        let mut buf = [0.0f64; 64];
        f(&mut buf[..n])
    } else {
        let mut buf = vec![0.0; n];
        f(&mut buf)
    }
}

impl TransitionFunction {
    pub fn linear(weight: DMatrix<f64>, bias: Vec<f64>) -> Result<Self> {
        let m = bias.len();
        if weight.nrows() != m || weight.ncols() != m {
            return Err(MsmError::dim("linear weight", m, weight.nrows()));
        }
        let f = TransitionFunction::Linear(Linear { weight, bias });
        f.check_finite()?;
        Ok(f)
    }

    pub fn polynomial(dim: usize, degree: usize, coeff: DMatrix<f64>) -> Result<Self> {
        let f = TransitionFunction::Polynomial(Polynomial::new(dim, degree, coeff)?);
        f.check_finite()?;
        Ok(f)
    }

    pub fn mlp(mlp: Mlp) -> Result<Self> {
        let (d, h) = (mlp.dim, mlp.hidden);
        if mlp.w1.len() != h * d || mlp.b1.len() != h || mlp.w2.len() != d * h || mlp.b2.len() != d {
            return Err(MsmError::InvalidParameter("mlp parameter shapes inconsistent".into()));
        }
        let f = TransitionFunction::Mlp(mlp);
        f.check_finite()?;
        Ok(f)
    }

    pub fn locally_connected(mut net: LocallyConnectedMlp) -> Result<Self> {
        let (d, h) = (net.dim, net.hidden);
        if net.w1.len() != d * h * d
            || net.b1.len() != d * h
            || net.w2.len() != d * h
            || net.b2.len() != d
            || net.mask.len() != d * d
        {
            return Err(MsmError::InvalidParameter(
                "locally connected parameter shapes inconsistent".into(),
            ));
        }
        net.enforce_mask();
        let f = TransitionFunction::LocallyConnected(net);
        f.check_finite()?;
        Ok(f)
    }

    pub fn affine_wrapped(inner: TransitionFunction, a: DMatrix<f64>, b: Vec<f64>) -> Result<Self> {
        Ok(TransitionFunction::Affine(AffineWrapped::new(inner, a, b)?))
    }

    fn check_finite(&self) -> Result<()> {
        if self.params().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(MsmError::NonFinite("transition parameters".into()))
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TransitionFunction::Linear(l) => l.bias.len(),
            TransitionFunction::Polynomial(p) => p.dim,
            TransitionFunction::Mlp(n) => n.dim,
            TransitionFunction::LocallyConnected(n) => n.dim,
            TransitionFunction::Affine(w) => w.b.len(),
        }
    }

    /// Family of the function (the wrapped family for affine wrappers).
    pub fn kind(&self) -> TransitionKind {
        match self {
            TransitionFunction::Linear(_) => TransitionKind::Linear,
            TransitionFunction::Polynomial(_) => TransitionKind::Polynomial,
            TransitionFunction::Mlp(_) => TransitionKind::Mlp,
            TransitionFunction::LocallyConnected(_) => TransitionKind::LocallyConnectedMlp,
            TransitionFunction::Affine(w) => w.inner.kind(),
        }
    }

    /// The input mask of a locally connected network (through affine wrappers
    /// the mask no longer describes the function and `None` is returned).
    pub fn mask(&self) -> Option<DMatrix<f64>> {
        match self {
            TransitionFunction::LocallyConnected(n) => Some(n.mask_matrix()),
            _ => None,
        }
    }

    /// Evaluate the mean map, rejecting non-finite or wrongly sized input.
    pub fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(MsmError::dim("transition input", self.dim(), z.len()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(MsmError::NonFinite("transition input".into()));
        }
        let mut out = vec![0.0; self.dim()];
        self.eval_into(z, &mut out);
        Ok(out)
    }

    /// Unchecked evaluation into `out`.
    pub fn eval_into(&self, z: &[f64], out: &mut [f64]) {
        match self {
            TransitionFunction::Linear(l) => {
                let m = l.bias.len();
                for i in 0..m {
                    let mut s = l.bias[i];
                    for j in 0..m {
                        s += l.weight[(i, j)] * z[j];
                    }
                    out[i] = s;
                }
            }
            TransitionFunction::Polynomial(p) => {
                let c_len = p.basis.len();
                with_scratch(c_len, |phi| {
                    p.basis.features_into(z, phi);
                    for i in 0..p.dim {
                        let row = &p.coeff[i * c_len..(i + 1) * c_len];
                        out[i] = row.iter().zip(phi.iter()).map(|(a, b)| a * b).sum();
                    }
                });
            }
            TransitionFunction::Mlp(n) => {
                let (d, h) = (n.dim, n.hidden);
                with_scratch(h, |act| {
                    for u in 0..h {
                        let row = &n.w1[u * d..(u + 1) * d];
                        let a = n.b1[u] + row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>();
                        act[u] = n.activation.apply(a);
                    }
                    for i in 0..d {
                        let row = &n.w2[i * h..(i + 1) * h];
                        out[i] = n.b2[i] + row.iter().zip(act.iter()).map(|(w, x)| w * x).sum::<f64>();
                    }
                });
            }
            TransitionFunction::LocallyConnected(n) => {
                let (d, h) = (n.dim, n.hidden);
                for i in 0..d {
                    let mut s = n.b2[i];
                    let mrow = &n.mask[i * d..(i + 1) * d];
                    for u in 0..h {
                        let w = &n.w1[(i * h + u) * d..(i * h + u + 1) * d];
                        let mut a = n.b1[i * h + u];
                        for j in 0..d {
                            if mrow[j] {
                                a += w[j] * z[j];
                            }
                        }
                        s += n.w2[i * h + u] * n.activation.apply(a);
                    }
                    out[i] = s;
                }
            }
            TransitionFunction::Affine(w) => {
                let u = w.pull_back(z);
                let m = z.len();
                with_scratch(m, |inner_out| {
                    w.inner.eval_into(&u, inner_out);
                    for i in 0..m {
                        out[i] = w.b[i] + (0..m).map(|j| w.a[(i, j)] * inner_out[j]).sum::<f64>();
                    }
                });
            }
        }
    }

    /// Analytic Jacobian `J[i][j] = ∂m_i/∂z_j`.
    pub fn jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        match self {
            TransitionFunction::Linear(l) => l.weight.clone(),
            TransitionFunction::Polynomial(p) => {
                let c_len = p.basis.len();
                let mut phi = vec![0.0; c_len];
                p.basis.features_into(z, &mut phi);
                let dphi = p.basis.feature_jacobian(z, &phi);
                DMatrix::from_fn(p.dim, p.dim, |i, j| {
                    (0..c_len).map(|c| p.coeff[i * c_len + c] * dphi[c * p.dim + j]).sum()
                })
            }
            TransitionFunction::Mlp(n) => {
                let (d, h) = (n.dim, n.hidden);
                let slope: Vec<f64> = (0..h)
                    .map(|u| {
                        let row = &n.w1[u * d..(u + 1) * d];
                        let a = n.b1[u] + row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>();
                        n.activation.derivative(a)
                    })
                    .collect();
                DMatrix::from_fn(d, d, |i, j| {
                    (0..h).map(|u| n.w2[i * h + u] * slope[u] * n.w1[u * d + j]).sum()
                })
            }
            TransitionFunction::LocallyConnected(n) => {
                let (d, h) = (n.dim, n.hidden);
                let mut jac = DMatrix::zeros(d, d);
                for i in 0..d {
                    let mrow = &n.mask[i * d..(i + 1) * d];
                    for u in 0..h {
                        let w = &n.w1[(i * h + u) * d..(i * h + u + 1) * d];
                        let mut a = n.b1[i * h + u];
                        for j in 0..d {
                            if mrow[j] {
                                a += w[j] * z[j];
                            }
                        }
                        let g = n.w2[i * h + u] * n.activation.derivative(a);
                        for j in 0..d {
                            if mrow[j] {
                                jac[(i, j)] += g * w[j];
                            }
                        }
                    }
                }
                jac
            }
            TransitionFunction::Affine(w) => {
                let u = w.pull_back(z);
                &w.a * w.inner.jacobian(&u) * &w.a_inv
            }
        }
    }

    pub fn layout(&self) -> ParamLayout {
        let blk = |name, rows, cols| ParamBlock {
            name,
            rows,
            cols,
            vector: false,
        };
        let vec_blk = |name, rows| ParamBlock {
            name,
            rows,
            cols: 1,
            vector: true,
        };
        match self {
            TransitionFunction::Linear(l) => {
                let m = l.bias.len();
                ParamLayout(vec![blk("w", m, m), vec_blk("b", m)])
            }
            TransitionFunction::Polynomial(p) => ParamLayout(vec![blk("coeff", p.dim, p.basis.len())]),
            TransitionFunction::Mlp(n) => ParamLayout(vec![
                blk("w1", n.hidden, n.dim),
                vec_blk("b1", n.hidden),
                blk("w2", n.dim, n.hidden),
                vec_blk("b2", n.dim),
            ]),
            TransitionFunction::LocallyConnected(n) => ParamLayout(vec![
                blk("w1", n.dim * n.hidden, n.dim),
                vec_blk("b1", n.dim * n.hidden),
                blk("w2", n.dim, n.hidden),
                vec_blk("b2", n.dim),
            ]),
            TransitionFunction::Affine(w) => w.inner.layout(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len()
    }

    /// Flattened trainable parameters (affine wrappers expose the inner
    /// function's parameters; `A` and `b` are fixed).
    pub fn params(&self) -> Vec<f64> {
        match self {
            TransitionFunction::Linear(l) => {
                let m = l.bias.len();
                let mut v = Vec::with_capacity(m * m + m);
                for i in 0..m {
                    for j in 0..m {
                        v.push(l.weight[(i, j)]);
                    }
                }
                v.extend_from_slice(&l.bias);
                v
            }
            TransitionFunction::Polynomial(p) => p.coeff.clone(),
            TransitionFunction::Mlp(n) => [&n.w1[..], &n.b1, &n.w2, &n.b2].concat(),
            TransitionFunction::LocallyConnected(n) => [&n.w1[..], &n.b1, &n.w2, &n.b2].concat(),
            TransitionFunction::Affine(w) => w.inner.params(),
        }
    }

    /// Replace the flattened parameters. Masked weights are re-zeroed.
    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        let n = self.param_count();
        if values.len() != n {
            return Err(MsmError::dim("parameter vector", n, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MsmError::NonFinite("parameter vector".into()));
        }
        match self {
            TransitionFunction::Linear(l) => {
                let m = l.bias.len();
                for i in 0..m {
                    for j in 0..m {
                        l.weight[(i, j)] = values[i * m + j];
                    }
                }
                l.bias.copy_from_slice(&values[m * m..]);
            }
            TransitionFunction::Polynomial(p) => p.coeff.copy_from_slice(values),
            TransitionFunction::Mlp(n) => {
                let mut it = values;
                for buf in [&mut n.w1, &mut n.b1, &mut n.w2, &mut n.b2] {
                    let (head, tail) = it.split_at(buf.len());
                    buf.copy_from_slice(head);
                    it = tail;
                }
            }
            TransitionFunction::LocallyConnected(n) => {
                let mut it = values;
                for buf in [&mut n.w1, &mut n.b1, &mut n.w2, &mut n.b2] {
                    let (head, tail) = it.split_at(buf.len());
                    buf.copy_from_slice(head);
                    it = tail;
                }
                n.enforce_mask();
            }
            TransitionFunction::Affine(w) => w.inner.set_params(values)?,
        }
        Ok(())
    }

    /// `grad += scale · (∂m(z)/∂θ)ᵀ upstream`.
    pub fn accumulate_param_vjp(&self, z: &[f64], upstream: &[f64], scale: f64, grad: &mut [f64]) {
        match self {
            TransitionFunction::Linear(l) => {
                let m = l.bias.len();
                for i in 0..m {
                    let g = scale * upstream[i];
                    for j in 0..m {
                        grad[i * m + j] += g * z[j];
                    }
                    grad[m * m + i] += g;
                }
            }
            TransitionFunction::Polynomial(p) => {
                let c_len = p.basis.len();
                with_scratch(c_len, |phi| {
                    p.basis.features_into(z, phi);
                    for i in 0..p.dim {
                        let g = scale * upstream[i];
                        for c in 0..c_len {
                            grad[i * c_len + c] += g * phi[c];
                        }
                    }
                });
            }
            TransitionFunction::Mlp(n) => {
                let (d, h) = (n.dim, n.hidden);
                let (o_b1, o_w2, o_b2) = (h * d, h * d + h, h * d + h + d * h);
                for u in 0..h {
                    let row = &n.w1[u * d..(u + 1) * d];
                    let a = n.b1[u] + row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>();
                    let act = n.activation.apply(a);
                    let mut back = 0.0;
                    for i in 0..d {
                        let g = scale * upstream[i];
                        grad[o_w2 + i * h + u] += g * act;
                        back += g * n.w2[i * h + u];
                    }
                    let da = back * n.activation.derivative(a);
                    for j in 0..d {
                        grad[u * d + j] += da * z[j];
                    }
                    grad[o_b1 + u] += da;
                }
                for i in 0..d {
                    grad[o_b2 + i] += scale * upstream[i];
                }
            }
            TransitionFunction::LocallyConnected(n) => {
                let (d, h) = (n.dim, n.hidden);
                let (o_b1, o_w2, o_b2) = (d * h * d, d * h * d + d * h, d * h * d + 2 * d * h);
                for i in 0..d {
                    let g = scale * upstream[i];
                    let mrow = &n.mask[i * d..(i + 1) * d];
                    for u in 0..h {
                        let base = (i * h + u) * d;
                        let mut a = n.b1[i * h + u];
                        for j in 0..d {
                            if mrow[j] {
                                a += n.w1[base + j] * z[j];
                            }
                        }
                        grad[o_w2 + i * h + u] += g * n.activation.apply(a);
                        let da = g * n.w2[i * h + u] * n.activation.derivative(a);
                        for j in 0..d {
                            if mrow[j] {
                                grad[base + j] += da * z[j];
                            }
                        }
                        grad[o_b1 + i * h + u] += da;
                    }
                    grad[o_b2 + i] += g;
                }
            }
            TransitionFunction::Affine(w) => {
                let u = w.pull_back(z);
                let m = z.len();
                // chain rule through the outer A: upstream ← Aᵀ upstream
                let pulled: Vec<f64> = (0..m)
                    .map(|j| (0..m).map(|i| w.a[(i, j)] * upstream[i]).sum())
                    .collect();
                w.inner.accumulate_param_vjp(&u, &pulled, scale, grad);
            }
        }
    }

    /// Gradient of `log N(z_next; m(z_prev), Σ)` with respect to the
    /// flattened parameters.
    pub fn param_gradient(&self, z_prev: &[f64], z_next: &[f64], noise: &Covariance) -> ParamGradient {
        let m = self.dim();
        let mut mean = vec![0.0; m];
        self.eval_into(z_prev, &mut mean);
        let resid: Vec<f64> = z_next.iter().zip(&mean).map(|(a, b)| a - b).collect();
        let mut upstream = vec![0.0; m];
        noise.precision_times(&resid, &mut upstream);
        let mut values = vec![0.0; self.param_count()];
        self.accumulate_param_vjp(z_prev, &upstream, 1.0, &mut values);
        ParamGradient {
            values,
            layout: self.layout(),
        }
    }

    /// Zero masked first-layer weights (no-op for other families).
    pub fn enforce_mask(&mut self) {
        match self {
            TransitionFunction::LocallyConnected(n) => n.enforce_mask(),
            TransitionFunction::Affine(w) => w.inner.enforce_mask(),
            _ => {}
        }
    }
}

// ---------------------------------------------------------------------------
// Random construction
// ---------------------------------------------------------------------------

/// Reproducible random transition function of the given family.
///
/// Networks use `uniform(±1/√fan_in)` weights and biases; linear maps the
/// same with `fan_in = m`; polynomial coefficients are `0.3 · N(0,1) / d!`
/// for monomials of degree `d`. Locally connected masks give every output
/// exactly `options.interactions` distinct inputs.
pub fn random_transition(
    kind: TransitionKind,
    dim: usize,
    seed: u64,
    options: &TransitionOptions,
) -> Result<TransitionFunction> {
    if dim == 0 {
        return Err(MsmError::InvalidParameter("dimension must be >= 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
    };
    match kind {
        TransitionKind::Linear => {
            let w = uniform(dim * dim, dim);
            let b = uniform(dim, dim);
            TransitionFunction::linear(DMatrix::from_row_slice(dim, dim, &w), b)
        }
        TransitionKind::Polynomial => {
            if options.degree < 1 {
                return Err(MsmError::InvalidParameter("polynomial degree must be >= 1".into()));
            }
            let basis = MonomialBasis::new(dim, options.degree);
            let c_len = basis.len();
            let mut rng = rng_from_seed(seed);
            let mut coeff = DMatrix::zeros(dim, c_len);
            for i in 0..dim {
                for c in 0..c_len {
                    let deg = basis.degree_of(c);
                    let fact: f64 = (1..=deg).map(|v| v as f64).product();
                    let n: f64 = StandardNormal.sample(&mut rng);
                    coeff[(i, c)] = 0.3 * n / fact;
                }
            }
            TransitionFunction::polynomial(dim, options.degree, coeff)
        }
        TransitionKind::Mlp => {
            let h = options.hidden;
            if h == 0 {
                return Err(MsmError::InvalidParameter("hidden width must be >= 1".into()));
            }
            let w1 = uniform(h * dim, dim);
            let b1 = uniform(h, dim);
            let w2 = uniform(dim * h, h);
            let b2 = uniform(dim, h);
            TransitionFunction::mlp(Mlp {
                dim,
                hidden: h,
                activation: options.activation,
                w1,
                b1,
                w2,
                b2,
            })
        }
        TransitionKind::LocallyConnectedMlp => {
            let h = options.hidden;
            if h == 0 {
                return Err(MsmError::InvalidParameter("hidden width must be >= 1".into()));
            }
            if options.interactions > dim {
                return Err(MsmError::InvalidParameter(format!(
                    "interaction count {} exceeds dimension {dim}",
                    options.interactions
                )));
            }
            if options.interactions == 0 {
                return Err(MsmError::InvalidParameter("interaction count must be >= 1".into()));
            }
            let w1 = uniform(dim * h * dim, dim);
            let b1 = uniform(dim * h, dim);
            let w2 = uniform(dim * h, h);
            let b2 = uniform(dim, h);
            let mut mask_rng = rng_from_seed(seed ^ 0x6D61_736B);
            let mut mask = vec![false; dim * dim];
            for i in 0..dim {
                let chosen = rand::seq::index::sample(&mut mask_rng, dim, options.interactions);
                for j in chosen.iter() {
                    mask[i * dim + j] = true;
                }
            }
            TransitionFunction::locally_connected(LocallyConnectedMlp {
                dim,
                hidden: h,
                activation: options.activation,
                w1,
                b1,
                w2,
                b2,
                mask,
            })
        }
    }
}
