//! File formats.
//!
//! * Model file: JSON document carrying `schema_version`, `K`, `m`, the chain,
//!   initial components, noise covariances and one descriptor per transition
//!   mean. Reals are written with 17 significant digits so a save/load round
//!   trip is bit-exact.
//! * Sequence file: CSV `seq_id,t,z1,...,zm[,label]`, sorted by `(seq_id, t)`,
//!   `t` and labels 1-based.
//! * Posterior dumps, graph tables and metric rows are CSV as well.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MsmError, Result};
use crate::gaussian::{Covariance, CovarianceKind};
use crate::inference::PosteriorMarginals;
use crate::model::{Gaussian, MarkovChain, MsmModel, Sequence, SequenceBatch};
use crate::transitions::{feature_count, Activation, LocallyConnectedMlp, Mlp, TransitionFunction};

pub const SCHEMA_VERSION: u32 = 1;

/// Real with 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

// ---------------------------------------------------------------------------
// JSON formatter
// ---------------------------------------------------------------------------

/// Pretty JSON with every float printed to 17 significant digits.
struct ExactFloats<'a>(serde_json::ser::PrettyFormatter<'a>);

impl serde_json::ser::Formatter for ExactFloats<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(fmt_real(value).as_bytes())
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serialize any value as pretty JSON with exact floats.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let fmt = ExactFloats(serde_json::ser::PrettyFormatter::with_indent(b"  "));
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, fmt);
    value.serialize(&mut ser).map_err(|e| MsmError::Parse {
        path: String::new(),
        message: e.to_string(),
    })?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("JSON output is UTF-8"))
}

// ---------------------------------------------------------------------------
// Model document
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    schema_version: u32,
    #[serde(rename = "K")]
    k: usize,
    m: usize,
    chain: ChainDoc,
    initial: Vec<InitialDoc>,
    trans_noise: Vec<NoiseDoc>,
    trans_mean: Vec<TransitionDoc>,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(deny_unknown_fields)]
struct ChainDoc {
    pi: Vec<f64>,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(deny_unknown_fields)]
struct CovDoc {
    kind: CovarianceKind,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(deny_unknown_fields)]
struct InitialDoc {
    mu: Vec<f64>,
    cov: CovDoc,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(deny_unknown_fields)]
struct NoiseDoc {
    cov: CovDoc,
}

/// Serialization descriptor of a transition mean.
#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TransitionDoc {
    Linear {
        m: usize,
        layout: String,
        params: Vec<f64>,
    },
    Polynomial {
        m: usize,
        degree: usize,
        layout: String,
        params: Vec<f64>,
    },
    Mlp {
        m: usize,
        hidden: usize,
        activation: Activation,
        layout: String,
        params: Vec<f64>,
    },
    LocallyConnectedMlp {
        m: usize,
        hidden: usize,
        activation: Activation,
        mask: Vec<Vec<u8>>,
        layout: String,
        params: Vec<f64>,
    },
    Affine {
        m: usize,
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
        inner: Box<TransitionDoc>,
    },
}

fn cov_doc(c: &Covariance) -> CovDoc {
    CovDoc {
        kind: c.kind(),
        values: c.stored_values(),
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

fn transition_doc(f: &TransitionFunction) -> TransitionDoc {
    let layout = f.layout().tag();
    let params = f.params();
    match f {
        TransitionFunction::Linear(l) => TransitionDoc::Linear {
            m: l.bias.len(),
            layout,
            params,
        },
        TransitionFunction::Polynomial(p) => TransitionDoc::Polynomial {
            m: f.dim(),
            degree: p.degree(),
            layout,
            params,
        },
        TransitionFunction::Mlp(n) => TransitionDoc::Mlp {
            m: n.dim,
            hidden: n.hidden,
            activation: n.activation,
            layout,
            params,
        },
        TransitionFunction::LocallyConnected(n) => TransitionDoc::LocallyConnectedMlp {
            m: n.dim,
            hidden: n.hidden,
            activation: n.activation,
            mask: (0..n.dim)
                .map(|i| (0..n.dim).map(|j| n.mask[i * n.dim + j] as u8).collect())
                .collect(),
            layout,
            params,
        },
        TransitionFunction::Affine(w) => TransitionDoc::Affine {
            m: w.b.len(),
            a: rows_of(&w.a),
            b: w.b.clone(),
            inner: Box::new(transition_doc(&w.inner)),
        },
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], n: usize, path: &str) -> Result<DMatrix<f64>> {
    if rows.len() != n {
        return Err(MsmError::field(
            path,
            format!("expected {n} rows, found {}", rows.len()),
        ));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != n {
            return Err(MsmError::field(
                format!("{path}[{i}]"),
                format!("expected {n} columns, found {}", r.len()),
            ));
        }
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn with_path<T>(r: Result<T>, path: &str) -> Result<T> {
    r.map_err(|e| match e {
        MsmError::InvalidField { .. } => e,
        other => MsmError::field(path, other.to_string()),
    })
}

fn build_transition(doc: &TransitionDoc, m_expected: usize, path: &str) -> Result<TransitionFunction> {
    let check_m = |m: usize| -> Result<()> {
        if m != m_expected {
            return Err(MsmError::field(
                format!("{path}.m"),
                format!("expected {m_expected}, found {m}"),
            ));
        }
        Ok(())
    };
    let mut f = match doc {
        TransitionDoc::Linear { m, .. } => {
            check_m(*m)?;
            with_path(TransitionFunction::linear(DMatrix::zeros(*m, *m), vec![0.0; *m]), path)?
        }
        TransitionDoc::Polynomial { m, degree, .. } => {
            check_m(*m)?;
            if *degree < 1 {
                return Err(MsmError::field(format!("{path}.degree"), "must be >= 1"));
            }
            let c = feature_count(*m, *degree);
            with_path(TransitionFunction::polynomial(*m, *degree, DMatrix::zeros(*m, c)), path)?
        }
        TransitionDoc::Mlp {
            m, hidden, activation, ..
        } => {
            check_m(*m)?;
            let (d, h) = (*m, *hidden);
            with_path(
                TransitionFunction::mlp(Mlp {
                    dim: d,
                    hidden: h,
                    activation: *activation,
                    w1: vec![0.0; h * d],
                    b1: vec![0.0; h],
                    w2: vec![0.0; d * h],
                    b2: vec![0.0; d],
                }),
                path,
            )?
        }
        TransitionDoc::LocallyConnectedMlp {
            m,
            hidden,
            activation,
            mask,
            ..
        } => {
            check_m(*m)?;
            let (d, h) = (*m, *hidden);
            if mask.len() != d || mask.iter().any(|r| r.len() != d) {
                return Err(MsmError::field(
                    format!("{path}.mask"),
                    format!("expected {d}x{d} matrix"),
                ));
            }
            let mut flat = Vec::with_capacity(d * d);
            for (i, r) in mask.iter().enumerate() {
                for (j, &v) in r.iter().enumerate() {
                    match v {
                        0 => flat.push(false),
                        1 => flat.push(true),
                        _ => {
                            return Err(MsmError::field(
                                format!("{path}.mask[{i}][{j}]"),
                                "mask entries must be 0 or 1",
                            ))
                        }
                    }
                }
            }
            with_path(
                TransitionFunction::locally_connected(LocallyConnectedMlp {
                    dim: d,
                    hidden: h,
                    activation: *activation,
                    w1: vec![0.0; d * h * d],
                    b1: vec![0.0; d * h],
                    w2: vec![0.0; d * h],
                    b2: vec![0.0; d],
                    mask: flat,
                }),
                path,
            )?
        }
        TransitionDoc::Affine { m, a, b, inner } => {
            check_m(*m)?;
            let inner = build_transition(inner, *m, &format!("{path}.inner"))?;
            let a = matrix_from_rows(a, *m, &format!("{path}.a"))?;
            if b.len() != *m {
                return Err(MsmError::field(format!("{path}.b"), format!("expected length {m}")));
            }
            return with_path(TransitionFunction::affine_wrapped(inner, a, b.clone()), path);
        }
    };
    let (layout, params) = match doc {
        TransitionDoc::Linear { layout, params, .. }
        | TransitionDoc::Polynomial { layout, params, .. }
        | TransitionDoc::Mlp { layout, params, .. }
        | TransitionDoc::LocallyConnectedMlp { layout, params, .. } => (layout, params),
        TransitionDoc::Affine { .. } => unreachable!(),
    };
    let expected = f.layout().tag();
    if *layout != expected {
        return Err(MsmError::field(
            format!("{path}.layout"),
            format!("expected `{expected}`, found `{layout}`"),
        ));
    }
    with_path(f.set_params(params), &format!("{path}.params"))?;
    if let TransitionFunction::LocallyConnected(n) = &f {
        // masked weights must be stored as exact zeros
        let d = n.dim;
        for i in 0..d {
            for u in 0..n.hidden {
                for j in 0..d {
                    let idx = (i * n.hidden + u) * d + j;
                    if !n.mask[i * d + j] && params[idx] != 0.0 {
                        return Err(MsmError::field(
                            format!("{path}.params[{idx}]"),
                            "masked first-layer weight is non-zero",
                        ));
                    }
                }
            }
        }
    }
    f.enforce_mask();
    Ok(f)
}

fn build_cov(doc: &CovDoc, m: usize, path: &str) -> Result<Covariance> {
    with_path(Covariance::from_stored(doc.kind, m, &doc.values), path)
}

fn model_from_doc(doc: &ModelDoc) -> Result<MsmModel> {
    if doc.schema_version != SCHEMA_VERSION {
        return Err(MsmError::UnsupportedVersion {
            found: doc.schema_version,
            supported: SCHEMA_VERSION,
        });
    }
    let (k, m) = (doc.k, doc.m);
    if k == 0 {
        return Err(MsmError::field("K", "must be >= 1"));
    }
    if m == 0 {
        return Err(MsmError::field("m", "must be >= 1"));
    }
    if doc.chain.pi.len() != k {
        return Err(MsmError::field("chain.pi", format!("expected length {k}")));
    }
    let q = matrix_from_rows(&doc.chain.q, k, "chain.Q")?;
    let chain = MarkovChain::new(doc.chain.pi.clone(), q)?;
    for (name, len) in [
        ("initial", doc.initial.len()),
        ("trans_noise", doc.trans_noise.len()),
        ("trans_mean", doc.trans_mean.len()),
    ] {
        if len != k {
            return Err(MsmError::field(name, format!("expected {k} entries, found {len}")));
        }
    }
    let initial = doc
        .initial
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if g.mu.len() != m {
                return Err(MsmError::field(
                    format!("initial[{i}].mu"),
                    format!("expected length {m}"),
                ));
            }
            let cov = build_cov(&g.cov, m, &format!("initial[{i}].cov"))?;
            with_path(Gaussian::new(g.mu.clone(), cov), &format!("initial[{i}]"))
        })
        .collect::<Result<Vec<_>>>()?;
    let noise = doc
        .trans_noise
        .iter()
        .enumerate()
        .map(|(i, n)| build_cov(&n.cov, m, &format!("trans_noise[{i}].cov")))
        .collect::<Result<Vec<_>>>()?;
    let means = doc
        .trans_mean
        .iter()
        .enumerate()
        .map(|(i, d)| build_transition(d, m, &format!("trans_mean[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    MsmModel::new_unprobed(chain, initial, means, noise)
}

fn doc_from_model(model: &MsmModel) -> ModelDoc {
    ModelDoc {
        schema_version: SCHEMA_VERSION,
        k: model.n_states(),
        m: model.dim(),
        chain: ChainDoc {
            pi: model.chain().pi().to_vec(),
            q: rows_of(model.chain().q()),
        },
        initial: model
            .initial()
            .iter()
            .map(|g| InitialDoc {
                mu: g.mean.clone(),
                cov: cov_doc(&g.cov),
            })
            .collect(),
        trans_noise: model
            .trans_noise()
            .iter()
            .map(|c| NoiseDoc { cov: cov_doc(c) })
            .collect(),
        trans_mean: model.trans_mean().iter().map(transition_doc).collect(),
    }
}

pub fn model_to_string(model: &MsmModel) -> Result<String> {
    to_json_string(&doc_from_model(model))
}

/// Parse a model file. Shapes are validated; the unique-indexing probe is
/// not, since a fit on a single sequence has identical initial moments in
/// every state. Call [`MsmModel::check_unique_indexing`] where it matters.
pub fn model_from_str(text: &str) -> Result<MsmModel> {
    // version gate before the full schema so that a future layout reports
    // a version error rather than a field error
    #[derive(Deserialize)]
    struct Version {
        schema_version: Option<u32>,
    }
    let v: Version = serde_json::from_str(text).map_err(|e| MsmError::Parse {
        path: String::new(),
        message: e.to_string(),
    })?;
    match v.schema_version {
        None => {
            return Err(MsmError::Parse {
                path: "schema_version".into(),
                message: "missing field".into(),
            })
        }
        Some(found) if found != SCHEMA_VERSION => {
            return Err(MsmError::UnsupportedVersion {
                found,
                supported: SCHEMA_VERSION,
            })
        }
        _ => {}
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: ModelDoc = serde_path_to_error::deserialize(de).map_err(|e| MsmError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    model_from_doc(&doc)
}

pub fn save_model(model: &MsmModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_string(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MsmModel> {
    model_from_str(&fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Sequence CSV
// ---------------------------------------------------------------------------

pub fn write_sequences<W: Write>(out: W, batch: &SequenceBatch) -> Result<()> {
    let mut w = BufWriter::new(out);
    let m = batch.dim();
    let mut header = vec!["seq_id".to_string(), "t".to_string()];
    header.extend((1..=m).map(|i| format!("z{i}")));
    if batch.labels().is_some() {
        header.push("label".into());
    }
    writeln!(w, "{}", header.join(","))?;
    for (b, seq) in batch.sequences().iter().enumerate() {
        for t in 0..seq.len() {
            let mut line = format!("{},{}", b + 1, t + 1);
            for v in seq.row(t) {
                line.push(',');
                line.push_str(&fmt_real(*v));
            }
            if let Some(labels) = batch.labels() {
                line.push_str(&format!(",{}", labels[b][t] + 1));
            }
            writeln!(w, "{line}")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_sequences(path: &Path, batch: &SequenceBatch) -> Result<()> {
    write_sequences(fs::File::create(path)?, batch)
}

fn parse_err(row: usize, col: &str, message: impl Into<String>) -> MsmError {
    MsmError::Parse {
        path: format!("row {row}, column {col}"),
        message: message.into(),
    }
}

/// Read a sequence CSV. Sequence ids must be sorted; `t` must run 1..T
/// within each sequence.
pub fn read_sequences<R: io::Read>(input: R) -> Result<SequenceBatch> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(1, "header", e.to_string()))?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.len() < 3 || names[0] != "seq_id" || names[1] != "t" {
        return Err(parse_err(1, "header", "expected `seq_id,t,z1,...`"));
    }
    let has_label = names.last() == Some(&"label");
    let m = names.len() - 2 - has_label as usize;
    for (i, name) in names[2..2 + m].iter().enumerate() {
        if *name != format!("z{}", i + 1) {
            return Err(parse_err(1, name, format!("expected `z{}`", i + 1)));
        }
    }
    let mut sequences = Vec::new();
    let mut labels: Vec<Vec<usize>> = Vec::new();
    let mut current: Option<u64> = None;
    let mut rows: Vec<f64> = Vec::new();
    let mut cur_labels: Vec<usize> = Vec::new();
    let flush = |rows: &mut Vec<f64>,
                 cur_labels: &mut Vec<usize>,
                 sequences: &mut Vec<Sequence>,
                 labels: &mut Vec<Vec<usize>>|
     -> Result<()> {
        if !rows.is_empty() {
            sequences.push(Sequence::new(m, std::mem::take(rows))?);
            labels.push(std::mem::take(cur_labels));
        }
        Ok(())
    };
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| parse_err(row, "?", e.to_string()))?;
        if rec.len() != names.len() {
            return Err(parse_err(
                row,
                "?",
                format!("expected {} fields, found {}", names.len(), rec.len()),
            ));
        }
        let id: u64 = rec[0]
            .parse()
            .map_err(|_| parse_err(row, "seq_id", format!("`{}` is not an integer", &rec[0])))?;
        let t: usize = rec[1]
            .parse()
            .map_err(|_| parse_err(row, "t", format!("`{}` is not an integer", &rec[1])))?;
        if current != Some(id) {
            if let Some(prev) = current {
                if id < prev {
                    return Err(parse_err(row, "seq_id", "rows not sorted by seq_id"));
                }
            }
            flush(&mut rows, &mut cur_labels, &mut sequences, &mut labels)?;
            current = Some(id);
        }
        let expected_t = rows.len() / m + 1;
        if t != expected_t {
            return Err(parse_err(row, "t", format!("expected t = {expected_t}, found {t}")));
        }
        for j in 0..m {
            let v: f64 = rec[2 + j]
                .parse()
                .map_err(|_| parse_err(row, names[2 + j], format!("`{}` is not a number", &rec[2 + j])))?;
            if !v.is_finite() {
                return Err(parse_err(row, names[2 + j], "non-finite value"));
            }
            rows.push(v);
        }
        if has_label {
            let l: usize = rec[2 + m]
                .parse()
                .map_err(|_| parse_err(row, "label", format!("`{}` is not an integer", &rec[2 + m])))?;
            if l == 0 {
                return Err(parse_err(row, "label", "labels are 1-based"));
            }
            cur_labels.push(l - 1);
        }
    }
    flush(&mut rows, &mut cur_labels, &mut sequences, &mut labels)?;
    if sequences.is_empty() {
        return Err(parse_err(2, "?", "no data rows"));
    }
    SequenceBatch::new(sequences, if has_label { Some(labels) } else { None })
}

pub fn load_sequences(path: &Path) -> Result<SequenceBatch> {
    read_sequences(fs::File::open(path)?)
}

// ---------------------------------------------------------------------------
// Posterior dumps and other tables
// ---------------------------------------------------------------------------

pub fn write_gamma<W: Write>(out: W, posteriors: &[PosteriorMarginals]) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "seq_id,t,k,gamma")?;
    for (b, p) in posteriors.iter().enumerate() {
        for t in 0..p.len() {
            for (k, g) in p.gamma(t).iter().enumerate() {
                writeln!(w, "{},{},{},{}", b + 1, t + 1, k + 1, fmt_real(*g))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_xi<W: Write>(out: W, posteriors: &[PosteriorMarginals]) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "seq_id,t,k,l,xi")?;
    for (b, p) in posteriors.iter().enumerate() {
        let k = p.n_states();
        for t in 1..p.len() {
            let xi = p.xi(t);
            for a in 0..k {
                for l in 0..k {
                    writeln!(w, "{},{},{},{},{}", b + 1, t + 1, a + 1, l + 1, fmt_real(xi[a * k + l]))?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// One row of a metric report (`metric,value,sigma,detail`); `sigma` is the
/// resolved state permutation, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub sigma: Option<Vec<usize>>,
    pub detail: String,
}

/// 1-based, space-separated permutation.
pub fn fmt_perm(perm: &[usize]) -> String {
    perm.iter().map(|p| (p + 1).to_string()).collect::<Vec<_>>().join(" ")
}

pub fn write_metrics<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "value", "sigma", "detail"])
        .map_err(|e| MsmError::Io(e.into()))?;
    for r in rows {
        let sigma = r.sigma.as_deref().map(fmt_perm).unwrap_or_default();
        w.write_record([r.metric.as_str(), &fmt_real(r.value), &sigma, &r.detail])
            .map_err(|e| MsmError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"{
  "schema_version": 1, "K": 2, "m": 1,
  "chain": {"pi": [0.5, 0.5], "Q": [[0.9, 0.1], [0.2, 0.8]]},
  "initial": [{"mu": [0.0], "cov": {"kind": "diagonal", "values": [1.0]}},
              {"mu": [1.0], "cov": {"kind": "diagonal", "values": [1.0]}}],
  "trans_noise": [{"cov": {"kind": "diagonal", "values": [0.1]}},
                  {"cov": {"kind": "full", "values": [0.2]}}],
  "trans_mean": [{"kind": "linear", "m": 1, "layout": "w[1x1],b[1]", "params": [0.5, 0.0]},
                 {"kind": "polynomial", "m": 1, "degree": 2, "layout": "coeff[1x3]", "params": [0.0, 1.0, -0.5]}]
}"#;

    #[test]
    fn parses_hand_written_document() {
        let model = model_from_str(DOC).unwrap();
        assert_eq!(model.n_states(), 2);
        assert_eq!(model.trans_mean()[1].eval(&[2.0]).unwrap(), vec![2.0 - 2.0]);
    }

    #[test]
    fn row_sum_error_names_row() {
        let bad = DOC.replace("[0.2, 0.8]", "[0.2, 0.7]");
        match model_from_str(&bad).unwrap_err() {
            MsmError::InvalidField { path, .. } => assert_eq!(path, "chain.Q[1]"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_version() {
        let bad = DOC.replace("\"schema_version\": 1", "\"schema_version\": 7");
        assert!(matches!(
            model_from_str(&bad).unwrap_err(),
            MsmError::UnsupportedVersion { found: 7, supported: 1 }
        ));
    }

    #[test]
    fn malformed_field_reports_path() {
        let bad = DOC.replace("\"pi\": [0.5, 0.5]", "\"pi\": [0.5, \"x\"]");
        match model_from_str(&bad).unwrap_err() {
            MsmError::Parse { path, .. } => assert!(path.starts_with("chain.pi"), "{path}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn layout_mismatch_rejected() {
        let bad = DOC.replace("coeff[1x3]", "coeff[1x4]");
        match model_from_str(&bad).unwrap_err() {
            MsmError::InvalidField { path, .. } => assert_eq!(path, "trans_mean[1].layout"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn sequence_csv_roundtrip_and_errors() {
        let text = "seq_id,t,z1,z2,label\n1,1,0.5,1,1\n1,2,0.25,2,2\n2,1,3,4,2\n";
        let batch = read_sequences(text.as_bytes()).unwrap();
        assert_eq!(batch.len(), 2);
        assert_eq!(batch.sequences()[0].row(1), &[0.25, 2.0]);
        assert_eq!(batch.labels().unwrap()[1], vec![1]);
        let mut buf = Vec::new();
        write_sequences(&mut buf, &batch).unwrap();
        let again = read_sequences(buf.as_slice()).unwrap();
        assert_eq!(again, batch);

        let unsorted = "seq_id,t,z1\n2,1,0\n1,1,0\n";
        assert!(read_sequences(unsorted.as_bytes()).is_err());
        let gap = "seq_id,t,z1\n1,1,0\n1,3,0\n";
        assert!(read_sequences(gap.as_bytes()).is_err());
        let nonnum = "seq_id,t,z1\n1,1,abc\n";
        match read_sequences(nonnum.as_bytes()).unwrap_err() {
            MsmError::Parse { path, .. } => assert_eq!(path, "row 2, column z1"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn reals_use_17_digits() {
        assert_eq!(fmt_real(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_real(0.1).parse::<f64>().unwrap(), 0.1);
    }
}
