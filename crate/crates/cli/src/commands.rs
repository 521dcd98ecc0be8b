use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use msm_core::causal::{self, DEFAULT_THRESHOLD};
use msm_core::datagen::{self, EmissionSpec};
use msm_core::estimation;
use msm_core::inference::{forward_backward_batch, mean_loglik, segment};
use msm_core::io::{self as mio, fmt_real, MetricRow};
use msm_core::metrics::{self, DEFAULT_SAMPLES};
use msm_core::{FitConfig, MatchMode, MsmModel, SequenceBatch, SynthSpec, TransitionOptions};
use nalgebra::DMatrix;
use serde_json::json;

use crate::config::{require, EvalMetric, ExperimentConfig, ALL_METRICS};
use crate::ingest::{ingest, month_of};
use crate::{
    AffineArgs, Cli, Command, EvalArgs, FitArgs, GenerateArgs, GraphArgs, IngestArgs, SegmentArgs, TransitionArgs,
};

/// Progress line on stdout; a closed pipe is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Resolved global settings.
pub struct Ctx {
    pub config: ExperimentConfig,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

impl Ctx {
    fn seed(&self, command: &str) -> Result<u64> {
        match self.seed {
            Some(s) => Ok(s),
            None => bail!("`{command}` needs a seed: pass --seed or set `seed` in the config"),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        Ok(BufWriter::new(
            File::create(&p).with_context(|| format!("creating {}", p.display()))?,
        ))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(n) = cli.threads.or(config.threads) {
        if n == 0 {
            bail!("--threads must be >= 1");
        }
        // A second initialisation in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = cli
        .out
        .clone()
        .or(config.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ctx = Ctx {
        seed: cli.seed.or(config.seed),
        config,
        out,
    };
    match cli.command {
        Command::Generate(a) => generate(&ctx, &a),
        Command::Fit(a) => fit(&ctx, &a),
        Command::Eval(a) => eval(&ctx, &a),
        Command::Segment(a) => segment_cmd(&ctx, &a),
        Command::Graph(a) => graph(&ctx, &a),
        Command::Ingest(a) => ingest_cmd(&ctx, &a),
        Command::ResolveAffine(a) => resolve_affine(&ctx, &a),
    }
}

fn apply_transition(opts: &mut TransitionOptions, kind: &mut msm_core::TransitionKind, a: &TransitionArgs) {
    if let Some(k) = a.kind {
        *kind = k;
    }
    if let Some(v) = a.degree {
        opts.degree = v;
    }
    if let Some(v) = a.hidden {
        opts.hidden = v;
    }
    if let Some(v) = a.activation {
        opts.activation = v;
    }
    if let Some(v) = a.interactions {
        opts.interactions = v;
    }
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

pub fn synth_spec(ctx: &Ctx, a: &GenerateArgs) -> Result<SynthSpec> {
    let mut spec = ctx.config.synth_spec()?;
    spec.seed = ctx.seed("generate")?;
    if let Some(v) = a.k {
        spec.k = v;
    }
    if let Some(v) = a.m {
        spec.m = v;
    }
    if let Some(v) = a.t {
        spec.t = v;
    }
    if let Some(v) = a.n {
        spec.n = v;
    }
    apply_transition(&mut spec.transition_options, &mut spec.transition_kind, &a.transition);
    if let Some(v) = a.p_stay {
        spec.p_stay = v;
    }
    if let Some(v) = a.first_layer_gain {
        spec.first_layer_gain = v;
    }
    if let Some(v) = a.min_edge_weight {
        spec.min_edge_weight = v;
    }
    if let Some(d) = a.emission_dim {
        spec.emission = Some(EmissionSpec {
            output_dim: d,
            ..spec.emission.unwrap_or_default()
        });
    }
    spec.validate()?;
    Ok(spec)
}

/// Fraction of steps whose state differs from the previous one.
pub fn switch_rate(batch: &SequenceBatch) -> f64 {
    let Some(labels) = batch.labels() else {
        return 0.0;
    };
    let (mut switches, mut steps) = (0usize, 0usize);
    for l in labels {
        switches += l.windows(2).filter(|w| w[0] != w[1]).count();
        steps += l.len().saturating_sub(1);
    }
    if steps == 0 {
        0.0
    } else {
        switches as f64 / steps as f64
    }
}

fn generate(ctx: &Ctx, a: &GenerateArgs) -> Result<()> {
    let spec = synth_spec(ctx, a)?;
    let model = datagen::make_ground_truth(&spec)?;
    let data = datagen::make_dataset(&model, &spec)?;
    mio::save_model(&model, &ctx.path("truth.json"))?;
    mio::save_sequences(&ctx.path("data.csv"), &data)?;
    if let Some(net) = datagen::make_emission(&spec)? {
        let obs = datagen::emit_observations(&data, &net)?;
        mio::save_sequences(&ctx.path("observations.csv"), &obs)?;
    }
    say!(
        "K={} m={} T={} N={} switch_rate={:.4}",
        spec.k,
        spec.m,
        spec.t,
        spec.n,
        switch_rate(&data)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

pub fn fit_config(ctx: &Ctx, a: &FitArgs) -> Result<(FitConfig, PathBuf)> {
    let (mut cfg, data) = ctx.config.fit_config()?;
    cfg.seed = ctx.seed("fit")?;
    if let Some(v) = a.k {
        cfg.n_states = v;
    }
    apply_transition(&mut cfg.transition_options, &mut cfg.transition_kind, &a.transition);
    if let Some(v) = a.covariance {
        cfg.covariance = v;
    }
    if let Some(v) = a.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.restarts {
        cfg.restarts = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.optimizer {
        cfg.optimizer = v;
    }
    if let Some(v) = a.plateau_tol {
        cfg.plateau_tol = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    cfg.validate()?;
    let data = require(a.data.clone().or(data), "fit data")?;
    Ok((cfg, data))
}

fn fit(ctx: &Ctx, a: &FitArgs) -> Result<()> {
    let (cfg, data_path) = fit_config(ctx, a)?;
    let data = mio::load_sequences(&data_path)?;
    let report = estimation::fit(&data, &cfg)?;
    mio::save_model(&report.model, &ctx.path("model.json"))?;
    let mut w = ctx.create("trace.csv")?;
    writeln!(w, "epoch,mean_loglik,lr")?;
    for (e, (ll, lr)) in report.trace.iter().zip(&report.lr_trace).enumerate() {
        writeln!(w, "{},{},{}", e + 1, fmt_real(*ll), fmt_real(*lr))?;
    }
    w.flush()?;
    let restarts: Vec<_> = report
        .restarts
        .iter()
        .map(|r| {
            json!({
                "seed": r.seed,
                "final_loglik": r.final_loglik,
                "epochs": r.epochs,
                "reason": r.reason.to_string(),
            })
        })
        .collect();
    let meta = json!({
        "config": cfg,
        "chosen_restart": report.restart + 1,
        "epochs": report.epochs,
        "reason": report.reason.to_string(),
        "initial_loglik": report.initial_loglik,
        "final_loglik": report.final_loglik(),
        "kept_previous": report.kept_previous.iter().map(|k| k + 1).collect::<Vec<_>>(),
        "restarts": restarts,
    });
    fs::write(ctx.path("fit.json"), mio::to_json_string(&meta)?)?;
    say!(
        "restart {} of {}: {} epochs ({}), mean loglik {:.6}",
        report.restart + 1,
        cfg.restarts,
        report.epochs,
        report.reason,
        report.final_loglik()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Metric rows comparing `est` against `truth`; `data` adds segmentation F1
/// (when labelled) and the held-out mean log-likelihood of `est`.
pub fn evaluate(
    truth: &MsmModel,
    est: &MsmModel,
    data: Option<&SequenceBatch>,
    mode: MatchMode,
    samples: usize,
    seed: u64,
    selected: &[EvalMetric],
) -> Result<Vec<MetricRow>> {
    if truth.n_states() != est.n_states() {
        bail!(
            "K mismatch: reference has {} states, estimate has {}",
            truth.n_states(),
            est.n_states()
        );
    }
    if truth.dim() != est.dim() {
        bail!(
            "dimension mismatch: reference m = {}, estimate m = {}",
            truth.dim(),
            est.dim()
        );
    }
    let want = |m: EvalMetric| selected.contains(&m);
    let mut rows = Vec::new();
    let matched = metrics::resolve_permutation(truth.trans_mean(), est.trans_mean(), mode, samples, seed)?;
    if want(EvalMetric::TransitionL2) {
        rows.push(MetricRow {
            metric: "transition_l2".into(),
            value: matched.error,
            sigma: Some(matched.perm.clone()),
            detail: matched.method.to_string(),
        });
        for (i, d) in matched.distances.iter().enumerate() {
            rows.push(MetricRow {
                metric: format!("transition_l2_{}", i + 1),
                value: *d,
                sigma: None,
                detail: String::new(),
            });
        }
    }
    if want(EvalMetric::Chain) {
        rows.push(MetricRow {
            metric: "chain_error".into(),
            value: metrics::chain_alignment_error(truth.chain(), est.chain(), &matched.perm)?,
            sigma: Some(matched.perm.clone()),
            detail: "max abs over pi and Q".into(),
        });
    }
    if let Some(data) = data {
        if data.dim() != est.dim() {
            bail!("data has m = {}, model has m = {}", data.dim(), est.dim());
        }
        if want(EvalMetric::SegmentationF1) {
            if let Some(labels) = data.labels() {
                let posts = forward_backward_batch(est, data)?;
                let truth_l: Vec<usize> = labels.concat();
                let pred: Vec<usize> = posts.iter().flat_map(segment).collect();
                let (f1, perm) =
                    metrics::segmentation_f1(&truth_l, &pred, est.n_states(), msm_core::F1Pooling::Micro, mode)?;
                rows.push(MetricRow {
                    metric: "segmentation_f1".into(),
                    value: f1,
                    sigma: Some(perm),
                    detail: "micro".into(),
                });
            }
        }
        if want(EvalMetric::Loglik) {
            rows.push(MetricRow {
                metric: "heldout_mean_loglik".into(),
                value: mean_loglik(est, data)?,
                sigma: None,
                detail: format!("N={}", data.len()),
            });
        }
    }
    Ok(rows)
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let sec = ctx.config.eval.clone().unwrap_or_default();
    let truth = mio::load_model(&require(a.truth.clone().or(sec.truth), "reference model (--truth)")?)?;
    let est = mio::load_model(&require(a.model.clone().or(sec.model), "estimated model (--model)")?)?;
    let data = match a.data.clone().or(sec.data) {
        Some(p) => Some(mio::load_sequences(&require(Some(p), "data")?)?),
        None => None,
    };
    let mode = a.match_mode.or(sec.match_mode).unwrap_or_default();
    let samples = a.samples.or(sec.samples).unwrap_or(DEFAULT_SAMPLES);
    let selected = sec.metrics.unwrap_or_else(|| ALL_METRICS.to_vec());
    let rows = evaluate(
        &truth,
        &est,
        data.as_ref(),
        mode,
        samples,
        ctx.seed.unwrap_or(0),
        &selected,
    )?;
    mio::write_metrics(ctx.create("metrics.csv")?, &rows)?;
    for r in &rows {
        let sigma = r.sigma.as_deref().map(mio::fmt_perm).unwrap_or_default();
        say!("{:<22} {:>14.6e}  {sigma}", r.metric, r.value);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// segment
// ---------------------------------------------------------------------------

fn read_dates(path: &Path) -> Result<Vec<(usize, usize, String)>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |j: usize| -> Result<usize> {
            rec.get(j)
                .and_then(|c| c.trim().parse().ok())
                .with_context(|| format!("{}: row {} column {}", path.display(), i + 2, j + 1))
        };
        out.push((parse(0)?, parse(1)?, rec.get(2).unwrap_or("").to_string()));
    }
    Ok(out)
}

fn segment_cmd(ctx: &Ctx, a: &SegmentArgs) -> Result<()> {
    let sec = ctx.config.segment.clone().unwrap_or_default();
    let model = mio::load_model(&require(a.model.clone().or(sec.model), "model (--model)")?)?;
    let data = mio::load_sequences(&require(a.data.clone().or(sec.data), "data (--data)")?)?;
    let posts = forward_backward_batch(&model, &data)?;
    mio::write_gamma(ctx.create("gamma.csv")?, &posts)?;
    mio::write_xi(ctx.create("xi.csv")?, &posts)?;
    let mut w = ctx.create("states.csv")?;
    writeln!(w, "seq_id,t,state")?;
    for (b, p) in posts.iter().enumerate() {
        for (t, s) in segment(p).iter().enumerate() {
            writeln!(w, "{},{},{}", b + 1, t + 1, s + 1)?;
        }
    }
    w.flush()?;
    if let Some(dates) = a.dates.clone().or(sec.dates) {
        let dates = read_dates(&require(Some(dates), "date sidecar")?)?;
        let k = model.n_states();
        let mut by_month: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
        for (b, t, date) in &dates {
            let Some(month) = month_of(date) else { continue };
            let Some(p) = posts.get(b.wrapping_sub(1)).filter(|p| *t >= 1 && *t <= p.len()) else {
                bail!("date sidecar refers to step ({b}, {t}) outside the data");
            };
            let e = by_month.entry(month).or_insert_with(|| (vec![0.0; k], 0));
            for (acc, g) in e.0.iter_mut().zip(p.gamma(t - 1)) {
                *acc += g;
            }
            e.1 += 1;
        }
        let mut w = ctx.create("by_month.csv")?;
        writeln!(w, "month,state,mean_gamma,count")?;
        for (month, (sum, n)) in &by_month {
            for (s, v) in sum.iter().enumerate() {
                writeln!(w, "{month},{},{},{n}", s + 1, fmt_real(v / *n as f64))?;
            }
        }
        w.flush()?;
    }
    let total: f64 = posts.iter().map(|p| p.loglik).sum();
    say!(
        "{} sequences, mean loglik {:.6}",
        posts.len(),
        total / data.len() as f64
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// graph
// ---------------------------------------------------------------------------

/// Edge sets encoded by the masks of a locally connected model.
pub fn mask_edges(model: &MsmModel) -> Result<Vec<DMatrix<bool>>> {
    model
        .trans_mean()
        .iter()
        .enumerate()
        .map(|(k, f)| match f.mask() {
            Some(m) => Ok(m.map(|v| v != 0.0)),
            None => bail!("reference state {} has no connectivity mask", k + 1),
        })
        .collect()
}

fn graph(ctx: &Ctx, a: &GraphArgs) -> Result<()> {
    let sec = ctx.config.graph.clone().unwrap_or_default();
    let model = mio::load_model(&require(a.model.clone().or(sec.model), "model (--model)")?)?;
    let data = mio::load_sequences(&require(a.data.clone().or(sec.data), "data (--data)")?)?;
    let tau = a.tau.or(sec.tau).unwrap_or(DEFAULT_THRESHOLD);
    let sets = causal::classify_samples(&model, &data)?;
    let g = causal::regime_graphs(&model, &sets, tau)?;
    causal::write_graph_csv(ctx.create("graph.csv")?, &g)?;
    for k in 0..g.n_regimes() {
        fs::write(ctx.path(&format!("regime_{}.dot", k + 1)), causal::graph_dot(&g, k))?;
        say!("regime {}: {} edges from {} steps", k + 1, g.edge_count(k), g.counts[k]);
    }
    if let Some(truth) = a.truth.clone().or(sec.truth) {
        let truth = mio::load_model(&require(Some(truth), "reference model")?)?;
        let (f1, perm) = causal::graph_f1(&mask_edges(&truth)?, &g.edges, MatchMode::Auto)?;
        let row = MetricRow {
            metric: "graph_f1".into(),
            value: f1,
            sigma: Some(perm),
            detail: format!("tau={tau}"),
        };
        mio::write_metrics(ctx.create("graph_metrics.csv")?, &[row])?;
        say!("graph F1 {f1:.4}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ingest
// ---------------------------------------------------------------------------

fn ingest_cmd(ctx: &Ctx, a: &IngestArgs) -> Result<()> {
    let sec = ctx.config.ingest.clone().unwrap_or_default();
    let input = require(a.input.clone().or(sec.input), "input CSV (--input)")?;
    let normalize = !a.no_normalize && sec.normalize.unwrap_or(true);
    let out = ingest(File::open(&input)?, normalize).with_context(|| format!("ingesting {}", input.display()))?;
    mio::save_sequences(&ctx.path("ingested.csv"), &out.batch)?;
    if let Some(dates) = &out.dates {
        let mut w = ctx.create("dates.csv")?;
        writeln!(w, "seq_id,t,date,month")?;
        for (t, d) in dates.iter().enumerate() {
            let month = month_of(d).map(|m| m.to_string()).unwrap_or_default();
            writeln!(w, "1,{},{},{month}", t + 1, d)?;
        }
        w.flush()?;
    }
    say!(
        "N={} T={} m={}",
        out.batch.len(),
        out.batch.total_steps(),
        out.batch.dim()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// resolve-affine
// ---------------------------------------------------------------------------

fn read_pairs(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if i == 0 && rec.iter().all(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, c)| {
                c.parse::<f64>()
                    .with_context(|| format!("row {}, column {}: non-numeric cell `{c}`", i + 1, j + 1))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn resolve_affine(ctx: &Ctx, a: &AffineArgs) -> Result<()> {
    let sec = ctx.config.resolve_affine.clone().unwrap_or_default();
    let pairs = read_pairs(&require(a.pairs.clone().or(sec.pairs), "pairs CSV (--pairs)")?)?;
    let res = metrics::resolve_affine_pairs(&pairs)?;
    let mut rows = vec![MetricRow {
        metric: "residual".into(),
        value: res.residual,
        sigma: None,
        detail: format!("pairs={}", pairs.len()),
    }];
    let mut report = json!({
        "A": (0..res.a.nrows()).map(|i| res.a.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
        "b": res.b,
        "residual": res.residual,
    });
    match (a.model1.clone().or(sec.model1), a.model2.clone().or(sec.model2)) {
        (Some(p1), Some(p2)) => {
            let m1 = mio::load_model(&require(Some(p1), "model1")?)?;
            let m2 = mio::load_model(&require(Some(p2), "model2")?)?;
            if m1.n_states() != m2.n_states() {
                bail!("K mismatch: {} vs {}", m1.n_states(), m2.n_states());
            }
            let samples = a.samples.or(sec.samples).unwrap_or(DEFAULT_SAMPLES);
            let mode = a.match_mode.or(sec.match_mode).unwrap_or_default();
            let seed = ctx.seed.unwrap_or(0);
            let matched = match_affine(&m1, &m2, &res, mode, samples, seed)?;
            let err = metrics::transition_equiv_error(
                m1.trans_mean(),
                m2.trans_mean(),
                &res.a,
                &res.b,
                &matched.perm,
                samples,
                seed,
            )?;
            rows.push(MetricRow {
                metric: "equiv_error".into(),
                value: err,
                sigma: Some(matched.perm.clone()),
                detail: matched.method.to_string(),
            });
            report["sigma"] = json!(matched.perm.iter().map(|p| p + 1).collect::<Vec<_>>());
            report["equiv_error"] = json!(err);
        }
        (None, None) => {}
        _ => bail!("--model1 and --model2 go together"),
    }
    mio::write_metrics(ctx.create("affine.csv")?, &rows)?;
    fs::write(ctx.path("affine.json"), mio::to_json_string(&report)?)?;
    for r in &rows {
        let sigma = r.sigma.as_deref().map(mio::fmt_perm).unwrap_or_default();
        say!("{:<12} {:>14.6e}  {sigma}", r.metric, r.value);
    }
    Ok(())
}

/// State matching of `m1` against the affinely mapped means of `m2`.
pub fn match_affine(
    m1: &MsmModel,
    m2: &MsmModel,
    res: &msm_core::AffineResolution,
    mode: MatchMode,
    samples: usize,
    seed: u64,
) -> Result<msm_core::MatchResult> {
    let mapped = m2
        .trans_mean()
        .iter()
        .map(|f| msm_core::TransitionFunction::affine_wrapped(f.clone(), res.a.clone(), res.b.clone()))
        .collect::<msm_core::Result<Vec<_>>>()?;
    Ok(metrics::resolve_permutation(
        m1.trans_mean(),
        &mapped,
        mode,
        samples,
        seed,
    )?)
}
