//! External CSV series to the sequence format.
//!
//! Accepted inputs: a header `date,v1,...,vm` (the first column is kept as a
//! date sidecar), headerless numeric columns, or an existing sequence CSV
//! (`seq_id,t,z1,...`), which makes ingestion idempotent.

use std::io::Read;

use anyhow::{anyhow, bail, Result};
use msm_core::{Sequence, SequenceBatch};

#[derive(Clone, Debug)]
pub struct Ingested {
    pub batch: SequenceBatch,
    /// One entry per row of the single ingested sequence.
    pub dates: Option<Vec<String>>,
}

pub fn ingest<R: Read>(input: R, normalize: bool) -> Result<Ingested> {
    let mut text = String::new();
    let mut input = input;
    input.read_to_string(&mut text)?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let cells: Vec<&str> = first.split(',').map(str::trim).collect();
    let (batch, dates) = if cells.len() >= 2 && cells[0] == "seq_id" && cells[1] == "t" {
        (msm_core::io::read_sequences(text.as_bytes())?.without_labels(), None)
    } else {
        read_table(&text)?
    };
    let batch = if normalize { zscore(&batch)? } else { batch };
    Ok(Ingested { batch, dates })
}

fn read_table(text: &str) -> Result<(SequenceBatch, Option<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = rdr.records().enumerate().peekable();
    let mut with_dates = false;
    let mut width = None;
    // A first row without any number is a header; a partly numeric one is
    // data and fails below with the offending cell.
    if let Some((_, Ok(head))) = records.peek() {
        if head.iter().all(|c| c.parse::<f64>().is_err()) {
            with_dates = head.get(0).is_some_and(|c| c.eq_ignore_ascii_case("date"));
            width = Some(head.len());
            records.next();
        }
    }
    let skip = with_dates as usize;
    let mut rows = Vec::new();
    let mut dates = Vec::new();
    for (i, rec) in records {
        let rec = rec.map_err(|e| anyhow!("row {}: {e}", i + 1))?;
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            bail!("row {}: expected {w} columns, found {}", i + 1, rec.len());
        }
        if with_dates {
            dates.push(rec[0].to_string());
        }
        let mut row = Vec::with_capacity(w - skip);
        for (j, cell) in rec.iter().enumerate().skip(skip) {
            let v: f64 = cell
                .parse()
                .map_err(|_| anyhow!("row {}, column {}: non-numeric cell `{cell}`", i + 1, j + 1))?;
            if !v.is_finite() {
                bail!("row {}, column {}: non-finite cell `{cell}`", i + 1, j + 1);
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("no data rows");
    }
    if rows[0].is_empty() {
        bail!("no value columns");
    }
    let seq = Sequence::from_rows(&rows)?;
    Ok((SequenceBatch::new(vec![seq], None)?, with_dates.then_some(dates)))
}

/// Per-column z-score over all steps of all sequences (population variance).
pub fn zscore(batch: &SequenceBatch) -> Result<SequenceBatch> {
    let m = batch.dim();
    let n = batch.total_steps() as f64;
    let mut mean = vec![0.0; m];
    for s in batch.sequences() {
        for t in 0..s.len() {
            for (a, v) in mean.iter_mut().zip(s.row(t)) {
                *a += v;
            }
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; m];
    for s in batch.sequences() {
        for t in 0..s.len() {
            for j in 0..m {
                var[j] += (s.row(t)[j] - mean[j]).powi(2);
            }
        }
    }
    let sd: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    for (j, s) in sd.iter().enumerate() {
        if s.is_nan() || *s <= 0.0 {
            bail!("column {} has zero variance", j + 1);
        }
    }
    let seqs = batch
        .sequences()
        .iter()
        .map(|s| s.map_rows(|r| r.iter().enumerate().map(|(j, v)| (v - mean[j]) / sd[j]).collect()))
        .collect::<msm_core::Result<Vec<_>>>()?;
    Ok(SequenceBatch::new(seqs, batch.labels().map(|l| l.to_vec()))?)
}

/// Month number from `YYYY-MM...`, `YYYY/MM...` or `YYYYMM`.
pub fn month_of(date: &str) -> Option<u32> {
    let d = date.trim();
    let digits = match d.as_bytes().get(4) {
        Some(b'-') | Some(b'/') => d.get(5..7)?,
        _ if d.len() >= 6 && d.bytes().take(6).all(|b| b.is_ascii_digit()) => d.get(4..6)?,
        _ => return None,
    };
    let m: u32 = digits.parse().ok()?;
    (1..=12).contains(&m).then_some(m)
}
