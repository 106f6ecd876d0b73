//! Metrics and theory-report CSV files.

use std::io::{self, Write};

use crate::theory::{TheoryReport, TrialRecord};
use crate::trainer::{MetricsRecord, Variant};

pub const METRICS_HEADER: &str = "episode,variant,seed,return,mean100,std100,q1_mean,q2_mean,qdiff,eps,s_scale,buffer_fill,ms";

pub const THEORY_HEADER: &str = "suite,trial,depth,eta,w_b,s,eps_norm,h,edl_cost,xi,gap,bound,v1,v2,v3,alpha,first_difference,grad_error,tol,skipped,passed,s_draws,note";

/// Six significant digits, `%g` style: fixed notation for exponents in
/// `[-4, 6)`, scientific otherwise, trailing zeros trimmed.
pub fn sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

pub fn metrics_row(r: &MetricsRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.episode,
        r.variant,
        r.seed,
        sig6(r.episode_return),
        sig6(r.mean100),
        sig6(r.std100),
        sig6(r.q1_mean),
        sig6(r.q2_mean),
        sig6(r.qdiff),
        sig6(r.eps),
        sig6(r.s_scale),
        r.buffer_fill,
        sig6(r.ms),
    )
}

pub fn write_metrics<W: Write>(records: &[MetricsRecord], mut out: W) -> io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(out, "{}", metrics_row(r))?;
    }
    out.flush()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {reason}")]
pub struct CsvError {
    pub line: usize,
    pub reason: String,
}

fn field<T: std::str::FromStr>(cols: &[&str], i: usize, line: usize) -> Result<T, CsvError> {
    cols[i].parse().map_err(|_| CsvError {
        line,
        reason: format!("column {} cannot parse `{}`", i + 1, cols[i]),
    })
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>, CsvError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        _ => {
            return Err(CsvError {
                line: 1,
                reason: "header mismatch".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, raw) in lines.enumerate() {
        let line = i + 2;
        let cols: Vec<&str> = raw.split(',').collect();
        if cols.len() != 13 {
            return Err(CsvError {
                line,
                reason: format!("{} columns, expected 13", cols.len()),
            });
        }
        let variant: Variant = cols[1].parse().map_err(|e| CsvError { line, reason: e })?;
        out.push(MetricsRecord {
            episode: field(&cols, 0, line)?,
            variant,
            seed: field(&cols, 2, line)?,
            episode_return: field(&cols, 3, line)?,
            mean100: field(&cols, 4, line)?,
            std100: field(&cols, 5, line)?,
            q1_mean: field(&cols, 6, line)?,
            q2_mean: field(&cols, 7, line)?,
            qdiff: field(&cols, 8, line)?,
            eps: field(&cols, 9, line)?,
            s_scale: field(&cols, 10, line)?,
            buffer_fill: field(&cols, 11, line)?,
            ms: field(&cols, 12, line)?,
        });
    }
    Ok(out)
}

fn opt(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        // Full precision so every pass flag can be recomputed from the file.
        format!("{x:e}")
    }
}

pub fn theory_row(r: &TrialRecord, s_draws: usize) -> String {
    let note = r.note.replace([',', '\n'], ";");
    [
        r.suite.to_string(),
        r.trial.to_string(),
        r.depth.to_string(),
        r.eta.to_string(),
        opt(r.w_b),
        opt(r.s),
        opt(r.eps_norm),
        opt(r.h),
        opt(r.edl_cost),
        opt(r.xi),
        opt(r.gap),
        opt(r.bound),
        opt(r.v1),
        opt(r.v2),
        opt(r.v3),
        opt(r.alpha),
        opt(r.first_difference),
        opt(r.grad_error),
        opt(r.tol),
        r.skipped.to_string(),
        r.passed.to_string(),
        s_draws.to_string(),
        note,
    ]
    .join(",")
}

pub fn write_theory_report<W: Write>(report: &TheoryReport, mut out: W) -> io::Result<()> {
    writeln!(out, "{THEORY_HEADER}")?;
    for r in &report.records {
        let draws = if r.suite == crate::theory::Suite::Theorem2 { report.s_draws } else { 0 };
        writeln!(out, "{}", theory_row(r, draws))?;
    }
    out.flush()
}
