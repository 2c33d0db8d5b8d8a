//! Per-fraction summary of a finished `al-run` directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::Serialize;

use evidal_core::active::{read_history_csv, summarize, FractionSummary, MeanStd, QueryStrategy};

use crate::commands::{RunMetadata, METADATA, ROUNDS_CSV};
use crate::error::{CliError, CliResult};

/// Fractions below this are the shared random seed round and carry no
/// comparison.
const COMPARISON_FROM: f64 = 0.02 - 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub round: usize,
    pub labels_fraction: f64,
    pub by_strategy: BTreeMap<QueryStrategy, MeanStd>,
    /// `Some(true)` when top-k mean accuracy ≥ random mean accuracy.
    pub topk_at_least_random: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
    /// `(fractions where top-k ≥ random, fractions compared)`.
    pub wins: Option<(usize, usize)>,
    /// Top-k strictly ahead at the last fraction.
    pub final_strictly_better: Option<bool>,
}

pub fn report(run_dir: &Path) -> CliResult<Report> {
    let csv = run_dir.join(ROUNDS_CSV);
    let file = File::open(&csv).map_err(|e| CliError::Usage(format!("{}: {e}", csv.display())))?;
    let rows = read_history_csv(BufReader::new(file))?;
    let meta: Option<RunMetadata> = match std::fs::read_to_string(run_dir.join(METADATA)) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(_) => None,
    };
    let mut warnings = Vec::new();
    if meta.is_none() {
        warnings.push(format!("no {METADATA}; completeness is judged from the CSV alone"));
    }

    let mut per_job: BTreeMap<(QueryStrategy, u64), usize> = BTreeMap::new();
    for r in &rows {
        *per_job.entry((r.strategy, r.seed)).or_default() += 1;
    }
    let expected = meta.as_ref().map(|m| m.total_rounds).or_else(|| per_job.values().copied().max()).unwrap_or(0);
    for ((strategy, seed), n) in &per_job {
        if *n < expected {
            warnings.push(format!("incomplete run: {strategy} seed {seed} has {n} of {expected} rounds"));
        }
    }
    if let Some(m) = &meta {
        for st in &m.config.active.strategies {
            for seed in &m.config.active.seeds {
                if !per_job.contains_key(&(*st, *seed)) {
                    warnings.push(format!("missing run: {st} seed {seed}"));
                }
            }
        }
    }
    for st in [QueryStrategy::UncertaintyTopk, QueryStrategy::Random] {
        if !per_job.keys().any(|(s, _)| *s == st) {
            warnings.push(format!("strategy {st} absent; comparison skipped"));
        }
    }

    let mut by_round: BTreeMap<usize, ReportRow> = BTreeMap::new();
    for FractionSummary { strategy, round, labels_fraction, accuracy, .. } in summarize(&rows) {
        let row = by_round.entry(round).or_insert_with(|| ReportRow {
            round,
            labels_fraction,
            by_strategy: BTreeMap::new(),
            topk_at_least_random: None,
        });
        row.by_strategy.insert(strategy, accuracy);
    }
    let mut out: Vec<ReportRow> = by_round.into_values().collect();
    for row in &mut out {
        let topk = row.by_strategy.get(&QueryStrategy::UncertaintyTopk);
        let random = row.by_strategy.get(&QueryStrategy::Random);
        if let (Some(t), Some(r)) = (topk, random) {
            if row.labels_fraction >= COMPARISON_FROM {
                row.topk_at_least_random = Some(t.mean >= r.mean);
            }
        }
    }
    let compared: Vec<bool> = out.iter().filter_map(|r| r.topk_at_least_random).collect();
    let wins = (!compared.is_empty()).then(|| (compared.iter().filter(|w| **w).count(), compared.len()));
    let final_strictly_better = out.last().and_then(|r| {
        let t = r.by_strategy.get(&QueryStrategy::UncertaintyTopk)?;
        let rnd = r.by_strategy.get(&QueryStrategy::Random)?;
        Some(t.mean > rnd.mean)
    });
    Ok(Report { rows: out, warnings, wins, final_strictly_better })
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        let strategies: Vec<QueryStrategy> = {
            let mut s: Vec<_> = self.rows.iter().flat_map(|r| r.by_strategy.keys().copied()).collect();
            s.sort();
            s.dedup();
            s
        };
        write!(f, "{:>8}", "labels")?;
        for s in &strategies {
            write!(f, "  {:>24}", format!("{s} acc"))?;
        }
        writeln!(f, "  verdict")?;
        for r in &self.rows {
            write!(f, "{:>7.1}%", r.labels_fraction * 100.0)?;
            for s in &strategies {
                match r.by_strategy.get(s) {
                    Some(m) => write!(f, "  {:>24}", format!("{:.4} ± {:.4} (n={})", m.mean, m.std, m.n))?,
                    None => write!(f, "  {:>24}", "-")?,
                }
            }
            let verdict = match r.topk_at_least_random {
                Some(true) => "topk >= random",
                Some(false) => "topk < random",
                None => "",
            };
            writeln!(f, "  {verdict}")?;
        }
        if let Some((w, n)) = self.wins {
            write!(f, "uncertainty_topk >= random at {w} of {n} fractions from 2%")?;
            if let Some(b) = self.final_strictly_better {
                write!(f, "; final fraction {}", if b { "strictly better" } else { "not strictly better" })?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
