//! Statistics over probability trajectories recorded in a trajectory log.
//!
//! A *trajectory* is the sequence of model probabilities one tracked token
//! had at one position of one run, one value per iteration the position
//! spent in the window. "Growth" is always strict: `p[i] > p[i − 1]`.
//! The "correct" token at a position is the one finally committed there.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::drafter::growth_mask;
use crate::error::{Error, Result};
use crate::prob::Token;
use crate::trajectory::TrajectoryLog;

pub const ANALYSIS_SCHEMA: &str = "sjdvp.analysis";

/// Values reported for large neural models; printed for comparison, never
/// used as targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub neural_accepted_growth_fraction: f64,
    pub neural_selection_precision_n2: f64,
    pub neural_selection_precision_n3: f64,
}

pub const REFERENCE_VALUES: ReferenceValues = ReferenceValues {
    neural_accepted_growth_fraction: 0.914,
    neural_selection_precision_n2: 0.7276,
    neural_selection_precision_n3: 0.9635,
};

/// One token's trajectory at one position of one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Series {
    pub iters: Vec<usize>,
    pub probs: Vec<f64>,
    pub masked: Vec<Option<bool>>,
    /// Index of the iteration the token passed verification, if it did.
    pub accepted_at: Option<usize>,
    pub is_final: bool,
}

pub type SeriesKey = (u64, usize, Token);

/// Groups token records into per-`(run, pos, token)` series sorted by
/// iteration.
pub fn index_series(log: &TrajectoryLog) -> Result<BTreeMap<SeriesKey, Series>> {
    let mut raw: BTreeMap<SeriesKey, Vec<usize>> = BTreeMap::new();
    for (i, r) in log.tokens.iter().enumerate() {
        raw.entry((r.run, r.pos, r.token)).or_default().push(i);
    }
    let mut out = BTreeMap::new();
    for (key, mut idx) in raw {
        idx.sort_by_key(|&i| log.tokens[i].iter);
        let mut s = Series::default();
        for (k, &i) in idx.iter().enumerate() {
            let r = &log.tokens[i];
            if r.accepted {
                if s.accepted_at.is_some() {
                    return Err(Error::AnalysisInput(format!(
                        "token {} accepted twice at run {} pos {}",
                        r.token, r.run, r.pos
                    )));
                }
                s.accepted_at = Some(k);
            }
            s.is_final |= r.is_final;
            s.iters.push(r.iter);
            s.probs.push(r.prob);
            s.masked.push(r.masked);
        }
        out.insert(key, s);
    }
    Ok(out)
}

/// `num / den`, with an empty denominator kept distinct from zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Ratio {
    pub hits: usize,
    pub events: usize,
    pub fraction: Option<f64>,
}

impl Ratio {
    fn new(hits: usize, events: usize) -> Self {
        Self {
            hits,
            events,
            fraction: (events > 0).then(|| hits as f64 / events as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthFraction {
    pub n_steps: usize,
    pub accepted_tokens: usize,
    /// Too few snapshots before acceptance.
    pub excluded: usize,
    pub eligible: usize,
    pub growing: usize,
    /// `growing / eligible`; `None` when nothing is eligible.
    pub fraction: Option<f64>,
}

/// Share of verification-accepted tokens whose probability rose strictly
/// over the last `n_steps` comparisons up to and including the accepting
/// iteration.
pub fn accepted_growth_fraction(log: &TrajectoryLog, n_steps: usize) -> Result<GrowthFraction> {
    Ok(growth_from_series(&index_series(log)?, n_steps))
}

fn growth_from_series(series: &BTreeMap<SeriesKey, Series>, n: usize) -> GrowthFraction {
    let (mut accepted, mut eligible, mut growing) = (0, 0, 0);
    for s in series.values() {
        let Some(k) = s.accepted_at else { continue };
        accepted += 1;
        let upto = &s.probs[..=k];
        if upto.len() < n + 1 {
            continue;
        }
        eligible += 1;
        if growth_mask(upto, n) {
            growing += 1;
        }
    }
    GrowthFraction {
        n_steps: n,
        accepted_tokens: accepted,
        excluded: accepted - eligible,
        eligible,
        growing,
        fraction: (eligible > 0).then(|| growing as f64 / eligible as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Continuation {
    pub n: usize,
    pub correct: Ratio,
    pub incorrect: Ratio,
}

/// `P(rise at the next iteration | n consecutive rises so far)`, split by
/// whether the token is the one finally committed at its position.
pub fn continuation_probability(log: &TrajectoryLog, n: usize) -> Result<Continuation> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be >= 1".into()));
    }
    Ok(continuation_from_series(&index_series(log)?, n))
}

fn continuation_from_series(series: &BTreeMap<SeriesKey, Series>, n: usize) -> Continuation {
    let mut tally = [(0usize, 0usize); 2];
    for s in series.values() {
        let slot = &mut tally[usize::from(s.is_final)];
        for i in 0..s.probs.len().saturating_sub(1) {
            if growth_mask(&s.probs[..=i], n) {
                slot.1 += 1;
                if s.probs[i + 1] > s.probs[i] {
                    slot.0 += 1;
                }
            }
        }
    }
    Continuation {
        n,
        correct: Ratio::new(tally[1].0, tally[1].1),
        incorrect: Ratio::new(tally[0].0, tally[0].1),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPrecision {
    pub n: usize,
    /// Qualifying `(position, iteration, token)` triples and how many of
    /// them hold the final token.
    pub ratio: Ratio,
}

/// Among tokens showing `n` consecutive rises at some iteration, the share
/// that are the final token. Each qualifying token counts once per
/// iteration.
pub fn selection_precision(log: &TrajectoryLog, n: usize) -> Result<SelectionPrecision> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be >= 1".into()));
    }
    Ok(precision_from_series(&index_series(log)?, n))
}

fn precision_from_series(series: &BTreeMap<SeriesKey, Series>, n: usize) -> SelectionPrecision {
    let (mut qualifying, mut correct) = (0, 0);
    for s in series.values() {
        for i in 0..s.probs.len() {
            if growth_mask(&s.probs[..=i], n) {
                qualifying += 1;
                correct += usize::from(s.is_final);
            }
        }
    }
    SelectionPrecision {
        n,
        ratio: Ratio::new(correct, qualifying),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct MaskCheck {
    pub comparisons: usize,
    pub checked: usize,
    pub mismatches: usize,
}

/// Recomputes every recorded `masked` flag from the logged trajectory.
/// `None` when the log carries no flags.
pub fn mask_cross_check(log: &TrajectoryLog) -> Result<Option<MaskCheck>> {
    mask_from_series(log, &index_series(log)?)
}

fn mask_from_series(
    log: &TrajectoryLog,
    series: &BTreeMap<SeriesKey, Series>,
) -> Result<Option<MaskCheck>> {
    let Some(comparisons) = log.header.growth_comparisons else {
        return Ok(None);
    };
    let mut check = MaskCheck {
        comparisons,
        ..MaskCheck::default()
    };
    for s in series.values() {
        for (i, flag) in s.masked.iter().enumerate() {
            let Some(flag) = *flag else { continue };
            check.checked += 1;
            if growth_mask(&s.probs[..=i], comparisons) != flag {
                check.mismatches += 1;
            }
        }
    }
    Ok((check.checked > 0).then_some(check))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub runs: usize,
    pub positions: usize,
    pub trajectories: usize,
    pub token_records: usize,
    pub draft_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub schema: String,
    pub fingerprint: String,
    pub decoder: String,
    pub n_steps: usize,
    pub reference: ReferenceValues,
    pub counts: Counts,
    pub growth_fraction: GrowthFraction,
    pub continuation: Vec<Continuation>,
    pub precision: Vec<SelectionPrecision>,
    pub mask_check: Option<MaskCheck>,
}

/// All statistics: the growth fraction at `n_steps`, and continuation and
/// precision for every `n` in `1..=max_n`.
pub fn analyze(log: &TrajectoryLog, n_steps: usize, max_n: usize) -> Result<AnalysisSummary> {
    if n_steps == 0 || max_n == 0 {
        return Err(Error::InvalidInput("n_steps and max_n must be >= 1".into()));
    }
    let series = index_series(log)?;
    let runs: BTreeSet<u64> = log.tokens.iter().map(|r| r.run).collect();
    let positions: BTreeSet<(u64, usize)> = log.tokens.iter().map(|r| (r.run, r.pos)).collect();
    Ok(AnalysisSummary {
        schema: ANALYSIS_SCHEMA.into(),
        fingerprint: log.header.fingerprint.clone(),
        decoder: log.header.decoder.clone(),
        n_steps,
        reference: REFERENCE_VALUES,
        counts: Counts {
            runs: runs.len(),
            positions: positions.len(),
            trajectories: series.len(),
            token_records: log.tokens.len(),
            draft_records: log.drafts.len(),
        },
        growth_fraction: growth_from_series(&series, n_steps),
        continuation: (1..=max_n)
            .map(|n| continuation_from_series(&series, n))
            .collect(),
        precision: (1..=max_n)
            .map(|n| precision_from_series(&series, n))
            .collect(),
        mask_check: mask_from_series(log, &series)?,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v}")).unwrap_or_default()
}

/// Long-format CSV: `statistic,n,class,hits,events,fraction,fingerprint`.
pub fn summary_csv(s: &AnalysisSummary) -> String {
    let mut out = String::from("statistic,n,class,hits,events,fraction,fingerprint\n");
    let g = &s.growth_fraction;
    let _ = writeln!(
        out,
        "accepted_growth,{},all,{},{},{},{}",
        g.n_steps,
        g.growing,
        g.eligible,
        opt(g.fraction),
        s.fingerprint
    );
    for c in &s.continuation {
        for (class, r) in [("correct", &c.correct), ("incorrect", &c.incorrect)] {
            let _ = writeln!(
                out,
                "continuation,{},{class},{},{},{},{}",
                c.n,
                r.hits,
                r.events,
                opt(r.fraction),
                s.fingerprint
            );
        }
    }
    for p in &s.precision {
        let r = &p.ratio;
        let _ = writeln!(
            out,
            "selection_precision,{},all,{},{},{},{}",
            p.n,
            r.hits,
            r.events,
            opt(r.fraction),
            s.fingerprint
        );
    }
    out
}
