//! One-knob ablation sweeps. Each value gets a full comparison run with all
//! other settings held at the base configuration.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{DecoderKind, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::experiment::Experiment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Knob {
    #[serde(rename = "gamma")]
    Gamma,
    #[serde(rename = "L")]
    HistoryLen,
    #[serde(rename = "N")]
    GrowthSteps,
    #[serde(rename = "topk_ratio")]
    TopkRatio,
    #[serde(rename = "W")]
    Window,
}

impl Knob {
    pub fn name(self) -> &'static str {
        match self {
            Knob::Gamma => "gamma",
            Knob::HistoryLen => "L",
            Knob::GrowthSteps => "N",
            Knob::TopkRatio => "topk_ratio",
            Knob::Window => "W",
        }
    }

    /// `config` with this knob set to `value`.
    pub fn apply(self, config: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let integral = || {
            if value.fract() == 0.0 && value >= 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(CliError::Config(format!(
                    "{} takes non-negative integers, got {value}",
                    self.name()
                )))
            }
        };
        let mut c = config.clone();
        match self {
            Knob::Gamma => c.gamma = value,
            Knob::HistoryLen => c.history_len = integral()?,
            Knob::GrowthSteps => c.growth_steps = integral()?,
            Knob::TopkRatio => c.topk_ratio = value,
            Knob::Window => c.window = integral()?,
        }
        Ok(c)
    }
}

impl std::str::FromStr for Knob {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(Knob::Gamma),
            "L" | "history_len" => Ok(Knob::HistoryLen),
            "N" | "growth_steps" => Ok(Knob::GrowthSteps),
            "topk_ratio" => Ok(Knob::TopkRatio),
            "W" | "window" => Ok(Knob::Window),
            other => Err(CliError::Config(format!(
                "unknown knob {other:?} (gamma, L, N, topk_ratio, W)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub knob: Knob,
    pub value: f64,
    pub fingerprint: String,
    pub baseline: DecoderKind,
    pub baseline_mean_nfe: f64,
    pub decoder: DecoderKind,
    pub mean_nfe: f64,
    pub nfe_ratio: f64,
    pub acceleration: f64,
    pub acceptance_rate: Option<f64>,
    pub mean_accepted_run: Option<f64>,
    pub warnings: Vec<String>,
}

/// Runs the sweep. Every value is validated before the first run, with the
/// relaxed drafter rules (γ = 1, N = 0 and N > L allowed, with warnings).
pub fn ablation_sweep(
    base: &ExperimentConfig,
    knob: Knob,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let experiments = values
        .iter()
        .map(|&v| Experiment::new(knob.apply(base, v)?, true).map(|e| (v, e)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (value, exp) in experiments {
        let out = exp.run()?;
        let r = &out.report;
        let base_summary = &r.decoders[0];
        for s in &r.decoders[1..] {
            rows.push(SweepRow {
                knob,
                value,
                fingerprint: r.fingerprint.clone(),
                baseline: r.baseline,
                baseline_mean_nfe: base_summary.mean_nfe,
                decoder: s.decoder,
                mean_nfe: s.mean_nfe,
                nfe_ratio: s.nfe_ratio,
                acceleration: s.acceleration,
                acceptance_rate: s.acceptance_rate,
                mean_accepted_run: s.mean_accepted_run,
                warnings: r.warnings.clone(),
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from(
        "knob,value,decoder,mean_nfe,baseline,baseline_mean_nfe,nfe_ratio,acceleration,acceptance_rate,mean_accepted_run,warnings,fingerprint\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},\"{}\",{}",
            r.knob.name(),
            r.value,
            r.decoder,
            r.mean_nfe,
            r.baseline,
            r.baseline_mean_nfe,
            r.nfe_ratio,
            r.acceleration,
            opt(r.acceptance_rate),
            opt(r.mean_accepted_run),
            r.warnings.join("; ").replace('"', "'"),
            r.fingerprint
        );
    }
    out
}
