//! The `analyze`, `theory-check` and `decode` subcommands as library calls.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sjdvp_core::dynamics::{analyze, summary_csv, AnalysisSummary};
use sjdvp_core::prob::{stable_sum, tv_distance};
use sjdvp_core::theory::{
    decomposition_check, perturbation_from_step, run_trial, summarize_trials, SyntheticPredictor,
    Trial, TrialConfig, TrialSummary,
};
use sjdvp_core::trajectory::{read_log, write_log, TrajectoryLog};
use sjdvp_core::{run_speculative_jacobi, RunStats, SeededRng, Token};

use crate::config::{DecoderKind, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::experiment::{run_id, write_file, write_json, Experiment};

/// Reads and merges logs; refuses mixed fingerprints.
pub fn load_logs(paths: &[PathBuf]) -> Result<TrajectoryLog> {
    if paths.is_empty() {
        return Err(CliError::AnalysisInput("no --jsonl inputs".into()));
    }
    let logs = paths
        .iter()
        .map(|p| {
            let f = fs::File::open(p)
                .map_err(|e| CliError::AnalysisInput(format!("{}: {e}", p.display())))?;
            read_log(BufReader::new(f))
                .map_err(|e| CliError::AnalysisInput(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryLog::merge(logs)?)
}

/// Growth fraction at `n_steps` (default: the log's growth comparisons,
/// else 3) plus continuation and precision for `n = 1..=max_n`. Writes
/// `analysis.json` and `analysis.csv` under `out`.
pub fn analyze_logs(
    paths: &[PathBuf],
    n_steps: Option<usize>,
    max_n: usize,
    out: Option<&Path>,
) -> Result<AnalysisSummary> {
    let log = load_logs(paths)?;
    let n = n_steps.or(log.header.growth_comparisons).unwrap_or(3);
    let summary = analyze(&log, n, max_n).map_err(|e| CliError::AnalysisInput(e.to_string()))?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        write_json(&dir.join("analysis.json"), &summary)?;
        write_file(&dir.join("analysis.csv"), summary_csv(&summary).as_bytes())?;
    }
    Ok(summary)
}

pub fn analysis_text(s: &AnalysisSummary) -> String {
    let f = |x: Option<f64>| x.map_or("n/a".into(), |v| format!("{v:.4}"));
    let mut out = String::new();
    let g = &s.growth_fraction;
    let _ = writeln!(
        out,
        "{} runs, {} positions, {} records ({})",
        s.counts.runs, s.counts.positions, s.counts.token_records, s.decoder
    );
    let _ = writeln!(
        out,
        "accepted tokens growing over {} steps: {} ({} of {}, {} excluded; neural reference {})",
        g.n_steps,
        f(g.fraction),
        g.growing,
        g.eligible,
        g.excluded,
        s.reference.neural_accepted_growth_fraction
    );
    for (c, p) in s.continuation.iter().zip(&s.precision) {
        let _ = writeln!(
            out,
            "n={}: continuation correct {} / incorrect {}; selection precision {}",
            c.n,
            f(c.correct.fraction),
            f(c.incorrect.fraction),
            f(p.ratio.fraction)
        );
    }
    if let Some(m) = &s.mask_check {
        let _ = writeln!(
            out,
            "mask cross-check: {} flags, {} mismatches",
            m.checked, m.mismatches
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryOptions {
    pub seed: u64,
    pub trials: usize,
    pub vocab: usize,
    pub m: f64,
    pub accuracies: Vec<f64>,
    pub predictor: SyntheticPredictor,
    /// SJD-VP decodes whose drafting steps are read as perturbations.
    pub engine_prompts: usize,
}

impl Default for TheoryOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 1000,
            vocab: 32,
            m: 1e-3,
            accuracies: vec![0.6, 0.8, 0.95],
            predictor: SyntheticPredictor::Bernoulli,
            engine_prompts: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBlock {
    pub accuracy: f64,
    pub summary: TrialSummary,
}

/// Drafting steps of real SJD-VP runs, read as perturbations and scored
/// against the verification target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EngineDirections {
    pub observations: usize,
    /// Observations where the drafter raised at least one token.
    pub boosted: usize,
    pub mean_q: Option<f64>,
    pub mean_q_uniform: Option<f64>,
    pub mean_cov: Option<f64>,
    pub mean_cov_uniform: Option<f64>,
    /// Boosted steps that brought the draft closer to the target in TV.
    pub tv_reduced: usize,
    pub mean_tv_change: Option<f64>,
    pub sign_mismatches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    /// Hash of the options and the experiment configuration.
    pub fingerprint: String,
    pub options: TheoryOptions,
    pub synthetic: Vec<AccuracyBlock>,
    pub engine: EngineDirections,
}

pub const THEORY_CSV_HEADER: &str =
    "accuracy,trial,valid,gap_ok,q,q_uniform,e_omega,cov,tv_before,delta_exact,delta_fo,residual,fingerprint";

fn trial_lines(accuracy: f64, trials: &[Trial], fingerprint: &str, out: &mut String) {
    for t in trials {
        match &t.report {
            Some(r) => {
                let _ = writeln!(
                    out,
                    "{accuracy},{},true,{},{},{},{},{},{},{},{},{},{fingerprint}",
                    t.id,
                    r.gap_ok,
                    r.q,
                    r.q_uniform,
                    r.e_omega,
                    r.cov,
                    r.tv_before,
                    r.delta_exact,
                    r.delta_first_order,
                    r.residual
                );
            }
            None => {
                let _ = writeln!(out, "{accuracy},{},false,false,,,,,,,,,{fingerprint}", t.id);
            }
        }
    }
}

/// Direction statistics of SJD-VP drafting steps on `config`'s model.
pub fn engine_directions(
    config: &ExperimentConfig,
    prompts: usize,
    seed: u64,
) -> Result<EngineDirections> {
    let exp = Experiment::new(config.clone(), false)?;
    let mut acc = EngineDirections::default();
    let (mut q, mut qu, mut cov, mut covu, mut dtv) = (vec![], vec![], vec![], vec![], vec![]);
    for prompt in exp.prompts.iter().take(prompts) {
        let mut drafter = exp.drafter(DecoderKind::SjdVp)?;
        let mut cfg = exp.engine_config(run_id(seed, prompt.id), false);
        cfg.record_observations = true;
        let mut rng = SeededRng::with_stream(seed, prompt.id);
        let out = run_speculative_jacobi(&exp.model, prompt, drafter.as_mut(), &mut rng, &cfg)?;
        for obs in &out.observations {
            acc.observations += 1;
            if obs.raised.is_empty() {
                continue;
            }
            let p = &obs.current;
            let m = (0..p.vocab_size())
                .map(|x| (obs.sampling.prob(x) - p.prob(x)).abs())
                .fold(0.0, f64::max);
            if m == 0.0 {
                continue;
            }
            acc.boosted += 1;
            let step = perturbation_from_step(p, (*obs.sampling).clone(), &obs.raised, m)?;
            acc.sign_mismatches += step.sign_mismatches;
            let before = tv_distance(p, &obs.target)?;
            let after = tv_distance(&obs.sampling, &obs.target)?;
            dtv.push(after - before);
            if after < before {
                acc.tv_reduced += 1;
            }
            if let Ok(r) = decomposition_check(p, &obs.target, &step.spec) {
                q.push(r.q);
                qu.push(r.q_uniform);
                cov.push(r.cov);
                covu.push(r.cov_uniform);
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| stable_sum(v.iter().copied()) / v.len() as f64);
    acc.mean_q = mean(&q);
    acc.mean_q_uniform = mean(&qu);
    acc.mean_cov = mean(&cov);
    acc.mean_cov_uniform = mean(&covu);
    acc.mean_tv_change = mean(&dtv);
    Ok(acc)
}

fn theory_fingerprint(opts: &TheoryOptions, config: &ExperimentConfig) -> String {
    let canonical = serde_json::json!({ "options": opts, "config": config.fingerprint() });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

/// Synthetic-predictor trials per accuracy plus the engine measurement.
/// Writes `theory_trials.csv` and `theory_summary.json` under `out`.
pub fn theory_check(
    opts: &TheoryOptions,
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<TheoryReport> {
    if opts.trials == 0 || opts.accuracies.is_empty() {
        return Err(CliError::Config(
            "theory-check needs trials and accuracies".into(),
        ));
    }
    if !(opts.m > 0.0) || opts.vocab < 2 {
        return Err(CliError::Config(
            "theory-check needs m > 0 and vocab >= 2".into(),
        ));
    }
    let fingerprint = theory_fingerprint(opts, config);
    let mut csv = format!("{THEORY_CSV_HEADER}\n");
    let mut synthetic = Vec::new();
    for &accuracy in &opts.accuracies {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(CliError::Config(format!(
                "accuracy {accuracy} outside [0, 1]"
            )));
        }
        let cfg = TrialConfig {
            seed: opts.seed,
            vocab: opts.vocab,
            m: opts.m,
            omega: 1.0,
            accuracy,
            predictor: opts.predictor,
        };
        let trials = (0..opts.trials as u64)
            .map(|id| run_trial(&cfg, id))
            .collect::<sjdvp_core::Result<Vec<_>>>()?;
        trial_lines(accuracy, &trials, &fingerprint, &mut csv);
        synthetic.push(AccuracyBlock {
            accuracy,
            summary: summarize_trials(&trials),
        });
    }
    let engine = if opts.engine_prompts > 0 {
        engine_directions(config, opts.engine_prompts, opts.seed)?
    } else {
        EngineDirections::default()
    };
    let report = TheoryReport {
        fingerprint,
        options: opts.clone(),
        synthetic,
        engine,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        write_file(&dir.join("theory_trials.csv"), csv.as_bytes())?;
        write_json(&dir.join("theory_summary.json"), &report)?;
    }
    Ok(report)
}

pub fn theory_text(r: &TheoryReport) -> String {
    let f = |x: Option<f64>| x.map_or("n/a".into(), |v| format!("{v:.4}"));
    let mut out = String::new();
    for b in &r.synthetic {
        let s = &b.summary;
        let _ = writeln!(
            out,
            "Q={:<5} gap trials {:>5}/{:<5} TV reduced {} ({} unchanged; mean Q_p {}, Q_u {}), max rel. residual {:.3e} ({} with zero first-order term, max abs. residual {:.1e})",
            b.accuracy,
            s.gap_trials,
            s.trials,
            f(s.reduced_fraction),
            s.unchanged,
            f(s.mean_q),
            f(s.mean_q_uniform),
            s.max_relative_residual,
            s.zero_first_order,
            s.max_abs_residual
        );
    }
    let e = &r.engine;
    let _ = writeln!(
        out,
        "engine: {} boosted of {} drafted slots; TV to target reduced in {}; mean Q_p {}, Q_u {}, Cov_p {}, Cov_u {}; {} sign mismatches",
        e.boosted,
        e.observations,
        e.tv_reduced,
        f(e.mean_q),
        f(e.mean_q_uniform),
        f(e.mean_cov),
        f(e.mean_cov_uniform),
        e.sign_mismatches
    );
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub fingerprint: String,
    pub decoder: DecoderKind,
    pub seed: u64,
    pub prompt: u64,
    pub tokens: Vec<Token>,
    pub stats: RunStats,
}

/// One run of `decoder` on prompt `prompt` with `seed`.
pub fn decode_one(
    config: &ExperimentConfig,
    decoder: DecoderKind,
    seed: u64,
    prompt: u64,
    out: Option<&Path>,
) -> Result<DecodeResult> {
    let exp = Experiment::new(config.clone(), false)?;
    let p = exp.prompts.get(prompt as usize).ok_or_else(|| {
        CliError::Config(format!("prompt {prompt} outside 0..{}", exp.prompts.len()))
    })?;
    let run = exp.run_one(decoder, seed, p, config.jsonl)?;
    let result = DecodeResult {
        fingerprint: exp.fingerprint.clone(),
        decoder,
        seed,
        prompt,
        tokens: run.tokens,
        stats: run.stats,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        write_json(&dir.join("decode.json"), &result)?;
        if config.jsonl && matches!(decoder, DecoderKind::Sjd | DecoderKind::SjdVp) {
            let path = dir.join(crate::experiment::trajectory_file(decoder));
            let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
            write_log(
                std::io::BufWriter::new(file),
                &exp.log_header(decoder),
                &run.trajectory,
            )?;
        }
    }
    Ok(result)
}
