//! Runs every `(decoder, seed, prompt)` job of a configuration and folds
//! the results into a [`ComparisonReport`].
//!
//! Job `(d, s, p)` draws from stream `p` of seed `s`, whatever the decoder,
//! so decoders are compared on paired randomness. Jobs run in parallel and
//! are merged in `(decoder, seed, prompt)` order, so every artifact except
//! `timing.json` is a pure function of the configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sjdvp_core::engine::Drafter;
use sjdvp_core::model::autoregressive_decode;
use sjdvp_core::trajectory::{write_log, LogHeader, LogLine};
use sjdvp_core::{
    run_greedy_jacobi, run_speculative_jacobi, EngineConfig, MarkovModel, Prompt, RunStats,
    SeededRng, SjdDrafter, Token, VpDrafter,
};

use crate::config::{DecoderKind, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::overhead::OverheadReport;

pub const REPORT_SCHEMA: &str = "sjdvp.bench";
pub const REPORT_VERSION: u32 = 1;

/// A validated configuration with its model and prompt set built.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: MarkovModel,
    pub prompts: Vec<Prompt>,
    pub seeds: Vec<u64>,
    pub fingerprint: String,
    /// Drafter settings were checked with the sweep-only relaxed rules.
    pub relaxed: bool,
    pub warnings: Vec<String>,
}

/// Trajectory run id of `(seed, prompt)`.
pub fn run_id(seed: u64, prompt: u64) -> u64 {
    (seed << 32) | (prompt & 0xffff_ffff)
}

impl Experiment {
    pub fn new(config: ExperimentConfig, relaxed: bool) -> Result<Self> {
        let warnings = config.validate(relaxed)?;
        let model = MarkovModel::build(&config.model_spec())?;
        let prompts = (0..config.prompts as u64)
            .map(|id| {
                Prompt::generate(
                    config.prompt_seed,
                    id,
                    config.prefix_len,
                    config.target_len,
                    config.vocab,
                )
            })
            .collect::<sjdvp_core::Result<_>>()?;
        let seeds = config.seeds.expand()?;
        let fingerprint = config.fingerprint();
        Ok(Self {
            config,
            model,
            prompts,
            seeds,
            fingerprint,
            relaxed,
            warnings,
        })
    }

    pub fn drafter(&self, decoder: DecoderKind) -> Result<Box<dyn Drafter>> {
        match decoder {
            DecoderKind::Sjd => Ok(Box::new(SjdDrafter)),
            DecoderKind::SjdVp => {
                let vp = self.config.vp_config();
                let d = if self.relaxed {
                    VpDrafter::new_relaxed(vp)?.0
                } else {
                    VpDrafter::new(vp)?
                };
                Ok(Box::new(d))
            }
            other => Err(CliError::Config(format!("{other} has no drafter"))),
        }
    }

    pub fn engine_config(&self, run: u64, record: bool) -> EngineConfig {
        EngineConfig {
            verify: self.config.verify,
            eps: self.config.eps,
            max_iters: self.config.max_iters,
            record_trajectory: record,
            run_id: run,
            ..EngineConfig::new(self.config.window)
        }
    }

    pub fn log_header(&self, decoder: DecoderKind) -> LogHeader {
        LogHeader::new(
            self.fingerprint.clone(),
            decoder.name(),
            self.config.vocab,
            self.config.window,
            (decoder == DecoderKind::SjdVp).then(|| self.config.vp_config().comparisons()),
        )
    }

    /// One decode. `record` collects the trajectory log (speculative
    /// decoders only).
    pub fn run_one(
        &self,
        decoder: DecoderKind,
        seed: u64,
        prompt: &Prompt,
        record: bool,
    ) -> Result<RunOutput> {
        let start = Instant::now();
        let mut rng = SeededRng::with_stream(seed, prompt.id);
        let (tokens, stats, trajectory) = match decoder {
            DecoderKind::Ar => {
                let (t, s) = autoregressive_decode(&self.model, prompt, &mut rng)?;
                (t, s, Vec::new())
            }
            DecoderKind::Jacobi => {
                let (t, s) = run_greedy_jacobi(
                    &self.model,
                    prompt,
                    self.config.window,
                    self.config.jacobi_max_iters,
                )?;
                (t, s, Vec::new())
            }
            DecoderKind::Sjd | DecoderKind::SjdVp => {
                let mut drafter = self.drafter(decoder)?;
                let cfg = self.engine_config(run_id(seed, prompt.id), record);
                let out =
                    run_speculative_jacobi(&self.model, prompt, drafter.as_mut(), &mut rng, &cfg)?;
                (out.tokens, out.stats, out.trajectory)
            }
        };
        Ok(RunOutput {
            row: RunRow::new(decoder, seed, prompt.id, &stats),
            tokens,
            stats,
            trajectory,
            elapsed: start.elapsed(),
        })
    }

    /// Every job, in `(decoder, seed, prompt)` order.
    pub fn run_all(&self, record: bool) -> Result<Vec<RunOutput>> {
        let jobs: Vec<(DecoderKind, u64, usize)> = self
            .config
            .decoders
            .iter()
            .flat_map(|&d| {
                self.seeds
                    .iter()
                    .flat_map(move |&s| (0..self.prompts.len()).map(move |p| (d, s, p)))
            })
            .collect();
        jobs.par_iter()
            .map(|&(d, s, p)| self.run_one(d, s, &self.prompts[p], record))
            .collect()
    }

    pub fn run(&self) -> Result<ExperimentOutput> {
        let runs = self.run_all(self.config.jsonl)?;
        let report = ComparisonReport::build(self, &runs);
        Ok(ExperimentOutput { report, runs })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub row: RunRow,
    pub tokens: Vec<Token>,
    pub stats: RunStats,
    pub trajectory: Vec<LogLine>,
    pub elapsed: Duration,
}

/// Per-run CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub decoder: DecoderKind,
    pub seed: u64,
    pub prompt: u64,
    pub nfe: usize,
    pub iterations: usize,
    pub generated: usize,
    pub drafted: usize,
    pub accepted: usize,
    pub corrections: usize,
    pub verify_steps: usize,
    pub jacobi_fallbacks: usize,
    pub boosted: usize,
    pub score_violations: usize,
}

impl RunRow {
    fn new(decoder: DecoderKind, seed: u64, prompt: u64, s: &RunStats) -> Self {
        Self {
            decoder,
            seed,
            prompt,
            nfe: s.nfe,
            iterations: s.iterations,
            generated: s.generated,
            drafted: s.drafted,
            accepted: s.accepted,
            corrections: s.corrections,
            verify_steps: s.accepted_runs.len(),
            jacobi_fallbacks: s.jacobi_fallbacks,
            boosted: s.boosted,
            score_violations: s.score_violations,
        }
    }
}

pub const RUNS_CSV_HEADER: &str = "decoder,seed,prompt,nfe,iterations,generated,drafted,accepted,corrections,verify_steps,jacobi_fallbacks,boosted,score_violations,fingerprint";

pub fn runs_csv(rows: &[RunRow], fingerprint: &str) -> String {
    let mut out = format!("{RUNS_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{fingerprint}",
            r.decoder,
            r.seed,
            r.prompt,
            r.nfe,
            r.iterations,
            r.generated,
            r.drafted,
            r.accepted,
            r.corrections,
            r.verify_steps,
            r.jacobi_fallbacks,
            r.boosted,
            r.score_violations
        );
    }
    out
}

/// Sums over a group of runs.
#[derive(Debug, Clone, Copy, Default)]
struct Totals {
    runs: usize,
    nfe: usize,
    iterations: usize,
    generated: usize,
    drafted: usize,
    accepted: usize,
    verify_steps: usize,
    fallbacks: usize,
    boosted: usize,
    violations: usize,
}

impl Totals {
    fn add(&mut self, r: &RunRow) {
        self.runs += 1;
        self.nfe += r.nfe;
        self.iterations += r.iterations;
        self.generated += r.generated;
        self.drafted += r.drafted;
        self.accepted += r.accepted;
        self.verify_steps += r.verify_steps;
        self.fallbacks += r.jacobi_fallbacks;
        self.boosted += r.boosted;
        self.violations += r.score_violations;
    }

    fn of<'a>(rows: impl Iterator<Item = &'a RunRow>) -> Self {
        let mut t = Totals::default();
        rows.for_each(|r| t.add(r));
        t
    }

    fn mean_nfe(&self) -> f64 {
        self.nfe as f64 / self.runs as f64
    }

    fn acceptance_rate(&self) -> Option<f64> {
        (self.drafted > 0).then(|| self.accepted as f64 / self.drafted as f64)
    }

    fn mean_accepted_run(&self) -> Option<f64> {
        (self.verify_steps > 0).then(|| self.accepted as f64 / self.verify_steps as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderSummary {
    pub decoder: DecoderKind,
    pub runs: usize,
    pub generated_tokens: usize,
    pub mean_nfe: f64,
    /// `mean_nfe / baseline mean_nfe`.
    pub nfe_ratio: f64,
    /// `baseline mean_nfe / mean_nfe`.
    pub acceleration: f64,
    pub acceptance_rate: Option<f64>,
    pub mean_accepted_run: Option<f64>,
    pub mean_iterations: f64,
    pub jacobi_fallbacks: usize,
    pub boosted: usize,
    pub score_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub decoder: DecoderKind,
    pub seed: u64,
    pub runs: usize,
    pub generated_tokens: usize,
    pub mean_nfe: f64,
    /// Against the baseline decoder on the same seed.
    pub nfe_ratio: f64,
    pub acceptance_rate: Option<f64>,
    pub mean_accepted_run: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema: String,
    pub version: u32,
    pub fingerprint: String,
    pub baseline: DecoderKind,
    pub prompts: usize,
    pub seeds: Vec<u64>,
    pub window: usize,
    pub target_len: usize,
    pub decoders: Vec<DecoderSummary>,
    pub per_seed: Vec<SeedRow>,
    pub warnings: Vec<String>,
}

impl ComparisonReport {
    pub fn build(exp: &Experiment, runs: &[RunOutput]) -> Self {
        let baseline = exp.config.decoders[0];
        let rows: Vec<&RunRow> = runs.iter().map(|r| &r.row).collect();
        let totals = |d: DecoderKind, seed: Option<u64>| {
            Totals::of(
                rows.iter()
                    .copied()
                    .filter(|r| r.decoder == d && seed.is_none_or(|s| r.seed == s)),
            )
        };
        let base = totals(baseline, None);
        let decoders = exp
            .config
            .decoders
            .iter()
            .map(|&d| {
                let t = totals(d, None);
                DecoderSummary {
                    decoder: d,
                    runs: t.runs,
                    generated_tokens: t.generated,
                    mean_nfe: t.mean_nfe(),
                    nfe_ratio: t.mean_nfe() / base.mean_nfe(),
                    acceleration: base.mean_nfe() / t.mean_nfe(),
                    acceptance_rate: t.acceptance_rate(),
                    mean_accepted_run: t.mean_accepted_run(),
                    mean_iterations: t.iterations as f64 / t.runs as f64,
                    jacobi_fallbacks: t.fallbacks,
                    boosted: t.boosted,
                    score_violations: t.violations,
                }
            })
            .collect();
        let per_seed = exp
            .config
            .decoders
            .iter()
            .flat_map(|&d| {
                exp.seeds.iter().map(move |&s| {
                    let t = totals(d, Some(s));
                    let b = totals(baseline, Some(s));
                    SeedRow {
                        decoder: d,
                        seed: s,
                        runs: t.runs,
                        generated_tokens: t.generated,
                        mean_nfe: t.mean_nfe(),
                        nfe_ratio: t.mean_nfe() / b.mean_nfe(),
                        acceptance_rate: t.acceptance_rate(),
                        mean_accepted_run: t.mean_accepted_run(),
                    }
                })
            })
            .collect();
        Self {
            schema: REPORT_SCHEMA.into(),
            version: REPORT_VERSION,
            fingerprint: exp.fingerprint.clone(),
            baseline,
            prompts: exp.prompts.len(),
            seeds: exp.seeds.clone(),
            window: exp.config.window,
            target_len: exp.config.target_len,
            decoders,
            per_seed,
            warnings: exp.warnings.clone(),
        }
    }

    pub fn summary(&self, d: DecoderKind) -> Option<&DecoderSummary> {
        self.decoders.iter().find(|s| s.decoder == d)
    }

    /// Text table in the layout of a latency comparison.
    pub fn table(&self) -> String {
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:>10} {:>10} {:>13} {:>12} {:>10} {:>10}",
            "decoder", "mean NFE", "NFE ratio", "acceleration", "accept rate", "mean run", "tokens"
        );
        for s in &self.decoders {
            let _ = writeln!(
                out,
                "{:<8} {:>10.3} {:>10.4} {:>12.4}x {:>12} {:>10} {:>10}",
                s.decoder.name(),
                s.mean_nfe,
                s.nfe_ratio,
                s.acceleration,
                opt(s.acceptance_rate),
                opt(s.mean_accepted_run),
                s.generated_tokens
            );
        }
        let _ = writeln!(
            out,
            "baseline {}, {} prompts x {} seeds, W={}, T={}, config {}",
            self.baseline,
            self.prompts,
            self.seeds.len(),
            self.window,
            self.target_len,
            &self.fingerprint[..12]
        );
        out
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: ComparisonReport,
    pub runs: Vec<RunOutput>,
}

/// Wall-clock measurements; the only artifact that varies between
/// identical invocations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub fingerprint: String,
    /// Per decoder: summed per-run wall seconds.
    pub decoder_seconds: Vec<(DecoderKind, f64)>,
    pub overhead: Option<OverheadReport>,
}

impl Timing {
    pub fn from_runs(
        exp: &Experiment,
        runs: &[RunOutput],
        overhead: Option<OverheadReport>,
    ) -> Self {
        let decoder_seconds = exp
            .config
            .decoders
            .iter()
            .map(|&d| {
                let secs = runs
                    .iter()
                    .filter(|r| r.row.decoder == d)
                    .map(|r| r.elapsed.as_secs_f64())
                    .sum();
                (d, secs)
            })
            .collect();
        Self {
            fingerprint: exp.fingerprint.clone(),
            decoder_seconds,
            overhead,
        }
    }
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Core(e.into()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// File name of a decoder's trajectory log.
pub fn trajectory_file(decoder: DecoderKind) -> String {
    format!("trajectory_{}.jsonl", decoder.name())
}

/// `summary.json`, `runs.csv` and, when recorded, one trajectory log per
/// speculative decoder. Timing goes elsewhere.
pub fn write_artifacts(exp: &Experiment, output: &ExperimentOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_json(&dir.join("summary.json"), &output.report)?;
    let rows: Vec<RunRow> = output.runs.iter().map(|r| r.row.clone()).collect();
    write_file(
        &dir.join("runs.csv"),
        runs_csv(&rows, &exp.fingerprint).as_bytes(),
    )?;
    if exp.config.jsonl {
        for &d in &exp.config.decoders {
            if !matches!(d, DecoderKind::Sjd | DecoderKind::SjdVp) {
                continue;
            }
            let lines: Vec<LogLine> = output
                .runs
                .iter()
                .filter(|r| r.row.decoder == d)
                .flat_map(|r| r.trajectory.iter().cloned())
                .collect();
            let path = dir.join(trajectory_file(d));
            let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
            write_log(std::io::BufWriter::new(file), &exp.log_header(d), &lines)?;
        }
    }
    Ok(())
}
