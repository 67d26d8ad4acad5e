use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sjdvp_cli::commands::{
    analysis_text, analyze_logs, decode_one, theory_check, theory_text, TheoryOptions,
};
use sjdvp_cli::config::Seeds;
use sjdvp_cli::experiment::{write_artifacts, write_file, write_json, Experiment, Timing};
use sjdvp_cli::overhead::overhead_probe;
use sjdvp_cli::sweep::{ablation_sweep, sweep_csv, Knob};
use sjdvp_cli::{CliError, DecoderKind, ExperimentConfig, Result};
use sjdvp_core::theory::SyntheticPredictor;

#[derive(Parser)]
#[command(
    name = "sjdvp",
    version,
    about = "Speculative Jacobi decoding experiments on toy models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, value parsed as TOML (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Write trajectory logs.
    #[arg(long)]
    jsonl: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::load(self.config.as_deref(), &self.set)?;
        if let Some(s) = self.seed {
            c.seeds = Seeds::List(vec![s]);
        }
        if self.jsonl {
            c.jsonl = true;
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Decode one prompt and print the result as JSON.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "sjd-vp")]
        decoder: DecoderKind,
        #[arg(long, default_value_t = 0)]
        prompt: u64,
    },
    /// Run every configured decoder over all prompts and seeds.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated decoders; the first is the baseline.
        #[arg(long, value_delimiter = ',')]
        decoder: Vec<DecoderKind>,
        /// Prompts used by the sequential drafting-overhead probe (0 skips it).
        #[arg(long, default_value_t = 20)]
        overhead_prompts: usize,
    },
    /// Vary one drafter knob, one full comparison per value.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// gamma, L, N, topk_ratio or W.
        #[arg(long)]
        knob: Knob,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Acceptance-dynamics statistics from trajectory logs.
    Analyze {
        #[arg(long, required = true)]
        jsonl: Vec<PathBuf>,
        /// Growth window for the accepted-token fraction.
        #[arg(long)]
        n_steps: Option<usize>,
        #[arg(long, default_value_t = 5)]
        max_n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Direction-accuracy and remainder checks on synthetic perturbations.
    TheoryCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 32)]
        vocab: usize,
        #[arg(long, default_value_t = 1e-3)]
        m: f64,
        #[arg(long, value_delimiter = ',', default_value = "0.6,0.8,0.95")]
        accuracies: Vec<f64>,
        #[arg(long, default_value = "bernoulli")]
        predictor: SyntheticPredictor,
        /// SJD-VP decodes measured for engine direction accuracy.
        #[arg(long, default_value_t = 20)]
        engine_prompts: usize,
    },
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| CliError::Core(e.into()))?;
    println!("{s}");
    Ok(())
}

fn warn(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn bench(common: &Common, decoders: Vec<DecoderKind>, overhead_prompts: usize) -> Result<()> {
    let mut config = common.load()?;
    if !decoders.is_empty() {
        config.decoders = decoders;
    }
    let exp = Experiment::new(config, false)?;
    warn(&exp.warnings);
    let output = exp.run()?;
    write_artifacts(&exp, &output, &common.out)?;
    let overhead = if overhead_prompts > 0
        && exp.config.decoders.contains(&DecoderKind::Sjd)
        && exp.config.decoders.contains(&DecoderKind::SjdVp)
    {
        Some(overhead_probe(&exp, overhead_prompts, &exp.seeds[..1])?)
    } else {
        None
    };
    write_json(
        &common.out.join("timing.json"),
        &Timing::from_runs(&exp, &output.runs, overhead),
    )?;
    print!("{}", output.report.table());
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Decode {
            common,
            decoder,
            prompt,
        } => {
            let config = common.load()?;
            let seed = config.seeds.expand()?[0];
            let r = decode_one(&config, decoder, seed, prompt, Some(&common.out))?;
            print_json(&r)
        }
        Command::Bench {
            common,
            decoder,
            overhead_prompts,
        } => bench(&common, decoder, overhead_prompts),
        Command::Sweep {
            common,
            knob,
            values,
        } => {
            let config = common.load()?;
            let rows = ablation_sweep(&config, knob, &values)?;
            let mut seen = Vec::new();
            for r in &rows {
                for w in &r.warnings {
                    if !seen.contains(w) {
                        seen.push(w.clone());
                    }
                }
            }
            warn(&seen);
            ensure_dir(&common.out)?;
            let csv = sweep_csv(&rows);
            write_file(&common.out.join("sweep.csv"), csv.as_bytes())?;
            write_json(&common.out.join("sweep.json"), &rows)?;
            print!("{csv}");
            Ok(())
        }
        Command::Analyze {
            jsonl,
            n_steps,
            max_n,
            out,
        } => {
            let s = analyze_logs(&jsonl, n_steps, max_n, out.as_deref())?;
            print!("{}", analysis_text(&s));
            Ok(())
        }
        Command::TheoryCheck {
            common,
            trials,
            vocab,
            m,
            accuracies,
            predictor,
            engine_prompts,
        } => {
            let config = common.load()?;
            let opts = TheoryOptions {
                seed: common.seed.unwrap_or(0),
                trials,
                vocab,
                m,
                accuracies,
                predictor,
                engine_prompts,
            };
            let r = theory_check(&opts, &config, Some(&common.out))?;
            print!("{}", theory_text(&r));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
