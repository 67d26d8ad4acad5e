//! Acceptance checks, one PASS/FAIL line per criterion. Tolerances are
//! pinned below. Criteria listed in `EXPECTED_RED` are known to fail on
//! this implementation for documented reasons; the run still prints FAIL
//! for them, pins the measured values, and exits non-zero if any other
//! criterion fails or if an expected red turns green.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use num_traits::Zero;
use serde_json::Value;
use sjdvp_cli::experiment::Experiment;
use sjdvp_cli::{DecoderKind, ExperimentConfig};
use sjdvp_core::drafter::{bayesian_fusion, ewa_reference, growth_mask, prediction_score};
use sjdvp_core::model::{build_markov_model, exact_sequence_distribution};
use sjdvp_core::prob::tv_distance;
use sjdvp_core::theory::{
    remainder_pairs, run_trial, summarize_trials, SyntheticPredictor, TrialConfig, TrialSummary,
};
use sjdvp_core::{
    run_speculative_jacobi, vp_draft, Distribution, Drafter, EngineConfig, Prompt, SeededRng,
    SjdDrafter, Token, VpConfig, VpDrafter,
};

const EXPECTED_RED: &[u32] = &[2, 5];

// Criterion 1.
const LOSSLESS_SAMPLES: u64 = 200_000;
const LOSSLESS_TV: f64 = 0.02;
// Criterion 2.
const THEORY_TRIALS: u64 = 1000;
const THEORY_GATES: [(f64, f64); 3] = [(0.6, 0.90), (0.8, 0.95), (0.95, 0.99)];
const THEORY_RESIDUAL: f64 = 0.10;
// Pinned outcome of the Q = 0.6 gate: (reduced, gap trials).
const THEORY_Q06_GOLDEN: (usize, usize) = (202, 240);
// Criterion 3.
const ORACLE_TOL: f64 = 1e-12;
const FUSION_TOL: f64 = 1e-9;
// Criterion 4.
const EQUIV_WINDOWS: u64 = 1000;
const EQUIV_TOL: f64 = 1e-12;
// Criterion 5: golden NFE ratio and means from the first verified run.
const NFE_RATIO_GOLDEN: f64 = 1.0204597618706068;
const NFE_MEANS_GOLDEN: (f64, f64) = (55.768, 56.909);
const GOLDEN_TOL: f64 = 1e-12;
// Criterion 8.
const REMAINDER_TRIALS: usize = 10_000;
const REMAINDER_RATIO: f64 = 3.5;

struct Outcome {
    pass: bool,
    detail: String,
    /// Regression checks that hold whether or not the criterion passes.
    pinned: Result<(), String>,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self {
            pass,
            detail,
            pinned: Ok(()),
        }
    }
}

fn empirical_tv(
    model: &sjdvp_core::MarkovModel,
    prompt: &Prompt,
    make: &dyn Fn() -> Box<dyn Drafter>,
) -> (f64, usize) {
    let exact = exact_sequence_distribution(model, prompt).unwrap();
    let mut counts: BTreeMap<Vec<Token>, u64> = BTreeMap::new();
    let cfg = EngineConfig::new(3);
    let mut boosted = 0;
    for i in 0..LOSSLESS_SAMPLES {
        let mut drafter = make();
        let mut rng = SeededRng::with_stream(11, i);
        let out = run_speculative_jacobi(model, prompt, drafter.as_mut(), &mut rng, &cfg).unwrap();
        boosted += out.stats.boosted;
        *counts.entry(out.tokens).or_default() += 1;
    }
    assert!(
        counts.keys().all(|k| exact.contains_key(k)),
        "decoded an impossible sequence"
    );
    let n = LOSSLESS_SAMPLES as f64;
    let tv = 0.5
        * exact
            .iter()
            .map(|(s, &p)| (p - counts.get(s).copied().unwrap_or(0) as f64 / n).abs())
            .sum::<f64>();
    (tv, boosted)
}

fn criterion_1() -> Outcome {
    let model = build_markov_model(7, 1, 8, 0.5).unwrap();
    let prompt = Prompt::new(0, vec![3], 4).unwrap();
    let (sjd, _) = empirical_tv(&model, &prompt, &|| Box::new(SjdDrafter));
    // Short histories so the drafter actually boosts within T = 4.
    let vp_cfg = VpConfig {
        history_len: 1,
        growth_steps: 1,
        ..VpConfig::default()
    };
    let (vp, boosted) = empirical_tv(&model, &prompt, &|| {
        Box::new(VpDrafter::new(vp_cfg.clone()).unwrap())
    });
    Outcome::new(
        sjd <= LOSSLESS_TV && vp <= LOSSLESS_TV && boosted > 0,
        format!(
            "TV(sjd) = {sjd:.5}, TV(sjd-vp, L=1 N=1) = {vp:.5} <= {LOSSLESS_TV} over {LOSSLESS_SAMPLES} decodes each; {boosted} boosted drafts"
        ),
    )
}

fn theory_summary(accuracy: f64, predictor: SyntheticPredictor) -> TrialSummary {
    let cfg = TrialConfig {
        seed: 0,
        vocab: 32,
        m: 1e-3,
        omega: 1.0,
        accuracy,
        predictor,
    };
    let trials: Vec<_> = (0..THEORY_TRIALS)
        .map(|id| run_trial(&cfg, id).unwrap())
        .collect();
    summarize_trials(&trials)
}

fn criterion_2() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let mut pinned = Ok(());
    for (q, gate) in THEORY_GATES {
        let s = theory_summary(q, SyntheticPredictor::Bernoulli);
        let frac = s.reduced_fraction.unwrap_or(0.0);
        let residual_ok =
            s.first_order_exact == s.gap_trials && s.max_relative_residual <= THEORY_RESIDUAL;
        pass &= frac >= gate && residual_ok;
        parts.push(format!(
            "Q={q}: {}/{} = {frac:.4} (gate {gate}), residual exact-zero on {}/{}",
            s.reduced, s.gap_trials, s.first_order_exact, s.gap_trials
        ));
        if q == 0.6 && (s.reduced, s.gap_trials) != THEORY_Q06_GOLDEN {
            pinned = Err(format!(
                "Q=0.6 moved from {THEORY_Q06_GOLDEN:?} to {:?}",
                (s.reduced, s.gap_trials)
            ));
        }
    }
    let diag: Vec<String> = [
        SyntheticPredictor::ExactCount,
        SyntheticPredictor::ProbabilityMass,
    ]
    .into_iter()
    .map(|p| {
        let s = theory_summary(0.6, p);
        format!("{p:?} at Q=0.6: {:.4}", s.reduced_fraction.unwrap_or(0.0))
    })
    .collect();
    Outcome {
        pass,
        detail: format!(
            "{}; Bernoulli ceiling at Q=0.6 is P(Bin(32,0.6)>=17) ~ 0.84 [other constructions: {}]",
            parts.join("; "),
            diag.join(", ")
        ),
        pinned,
    }
}

fn criterion_3() -> Outcome {
    let mut fails = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            fails.push(name.to_string());
        }
    };
    let ewa = ewa_reference(&[0.3, 0.5], 0.8, 1);
    check("ewa", (ewa - 0.74 / 1.8).abs() <= ORACLE_TOL);
    check(
        "score",
        (prediction_score(0.4, 0.2, 1e-12) - 2f64.ln()).abs() <= ORACLE_TOL,
    );
    check("mask rising", growth_mask(&[0.1, 0.2, 0.3, 0.4], 3));
    check("mask flat", !growth_mask(&[0.2, 0.2, 0.2, 0.2], 3));
    check("mask dip", !growth_mask(&[0.1, 0.3, 0.25, 0.4], 3));
    let p = Distribution::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
    let scores = [0.0, 2f64.ln(), 0.0, 0.0];
    let mask = [false, true, false, false];
    let fused = bayesian_fusion(&p, &scores, &mask, &[0, 1], 1e-12).unwrap();
    let unnormalised = [0.4, 0.6, 0.2, 0.1];
    check(
        "fusion masses",
        (0..4).all(|x| {
            let m = p.prob(x) * (if mask[x] { scores[x] } else { 0.0 }).exp();
            (m - unnormalised[x]).abs() <= ORACLE_TOL
        }),
    );
    let expected = [4.0 / 13.0, 6.0 / 13.0, 2.0 / 13.0, 1.0 / 13.0];
    check(
        "fusion",
        (0..4).all(|x| (fused.prob(x) - expected[x]).abs() <= FUSION_TOL),
    );
    let listed_sum: f64 = [1.0 / 3.0, 0.5, 1.0 / 6.0, 1.0 / 12.0].iter().sum();
    let a = Distribution::new(vec![0.5, 0.5]).unwrap();
    let b = Distribution::new(vec![0.9, 0.1]).unwrap();
    check(
        "tv",
        (tv_distance(&a, &b).unwrap() - 0.4).abs() <= ORACLE_TOL,
    );
    Outcome::new(
        fails.is_empty(),
        format!(
            "ewa {ewa:.12}, ln 2 score, 3 mask fixtures, fusion masses [0.4,0.6,0.2,0.1] -> [4/13,6/13,2/13,1/13] +-{FUSION_TOL} (the listed [1/3,1/2,1/6,1/12] sums to {listed_sum:.6}, not 1), TV 0.4{}",
            if fails.is_empty() { String::new() } else { format!("; failed: {}", fails.join(", ")) }
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut slots = 0;
    for w in 0..EQUIV_WINDOWS {
        let mut rng = SeededRng::with_stream(404, w);
        let vocab = 2 + (rng.uniform() * 63.0) as usize;
        let len = 1 + (rng.uniform() * 16.0) as usize;
        let base = (rng.uniform() * 100.0) as usize;
        let window: Vec<(usize, Arc<Distribution>)> = (0..len)
            .map(|j| {
                let weights: Vec<f64> = (0..vocab)
                    .map(|_| {
                        let u = rng.uniform();
                        // A quarter of entries are exact zeros.
                        if u < 0.25 {
                            0.0
                        } else {
                            u.powi(3)
                        }
                    })
                    .collect();
                let weights = if weights.iter().all(|&x| x == 0.0) {
                    vec![1.0; vocab]
                } else {
                    weights
                };
                (
                    base + j,
                    Arc::new(Distribution::from_weights(weights).unwrap()),
                )
            })
            .collect();
        let mut drafter = VpDrafter::new(VpConfig::default()).unwrap();
        let (tokens, dists) = vp_draft(&mut drafter, &window, &mut rng).unwrap();
        for ((_, p), (d, t)) in window.iter().zip(dists.iter().zip(&tokens)) {
            assert!(p.prob(*t) > 0.0, "drew a zero-probability token");
            for x in 0..vocab {
                worst = worst.max((p.prob(x) - d.prob(x)).abs());
            }
            slots += 1;
        }
    }
    Outcome::new(
        worst <= EQUIV_TOL,
        format!(
            "max |p' - p| = {worst:e} <= {EQUIV_TOL} over {EQUIV_WINDOWS} windows ({slots} slots)"
        ),
    )
}

fn criterion_5() -> Outcome {
    let config = ExperimentConfig::default();
    assert_eq!(
        (
            config.vocab,
            config.window,
            config.target_len,
            config.prompts,
            config.attractor
        ),
        (64, 16, 128, 200, 0.3)
    );
    assert_eq!(config.seeds.expand().unwrap(), vec![0, 1, 2, 3, 4]);
    assert_eq!(config.decoders, vec![DecoderKind::Sjd, DecoderKind::SjdVp]);
    let exp = Experiment::new(config, false).unwrap();
    let report = exp.run().unwrap().report;
    let sjd = report.summary(DecoderKind::Sjd).unwrap();
    let vp = report.summary(DecoderKind::SjdVp).unwrap();
    let per_seed: Vec<String> = report
        .per_seed
        .iter()
        .filter(|r| r.decoder == DecoderKind::SjdVp)
        .map(|r| format!("{:.4}", r.nfe_ratio))
        .collect();
    let pinned = if (vp.nfe_ratio - NFE_RATIO_GOLDEN).abs() <= GOLDEN_TOL
        && (sjd.mean_nfe - NFE_MEANS_GOLDEN.0).abs() <= GOLDEN_TOL
        && (vp.mean_nfe - NFE_MEANS_GOLDEN.1).abs() <= GOLDEN_TOL
    {
        Ok(())
    } else {
        Err(format!(
            "NFE golden moved: ratio {} (golden {NFE_RATIO_GOLDEN}), means {} / {}",
            vp.nfe_ratio, sjd.mean_nfe, vp.mean_nfe
        ))
    };
    Outcome {
        pass: vp.mean_nfe <= sjd.mean_nfe,
        detail: format!(
            "mean NFE sjd {:.3}, sjd-vp {:.3}, ratio {:.6} (gate <= 1.00, golden {NFE_RATIO_GOLDEN}); per-seed ratios [{}]",
            sjd.mean_nfe,
            vp.mean_nfe,
            vp.nfe_ratio,
            per_seed.join(", ")
        ),
        pinned,
    }
}

fn bench(config: &Path, out: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_sjdvp"))
        .arg("bench")
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--overhead-prompts", "5"])
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "bench failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bench.toml");
    fs::write(
        &config,
        "vocab = 32\nprompts = 20\ntarget_len = 48\nwindow = 8\n\
         decoders = [\"sjd\", \"sjd-vp\", \"ar\", \"jacobi\"]\nseeds = [0, 1]\njsonl = true\n",
    )
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    bench(&config, &a);
    bench(&config, &b);
    let files = [
        "summary.json",
        "runs.csv",
        "trajectory_sjd.jsonl",
        "trajectory_sjd-vp.jsonl",
    ];
    let mut bytes = 0;
    let mut differ = Vec::new();
    for f in files {
        let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        bytes += x.len();
        if x != y {
            differ.push(f);
        }
    }
    let timing = a.join("timing.json").exists();
    Outcome::new(
        differ.is_empty() && timing,
        format!(
            "{} files ({bytes} bytes) byte-identical across two invocations; timing.json excluded{}",
            files.len(),
            if differ.is_empty() { String::new() } else { format!("; differ: {differ:?}") }
        ),
    )
}

/// Independent recount straight from the JSONL text.
struct Recount {
    growth: (usize, usize),
    continuation: Vec<[(usize, usize); 2]>,
    precision: Vec<(usize, usize)>,
    mask: (usize, usize),
}

fn strictly_rising(v: &[f64]) -> bool {
    (1..v.len()).all(|i| v[i] > v[i - 1])
}

fn brute_force(path: &Path, n_steps: usize, max_n: usize) -> Recount {
    let text = fs::read_to_string(path).unwrap();
    let mut comparisons = None;
    // (run, pos, token) -> [(iter, prob, accepted, final, masked)]
    let mut series: BTreeMap<(u64, u64, u64), Vec<(u64, f64, bool, bool, Option<bool>)>> =
        BTreeMap::new();
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        match v["kind"].as_str().unwrap() {
            "header" => comparisons = v["growth_comparisons"].as_u64().map(|c| c as usize),
            "token" => series
                .entry((
                    v["run"].as_u64().unwrap(),
                    v["pos"].as_u64().unwrap(),
                    v["token"].as_u64().unwrap(),
                ))
                .or_default()
                .push((
                    v["iter"].as_u64().unwrap(),
                    v["prob"].as_f64().unwrap(),
                    v["accepted"].as_bool().unwrap(),
                    v["final"].as_bool().unwrap(),
                    v.get("masked").and_then(Value::as_bool),
                )),
            _ => {}
        }
    }
    let comparisons = comparisons.expect("log carries growth comparisons");
    let mut r = Recount {
        growth: (0, 0),
        continuation: vec![[(0, 0); 2]; max_n],
        precision: vec![(0, 0); max_n],
        mask: (0, 0),
    };
    for recs in series.values_mut() {
        recs.sort_by_key(|x| x.0);
        let probs: Vec<f64> = recs.iter().map(|x| x.1).collect();
        let is_final = recs.iter().any(|x| x.3);
        if let Some(k) = recs.iter().position(|x| x.2) {
            if k >= n_steps {
                r.growth.1 += 1;
                if strictly_rising(&probs[k - n_steps..=k]) {
                    r.growth.0 += 1;
                }
            }
        }
        for n in 1..=max_n {
            for i in n..probs.len() {
                if !strictly_rising(&probs[i - n..=i]) {
                    continue;
                }
                r.precision[n - 1].1 += 1;
                r.precision[n - 1].0 += usize::from(is_final);
                if i + 1 < probs.len() {
                    let slot = &mut r.continuation[n - 1][usize::from(is_final)];
                    slot.1 += 1;
                    slot.0 += usize::from(probs[i + 1] > probs[i]);
                }
            }
        }
        for (i, rec) in recs.iter().enumerate() {
            if let Some(flag) = rec.4 {
                r.mask.0 += 1;
                let recomputed = i >= comparisons && strictly_rising(&probs[i - comparisons..=i]);
                r.mask.1 += usize::from(recomputed != flag);
            }
        }
    }
    r
}

fn ratio_matches(v: &Value, hits: usize, events: usize) -> bool {
    let frac = (events > 0).then(|| hits as f64 / events as f64);
    v["hits"].as_u64() == Some(hits as u64)
        && v["events"].as_u64() == Some(events as u64)
        && v["fraction"].as_f64() == frac
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fixture");
    let bin = env!("CARGO_BIN_EXE_sjdvp");
    let ok = Command::new(bin)
        .args(["bench", "--seed", "0", "--jsonl", "--overhead-prompts", "0"])
        .args([
            "--set",
            "prompts=10",
            "--set",
            "decoders=[\"sjd-vp\"]",
            "--out",
        ])
        .arg(&out)
        .output()
        .unwrap()
        .status
        .success();
    assert!(ok, "fixture bench failed");
    let log = out.join("trajectory_sjd-vp.jsonl");
    let analysis = dir.path().join("analysis");
    let ok = Command::new(bin)
        .args(["analyze", "--max-n", "5", "--jsonl"])
        .arg(&log)
        .arg("--out")
        .arg(&analysis)
        .output()
        .unwrap()
        .status
        .success();
    assert!(ok, "analyze failed");
    let a: Value =
        serde_json::from_str(&fs::read_to_string(analysis.join("analysis.json")).unwrap()).unwrap();
    let n_steps = a["n_steps"].as_u64().unwrap() as usize;
    let r = brute_force(&log, n_steps, 5);
    let g = &a["growth_fraction"];
    let mut mismatched = Vec::new();
    let growth_frac = (r.growth.1 > 0).then(|| r.growth.0 as f64 / r.growth.1 as f64);
    if g["growing"].as_u64() != Some(r.growth.0 as u64)
        || g["eligible"].as_u64() != Some(r.growth.1 as u64)
        || g["fraction"].as_f64() != growth_frac
    {
        mismatched.push("growth".to_string());
    }
    for n in 1..=5 {
        let c = &a["continuation"][n - 1];
        let [inc, cor] = r.continuation[n - 1];
        if !ratio_matches(&c["correct"], cor.0, cor.1)
            || !ratio_matches(&c["incorrect"], inc.0, inc.1)
        {
            mismatched.push(format!("continuation n={n}"));
        }
        let (hits, events) = r.precision[n - 1];
        if !ratio_matches(&a["precision"][n - 1]["ratio"], hits, events) {
            mismatched.push(format!("precision n={n}"));
        }
    }
    let m = &a["mask_check"];
    if m["checked"].as_u64() != Some(r.mask.0 as u64)
        || m["mismatches"].as_u64() != Some(r.mask.1 as u64)
    {
        mismatched.push("mask".into());
    }
    let runs = a["counts"]["runs"].as_u64().unwrap();
    Outcome::new(
        mismatched.is_empty() && runs == 10 && r.mask.1 == 0 && r.mask.0 > 0,
        format!(
            "{runs}-run fixture: growth {}/{}, continuation and precision n=1..5 recounted exactly; masked flags {}/{} agree{}",
            r.growth.0,
            r.growth.1,
            r.mask.0 - r.mask.1,
            r.mask.0,
            if mismatched.is_empty() { String::new() } else { format!("; mismatched: {mismatched:?}") }
        ),
    )
}

fn criterion_8() -> Outcome {
    let cfg = TrialConfig {
        seed: 8,
        vocab: 32,
        m: 1e-3,
        omega: 1.0,
        accuracy: 0.8,
        predictor: SyntheticPredictor::Bernoulli,
    };
    let (pairs, attempts) = remainder_pairs(&cfg, REMAINDER_TRIALS, 1_000_000).unwrap();
    let mut shrinking = 0;
    let mut zero = 0;
    let mut float_max: f64 = 0.0;
    for p in &pairs {
        shrinking += usize::from(p.shrinks_by(REMAINDER_RATIO).unwrap());
        zero += usize::from(p.full.is_zero() && p.half.is_zero());
        float_max = float_max.max(p.full_f64).max(p.half_f64);
    }
    Outcome::new(
        shrinking == REMAINDER_TRIALS,
        format!(
            "{shrinking}/{} gap trials satisfy err(m/2)*{REMAINDER_RATIO} <= err(m) exactly ({attempts} draws); {zero} have both remainders exactly 0 (TV is piecewise linear); float rounding residual <= {float_max:.1e}",
            pairs.len()
        ),
    )
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "losslessness", criterion_1),
        (2, "tv-reduction theorem", criterion_2),
        (3, "unit oracles", criterion_3),
        (4, "no-history equivalence", criterion_4),
        (5, "nfe non-inferiority", criterion_5),
        (6, "determinism", criterion_6),
        (7, "analysis fidelity", criterion_7),
        (8, "taylor remainder", criterion_8),
    ];
    let mut problems = Vec::new();
    for (id, name, run) in criteria {
        let start = Instant::now();
        let o = run();
        let expected_red = EXPECTED_RED.contains(&id);
        println!(
            "{} criterion {id} ({name}): {} [{:.1}s]{}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64(),
            if !o.pass && expected_red {
                " (expected red, see README)"
            } else {
                ""
            }
        );
        if o.pass == expected_red {
            problems.push(if o.pass {
                format!("criterion {id} passed but is listed as expected red")
            } else {
                format!("criterion {id} failed")
            });
        }
        if let Err(e) = o.pinned {
            problems.push(format!("criterion {id}: {e}"));
        }
    }
    if problems.is_empty() {
        println!(
            "acceptance: all criteria as recorded ({} expected red)",
            EXPECTED_RED.len()
        );
    } else {
        for p in &problems {
            println!("acceptance problem: {p}");
        }
        std::process::exit(1);
    }
}
