//! Wall time spent inside the drafting step, SJD versus SJD-VP, on the
//! same prompts and seeds. Hardware-specific; reported, never asserted.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sjdvp_core::engine::{Draft, DraftSlot, Drafter, DrafterDiagnostics};
use sjdvp_core::{run_speculative_jacobi, SeededRng};

use crate::config::DecoderKind;
use crate::error::Result;
use crate::experiment::{run_id, Experiment};

/// Times every `draft` call of the wrapped drafter.
pub struct TimedDrafter<'a> {
    inner: &'a mut dyn Drafter,
    pub elapsed: Duration,
    pub calls: usize,
    pub slots: usize,
}

impl<'a> TimedDrafter<'a> {
    pub fn new(inner: &'a mut dyn Drafter) -> Self {
        Self {
            inner,
            elapsed: Duration::ZERO,
            calls: 0,
            slots: 0,
        }
    }
}

impl Drafter for TimedDrafter<'_> {
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    fn reset(&mut self) {
        self.inner.reset();
    }

    fn draft(
        &mut self,
        slots: &[DraftSlot<'_>],
        rng: &mut SeededRng,
        detail: bool,
    ) -> sjdvp_core::Result<Vec<Draft>> {
        let start = Instant::now();
        let out = self.inner.draft(slots, rng, detail);
        self.elapsed += start.elapsed();
        self.calls += 1;
        self.slots += slots.len();
        out
    }

    fn commit(&mut self, prefix_len: usize) {
        self.inner.commit(prefix_len);
    }

    fn diagnostics(&self) -> DrafterDiagnostics {
        self.inner.diagnostics()
    }

    fn growth_comparisons(&self) -> Option<usize> {
        self.inner.growth_comparisons()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftTiming {
    pub decoder: DecoderKind,
    /// Drafting steps, one per iteration.
    pub iterations: usize,
    pub slots: usize,
    pub total_seconds: f64,
    pub mean_us_per_iteration: f64,
    pub mean_us_per_slot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub prompts: usize,
    pub seeds: Vec<u64>,
    pub sjd: DraftTiming,
    pub sjd_vp: DraftTiming,
    /// SJD-VP over SJD per iteration; SJD against itself is 1 by definition.
    pub ratio_per_iteration: f64,
    pub ratio_per_slot: f64,
}

fn time_decoder(
    exp: &Experiment,
    decoder: DecoderKind,
    prompts: usize,
    seeds: &[u64],
) -> Result<DraftTiming> {
    let mut inner = exp.drafter(decoder)?;
    let mut timed = TimedDrafter::new(inner.as_mut());
    for &seed in seeds {
        for prompt in exp.prompts.iter().take(prompts) {
            let mut rng = SeededRng::with_stream(seed, prompt.id);
            let cfg = exp.engine_config(run_id(seed, prompt.id), false);
            run_speculative_jacobi(&exp.model, prompt, &mut timed, &mut rng, &cfg)?;
        }
    }
    let secs = timed.elapsed.as_secs_f64();
    Ok(DraftTiming {
        decoder,
        iterations: timed.calls,
        slots: timed.slots,
        total_seconds: secs,
        mean_us_per_iteration: 1e6 * secs / timed.calls.max(1) as f64,
        mean_us_per_slot: 1e6 * secs / timed.slots.max(1) as f64,
    })
}

/// Sequential, so timings are not distorted by sibling threads.
pub fn overhead_probe(exp: &Experiment, prompts: usize, seeds: &[u64]) -> Result<OverheadReport> {
    let prompts = prompts.min(exp.prompts.len());
    let sjd = time_decoder(exp, DecoderKind::Sjd, prompts, seeds)?;
    let sjd_vp = time_decoder(exp, DecoderKind::SjdVp, prompts, seeds)?;
    Ok(OverheadReport {
        prompts,
        seeds: seeds.to_vec(),
        ratio_per_iteration: sjd_vp.mean_us_per_iteration / sjd.mean_us_per_iteration,
        ratio_per_slot: sjd_vp.mean_us_per_slot / sjd.mean_us_per_slot,
        sjd,
        sjd_vp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ExperimentConfig, Seeds};

    #[test]
    fn probe_reports_finite_positive_costs() {
        let cfg = ExperimentConfig {
            vocab: 16,
            prompts: 4,
            target_len: 40,
            window: 8,
            seeds: Seeds::List(vec![0]),
            ..ExperimentConfig::default()
        };
        let exp = Experiment::new(cfg, false).unwrap();
        let r = overhead_probe(&exp, 4, &[0]).unwrap();
        assert!(r.sjd.iterations > 0 && r.sjd_vp.iterations > 0);
        assert!(r.ratio_per_iteration.is_finite() && r.ratio_per_iteration > 0.0);
    }
}
