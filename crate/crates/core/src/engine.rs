//! Jacobi decoding and speculative Jacobi decoding (SJD).
//!
//! Each loop iteration of [`run_speculative_jacobi`] is one parallel
//! forward pass: the model evaluates every window position against the
//! accepted prefix plus the current (possibly stale) window tokens. The
//! same pass supplies the verification targets and the distributions the
//! next iteration drafts from. Drafting is delegated to a [`Drafter`], so
//! baseline SJD ([`SjdDrafter`]) and the verification-prediction drafter
//! share one verification path.
//!
//! Verification walks the window left to right, accepting token `x_i`
//! with probability `min(1, q_i(x_i) / d_i(x_i))`. The first rejection
//! draws a correction from `norm(max(0, q_i - d_i))` and ends the window.
//! With `d_i` the distribution `x_i` was actually sampled from
//! ([`VerifyMode::Strict`]) the output law equals the model's
//! autoregressive law.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::drafter::{TokenDebug, DEBUG_TOP_TOKENS};
use crate::error::{Error, Result};
use crate::model::{AutoregressiveModel, Prompt};
use crate::prob::{
    residual_distribution, sample, top_k_candidates, Distribution, SeededRng, Token,
    DEFAULT_LOG_FLOOR,
};
use crate::trajectory::{DraftRecord, LogLine, TokenRecord};

/// Which distribution verification divides by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum VerifyMode {
    /// The distribution the draft was sampled from. Lossless.
    #[default]
    Strict,
    /// The raw model distribution before drafting adjustments, while still
    /// sampling from the adjusted one. Not lossless.
    Paper,
}

impl std::str::FromStr for VerifyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(Self::Strict),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!("unknown verify mode {other:?}"))),
        }
    }
}

/// How a committed token was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Accepted,
    Resampled,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    /// Parallel forward passes.
    pub nfe: usize,
    pub iterations: usize,
    pub generated: usize,
    /// Draft tokens submitted to verification.
    pub drafted: usize,
    /// Draft tokens that passed verification.
    pub accepted: usize,
    pub corrections: usize,
    /// Accepted-run length of every verify step.
    pub accepted_runs: Vec<usize>,
    /// Per committed token, in sequence order.
    pub provenance: Vec<Provenance>,
    /// Jacobi windows that hit the iteration cap and fell back to
    /// sequential decoding.
    pub jacobi_fallbacks: usize,
    pub boosted: usize,
    pub score_violations: usize,
}

impl RunStats {
    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.drafted > 0).then(|| self.accepted as f64 / self.drafted as f64)
    }

    pub fn mean_accepted_run(&self) -> Option<f64> {
        (!self.accepted_runs.is_empty()).then(|| {
            self.accepted_runs.iter().sum::<usize>() as f64 / self.accepted_runs.len() as f64
        })
    }
}

/// Counters a drafter accumulates over one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrafterDiagnostics {
    pub drafts: usize,
    /// Candidate tokens whose log-probability was raised.
    pub boosted: usize,
    /// Masked tokens whose prediction score came out negative.
    pub score_violations: usize,
}

/// One window position handed to a drafter.
#[derive(Debug, Clone, Copy)]
pub struct DraftSlot<'a> {
    pub pos: usize,
    /// Latest model distribution for this position.
    pub current: &'a Arc<Distribution>,
}

#[derive(Debug, Clone)]
pub struct Draft {
    pub token: Token,
    /// The distribution `token` was sampled from.
    pub sampling: Arc<Distribution>,
    /// Growth mask over the vocabulary, if the drafter computes one.
    pub mask: Option<Vec<bool>>,
    /// Tokens the drafter deliberately pushed up.
    pub raised: Vec<Token>,
    pub debug: Vec<TokenDebug>,
}

/// The drafting step of the SJD loop.
pub trait Drafter {
    fn name(&self) -> &'static str;

    /// Forget all per-run state.
    fn reset(&mut self) {}

    /// Draw one token per slot. Every returned sampling distribution must
    /// give its token positive probability. `detail` requests debug records.
    fn draft(
        &mut self,
        slots: &[DraftSlot<'_>],
        rng: &mut SeededRng,
        detail: bool,
    ) -> Result<Vec<Draft>>;

    /// Every position below `prefix_len` is now fixed.
    fn commit(&mut self, _prefix_len: usize) {}

    fn diagnostics(&self) -> DrafterDiagnostics {
        DrafterDiagnostics::default()
    }

    /// Pairwise comparisons behind the growth mask, when there is one.
    fn growth_comparisons(&self) -> Option<usize> {
        None
    }
}

/// Baseline SJD drafting: sample straight from the current distribution.
#[derive(Debug, Clone, Copy, Default)]
pub struct SjdDrafter;

impl Drafter for SjdDrafter {
    fn name(&self) -> &'static str {
        "sjd"
    }

    fn draft(
        &mut self,
        slots: &[DraftSlot<'_>],
        rng: &mut SeededRng,
        _detail: bool,
    ) -> Result<Vec<Draft>> {
        Ok(slots
            .iter()
            .map(|s| Draft {
                token: sample(s.current, rng),
                sampling: Arc::clone(s.current),
                mask: None,
                raised: Vec::new(),
                debug: Vec::new(),
            })
            .collect())
    }
}

/// Accepted prefix plus the live draft window.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pub prefix: Vec<Token>,
    pub window: Vec<Token>,
    /// Distribution each window token was sampled from.
    pub window_dists: Vec<Arc<Distribution>>,
    /// Model distribution each window position had when it was drafted.
    pub current: Vec<Arc<Distribution>>,
    pub iteration: usize,
}

impl DecodeState {
    pub fn new(
        prefix: Vec<Token>,
        window: Vec<Token>,
        window_dists: Vec<Arc<Distribution>>,
        current: Vec<Arc<Distribution>>,
    ) -> Result<Self> {
        if window.len() != window_dists.len() || window.len() != current.len() {
            return Err(Error::InvalidInput(
                "window, window_dists and current must have equal length".into(),
            ));
        }
        Ok(Self {
            prefix,
            window,
            window_dists,
            current,
            iteration: 0,
        })
    }

    /// Absolute position of the first window slot.
    pub fn base(&self) -> usize {
        self.prefix.len()
    }
}

/// One parallel pass: distribution `i` conditions on `prefix` plus
/// `window[..i]`, for `i` in `0..=window.len()`. The last entry looks one
/// position past the window.
pub fn forward_pass<M: AutoregressiveModel + ?Sized>(
    model: &M,
    prefix: &[Token],
    window: &[Token],
) -> Result<Vec<Arc<Distribution>>> {
    let mut ctx = Vec::with_capacity(prefix.len() + window.len());
    ctx.extend_from_slice(prefix);
    let mut out = Vec::with_capacity(window.len() + 1);
    out.push(model.next_token_distribution(&ctx)?);
    for &t in window {
        ctx.push(t);
        out.push(model.next_token_distribution(&ctx)?);
    }
    Ok(out)
}

/// [`forward_pass`] over a decode state. Counts as one NFE.
pub fn jacobi_step<M: AutoregressiveModel + ?Sized>(
    model: &M,
    state: &DecodeState,
) -> Result<Vec<Arc<Distribution>>> {
    forward_pass(model, &state.prefix, &state.window)
}

#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    /// Leading window tokens that passed.
    pub accepted: usize,
    /// Token drawn from the residual at the first rejection.
    pub correction: Option<Token>,
    /// Every distribution of the pass, `targets[i]` for window slot `i`;
    /// one extra entry looks past the window.
    pub targets: Vec<Arc<Distribution>>,
}

fn acceptance_ratio(target: f64, draft: f64, eps: f64) -> f64 {
    target / draft.max(eps)
}

/// Verifies the window of `state` against one fresh forward pass.
pub fn verify_window<M: AutoregressiveModel + ?Sized>(
    model: &M,
    state: &DecodeState,
    rng: &mut SeededRng,
    mode: VerifyMode,
    eps: f64,
) -> Result<VerifyOutcome> {
    let targets = jacobi_step(model, state)?;
    for (i, &x) in state.window.iter().enumerate() {
        let d = match mode {
            VerifyMode::Strict => &state.window_dists[i],
            VerifyMode::Paper => &state.current[i],
        };
        let q = &targets[i];
        let dx = d.prob(x);
        if mode == VerifyMode::Strict && dx <= 0.0 {
            return Err(Error::InternalLogic(format!(
                "drafted token {x} at slot {i} has zero draft probability"
            )));
        }
        let ratio = acceptance_ratio(q.prob(x), dx, eps);
        if ratio >= 1.0 || rng.uniform() < ratio {
            continue;
        }
        let residual = residual_distribution(q, d)?;
        return Ok(VerifyOutcome {
            accepted: i,
            correction: Some(sample(&residual, rng)),
            targets,
        });
    }
    Ok(VerifyOutcome {
        accepted: state.window.len(),
        correction: None,
        targets,
    })
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub window: usize,
    pub verify: VerifyMode,
    pub eps: f64,
    /// Iteration safety valve; `None` means `16 * target_len`.
    pub max_iters: Option<usize>,
    /// Collect the per-token trajectory log.
    pub record_trajectory: bool,
    /// Collect `(p_t, p'_t, q)` triples for every verified slot.
    pub record_observations: bool,
    /// Run id stamped on trajectory records.
    pub run_id: u64,
}

impl EngineConfig {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            verify: VerifyMode::Strict,
            eps: DEFAULT_LOG_FLOOR,
            max_iters: None,
            record_trajectory: false,
            record_observations: false,
            run_id: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window W must be >= 1".into()));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Config(format!("eps {} outside (0, 1)", self.eps)));
        }
        if self.max_iters == Some(0) {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// The model distribution a drafter saw, what it sampled from, and the
/// exact conditional the slot was verified against.
#[derive(Debug, Clone)]
pub struct VerifyObservation {
    pub iter: usize,
    pub pos: usize,
    pub current: Arc<Distribution>,
    pub sampling: Arc<Distribution>,
    pub target: Arc<Distribution>,
    /// See [`Draft::raised`].
    pub raised: Vec<Token>,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// Full sequence, prompt prefix included.
    pub tokens: Vec<Token>,
    pub stats: RunStats,
    /// Token and draft records, grouped by position in commit order.
    pub trajectory: Vec<LogLine>,
    pub observations: Vec<VerifyObservation>,
}

struct IterTrace {
    iter: usize,
    current: Arc<Distribution>,
    drafted: Token,
    accepted: bool,
    mask: Option<Vec<bool>>,
    debug: Vec<TokenDebug>,
}

#[derive(Default)]
struct TraceBook {
    run: u64,
    live: BTreeMap<usize, Vec<IterTrace>>,
    out: Vec<LogLine>,
}

impl TraceBook {
    /// Emits every live position below `prefix.len()`.
    fn flush(&mut self, prefix: &[Token]) {
        let rest = self.live.split_off(&prefix.len());
        let done = std::mem::replace(&mut self.live, rest);
        for (pos, iters) in done {
            self.emit(pos, prefix[pos], iters);
        }
    }

    fn emit(&mut self, pos: usize, final_token: Token, iters: Vec<IterTrace>) {
        let mut tracked = BTreeSet::from([final_token]);
        for it in &iters {
            tracked.insert(it.drafted);
            let ratio = (DEBUG_TOP_TOKENS as f64 / it.current.vocab_size() as f64).min(1.0);
            tracked.extend(top_k_candidates(&it.current, ratio).unwrap_or_default());
        }
        for it in &iters {
            for &token in &tracked {
                self.out.push(LogLine::Token(TokenRecord {
                    run: self.run,
                    iter: it.iter,
                    pos,
                    token,
                    prob: it.current.prob(token),
                    drafted: token == it.drafted,
                    accepted: token == it.drafted && it.accepted,
                    is_final: token == final_token,
                    masked: it.mask.as_ref().map(|m| m[token]),
                }));
            }
        }
        for it in iters {
            for d in it.debug {
                self.out.push(LogLine::Draft(DraftRecord {
                    run: self.run,
                    iter: it.iter,
                    pos,
                    token: d.token,
                    pbar: d.pbar,
                    score: d.score,
                    mask: d.mask,
                    in_candidates: d.in_candidates,
                    p_before: d.p_before,
                    p_after: d.p_after,
                }));
            }
        }
    }
}

/// Speculative Jacobi decoding of `prompt` with a pluggable drafter.
///
/// Fresh positions entering the window with no model distribution yet are
/// drafted from the uniform distribution. After each verify step the
/// window is refilled to `min(W, remaining)` slots.
pub fn run_speculative_jacobi<M: AutoregressiveModel + ?Sized>(
    model: &M,
    prompt: &Prompt,
    drafter: &mut dyn Drafter,
    rng: &mut SeededRng,
    config: &EngineConfig,
) -> Result<DecodeOutput> {
    config.validate()?;
    let target_len = prompt.target_len;
    let max_iters = config.max_iters.unwrap_or(16 * target_len);
    let vocab = model.vocab_size();
    let uniform = Arc::new(Distribution::uniform(vocab)?);

    drafter.reset();
    let mut stats = RunStats::default();
    let mut book = TraceBook {
        run: config.run_id,
        ..TraceBook::default()
    };
    let mut observations = Vec::new();

    let mut prefix = prompt.prefix.clone();
    let mut current: Vec<Arc<Distribution>> =
        vec![Arc::clone(&uniform); config.window.min(target_len - prefix.len())];

    while prefix.len() < target_len {
        if stats.iterations >= max_iters {
            return Err(Error::Abort(format!(
                "no completion after {max_iters} iterations ({} of {target_len} tokens)",
                prefix.len()
            )));
        }
        stats.iterations += 1;
        let iter = stats.iterations;
        let base = prefix.len();

        let slots: Vec<DraftSlot<'_>> = current
            .iter()
            .enumerate()
            .map(|(i, c)| DraftSlot {
                pos: base + i,
                current: c,
            })
            .collect();
        let drafts = drafter.draft(&slots, rng, config.record_trajectory)?;
        if drafts.len() != slots.len() {
            return Err(Error::InternalLogic(format!(
                "drafter returned {} drafts for {} slots",
                drafts.len(),
                slots.len()
            )));
        }

        let state = DecodeState {
            prefix,
            window: drafts.iter().map(|d| d.token).collect(),
            window_dists: drafts.iter().map(|d| Arc::clone(&d.sampling)).collect(),
            current,
            iteration: iter,
        };
        let outcome = verify_window(model, &state, rng, config.verify, config.eps)?;
        stats.nfe += 1;
        let w = state.window.len();
        let verified = (outcome.accepted + 1).min(w);
        stats.drafted += verified;
        stats.accepted += outcome.accepted;
        stats.accepted_runs.push(outcome.accepted);

        if config.record_observations {
            for i in 0..verified {
                observations.push(VerifyObservation {
                    iter,
                    pos: base + i,
                    current: Arc::clone(&state.current[i]),
                    sampling: Arc::clone(&state.window_dists[i]),
                    target: Arc::clone(&outcome.targets[i]),
                    raised: drafts[i].raised.clone(),
                });
            }
        }
        if config.record_trajectory {
            for (i, d) in drafts.into_iter().enumerate() {
                book.live.entry(base + i).or_default().push(IterTrace {
                    iter,
                    current: Arc::clone(&state.current[i]),
                    drafted: d.token,
                    accepted: i < outcome.accepted,
                    mask: d.mask,
                    debug: d.debug,
                });
            }
        }

        let DecodeState {
            prefix: mut next_prefix,
            window,
            ..
        } = state;
        next_prefix.extend_from_slice(&window[..outcome.accepted]);
        stats
            .provenance
            .extend(std::iter::repeat_n(Provenance::Accepted, outcome.accepted));
        if let Some(c) = outcome.correction {
            next_prefix.push(c);
            stats.corrections += 1;
            stats.provenance.push(Provenance::Resampled);
        }
        prefix = next_prefix;
        drafter.commit(prefix.len());
        if config.record_trajectory {
            book.flush(&prefix);
        }

        let refill = config.window.min(target_len - prefix.len());
        current = (0..refill)
            .map(|j| {
                outcome
                    .targets
                    .get(prefix.len() + j - base)
                    .map_or_else(|| Arc::clone(&uniform), Arc::clone)
            })
            .collect();
    }

    stats.generated = prompt.free_positions();
    let diag = drafter.diagnostics();
    stats.boosted = diag.boosted;
    stats.score_violations = diag.score_violations;
    Ok(DecodeOutput {
        tokens: prefix,
        stats,
        trajectory: book.out,
        observations,
    })
}

/// Greedy Jacobi decoding, window by window.
///
/// Each pass replaces every guess with the argmax given the previous
/// guesses. A window is done once its first `w - 1` guesses survive a pass
/// unchanged: every guess then conditions on a fixed, correct context.
/// That takes at most `w` passes; a window still unsettled after
/// `max_iters` passes (default `W`) finishes sequentially and is counted in
/// `jacobi_fallbacks`. The next window starts from the argmax of the
/// look-ahead distribution of the final pass.
pub fn run_greedy_jacobi<M: AutoregressiveModel + ?Sized>(
    model: &M,
    prompt: &Prompt,
    window: usize,
    max_iters: Option<usize>,
) -> Result<(Vec<Token>, RunStats)> {
    if window == 0 {
        return Err(Error::Config("window W must be >= 1".into()));
    }
    let max_iters = max_iters.unwrap_or(window);
    if max_iters == 0 {
        return Err(Error::Config("max_iters must be >= 1".into()));
    }
    let mut seq = prompt.prefix.clone();
    let mut stats = RunStats::default();
    let mut seed_guess: Token = 0;

    while seq.len() < prompt.target_len {
        let w = window.min(prompt.target_len - seq.len());
        let mut guesses = vec![seed_guess; w];
        let mut settled = false;
        for _ in 0..max_iters {
            let pass = forward_pass(model, &seq, &guesses)?;
            stats.nfe += 1;
            stats.iterations += 1;
            let next: Vec<Token> = pass[..w].iter().map(|d| d.argmax()).collect();
            let stable = next[..w - 1] == guesses[..w - 1];
            guesses = next;
            if stable {
                seed_guess = pass[w].argmax();
                settled = true;
                break;
            }
        }
        if !settled {
            stats.jacobi_fallbacks += 1;
            guesses.clear();
            for _ in 0..w {
                let mut ctx = seq.clone();
                ctx.extend_from_slice(&guesses);
                guesses.push(model.next_token_distribution(&ctx)?.argmax());
                stats.nfe += 1;
            }
            seed_guess = 0;
        }
        seq.extend_from_slice(&guesses);
    }
    stats.generated = prompt.free_positions();
    Ok((seq, stats))
}
