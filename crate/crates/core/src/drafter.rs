//! Verification-prediction drafting.
//!
//! For every window slot the drafter keeps the probability vectors it saw
//! in earlier Jacobi iterations at that absolute position. Tokens whose
//! probability grew strictly over the last `N` iterations and that sit in
//! the top-k candidate set get their log-probability raised by
//! `S = ln p_t - ln p̄_t`, where `p̄_t` is a decay-weighted average of the
//! recent trajectory. The boosted vector is renormalised with a softmax and
//! the draft token is sampled from it.
//!
//! The pure pieces ([`ewa_reference`], [`prediction_score`],
//! [`growth_mask`], [`bayesian_fusion`]) are exposed separately so the
//! analysis and theory modules can recompute them from logs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{Draft, DraftSlot, Drafter, DrafterDiagnostics, VerifyMode};
use crate::error::{Error, Result};
use crate::prob::{
    log_probs, sample, softmax, top_k_candidates, Distribution, SeededRng, Token, DEFAULT_LOG_FLOOR,
};

/// Above this vocabulary size history snapshots keep only the candidate
/// tokens and the drafted token; absent entries read as the log floor.
pub const DENSE_SNAPSHOT_MAX_VOCAB: usize = 4096;

/// Number of top tokens described in per-draft debug records.
pub const DEBUG_TOP_TOKENS: usize = 5;

/// How the growth-step count `N` maps onto pairwise comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GrowthReading {
    /// `N` strict pairwise increases, needing `N + 1` snapshots.
    #[default]
    Pairwise,
    /// The condition holds for every `k` in `0..=N`: `N + 1` increases.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VpConfig {
    /// EWA decay factor.
    pub gamma: f64,
    /// History length `L` used by the EWA reference.
    pub history_len: usize,
    /// Required consecutive growth steps `N`.
    pub growth_steps: usize,
    pub topk_ratio: f64,
    pub eps: f64,
    pub verify_mode: VerifyMode,
    pub growth_reading: GrowthReading,
    /// Whether the EWA reference includes the current iteration (`k = 0`).
    pub ewa_includes_current: bool,
    /// Optional symmetric clamp on the prediction score. Off by default.
    pub score_clamp: Option<f64>,
}

impl Default for VpConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            history_len: 3,
            growth_steps: 3,
            topk_ratio: 0.10,
            eps: DEFAULT_LOG_FLOOR,
            verify_mode: VerifyMode::Strict,
            growth_reading: GrowthReading::Pairwise,
            ewa_includes_current: true,
            score_clamp: None,
        }
    }
}

impl VpConfig {
    /// Pairwise comparisons the growth mask requires.
    pub fn comparisons(&self) -> usize {
        match self.growth_reading {
            GrowthReading::Pairwise => self.growth_steps,
            GrowthReading::Literal => self.growth_steps + 1,
        }
    }

    /// Past snapshots kept per position.
    pub fn history_capacity(&self) -> usize {
        self.history_len.max(self.comparisons()).max(1)
    }

    fn check_common(&self) -> Result<()> {
        if !(self.topk_ratio > 0.0 && self.topk_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "topk_ratio {} outside (0, 1]",
                self.topk_ratio
            )));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Config(format!("eps {} outside (0, 1)", self.eps)));
        }
        if self.history_len < 1 {
            return Err(Error::Config("history length L must be >= 1".into()));
        }
        if let Some(c) = self.score_clamp {
            if !(c > 0.0) {
                return Err(Error::Config(format!("score clamp {c} must be positive")));
            }
        }
        Ok(())
    }

    /// Full invariant check: `gamma` in (0, 1), `L >= 1`, `1 <= N <= L`.
    pub fn validate(&self) -> Result<()> {
        self.check_common()?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "gamma {} outside (0, 1)",
                self.gamma
            )));
        }
        if self.growth_steps < 1 {
            return Err(Error::Config("growth steps N must be >= 1".into()));
        }
        if self.growth_steps > self.history_len {
            return Err(Error::Config(format!(
                "growth steps N = {} exceeds history length L = {}",
                self.growth_steps, self.history_len
            )));
        }
        Ok(())
    }

    /// Looser check used by ablation sweeps, which explore `gamma = 1`,
    /// `N = 0` and `N > L`. Returns warnings for each relaxed invariant.
    pub fn validate_relaxed(&self) -> Result<Vec<String>> {
        self.check_common()?;
        let mut warnings = Vec::new();
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma {} outside (0, 1]",
                self.gamma
            )));
        }
        if self.gamma == 1.0 {
            warnings.push("gamma = 1.0 turns the EWA reference into a plain mean".to_string());
        }
        if self.growth_steps == 0 {
            warnings.push("N = 0 disables the growth requirement".to_string());
        }
        if self.growth_steps > self.history_len {
            warnings.push(format!(
                "N = {} exceeds L = {}; history keeps {} snapshots",
                self.growth_steps,
                self.history_len,
                self.history_capacity()
            ));
        }
        Ok(warnings)
    }
}

/// One past probability vector of a position.
#[derive(Debug, Clone)]
pub enum Snapshot {
    Dense(Arc<Distribution>),
    Sparse {
        entries: BTreeMap<Token, f64>,
        floor: f64,
    },
}

impl Snapshot {
    pub fn prob(&self, token: Token) -> f64 {
        match self {
            Snapshot::Dense(d) => d.prob(token),
            Snapshot::Sparse { entries, floor } => entries.get(&token).copied().unwrap_or(*floor),
        }
    }
}

/// Per-position ring of past snapshots, oldest first.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    capacity: usize,
    snapshots: VecDeque<Snapshot>,
}

impl HistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            snapshots: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, snapshot: Snapshot) {
        self.snapshots.push_back(snapshot);
        while self.snapshots.len() > self.capacity {
            self.snapshots.pop_front();
        }
    }

    pub fn clear(&mut self) {
        self.snapshots.clear();
    }

    /// `token`'s stored values followed by `current`, oldest first.
    pub fn trajectory_into(&self, token: Token, current: f64, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.snapshots.iter().map(|s| s.prob(token)));
        out.push(current);
    }
}

/// Decay-weighted mean of the newest `horizon + 1` values of `trajectory`
/// (newest last, weight `gamma^k` for the value `k` steps back). Fewer
/// values shrink the window. Returns 0 for an empty trajectory.
pub fn ewa_reference(trajectory: &[f64], gamma: f64, horizon: usize) -> f64 {
    let n = trajectory.len();
    if n == 0 {
        return 0.0;
    }
    let k_max = horizon.min(n - 1);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut w = 1.0;
    for k in 0..=k_max {
        num += w * trajectory[n - 1 - k];
        den += w;
        w *= gamma;
    }
    num / den
}

/// `ln max(p, eps) - ln max(p̄, eps)`.
pub fn prediction_score(current: f64, reference: f64, eps: f64) -> f64 {
    current.max(eps).ln() - reference.max(eps).ln()
}

/// True iff the last `comparisons` consecutive pairs of `trajectory` are
/// strict increases. Too short a trajectory gives false.
pub fn growth_mask(trajectory: &[f64], comparisons: usize) -> bool {
    let n = trajectory.len();
    if n < comparisons + 1 {
        return false;
    }
    trajectory[n - 1 - comparisons..]
        .windows(2)
        .all(|w| w[1] > w[0])
}

/// Adds `mask * score` to the log-probability of every candidate token and
/// renormalises. Non-candidates keep their log-probability. When nothing is
/// boosted the input is returned unchanged.
pub fn bayesian_fusion(
    current: &Distribution,
    scores: &[f64],
    mask: &[bool],
    candidates: &[Token],
    eps: f64,
) -> Result<Distribution> {
    let v = current.vocab_size();
    if scores.len() != v || mask.len() != v {
        return Err(Error::InvalidInput(format!(
            "fusion inputs have lengths {} / {} for vocab {v}",
            scores.len(),
            mask.len()
        )));
    }
    if let Some(&t) = candidates.iter().find(|&&t| t >= v) {
        return Err(Error::InvalidInput(format!(
            "candidate {t} outside vocab {v}"
        )));
    }
    let boosted: Vec<Token> = candidates
        .iter()
        .copied()
        .filter(|&t| mask[t] && scores[t] != 0.0)
        .collect();
    if boosted.is_empty() {
        return Ok(current.clone());
    }
    let mut logits = log_probs(current, eps);
    for t in boosted {
        logits.add(t, scores[t])?;
    }
    Ok(softmax(&logits))
}

/// Per-token view of one drafting decision, for debug logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDebug {
    pub token: Token,
    pub pbar: f64,
    pub score: f64,
    pub mask: bool,
    pub in_candidates: bool,
    pub p_before: f64,
    pub p_after: f64,
}

/// Result of drafting one position.
#[derive(Debug, Clone)]
pub struct PositionDraft {
    pub token: Token,
    pub sampling: Distribution,
    pub mask: Vec<bool>,
    pub scores: Vec<f64>,
    pub reference: Vec<f64>,
    pub candidates: Vec<Token>,
}

/// The verification-prediction drafter. Owns one [`HistoryBuffer`] per
/// absolute position of the live window.
#[derive(Debug, Clone)]
pub struct VpDrafter {
    config: VpConfig,
    histories: BTreeMap<usize, HistoryBuffer>,
    diagnostics: DrafterDiagnostics,
    scratch: Vec<f64>,
}

impl VpDrafter {
    pub fn new(config: VpConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::unchecked(config))
    }

    /// Accepts sweep-only settings; see [`VpConfig::validate_relaxed`].
    pub fn new_relaxed(config: VpConfig) -> Result<(Self, Vec<String>)> {
        let warnings = config.validate_relaxed()?;
        Ok((Self::unchecked(config), warnings))
    }

    fn unchecked(config: VpConfig) -> Self {
        Self {
            config,
            histories: BTreeMap::new(),
            diagnostics: DrafterDiagnostics::default(),
            scratch: Vec::new(),
        }
    }

    pub fn config(&self) -> &VpConfig {
        &self.config
    }

    pub fn history(&self, pos: usize) -> Option<&HistoryBuffer> {
        self.histories.get(&pos)
    }

    pub fn live_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.histories.keys().copied()
    }

    fn reference(&self, trajectory: &[f64]) -> f64 {
        let c = &self.config;
        if c.ewa_includes_current {
            ewa_reference(trajectory, c.gamma, c.history_len)
        } else if trajectory.len() > 1 {
            ewa_reference(
                &trajectory[..trajectory.len() - 1],
                c.gamma,
                c.history_len - 1,
            )
        } else {
            trajectory[0]
        }
    }

    /// Drafts one position and records `current` into its history.
    pub fn draft_position(
        &mut self,
        pos: usize,
        current: &Arc<Distribution>,
        rng: &mut SeededRng,
    ) -> Result<PositionDraft> {
        let v = current.vocab_size();
        let comparisons = self.config.comparisons();
        let candidates = top_k_candidates(current, self.config.topk_ratio)?;
        let capacity = self.config.history_capacity();
        let mut scratch = std::mem::take(&mut self.scratch);
        let history = self
            .histories
            .entry(pos)
            .or_insert_with(|| HistoryBuffer::new(capacity));

        let mut mask = vec![false; v];
        let mut scores = vec![0.0; v];
        let mut reference = current.probs().to_vec();
        let eval_all = v <= DENSE_SNAPSHOT_MAX_VOCAB;
        let tokens: Vec<Token> = if eval_all {
            (0..v).collect()
        } else {
            candidates.clone()
        };
        let mut boosted = Vec::new();
        for &t in &tokens {
            history.trajectory_into(t, current.prob(t), &mut scratch);
            mask[t] = growth_mask(&scratch, comparisons);
            if mask[t] {
                boosted.push((t, scratch.clone()));
            }
        }
        let history_len = history.len();
        let in_candidates: BTreeSet<Token> = candidates.iter().copied().collect();
        for (t, traj) in boosted {
            if !in_candidates.contains(&t) {
                continue;
            }
            let pbar = self.reference(&traj);
            let mut s = prediction_score(current.prob(t), pbar, self.config.eps);
            if s < 0.0 {
                self.diagnostics.score_violations += 1;
            }
            if let Some(c) = self.config.score_clamp {
                s = s.clamp(-c, c);
            }
            reference[t] = pbar;
            scores[t] = s;
            self.diagnostics.boosted += 1;
        }
        let sampling = bayesian_fusion(current, &scores, &mask, &candidates, self.config.eps)?;
        let token = sample(&sampling, rng);

        let history = self.histories.get_mut(&pos).expect("inserted above");
        debug_assert_eq!(history.len(), history_len);
        history.push(if eval_all {
            Snapshot::Dense(Arc::clone(current))
        } else {
            let floor = self.config.eps;
            let entries = candidates
                .iter()
                .chain(std::iter::once(&token))
                .map(|&t| (t, current.prob(t)))
                .collect();
            Snapshot::Sparse { entries, floor }
        });
        self.scratch = scratch;
        self.diagnostics.drafts += 1;

        Ok(PositionDraft {
            token,
            sampling,
            mask,
            scores,
            reference,
            candidates,
        })
    }

    fn debug_records(
        &self,
        current: &Distribution,
        history: Option<&HistoryBuffer>,
        d: &PositionDraft,
    ) -> Vec<TokenDebug> {
        let mut tokens = vec![d.token];
        let top = top_k_candidates(
            current,
            (DEBUG_TOP_TOKENS as f64 / current.vocab_size() as f64).min(1.0),
        )
        .unwrap_or_default();
        for t in top {
            if !tokens.contains(&t) {
                tokens.push(t);
            }
        }
        let mut traj = Vec::new();
        tokens
            .into_iter()
            .map(|t| {
                // `history` already holds `current` as its newest snapshot.
                let (pbar, score) = if d.scores[t] != 0.0 {
                    (d.reference[t], d.scores[t])
                } else {
                    match history {
                        Some(h) => {
                            h.trajectory_into(t, current.prob(t), &mut traj);
                            traj.pop();
                            let pbar = self.reference(&traj);
                            (
                                pbar,
                                prediction_score(current.prob(t), pbar, self.config.eps),
                            )
                        }
                        None => (current.prob(t), 0.0),
                    }
                };
                TokenDebug {
                    token: t,
                    pbar,
                    score,
                    mask: d.mask[t],
                    in_candidates: d.candidates.contains(&t),
                    p_before: current.prob(t),
                    p_after: d.sampling.prob(t),
                }
            })
            .collect()
    }
}

impl Drafter for VpDrafter {
    fn name(&self) -> &'static str {
        "sjd-vp"
    }

    fn reset(&mut self) {
        self.histories.clear();
        self.diagnostics = DrafterDiagnostics::default();
    }

    fn growth_comparisons(&self) -> Option<usize> {
        Some(self.config.comparisons())
    }

    fn draft(
        &mut self,
        slots: &[DraftSlot<'_>],
        rng: &mut SeededRng,
        detail: bool,
    ) -> Result<Vec<Draft>> {
        slots
            .iter()
            .map(|slot| {
                let d = self.draft_position(slot.pos, slot.current, rng)?;
                let debug = if detail {
                    self.debug_records(slot.current, self.histories.get(&slot.pos), &d)
                } else {
                    Vec::new()
                };
                let raised = d
                    .candidates
                    .iter()
                    .copied()
                    .filter(|&t| d.mask[t] && d.scores[t] > 0.0)
                    .collect();
                Ok(Draft {
                    token: d.token,
                    sampling: Arc::new(d.sampling),
                    mask: Some(d.mask),
                    raised,
                    debug,
                })
            })
            .collect()
    }

    fn commit(&mut self, prefix_len: usize) {
        self.histories = self.histories.split_off(&prefix_len);
    }

    fn diagnostics(&self) -> DrafterDiagnostics {
        self.diagnostics
    }
}

/// Drafts a whole window with `drafter`. Returns the sampled tokens and the
/// distributions they were sampled from.
pub fn vp_draft(
    drafter: &mut VpDrafter,
    window: &[(usize, Arc<Distribution>)],
    rng: &mut SeededRng,
) -> Result<(Vec<Token>, Vec<Distribution>)> {
    let mut tokens = Vec::with_capacity(window.len());
    let mut dists = Vec::with_capacity(window.len());
    for (pos, current) in window {
        let d = drafter.draft_position(*pos, current, rng)?;
        tokens.push(d.token);
        dists.push(d.sampling);
    }
    Ok((tokens, dists))
}
