//! Numerical checks of the perturbation view of drafting.
//!
//! A drafter moves `p` to `p + Δ` with `Δ(x) = m·ω(x)·ŷ(x)`: a magnitude
//! `m`, per-token weights `ω ≥ 0` and predicted directions `ŷ ∈ {−1, +1}`.
//! Against the ideal direction `y = sign(q − p)`, the first-order change of
//! `TV(p + Δ, q)` is `(m/2)·Σ_{p≠q} sign(p − q)·ω·ŷ = −(m/2)·Σ y·ŷ·ω`.
//!
//! Two facts shape the checks here:
//!
//! * TV is piecewise linear in `p`. While no perturbed token crosses
//!   `p = q` (the *gap condition*, `|p − q| > m·ω` wherever `m·ω > 0`), the
//!   first-order value is exact, not an approximation. The remainder is
//!   zero in exact arithmetic; [`exact_tv_delta_rational`] measures it
//!   without rounding noise.
//! * The first-order sum is unweighted. Rewriting it as an expectation
//!   `V·E[y·ŷ·ω]` is exact under uniform weighting; under `x ∼ p` it is
//!   not, so the sign of the change follows the uniform-weighted accuracy.
//!   Both weightings are reported.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::drafter::bayesian_fusion;
use crate::error::{invalid, Error, Result};
use crate::prob::{stable_sum, tv_distance, Distribution, SeededRng, Token};

/// `Δ(x) = m·ω(x)·ŷ(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub m: f64,
    pub omega: Vec<f64>,
    pub yhat: Vec<i8>,
}

impl PerturbationSpec {
    pub fn new(m: f64, omega: Vec<f64>, yhat: Vec<i8>) -> Result<Self> {
        if !(m.is_finite() && m >= 0.0) {
            return Err(invalid(format!(
                "magnitude m = {m} must be finite and >= 0"
            )));
        }
        if omega.len() != yhat.len() {
            return Err(invalid(format!(
                "omega has {} entries, yhat {}",
                omega.len(),
                yhat.len()
            )));
        }
        if let Some(w) = omega.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(invalid(format!("weight {w} must be finite and >= 0")));
        }
        if let Some(s) = yhat.iter().find(|s| **s != 1 && **s != -1) {
            return Err(invalid(format!("direction {s} not in {{-1, +1}}")));
        }
        Ok(Self { m, omega, yhat })
    }

    /// Constant weight `omega` on every token.
    pub fn constant(m: f64, omega: f64, yhat: Vec<i8>) -> Result<Self> {
        Self::new(m, vec![omega; yhat.len()], yhat)
    }

    pub fn vocab_size(&self) -> usize {
        self.yhat.len()
    }

    pub fn shift(&self, x: Token) -> f64 {
        self.m * self.omega[x] * f64::from(self.yhat[x])
    }

    /// `m` multiplied by `factor`, everything else kept.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            m: self.m * factor,
            ..self.clone()
        }
    }

    fn check(&self, p: &Distribution, q: &Distribution) -> Result<()> {
        let v = p.vocab_size();
        if q.vocab_size() != v || self.vocab_size() != v {
            return Err(invalid(format!(
                "sizes differ: p {v}, q {}, spec {}",
                q.vocab_size(),
                self.vocab_size()
            )));
        }
        for x in 0..v {
            let moved = p.prob(x) + self.shift(x);
            if !(0.0..=1.0).contains(&moved) {
                return Err(invalid(format!(
                    "perturbed probability {moved} of token {x} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Ideal directions `y = sign(q − p)`; exact ties get `+1` and are flagged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directions {
    pub y: Vec<i8>,
    pub ties: Vec<bool>,
}

impl Directions {
    pub fn tie_count(&self) -> usize {
        self.ties.iter().filter(|&&t| t).count()
    }
}

fn same_size(p: &Distribution, q: &Distribution) -> Result<usize> {
    if p.vocab_size() != q.vocab_size() {
        return Err(invalid(format!(
            "vocab sizes differ: {} vs {}",
            p.vocab_size(),
            q.vocab_size()
        )));
    }
    Ok(p.vocab_size())
}

pub fn ideal_direction(p: &Distribution, q: &Distribution) -> Result<Directions> {
    let v = same_size(p, q)?;
    let mut y = Vec::with_capacity(v);
    let mut ties = Vec::with_capacity(v);
    for x in 0..v {
        let (a, b) = (p.prob(x), q.prob(x));
        ties.push(a == b);
        y.push(if b >= a { 1 } else { -1 });
    }
    Ok(Directions { y, ties })
}

fn check_yhat(v: usize, yhat: &[i8]) -> Result<()> {
    if yhat.len() != v {
        return Err(invalid(format!(
            "yhat has {} entries for vocab {v}",
            yhat.len()
        )));
    }
    Ok(())
}

/// `Q = Σ_x p(x)·1[ŷ(x) = y(x)]`.
pub fn direction_accuracy(p: &Distribution, q: &Distribution, yhat: &[i8]) -> Result<f64> {
    let dirs = ideal_direction(p, q)?;
    check_yhat(p.vocab_size(), yhat)?;
    Ok(stable_sum((0..yhat.len()).map(|x| {
        if yhat[x] == dirs.y[x] {
            p.prob(x)
        } else {
            0.0
        }
    })))
}

/// Accuracy with every token weighted `1/V`.
pub fn direction_accuracy_uniform(p: &Distribution, q: &Distribution, yhat: &[i8]) -> Result<f64> {
    let dirs = ideal_direction(p, q)?;
    check_yhat(p.vocab_size(), yhat)?;
    let agree = (0..yhat.len()).filter(|&x| yhat[x] == dirs.y[x]).count();
    Ok(agree as f64 / yhat.len() as f64)
}

/// `TV(p + Δ, q) − TV(p, q)`, summed per token as `½(|a + δ| − |a|)` with
/// `a = p − q` to avoid cancelling two nearly equal distances.
pub fn exact_tv_delta(p: &Distribution, q: &Distribution, spec: &PerturbationSpec) -> Result<f64> {
    spec.check(p, q)?;
    Ok(0.5
        * stable_sum((0..p.vocab_size()).map(|x| {
            let a = p.prob(x) - q.prob(x);
            (a + spec.shift(x)).abs() - a.abs()
        })))
}

/// `(m/2)·Σ_{x: p≠q} sign(p − q)·ω·ŷ`.
pub fn first_order_tv_delta(
    p: &Distribution,
    q: &Distribution,
    spec: &PerturbationSpec,
) -> Result<f64> {
    let v = same_size(p, q)?;
    check_yhat(v, &spec.yhat)?;
    let s = stable_sum((0..v).filter_map(|x| {
        let a = p.prob(x) - q.prob(x);
        (a != 0.0).then(|| a.signum() * spec.omega[x] * f64::from(spec.yhat[x]))
    }));
    Ok(0.5 * spec.m * s)
}

fn rational(x: f64) -> Result<BigRational> {
    BigRational::from_float(x).ok_or_else(|| invalid(format!("{x} is not finite")))
}

fn rational_shift(spec: &PerturbationSpec, x: Token) -> Result<BigRational> {
    let s = rational(spec.m)? * rational(spec.omega[x])?;
    Ok(if spec.yhat[x] < 0 { -s } else { s })
}

/// [`exact_tv_delta`] with the inputs read as exact binary fractions and
/// every operation exact.
pub fn exact_tv_delta_rational(
    p: &Distribution,
    q: &Distribution,
    spec: &PerturbationSpec,
) -> Result<BigRational> {
    spec.check(p, q)?;
    let mut total = BigRational::zero();
    for x in 0..p.vocab_size() {
        let a = rational(p.prob(x))? - rational(q.prob(x))?;
        let moved = &a + rational_shift(spec, x)?;
        total += moved.abs() - a.abs();
    }
    Ok(total / BigRational::from_integer(BigInt::from(2)))
}

/// [`first_order_tv_delta`] in exact arithmetic.
pub fn first_order_tv_delta_rational(
    p: &Distribution,
    q: &Distribution,
    spec: &PerturbationSpec,
) -> Result<BigRational> {
    let v = same_size(p, q)?;
    check_yhat(v, &spec.yhat)?;
    let mut total = BigRational::zero();
    for x in 0..v {
        let (a, b) = (p.prob(x), q.prob(x));
        if a == b {
            continue;
        }
        let term = rational_shift(spec, x)?;
        if a > b {
            total += term;
        } else {
            total -= term;
        }
    }
    Ok(total / BigRational::from_integer(BigInt::from(2)))
}

/// True when no perturbed token can cross `p = q`: `|p − q| > m·ω` at every
/// token with `m·ω > 0`.
pub fn gap_condition(p: &Distribution, q: &Distribution, spec: &PerturbationSpec) -> Result<bool> {
    let v = same_size(p, q)?;
    check_yhat(v, &spec.yhat)?;
    Ok((0..v).all(|x| {
        let step = spec.m * spec.omega[x];
        step == 0.0 || (p.prob(x) - q.prob(x)).abs() > step
    }))
}

/// The terms of the expectation form of the first-order change, under both
/// weightings, next to the exact and first-order deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    /// Accuracy under `x ∼ p`.
    pub q: f64,
    pub e_omega: f64,
    /// `Cov(y·ŷ, ω)` under `x ∼ p`.
    pub cov: f64,
    /// `E_p[y·ŷ·ω]`, computed directly.
    pub agreement_moment: f64,
    /// `(2Q − 1)·E[ω] + Cov`, which equals `agreement_moment` exactly.
    pub decomposition: f64,
    pub q_uniform: f64,
    pub e_omega_uniform: f64,
    pub cov_uniform: f64,
    pub tv_before: f64,
    pub tv_after_exact: f64,
    pub tv_after_first_order: f64,
    pub delta_exact: f64,
    pub delta_first_order: f64,
    /// `TV(p, q) − (m/2)·((2Q − 1)E[ω] + Cov)` under `x ∼ p`.
    pub tv_after_p_weighted: f64,
    /// The same with uniform weighting scaled by `V`; equals
    /// `tv_after_first_order` up to rounding.
    pub tv_after_uniform: f64,
    /// `|delta_exact − delta_first_order|`.
    pub residual: f64,
    /// Sign of the exact change evaluated in rational arithmetic; the float
    /// `delta_exact` can carry rounding sign when the true change is 0.
    pub exact_sign: i8,
    /// Exact and first-order changes agree in rational arithmetic.
    pub first_order_exact: bool,
    pub ties: usize,
    pub gap_ok: bool,
}

impl DirectionReport {
    /// `residual / |delta_first_order|`; 0 when the residual vanishes,
    /// `None` when only the first-order term does (balanced agreement).
    pub fn relative_residual(&self) -> Option<f64> {
        if self.residual == 0.0 {
            Some(0.0)
        } else if self.delta_first_order == 0.0 {
            None
        } else {
            Some(self.residual / self.delta_first_order.abs())
        }
    }
}

struct Moments {
    q: f64,
    e_omega: f64,
    cov: f64,
    moment: f64,
}

fn moments(weights: &[f64], agree: &[f64], omega: &[f64]) -> Moments {
    let n = weights.len();
    let e = |f: &dyn Fn(usize) -> f64| stable_sum((0..n).map(|x| weights[x] * f(x)));
    let e_agree = e(&|x| agree[x]);
    let e_omega = e(&|x| omega[x]);
    let moment = e(&|x| agree[x] * omega[x]);
    let q = e(&|x| if agree[x] > 0.0 { 1.0 } else { 0.0 });
    Moments {
        q,
        e_omega,
        cov: moment - e_agree * e_omega,
        moment,
    }
}

pub fn decomposition_check(
    p: &Distribution,
    q: &Distribution,
    spec: &PerturbationSpec,
) -> Result<DirectionReport> {
    let v = p.vocab_size();
    let dirs = ideal_direction(p, q)?;
    let delta_exact = exact_tv_delta(p, q, spec)?;
    let delta_first_order = first_order_tv_delta(p, q, spec)?;
    let tv_before = tv_distance(p, q)?;
    let agree: Vec<f64> = (0..v)
        .map(|x| f64::from(dirs.y[x] * spec.yhat[x]))
        .collect();
    let by_p = moments(p.probs(), &agree, &spec.omega);
    let by_u = moments(&vec![1.0 / v as f64; v], &agree, &spec.omega);
    let m2 = spec.m / 2.0;
    let exact_r = exact_tv_delta_rational(p, q, spec)?;
    let first_order_r = first_order_tv_delta_rational(p, q, spec)?;
    let exact_sign = if exact_r.is_negative() {
        -1
    } else if exact_r.is_zero() {
        0
    } else {
        1
    };
    Ok(DirectionReport {
        q: by_p.q,
        e_omega: by_p.e_omega,
        cov: by_p.cov,
        agreement_moment: by_p.moment,
        decomposition: (2.0 * by_p.q - 1.0) * by_p.e_omega + by_p.cov,
        q_uniform: by_u.q,
        e_omega_uniform: by_u.e_omega,
        cov_uniform: by_u.cov,
        tv_before,
        tv_after_exact: tv_before + delta_exact,
        tv_after_first_order: tv_before + delta_first_order,
        delta_exact,
        delta_first_order,
        tv_after_p_weighted: tv_before - m2 * ((2.0 * by_p.q - 1.0) * by_p.e_omega + by_p.cov),
        tv_after_uniform: tv_before
            - m2 * v as f64 * ((2.0 * by_u.q - 1.0) * by_u.e_omega + by_u.cov),
        residual: (delta_exact - delta_first_order).abs(),
        exact_sign,
        first_order_exact: exact_r == first_order_r,
        ties: dirs.tie_count(),
        gap_ok: gap_condition(p, q, spec)?,
    })
}

/// A drafter step read as a perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedPerturbation {
    pub spec: PerturbationSpec,
    pub p_prime: Distribution,
    /// Tokens whose actual move disagrees with `ŷ` (a raised token that
    /// still shrank because other raised tokens grew more).
    pub sign_mismatches: usize,
}

/// `ŷ = +1` on `raised`, `−1` elsewhere; `ω = |p′ − p| / m`.
pub fn perturbation_from_step(
    p: &Distribution,
    p_prime: Distribution,
    raised: &[Token],
    m: f64,
) -> Result<ExtractedPerturbation> {
    let v = same_size(p, &p_prime)?;
    if !(m > 0.0 && m.is_finite()) {
        return Err(invalid(format!("magnitude m = {m} must be positive")));
    }
    let mut yhat = vec![-1i8; v];
    for &t in raised {
        if t >= v {
            return Err(invalid(format!("raised token {t} outside vocab {v}")));
        }
        yhat[t] = 1;
    }
    let mut omega = Vec::with_capacity(v);
    let mut sign_mismatches = 0;
    for x in 0..v {
        let d = p_prime.prob(x) - p.prob(x);
        omega.push(d.abs() / m);
        if d != 0.0 && (d > 0.0) != (yhat[x] > 0) {
            sign_mismatches += 1;
        }
    }
    Ok(ExtractedPerturbation {
        spec: PerturbationSpec::new(m, omega, yhat)?,
        p_prime,
        sign_mismatches,
    })
}

/// Runs the fusion step on `(p, S, M, C)` and reads it as a perturbation:
/// a token is raised when it is a candidate with `M = 1` and `S > 0`.
pub fn vp_direction_extractor(
    p: &Distribution,
    scores: &[f64],
    mask: &[bool],
    candidates: &[Token],
    eps: f64,
    m: f64,
) -> Result<ExtractedPerturbation> {
    let p_prime = bayesian_fusion(p, scores, mask, candidates, eps)?;
    let raised: Vec<Token> = candidates
        .iter()
        .copied()
        .filter(|&t| mask[t] && scores[t] > 0.0)
        .collect();
    perturbation_from_step(p, p_prime, &raised, m)
}

/// How synthetic predictors hit a target accuracy `Q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticPredictor {
    /// Each token independently agrees with `y` with probability `Q`.
    #[default]
    Bernoulli,
    /// Exactly `round(Q·V)` tokens, chosen uniformly, agree.
    ExactCount,
    /// Tokens join the agreeing set in random order until their `p`-mass
    /// reaches `Q`.
    ProbabilityMass,
}

impl std::str::FromStr for SyntheticPredictor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" => Ok(Self::Bernoulli),
            "exact-count" => Ok(Self::ExactCount),
            "probability-mass" => Ok(Self::ProbabilityMass),
            other => Err(Error::Config(format!("unknown predictor {other:?}"))),
        }
    }
}

/// Dirichlet(1, …, 1) draw.
pub fn random_simplex(vocab: usize, rng: &mut SeededRng) -> Result<Distribution> {
    let w: Vec<f64> = (0..vocab).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    Distribution::from_weights(w)
}

fn shuffled(v: usize, rng: &mut SeededRng) -> Vec<Token> {
    let mut order: Vec<Token> = (0..v).collect();
    for i in (1..v).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

pub fn synthetic_directions(
    kind: SyntheticPredictor,
    p: &Distribution,
    ideal: &Directions,
    accuracy: f64,
    rng: &mut SeededRng,
) -> Vec<i8> {
    let v = ideal.y.len();
    let mut agree = vec![false; v];
    match kind {
        SyntheticPredictor::Bernoulli => {
            for a in agree.iter_mut() {
                *a = rng.uniform() < accuracy;
            }
        }
        SyntheticPredictor::ExactCount => {
            let k = (accuracy * v as f64).round() as usize;
            for &x in shuffled(v, rng).iter().take(k) {
                agree[x] = true;
            }
        }
        SyntheticPredictor::ProbabilityMass => {
            let mut mass = 0.0;
            for x in shuffled(v, rng) {
                if mass >= accuracy {
                    break;
                }
                agree[x] = true;
                mass += p.prob(x);
            }
        }
    }
    (0..v)
        .map(|x| if agree[x] { ideal.y[x] } else { -ideal.y[x] })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub seed: u64,
    pub vocab: usize,
    pub m: f64,
    pub omega: f64,
    pub accuracy: f64,
    pub predictor: SyntheticPredictor,
}

/// One random `(p, q, ŷ)` instance. `report` is `None` when the
/// perturbation leaves the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: u64,
    pub report: Option<DirectionReport>,
}

/// Trial `id` draws `p`, `q` and `ŷ` from stream `id` of `seed`, so trials
/// are independent of each other and of evaluation order.
pub fn trial_instance(
    cfg: &TrialConfig,
    id: u64,
) -> Result<(Distribution, Distribution, PerturbationSpec)> {
    let mut rng = SeededRng::with_stream(cfg.seed, id);
    let p = random_simplex(cfg.vocab, &mut rng)?;
    let q = random_simplex(cfg.vocab, &mut rng)?;
    let ideal = ideal_direction(&p, &q)?;
    let yhat = synthetic_directions(cfg.predictor, &p, &ideal, cfg.accuracy, &mut rng);
    let spec = PerturbationSpec::constant(cfg.m, cfg.omega, yhat)?;
    Ok((p, q, spec))
}

pub fn run_trial(cfg: &TrialConfig, id: u64) -> Result<Trial> {
    let (p, q, spec) = trial_instance(cfg, id)?;
    let report = match decomposition_check(&p, &q, &spec) {
        Ok(r) => Some(r),
        Err(Error::InvalidInput(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Trial { id, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trials: usize,
    /// Perturbation left the simplex.
    pub invalid: usize,
    pub gap_trials: usize,
    /// Gap trials with exact ΔTV < 0 (sign taken in rational arithmetic).
    pub reduced: usize,
    /// Gap trials with exact ΔTV = 0.
    pub unchanged: usize,
    /// Gap trials whose exact and first-order changes agree exactly.
    pub first_order_exact: usize,
    pub reduced_fraction: Option<f64>,
    pub max_relative_residual: f64,
    /// Gap trials whose first-order change is exactly zero, so the relative
    /// residual is undefined; their absolute residual is rounding only.
    pub zero_first_order: usize,
    pub max_abs_residual: f64,
    pub mean_q: Option<f64>,
    pub mean_q_uniform: Option<f64>,
}

pub fn summarize_trials(trials: &[Trial]) -> TrialSummary {
    let gap: Vec<&DirectionReport> = trials
        .iter()
        .filter_map(|t| t.report.as_ref())
        .filter(|r| r.gap_ok)
        .collect();
    let n = gap.len();
    let reduced = gap.iter().filter(|r| r.exact_sign < 0).count();
    let mean = |f: fn(&DirectionReport) -> f64| {
        (n > 0).then(|| stable_sum(gap.iter().map(|r| f(r))) / n as f64)
    };
    TrialSummary {
        trials: trials.len(),
        invalid: trials.iter().filter(|t| t.report.is_none()).count(),
        gap_trials: n,
        reduced,
        unchanged: gap.iter().filter(|r| r.exact_sign == 0).count(),
        first_order_exact: gap.iter().filter(|r| r.first_order_exact).count(),
        reduced_fraction: (n > 0).then(|| reduced as f64 / n as f64),
        max_relative_residual: gap
            .iter()
            .filter_map(|r| r.relative_residual())
            .fold(0.0, f64::max),
        zero_first_order: gap
            .iter()
            .filter(|r| r.relative_residual().is_none())
            .count(),
        max_abs_residual: gap.iter().map(|r| r.residual).fold(0.0, f64::max),
        mean_q: mean(|r| r.q),
        mean_q_uniform: mean(|r| r.q_uniform),
    }
}

/// First-order error at `m` and `m/2` on one instance, exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RemainderPair {
    pub id: u64,
    pub full: BigRational,
    pub half: BigRational,
    pub full_f64: f64,
    pub half_f64: f64,
}

impl RemainderPair {
    /// `half · ratio ≤ full`, evaluated exactly.
    pub fn shrinks_by(&self, ratio: f64) -> Result<bool> {
        Ok(&self.half * rational(ratio)? <= self.full)
    }
}

fn remainder(p: &Distribution, q: &Distribution, spec: &PerturbationSpec) -> Result<BigRational> {
    Ok((exact_tv_delta_rational(p, q, spec)? - first_order_tv_delta_rational(p, q, spec)?).abs())
}

/// Draws instances until `wanted` of them satisfy the gap condition at
/// `cfg.m` and returns their exact remainders at `m` and `m/2`. Gives up
/// with a resource error after `max_attempts` draws.
pub fn remainder_pairs(
    cfg: &TrialConfig,
    wanted: usize,
    max_attempts: u64,
) -> Result<(Vec<RemainderPair>, u64)> {
    let mut out = Vec::with_capacity(wanted);
    let mut id = 0u64;
    while out.len() < wanted {
        if id >= max_attempts {
            return Err(Error::ResourceLimit(format!(
                "only {} gap instances in {max_attempts} draws",
                out.len()
            )));
        }
        let (p, q, spec) = trial_instance(cfg, id)?;
        id += 1;
        if spec.check(&p, &q).is_err() || !gap_condition(&p, &q, &spec)? {
            continue;
        }
        let half = spec.scaled(0.5);
        let float = |s: &PerturbationSpec| -> Result<f64> {
            Ok((exact_tv_delta(&p, &q, s)? - first_order_tv_delta(&p, &q, s)?).abs())
        };
        out.push(RemainderPair {
            id: id - 1,
            full: remainder(&p, &q, &spec)?,
            half: remainder(&p, &q, &half)?,
            full_f64: float(&spec)?,
            half_f64: float(&half)?,
        });
    }
    Ok((out, id))
}
