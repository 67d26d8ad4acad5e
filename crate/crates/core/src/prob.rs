//! Probability-vector primitives shared by the models, the decode engine and
//! the drafters.
//!
//! Everything is `f64`. Sums over the vocabulary go through [`stable_sum`]
//! (Neumaier compensation) so normalisation stays within `1e-9` for
//! vocabularies up to 65536 entries.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Index into the vocabulary.
pub type Token = usize;

/// Absolute tolerance on `sum(p) == 1`.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Default floor applied before taking logarithms of probabilities.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-12;

/// Compensated (Neumaier) summation.
pub fn stable_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// A normalised probability vector over a vocabulary of at least two tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates `probs` as-is: non-negative, finite, summing to one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(invalid(format!(
                "distribution needs at least 2 entries, got {}",
                probs.len()
            )));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(invalid(format!("entry {i} is {p}")));
        }
        let total = stable_sum(probs.iter().copied());
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(invalid(format!("entries sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Normalises non-negative weights with positive total mass.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(invalid(format!(
                "distribution needs at least 2 entries, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("weights must be finite and non-negative"));
        }
        let total = stable_sum(weights.iter().copied());
        if total <= 0.0 || !total.is_finite() {
            return Err(invalid(format!("weights have total mass {total}")));
        }
        Ok(Self {
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn uniform(vocab: usize) -> Result<Self> {
        if vocab < 2 {
            return Err(invalid("uniform distribution needs vocab >= 2"));
        }
        Ok(Self {
            probs: vec![1.0 / vocab as f64; vocab],
        })
    }

    pub fn point_mass(vocab: usize, token: Token) -> Result<Self> {
        if vocab < 2 || token >= vocab {
            return Err(invalid(format!("point mass at {token} over vocab {vocab}")));
        }
        let mut probs = vec![0.0; vocab];
        probs[token] = 1.0;
        Ok(Self { probs })
    }

    #[inline]
    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    #[inline]
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn prob(&self, token: Token) -> f64 {
        self.probs[token]
    }

    /// Highest-probability token, lowest index on ties.
    pub fn argmax(&self) -> Token {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

impl TryFrom<Vec<f64>> for Distribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Distribution::new(v)
    }
}

impl From<Distribution> for Vec<f64> {
    fn from(d: Distribution) -> Self {
        d.probs
    }
}

/// Unnormalised log-space scores; every entry is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    logits: Vec<f64>,
}

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 {
            return Err(invalid("logit vector needs at least 2 entries"));
        }
        if let Some((i, l)) = logits.iter().enumerate().find(|(_, l)| !l.is_finite()) {
            return Err(invalid(format!("logit {i} is {l}")));
        }
        Ok(Self { logits })
    }

    #[inline]
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Adds `delta` to one entry. The result must stay finite.
    pub fn add(&mut self, token: Token, delta: f64) -> Result<()> {
        let v = self.logits[token] + delta;
        if !v.is_finite() {
            return Err(invalid(format!("logit {token} became {v}")));
        }
        self.logits[token] = v;
        Ok(())
    }
}

/// Deterministic random source. Identical seed and identical draw sequence
/// give bit-identical output.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent sub-stream of `seed`, used to give each job of a sweep
    /// its own generator.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw from `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &LogitVector) -> Distribution {
    let l = logits.logits();
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
    let total = stable_sum(exps.iter().copied());
    // total >= 1 because the max entry contributes exp(0).
    Distribution {
        probs: exps.into_iter().map(|e| e / total).collect(),
    }
}

/// `ln(max(p_i, eps))` per entry.
pub fn log_probs(d: &Distribution, eps: f64) -> LogitVector {
    LogitVector {
        logits: d.probs.iter().map(|&p| p.max(eps).ln()).collect(),
    }
}

/// Inverse-CDF draw. Never returns a zero-probability token.
pub fn sample(d: &Distribution, rng: &mut SeededRng) -> Token {
    let u = rng.uniform();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in d.probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last_positive = i;
            if u < cum {
                return i;
            }
        }
    }
    // Rounding left cum slightly below 1 and u landed in the gap.
    last_positive
}

/// Number of candidates kept for a given ratio: `ceil(ratio * vocab)`,
/// clamped to `[1, vocab]`.
pub fn top_k_count(vocab: usize, ratio: f64) -> usize {
    // The small slack keeps e.g. 0.3 * 10 = 3.0000000000000004 at 3.
    let k = (ratio * vocab as f64 - 1e-9).ceil() as usize;
    k.clamp(1, vocab)
}

/// Indices of the `ceil(ratio * V)` most probable tokens, most probable
/// first, lower index first among equals.
pub fn top_k_candidates(d: &Distribution, ratio: f64) -> Result<Vec<Token>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(invalid(format!("top-k ratio {ratio} outside (0, 1]")));
    }
    let k = top_k_count(d.vocab_size(), ratio);
    let mut order: Vec<Token> = (0..d.vocab_size()).collect();
    order.sort_by(|&a, &b| d.probs[b].total_cmp(&d.probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// `0.5 * sum |p_i - q_i|`.
pub fn tv_distance(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.vocab_size() != q.vocab_size() {
        return Err(invalid(format!(
            "vocab mismatch: {} vs {}",
            p.vocab_size(),
            q.vocab_size()
        )));
    }
    Ok(0.5 * stable_sum(p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs())))
}

/// Normalised `max(0, q - p)`: the law of the correction token after a
/// speculative rejection.
pub fn residual_distribution(q: &Distribution, p: &Distribution) -> Result<Distribution> {
    if p.vocab_size() != q.vocab_size() {
        return Err(invalid(format!(
            "vocab mismatch: {} vs {}",
            q.vocab_size(),
            p.vocab_size()
        )));
    }
    let residual: Vec<f64> = q
        .probs
        .iter()
        .zip(&p.probs)
        .map(|(a, b)| (a - b).max(0.0))
        .collect();
    let mass = stable_sum(residual.iter().copied());
    if mass <= 0.0 {
        return Err(Error::InternalLogic(
            "residual has no mass; a rejection cannot occur when q <= p everywhere".into(),
        ));
    }
    Ok(Distribution {
        probs: residual.into_iter().map(|r| r / mass).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn rejects_invalid_distributions() {
        assert!(Distribution::new(vec![1.0]).is_err());
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![1.5, -0.5]).is_err());
        assert!(Distribution::new(vec![f64::NAN, 1.0]).is_err());
        assert!(Distribution::from_weights(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&LogitVector::new(vec![0.0; 3]).unwrap());
        assert_close(u.probs(), &[1.0 / 3.0; 3], 1e-15);

        let a = softmax(&LogitVector::new(vec![0.3, -1.2]).unwrap());
        let b = softmax(&LogitVector::new(vec![5.3, 3.8]).unwrap());
        assert_close(a.probs(), b.probs(), 1e-15);

        let c = softmax(&LogitVector::new(vec![0.0, 2f64.ln(), 4f64.ln()]).unwrap());
        assert_close(c.probs(), &[1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0], 1e-15);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        assert!(LogitVector::new(vec![0.0, f64::INFINITY]).is_err());
        assert!(LogitVector::new(vec![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn log_probs_examples() {
        let l = log_probs(&dist(&[1.0, 0.0]), 1e-12);
        assert_eq!(l.logits(), &[0.0, 1e-12f64.ln()]);
        let l = log_probs(&Distribution::uniform(4).unwrap(), 1e-12);
        assert_close(l.logits(), &[-(4f64.ln()); 4], 1e-15);
        let l = log_probs(&dist(&[0.25, 0.75]), 1e-12);
        assert_close(l.logits(), &[0.25f64.ln(), 0.75f64.ln()], 1e-15);
    }

    #[test]
    fn sample_point_mass() {
        let d = dist(&[0.0, 1.0, 0.0]);
        let mut rng = SeededRng::new(3);
        assert!((0..1000).all(|_| sample(&d, &mut rng) == 1));
    }

    #[test]
    fn sample_uniform_counts() {
        let d = Distribution::uniform(8).unwrap();
        let mut rng = SeededRng::new(11);
        let mut counts = [0usize; 8];
        for _ in 0..80_000 {
            counts[sample(&d, &mut rng)] += 1;
        }
        for c in counts {
            assert!((9_500..=10_500).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn sample_frequencies_converge() {
        let d = dist(&[0.05, 0.2, 0.5, 0.25]);
        let m = 100_000;
        let mut rng = SeededRng::new(5);
        let mut counts = [0usize; 4];
        for _ in 0..m {
            counts[sample(&d, &mut rng)] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let p = d.prob(i);
            let tol = 4.0 * (p * (1.0 - p) / m as f64).sqrt();
            assert!((c as f64 / m as f64 - p).abs() <= tol, "{i}: {c}");
        }
    }

    #[test]
    fn sample_is_deterministic() {
        let d = dist(&[0.1, 0.2, 0.3, 0.4]);
        let draw = || {
            let mut rng = SeededRng::new(42);
            (0..1000).map(|_| sample(&d, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn top_k_examples() {
        let d = dist(&[0.5, 0.3, 0.1, 0.1]);
        assert_eq!(top_k_candidates(&d, 1.0).unwrap().len(), 4);
        assert_eq!(top_k_candidates(&d, 0.5).unwrap(), vec![0, 1]);
        let u = Distribution::uniform(4).unwrap();
        assert_eq!(top_k_candidates(&u, 0.25).unwrap(), vec![0]);
        assert!(top_k_candidates(&d, 0.0).is_err());
        assert!(top_k_candidates(&d, 1.5).is_err());
        assert_eq!(top_k_count(10, 0.3), 3);
        assert_eq!(top_k_count(64, 0.1), 7);
    }

    #[test]
    fn tv_examples() {
        let p = dist(&[0.5, 0.5]);
        assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
        assert_eq!(
            tv_distance(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap(),
            1.0
        );
        let tv = tv_distance(&p, &dist(&[0.9, 0.1])).unwrap();
        assert!((tv - 0.4).abs() < 1e-15);
        assert!(tv_distance(&p, &Distribution::uniform(3).unwrap()).is_err());
    }

    #[test]
    fn residual_examples() {
        let r = residual_distribution(&dist(&[0.9, 0.1]), &dist(&[0.5, 0.5])).unwrap();
        assert_eq!(r.probs(), &[1.0, 0.0]);
        let r =
            residual_distribution(&dist(&[0.5, 0.25, 0.25]), &dist(&[0.25, 0.5, 0.25])).unwrap();
        assert_eq!(r.probs(), &[1.0, 0.0, 0.0]);
        let r = residual_distribution(&dist(&[0.6, 0.4]), &dist(&[0.2, 0.8])).unwrap();
        assert_eq!(r.probs(), &[1.0, 0.0]);
    }

    #[test]
    fn residual_without_mass_is_internal_error() {
        let p = dist(&[0.3, 0.7]);
        assert!(matches!(
            residual_distribution(&p, &p),
            Err(Error::InternalLogic(_))
        ));
    }

    fn simplex(max_len: usize) -> impl Strategy<Value = Distribution> {
        prop::collection::vec(0.001f64..1.0, 2..max_len)
            .prop_map(|w| Distribution::from_weights(w).unwrap())
    }

    fn simplex_triple() -> impl Strategy<Value = (Distribution, Distribution, Distribution)> {
        (2usize..12).prop_flat_map(|n| {
            let one = prop::collection::vec(0.0f64..1.0, n)
                .prop_filter_map("no mass", |w| Distribution::from_weights(w).ok());
            (one.clone(), one.clone(), one)
        })
    }

    proptest! {
        #[test]
        fn softmax_inverts_log_probs(d in simplex(40)) {
            let back = softmax(&log_probs(&d, DEFAULT_LOG_FLOOR));
            for (a, b) in back.probs().iter().zip(d.probs()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn softmax_output_is_a_distribution(
            l in prop::collection::vec(-50.0f64..50.0, 2..100),
            shift in -100.0f64..100.0,
        ) {
            let a = softmax(&LogitVector::new(l.clone()).unwrap());
            prop_assert!(Distribution::new(a.probs().to_vec()).is_ok());
            let b = softmax(&LogitVector::new(l.iter().map(|x| x + shift).collect()).unwrap());
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn tv_is_a_metric((p, q, r) in simplex_triple()) {
            let pq = tv_distance(&p, &q).unwrap();
            let qp = tv_distance(&q, &p).unwrap();
            prop_assert!((pq - qp).abs() <= 1e-15);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&pq));
            let pr = tv_distance(&p, &r).unwrap();
            let rq = tv_distance(&r, &q).unwrap();
            prop_assert!(pq <= pr + rq + 1e-12);
        }

        #[test]
        fn sampled_tokens_have_mass(d in simplex(20), seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            for _ in 0..50 {
                prop_assert!(d.prob(sample(&d, &mut rng)) > 0.0);
            }
        }
    }

    #[test]
    fn tv_triangle_inequality_fuzz() {
        let mut rng = SeededRng::new(2024);
        let mut draw = |n: usize| {
            Distribution::from_weights((0..n).map(|_| rng.uniform() + 1e-12).collect()).unwrap()
        };
        for trial in 0..10_000 {
            let n = 2 + trial % 15;
            let (p, q, r) = (draw(n), draw(n), draw(n));
            let lhs = tv_distance(&p, &q).unwrap();
            let rhs = tv_distance(&p, &r).unwrap() + tv_distance(&r, &q).unwrap();
            assert!(lhs <= rhs + 1e-12);
        }
    }

    #[test]
    fn stable_sum_large_vocab() {
        let d = Distribution::uniform(65_536).unwrap();
        assert!((stable_sum(d.probs().iter().copied()) - 1.0).abs() < 1e-12);
    }
}
