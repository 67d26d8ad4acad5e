//! Seeded Markov token models standing in for a base autoregressive model,
//! plus brute-force oracles over their exact sequence law.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand_distr::{Distribution as _, Gamma};
use serde::{Deserialize, Serialize};

use crate::engine::RunStats;
use crate::error::{invalid, Error, Result};
use crate::prob::{sample, top_k_candidates, Distribution, SeededRng, Token};

/// Largest number of completions [`exact_sequence_distribution`] will
/// enumerate.
pub const MAX_ENUMERATION: u128 = 10_000_000;

/// Largest `contexts * vocab` table a [`MarkovModel`] may hold.
pub const MAX_TABLE_ENTRIES: u128 = 50_000_000;

const DUMP_MAGIC: &str = "sjdvp-markov-model";
const DUMP_VERSION: u32 = 1;

/// Anything that can produce a next-token distribution for a context.
///
/// One call is one position of a forward pass; the engine accounts for
/// parallel passes itself.
pub trait AutoregressiveModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn next_token_distribution(&self, context: &[Token]) -> Result<Arc<Distribution>>;
}

/// Construction parameters of a [`MarkovModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub seed: u64,
    pub order: usize,
    pub vocab: usize,
    /// Gamma shape of the row construction; small values give peaked rows.
    pub concentration: f64,
    /// Weight of the shared attractor row mixed into every context row.
    /// Zero gives a plain Markov table.
    pub attractor_weight: f64,
    /// Optional model-level top-k truncation of every row.
    pub top_k: Option<usize>,
}

impl ModelSpec {
    pub fn new(seed: u64, order: usize, vocab: usize, concentration: f64) -> Self {
        Self {
            seed,
            order,
            vocab,
            concentration,
            attractor_weight: 0.0,
            top_k: None,
        }
    }

    pub fn drifting(mut self, weight: f64) -> Self {
        self.attractor_weight = weight;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config(format!("vocab {} < 2", self.vocab)));
        }
        if self.order < 1 {
            return Err(Error::Config("order must be >= 1".into()));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::Config(format!(
                "concentration {} must be positive",
                self.concentration
            )));
        }
        if !(0.0..=1.0).contains(&self.attractor_weight) {
            return Err(Error::Config(format!(
                "attractor weight {} outside [0, 1]",
                self.attractor_weight
            )));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > self.vocab {
                return Err(Error::Config(format!("model top-k {k} outside [1, vocab]")));
            }
        }
        let contexts = (self.vocab as u128 + 1).checked_pow(self.order as u32);
        match contexts {
            Some(c) if c * self.vocab as u128 <= MAX_TABLE_ENTRIES => Ok(()),
            _ => Err(Error::ResourceLimit(format!(
                "order {} over vocab {} needs too many table rows",
                self.order, self.vocab
            ))),
        }
    }
}

/// Order-`k` Markov chain over `vocab` tokens. Contexts shorter than `k` are
/// left-padded with a virtual begin-of-sequence symbol that is not part of
/// the vocabulary.
#[derive(Debug, Clone)]
pub struct MarkovModel {
    spec: ModelSpec,
    rows: Vec<Arc<Distribution>>,
}

/// Builds a plain (non-drifting) seeded Markov model.
pub fn build_markov_model(
    seed: u64,
    order: usize,
    vocab: usize,
    concentration: f64,
) -> Result<MarkovModel> {
    MarkovModel::build(&ModelSpec::new(seed, order, vocab, concentration))
}

fn gamma_row(gamma: &Gamma<f64>, vocab: usize, rng: &mut SeededRng) -> Vec<f64> {
    loop {
        let row: Vec<f64> = (0..vocab).map(|_| gamma.sample(rng)).collect();
        // Tiny shapes can underflow every draw to zero; redraw.
        if row.iter().any(|&w| w > 0.0) {
            return row;
        }
    }
}

impl MarkovModel {
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let gamma = Gamma::new(spec.concentration, 1.0)
            .map_err(|e| Error::Config(format!("gamma shape: {e}")))?;
        let mut rng = SeededRng::new(spec.seed);
        let n_contexts = (spec.vocab + 1).pow(spec.order as u32);

        let raw: Vec<Distribution> = (0..n_contexts)
            .map(|_| Distribution::from_weights(gamma_row(&gamma, spec.vocab, &mut rng)))
            .collect::<Result<_>>()?;
        let attractor = Distribution::from_weights(gamma_row(&gamma, spec.vocab, &mut rng))?;

        let w = spec.attractor_weight;
        let rows = raw
            .into_iter()
            .map(|row| {
                let mut mixed = if w > 0.0 {
                    Distribution::from_weights(
                        row.probs()
                            .iter()
                            .zip(attractor.probs())
                            .map(|(r, a)| (1.0 - w) * r + w * a)
                            .collect(),
                    )?
                } else {
                    row
                };
                if let Some(k) = spec.top_k {
                    mixed = truncate_top_k(&mixed, k)?;
                }
                Ok(Arc::new(mixed))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            rows,
        })
    }

    /// A model from explicit rows, indexed like [`MarkovModel::context_index`].
    pub fn from_rows(spec: ModelSpec, rows: Vec<Distribution>) -> Result<Self> {
        spec.validate()?;
        let expected = (spec.vocab + 1).pow(spec.order as u32);
        if rows.len() != expected {
            return Err(invalid(format!(
                "expected {expected} rows, got {}",
                rows.len()
            )));
        }
        if rows.iter().any(|r| r.vocab_size() != spec.vocab) {
            return Err(invalid("row width does not match vocab"));
        }
        Ok(Self {
            spec,
            rows: rows.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn order(&self) -> usize {
        self.spec.order
    }

    pub fn rows(&self) -> &[Arc<Distribution>] {
        &self.rows
    }

    /// Row index of the context formed by the last `order` tokens of
    /// `prefix`, begin-of-sequence symbol encoded as `vocab`.
    pub fn context_index(&self, prefix: &[Token]) -> Result<usize> {
        let v = self.spec.vocab;
        let k = self.spec.order;
        let mut idx = 0usize;
        for j in 0..k {
            // Position j of the context window, oldest first.
            let sym = match (prefix.len() + j).checked_sub(k) {
                Some(at) => {
                    let t = prefix[at];
                    if t >= v {
                        return Err(invalid(format!("token {t} outside vocab {v}")));
                    }
                    t
                }
                None => v,
            };
            idx = idx * (v + 1) + sym;
        }
        Ok(idx)
    }

    /// Context symbols of a row index, `None` for begin-of-sequence.
    pub fn context_symbols(&self, mut index: usize) -> Vec<Option<Token>> {
        let v = self.spec.vocab;
        let mut syms = vec![None; self.spec.order];
        for slot in syms.iter_mut().rev() {
            let s = index % (v + 1);
            *slot = (s < v).then_some(s);
            index /= v + 1;
        }
        syms
    }

    /// Writes the versioned plain-text table format read by
    /// [`MarkovModel::load`]. Floats use shortest round-trip formatting, so a
    /// dump/load cycle is bit-exact.
    pub fn dump<W: Write>(&self, mut out: W) -> Result<()> {
        let s = &self.spec;
        writeln!(out, "{DUMP_MAGIC} v{DUMP_VERSION}")?;
        writeln!(out, "order {}", s.order)?;
        writeln!(out, "vocab {}", s.vocab)?;
        writeln!(out, "seed {}", s.seed)?;
        writeln!(out, "concentration {}", s.concentration)?;
        writeln!(out, "attractor {}", s.attractor_weight)?;
        match s.top_k {
            Some(k) => writeln!(out, "top_k {k}")?,
            None => writeln!(out, "top_k none")?,
        }
        writeln!(out, "rows {}", self.rows.len())?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut line = String::new();
            let ctx: Vec<String> = self
                .context_symbols(i)
                .into_iter()
                .map(|s| s.map_or_else(|| "^".to_string(), |t| t.to_string()))
                .collect();
            line.push_str(&ctx.join(","));
            line.push_str(" :");
            for p in row.probs() {
                write!(line, " {p}").expect("writing to a String");
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Format("unexpected end of file".into()))?
                .map_err(Error::from)
        };
        let header = next()?;
        if header != format!("{DUMP_MAGIC} v{DUMP_VERSION}") {
            return Err(Error::Format(format!("unsupported header {header:?}")));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = next()?;
            line.strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| Error::Format(format!("expected `{name}`, got {line:?}")))
        };
        fn num<T: std::str::FromStr>(name: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad {name} value {v:?}")))
        }
        let order: usize = num("order", &field("order")?)?;
        let vocab: usize = num("vocab", &field("vocab")?)?;
        let seed: u64 = num("seed", &field("seed")?)?;
        let concentration: f64 = num("concentration", &field("concentration")?)?;
        let attractor_weight: f64 = num("attractor", &field("attractor")?)?;
        let top_k = match field("top_k")?.trim() {
            "none" => None,
            v => Some(num("top_k", v)?),
        };
        let n_rows: usize = num("rows", &field("rows")?)?;
        let spec = ModelSpec {
            seed,
            order,
            vocab,
            concentration,
            attractor_weight,
            top_k,
        };
        spec.validate().map_err(|e| Error::Format(e.to_string()))?;

        let mut rows = Vec::with_capacity(n_rows);
        for i in 0..n_rows {
            let line = next()?;
            let (_, probs) = line
                .split_once(':')
                .ok_or_else(|| Error::Format(format!("row {i} has no ':'")))?;
            let probs = probs
                .split_whitespace()
                .map(|p| num::<f64>("probability", p))
                .collect::<Result<Vec<_>>>()?;
            rows.push(
                Distribution::new(probs).map_err(|e| Error::Format(format!("row {i}: {e}")))?,
            );
        }
        Self::from_rows(spec, rows).map_err(|e| Error::Format(e.to_string()))
    }
}

impl AutoregressiveModel for MarkovModel {
    fn vocab_size(&self) -> usize {
        self.spec.vocab
    }

    fn next_token_distribution(&self, context: &[Token]) -> Result<Arc<Distribution>> {
        Ok(Arc::clone(&self.rows[self.context_index(context)?]))
    }
}

fn truncate_top_k(d: &Distribution, k: usize) -> Result<Distribution> {
    let keep = top_k_candidates(d, k as f64 / d.vocab_size() as f64)?;
    let mut w = vec![0.0; d.vocab_size()];
    for t in keep {
        w[t] = d.prob(t);
    }
    Distribution::from_weights(w)
}

/// Conditioning prefix and total target length of one generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u64,
    pub prefix: Vec<Token>,
    pub target_len: usize,
}

impl Prompt {
    pub fn new(id: u64, prefix: Vec<Token>, target_len: usize) -> Result<Self> {
        if prefix.len() >= target_len {
            return Err(invalid(format!(
                "prefix length {} must be below target length {target_len}",
                prefix.len()
            )));
        }
        Ok(Self {
            id,
            prefix,
            target_len,
        })
    }

    /// Prompt `id` of a seeded prompt set: uniformly random prefix tokens.
    pub fn generate(
        set_seed: u64,
        id: u64,
        prefix_len: usize,
        target_len: usize,
        vocab: usize,
    ) -> Result<Self> {
        let mut rng = SeededRng::with_stream(set_seed, id);
        let prefix = (0..prefix_len)
            .map(|_| (rng.uniform() * vocab as f64) as Token)
            .map(|t| t.min(vocab - 1))
            .collect();
        Self::new(id, prefix, target_len)
    }

    pub fn free_positions(&self) -> usize {
        self.target_len - self.prefix.len()
    }
}

/// Exact law of every completion of `prompt`, keyed by the full sequence
/// (prefix included), by enumerating the chain-rule product.
pub fn exact_sequence_distribution<M: AutoregressiveModel + ?Sized>(
    model: &M,
    prompt: &Prompt,
) -> Result<BTreeMap<Vec<Token>, f64>> {
    let v = model.vocab_size() as u128;
    let free = prompt.free_positions() as u32;
    match v.checked_pow(free) {
        Some(n) if n <= MAX_ENUMERATION => {}
        _ => {
            return Err(Error::ResourceLimit(format!(
                "{v}^{free} completions exceed the enumeration limit"
            )))
        }
    }
    let mut out = BTreeMap::new();
    let mut seq = prompt.prefix.clone();
    enumerate(model, prompt.target_len, &mut seq, 1.0, &mut out)?;
    Ok(out)
}

fn enumerate<M: AutoregressiveModel + ?Sized>(
    model: &M,
    target_len: usize,
    seq: &mut Vec<Token>,
    mass: f64,
    out: &mut BTreeMap<Vec<Token>, f64>,
) -> Result<()> {
    if seq.len() == target_len {
        out.insert(seq.clone(), mass);
        return Ok(());
    }
    let d = model.next_token_distribution(seq)?;
    for (t, &p) in d.probs().iter().enumerate() {
        seq.push(t);
        enumerate(model, target_len, seq, mass * p, out)?;
        seq.pop();
    }
    Ok(())
}

/// Plain ancestral sampling: one model evaluation per generated token.
pub fn autoregressive_decode<M: AutoregressiveModel + ?Sized>(
    model: &M,
    prompt: &Prompt,
    rng: &mut SeededRng,
) -> Result<(Vec<Token>, RunStats)> {
    let mut seq = prompt.prefix.clone();
    let mut stats = RunStats::default();
    while seq.len() < prompt.target_len {
        let d = model.next_token_distribution(&seq)?;
        stats.nfe += 1;
        stats.iterations += 1;
        seq.push(sample(&d, rng));
    }
    stats.generated = prompt.free_positions();
    Ok((seq, stats))
}

/// Argmax decoding, the fixed point greedy Jacobi iteration must reach.
pub fn greedy_decode<M: AutoregressiveModel + ?Sized>(
    model: &M,
    prompt: &Prompt,
) -> Result<Vec<Token>> {
    let mut seq = prompt.prefix.clone();
    while seq.len() < prompt.target_len {
        let t = model.next_token_distribution(&seq)?.argmax();
        seq.push(t);
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_deterministic() {
        let a = build_markov_model(3, 2, 5, 0.5).unwrap();
        let b = build_markov_model(3, 2, 5, 0.5).unwrap();
        assert_eq!(a.rows(), b.rows());
        let c = build_markov_model(4, 2, 5, 0.5).unwrap();
        assert_ne!(a.rows(), c.rows());
    }

    #[test]
    fn huge_concentration_is_near_uniform() {
        let m = build_markov_model(1, 1, 4, 1e6).unwrap();
        for row in m.rows() {
            for &p in row.probs() {
                assert!((p - 0.25).abs() < 0.01);
            }
        }
    }

    #[test]
    fn order_one_lookup() {
        let m = build_markov_model(9, 1, 6, 0.5).unwrap();
        for a in 0..6 {
            let d = m.next_token_distribution(&[4, 2, a]).unwrap();
            assert_eq!(d, m.rows()[a]);
        }
        // Begin-of-sequence row sits after the vocabulary rows.
        assert_eq!(m.next_token_distribution(&[]).unwrap(), m.rows()[6]);
    }

    #[test]
    fn order_two_lookup_uses_last_two() {
        let m = build_markov_model(9, 2, 4, 0.5).unwrap();
        let (b, c) = (1, 3);
        let expected = &m.rows()[b * 5 + c];
        assert_eq!(&m.next_token_distribution(&[2, b, c]).unwrap(), expected);
        // Single token: BOS then the token.
        assert_eq!(
            &m.next_token_distribution(&[c]).unwrap(),
            &m.rows()[4 * 5 + c]
        );
        assert_eq!(m.context_symbols(4 * 5 + c), vec![None, Some(c)]);
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let m = build_markov_model(9, 1, 4, 0.5).unwrap();
        assert!(m.next_token_distribution(&[4]).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(build_markov_model(0, 1, 1, 0.5).is_err());
        assert!(build_markov_model(0, 0, 4, 0.5).is_err());
        assert!(build_markov_model(0, 1, 4, 0.0).is_err());
        assert!(matches!(
            build_markov_model(0, 12, 64, 0.5),
            Err(Error::ResourceLimit(_))
        ));
    }

    #[test]
    fn drifting_rows_mix_toward_attractor() {
        let plain = MarkovModel::build(&ModelSpec::new(5, 1, 8, 0.5)).unwrap();
        let drift = MarkovModel::build(&ModelSpec::new(5, 1, 8, 0.5).drifting(0.3)).unwrap();
        // Same raw draws, so every mixed row is 0.7 * plain + 0.3 * shared.
        let attractor: Vec<f64> = drift.rows()[0]
            .probs()
            .iter()
            .zip(plain.rows()[0].probs())
            .map(|(d, p)| (d - 0.7 * p) / 0.3)
            .collect();
        for (d, p) in drift.rows().iter().zip(plain.rows()) {
            for i in 0..8 {
                let expect = 0.7 * p.prob(i) + 0.3 * attractor[i];
                assert!((d.prob(i) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn model_top_k_truncates_rows() {
        let mut spec = ModelSpec::new(5, 1, 8, 0.5);
        spec.top_k = Some(2);
        let m = MarkovModel::build(&spec).unwrap();
        for row in m.rows() {
            assert!(row.probs().iter().filter(|&&p| p > 0.0).count() <= 2);
        }
    }

    #[test]
    fn dump_load_round_trip() {
        let m = MarkovModel::build(&ModelSpec::new(13, 2, 5, 0.4).drifting(0.25)).unwrap();
        let mut buf = Vec::new();
        m.dump(&mut buf).unwrap();
        let back = MarkovModel::load(buf.as_slice()).unwrap();
        assert_eq!(back.spec(), m.spec());
        assert_eq!(back.rows(), m.rows());
    }

    #[test]
    fn load_rejects_garbage() {
        assert!(MarkovModel::load("nope\n".as_bytes()).is_err());
        let m = build_markov_model(1, 1, 3, 0.5).unwrap();
        let mut buf = Vec::new();
        m.dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(9).map(|l| format!("{l}\n")).collect();
        assert!(MarkovModel::load(truncated.as_bytes()).is_err());
    }

    #[test]
    fn exact_distribution_base_case() {
        let m = build_markov_model(2, 1, 5, 0.5).unwrap();
        let prompt = Prompt::new(0, vec![3], 2).unwrap();
        let law = exact_sequence_distribution(&m, &prompt).unwrap();
        let row = m.next_token_distribution(&[3]).unwrap();
        assert_eq!(law.len(), 5);
        for (seq, p) in law {
            assert_eq!(p, row.prob(seq[1]));
        }
    }

    #[test]
    fn exact_distribution_normalises() {
        let m = build_markov_model(2, 2, 2, 0.5).unwrap();
        let prompt = Prompt::new(0, vec![1], 3).unwrap();
        let law = exact_sequence_distribution(&m, &prompt).unwrap();
        assert_eq!(law.len(), 4);
        assert!((law.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_limit() {
        let m = build_markov_model(2, 1, 64, 0.5).unwrap();
        let prompt = Prompt::new(0, vec![], 5).unwrap();
        assert!(matches!(
            exact_sequence_distribution(&m, &prompt),
            Err(Error::ResourceLimit(_))
        ));
    }

    #[test]
    fn ar_decode_counts_one_nfe_per_token() {
        let m = build_markov_model(2, 1, 8, 0.5).unwrap();
        let prompt = Prompt::new(0, vec![1, 2], 10).unwrap();
        let mut rng = SeededRng::new(0);
        let (seq, stats) = autoregressive_decode(&m, &prompt, &mut rng).unwrap();
        assert_eq!(seq.len(), 10);
        assert_eq!(&seq[..2], &[1, 2]);
        assert_eq!(stats.nfe, 8);
    }

    #[test]
    fn ar_decode_of_point_masses_ignores_seed() {
        let vocab = 4;
        let rows = (0..=vocab)
            .map(|c| Distribution::point_mass(vocab, (c + 1) % vocab).unwrap())
            .collect();
        let m = MarkovModel::from_rows(ModelSpec::new(0, 1, vocab, 1.0), rows).unwrap();
        let prompt = Prompt::new(0, vec![0], 6).unwrap();
        let a = autoregressive_decode(&m, &prompt, &mut SeededRng::new(1))
            .unwrap()
            .0;
        let b = autoregressive_decode(&m, &prompt, &mut SeededRng::new(99))
            .unwrap()
            .0;
        assert_eq!(a, vec![0, 1, 2, 3, 0, 1]);
        assert_eq!(a, b);
    }

    #[test]
    fn prompt_validation_and_generation() {
        assert!(Prompt::new(0, vec![1, 2], 2).is_err());
        let a = Prompt::generate(4, 17, 3, 10, 8).unwrap();
        assert_eq!(a, Prompt::generate(4, 17, 3, 10, 8).unwrap());
        assert!(a.prefix.iter().all(|&t| t < 8));
    }
}
