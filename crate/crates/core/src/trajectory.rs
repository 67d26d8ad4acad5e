//! The trajectory log: JSON Lines, one object per line, tagged by `kind`.
//!
//! ```text
//! {"kind":"header","schema":"sjdvp.trajectory","version":1,"fingerprint":"…","decoder":"sjd-vp","vocab":64,"window":16,"growth_comparisons":3}
//! {"kind":"token","run":0,"iter":3,"pos":5,"token":17,"prob":0.21,"drafted":true,"accepted":false,"final":true,"masked":false}
//! {"kind":"draft","run":0,"iter":3,"pos":5,"token":17,"pbar":0.18,"score":0.15,"mask":false,"in_candidates":true,"p_before":0.21,"p_after":0.21}
//! ```
//!
//! Exactly one header, first. `token` lines give, for every iteration a
//! position spent in the window, the model probability of each tracked
//! token (the final token, every drafted token and the top five of each
//! iteration), so every tracked token has a complete trajectory. `masked`
//! is the drafter's growth mask, absent for drafters without one. `draft`
//! lines are the drafter's own debug records. Records of one position are
//! contiguous and appear once the position is committed.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::Token;

pub const SCHEMA: &str = "sjdvp.trajectory";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: String,
    pub version: u32,
    pub fingerprint: String,
    pub decoder: String,
    pub vocab: usize,
    pub window: usize,
    /// Comparisons behind the `masked` flags.
    pub growth_comparisons: Option<usize>,
}

impl LogHeader {
    pub fn new(
        fingerprint: impl Into<String>,
        decoder: impl Into<String>,
        vocab: usize,
        window: usize,
        growth_comparisons: Option<usize>,
    ) -> Self {
        Self {
            schema: SCHEMA.into(),
            version: SCHEMA_VERSION,
            fingerprint: fingerprint.into(),
            decoder: decoder.into(),
            vocab,
            window,
            growth_comparisons,
        }
    }
}

/// One tracked token at one position and iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub run: u64,
    pub iter: usize,
    pub pos: usize,
    pub token: Token,
    /// Model probability the drafter saw.
    pub prob: f64,
    pub drafted: bool,
    /// Drafted this iteration and passed verification.
    pub accepted: bool,
    /// The token finally committed at `pos`.
    #[serde(rename = "final")]
    pub is_final: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftRecord {
    pub run: u64,
    pub iter: usize,
    pub pos: usize,
    pub token: Token,
    pub pbar: f64,
    pub score: f64,
    pub mask: bool,
    pub in_candidates: bool,
    pub p_before: f64,
    pub p_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Header(LogHeader),
    Token(TokenRecord),
    Draft(DraftRecord),
}

/// A parsed log, or several merged ones.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub header: LogHeader,
    pub tokens: Vec<TokenRecord>,
    pub drafts: Vec<DraftRecord>,
}

/// Writes the header and then `lines` (which must not contain a header).
pub fn write_log<W: Write>(mut out: W, header: &LogHeader, lines: &[LogLine]) -> Result<()> {
    write_line(&mut out, &LogLine::Header(header.clone()))?;
    for line in lines {
        if matches!(line, LogLine::Header(_)) {
            return Err(Error::InvalidInput("second header in log body".into()));
        }
        write_line(&mut out, line)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_line<W: Write>(out: &mut W, line: &LogLine) -> Result<()> {
    serde_json::to_writer(&mut *out, line)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::AnalysisInput(msg.into())
}

/// Parses one log. Every defect is an [`Error::AnalysisInput`].
pub fn read_log<R: BufRead>(input: R) -> Result<TrajectoryLog> {
    let mut header = None;
    let mut tokens = Vec::new();
    let mut drafts = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogLine =
            serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
        match parsed {
            LogLine::Header(h) => {
                if header.is_some() || !tokens.is_empty() || !drafts.is_empty() {
                    return Err(bad(format!("line {}: header must come first, once", i + 1)));
                }
                if h.schema != SCHEMA || h.version != SCHEMA_VERSION {
                    return Err(bad(format!(
                        "unsupported schema {} v{} (want {SCHEMA} v{SCHEMA_VERSION})",
                        h.schema, h.version
                    )));
                }
                header = Some(h);
            }
            LogLine::Token(t) => {
                if header.is_none() {
                    return Err(bad("record before header"));
                }
                tokens.push(t);
            }
            LogLine::Draft(d) => {
                if header.is_none() {
                    return Err(bad("record before header"));
                }
                drafts.push(d);
            }
        }
    }
    let header = header.ok_or_else(|| bad("empty log"))?;
    let log = TrajectoryLog {
        header,
        tokens,
        drafts,
    };
    log.check()?;
    Ok(log)
}

impl TrajectoryLog {
    /// Record-level invariants: unique `(run, pos, iter, token)`, tokens
    /// inside the vocabulary, probabilities in `[0, 1]`, one final token
    /// per position.
    pub fn check(&self) -> Result<()> {
        let vocab = self.header.vocab;
        let mut seen = BTreeSet::new();
        let mut finals = std::collections::BTreeMap::new();
        for r in &self.tokens {
            if r.token >= vocab {
                return Err(bad(format!("token {} outside vocab {vocab}", r.token)));
            }
            if !(0.0..=1.0).contains(&r.prob) {
                return Err(bad(format!("probability {} outside [0, 1]", r.prob)));
            }
            if !seen.insert((r.run, r.pos, r.iter, r.token)) {
                return Err(bad(format!(
                    "duplicate record run {} pos {} iter {} token {}",
                    r.run, r.pos, r.iter, r.token
                )));
            }
            if r.masked.is_some() && self.header.growth_comparisons.is_none() {
                return Err(bad("masked flags without growth_comparisons in header"));
            }
            if r.is_final {
                let prev = finals.insert((r.run, r.pos), r.token);
                if prev.is_some_and(|p| p != r.token) {
                    return Err(bad(format!(
                        "two final tokens at run {} pos {}",
                        r.run, r.pos
                    )));
                }
            }
        }
        Ok(())
    }

    /// Concatenates logs that share a fingerprint and decoder.
    pub fn merge(logs: Vec<TrajectoryLog>) -> Result<TrajectoryLog> {
        let mut iter = logs.into_iter();
        let mut merged = iter.next().ok_or_else(|| bad("no logs to merge"))?;
        for log in iter {
            if log.header.fingerprint != merged.header.fingerprint {
                return Err(bad(format!(
                    "mixed fingerprints: {} vs {}",
                    merged.header.fingerprint, log.header.fingerprint
                )));
            }
            if log.header != merged.header {
                return Err(bad(format!(
                    "headers disagree ({} vs {})",
                    merged.header.decoder, log.header.decoder
                )));
            }
            merged.tokens.extend(log.tokens);
            merged.drafts.extend(log.drafts);
        }
        merged.check()?;
        Ok(merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(iter: usize, token: Token, prob: f64) -> LogLine {
        LogLine::Token(TokenRecord {
            run: 1,
            iter,
            pos: 2,
            token,
            prob,
            drafted: token == 0,
            accepted: false,
            is_final: token == 0,
            masked: Some(false),
        })
    }

    fn header() -> LogHeader {
        LogHeader::new("abc", "sjd-vp", 4, 2, Some(3))
    }

    #[test]
    fn round_trip_is_exact() {
        let lines = vec![
            rec(1, 0, 0.1 + 0.2),
            rec(1, 1, 1.0 / 3.0),
            LogLine::Draft(DraftRecord {
                run: 1,
                iter: 1,
                pos: 2,
                token: 0,
                pbar: std::f64::consts::LN_2,
                score: -1e-17,
                mask: true,
                in_candidates: false,
                p_before: 0.25,
                p_after: 0.125,
            }),
        ];
        let mut buf = Vec::new();
        write_log(&mut buf, &header(), &lines).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"kind\":\"header\""));
        assert!(text.contains("\"final\":true"));
        let log = read_log(buf.as_slice()).unwrap();
        assert_eq!(log.header, header());
        assert_eq!(log.tokens.len(), 2);
        assert_eq!(log.tokens[0].prob, 0.1 + 0.2);
        assert_eq!(log.tokens[1].prob, 1.0 / 3.0);
        assert_eq!(LogLine::Draft(log.drafts[0].clone()), lines[2]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut buf = Vec::new();
        write_line(&mut buf, &rec(1, 0, 0.5)).unwrap();
        assert!(matches!(
            read_log(buf.as_slice()),
            Err(Error::AnalysisInput(_))
        ));

        let mut buf = Vec::new();
        write_log(&mut buf, &header(), &[rec(1, 0, 0.5), rec(1, 0, 0.5)]).unwrap();
        assert!(matches!(
            read_log(buf.as_slice()),
            Err(Error::AnalysisInput(_))
        ));

        assert!(matches!(read_log(&b""[..]), Err(Error::AnalysisInput(_))));
        assert!(matches!(
            read_log(&b"{nope"[..]),
            Err(Error::AnalysisInput(_))
        ));
    }

    #[test]
    fn merge_refuses_mixed_fingerprints() {
        let a = TrajectoryLog {
            header: header(),
            tokens: vec![],
            drafts: vec![],
        };
        let mut b = a.clone();
        assert!(TrajectoryLog::merge(vec![a.clone(), b.clone()]).is_ok());
        b.header.fingerprint = "def".into();
        assert!(matches!(
            TrajectoryLog::merge(vec![a, b]),
            Err(Error::AnalysisInput(_))
        ));
    }
}
