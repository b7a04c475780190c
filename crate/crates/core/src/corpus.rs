//! Character corpora and synthetic Markov sources.
//!
//! Vocabulary ids are assigned by descending frequency, ties broken by
//! codepoint. When the number of distinct characters exceeds the cap, the
//! `cap − 1` most frequent keep their own id and everything else shares one
//! `unk` id, so the mask id stays at `m = cap`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::forward::{TokenSequence, Vocabulary};
use crate::rng::stream;

/// Fraction of chunks held out for validation.
pub const DEFAULT_HOLDOUT: f64 = 0.02;

/// Rendering of the mask id in decoded text.
pub const MASK_CHAR: char = '?';
/// Rendering of the `unk` id in decoded text.
pub const UNK_CHAR: char = '\u{FFFD}';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusVocab {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
    unk: Option<usize>,
}

impl CorpusVocab {
    /// Builds the vocabulary of `text` with at most `cap` ids.
    pub fn build(text: &str, cap: usize) -> Result<Self> {
        if cap < 2 {
            return Err(Error::InvalidArgument(format!("vocabulary cap must be at least 2, got {cap}")));
        }
        let mut counts: HashMap<char, u64> = HashMap::new();
        for c in text.chars() {
            *counts.entry(c).or_default() += 1;
        }
        let mut by_freq: Vec<(char, u64)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let unk = by_freq.len() > cap;
        let keep = if unk { cap - 1 } else { by_freq.len() };
        let symbols: Vec<char> = by_freq[..keep].iter().map(|&(c, _)| c).collect();
        Self::from_symbols(symbols, unk)
    }

    /// Vocabulary with an explicit symbol order; `unk` takes the next id.
    pub fn from_symbols(symbols: Vec<char>, unk: bool) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary symbol {c:?}")));
            }
        }
        let unk = unk.then_some(symbols.len());
        if symbols.len() + usize::from(unk.is_some()) == 0 {
            return Err(Error::InvalidArgument("empty vocabulary".into()));
        }
        Ok(Self { symbols, index, unk })
    }

    /// Number of clean values, including `unk` when present.
    pub fn m(&self) -> usize {
        self.symbols.len() + usize::from(self.unk.is_some())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.m()).expect("vocabulary is non-empty")
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn unk(&self) -> Option<usize> {
        self.unk
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied().or(self.unk)
    }

    /// Out-of-vocabulary characters map to `unk`; without one they are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.char_indices()
            .map(|(off, c)| {
                self.id(c).ok_or_else(|| Error::Ingest {
                    offset: off,
                    reason: format!("character {c:?} is not in the vocabulary"),
                })
            })
            .collect()
    }

    /// Inverse of `encode` on in-vocabulary text; the mask renders as `?`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| match self.symbols.get(i) {
                Some(&c) => c,
                None if Some(i) == self.unk => UNK_CHAR,
                None => MASK_CHAR,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub vocab: CorpusVocab,
    pub train: Vec<TokenSequence>,
    pub valid: Vec<TokenSequence>,
}

/// Reads and splits a UTF-8 text file.
pub fn ingest(path: &Path, cap: usize, chunk_len: usize) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ingest_bytes(&bytes, cap, chunk_len, DEFAULT_HOLDOUT)
}

/// Non-overlapping chunks of `chunk_len`; the trailing remainder is dropped
/// and the last `round(holdout · chunks)` chunks (at least one when there are
/// two or more and `holdout > 0`) form the validation split.
pub fn ingest_bytes(bytes: &[u8], cap: usize, chunk_len: usize, holdout: f64) -> Result<Corpus> {
    if bytes.is_empty() {
        return Err(Error::Ingest {
            offset: 0,
            reason: "empty input".into(),
        });
    }
    if chunk_len == 0 {
        return Err(Error::InvalidArgument("chunk length must be positive".into()));
    }
    if !(0.0..1.0).contains(&holdout) {
        return Err(Error::InvalidArgument(format!("holdout fraction must be in [0, 1), got {holdout}")));
    }
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Ingest {
        offset: e.valid_up_to(),
        reason: "invalid UTF-8".into(),
    })?;
    let vocab = CorpusVocab::build(text, cap)?;
    let ids = vocab.encode(text)?;
    let v = vocab.vocabulary();
    let chunks: Vec<TokenSequence> = ids
        .chunks_exact(chunk_len)
        .map(|c| TokenSequence::from_ids_unchecked(c.to_vec(), v))
        .collect();
    if chunks.is_empty() {
        return Err(Error::Ingest {
            offset: bytes.len(),
            reason: format!("text has {} characters, fewer than one chunk of {chunk_len}", ids.len()),
        });
    }
    let n = chunks.len();
    let mut held = (holdout * n as f64).round() as usize;
    if holdout > 0.0 && n >= 2 {
        held = held.max(1);
    }
    let mut train = chunks;
    let valid = train.split_off(n - held);
    Ok(Corpus { vocab, train, valid })
}

/// One chunk per line of space-separated ids under a `mdc-chunks v1` header.
pub fn write_chunks(path: &Path, chunks: &[TokenSequence], vocab: Vocabulary) -> Result<()> {
    std::fs::write(path, format_chunks(chunks, vocab)?).map_err(|e| Error::io(path, e))
}

pub fn format_chunks(chunks: &[TokenSequence], vocab: Vocabulary) -> Result<String> {
    let len = chunks.first().map_or(0, |c| c.len());
    let mut out = format!("mdc-chunks v1 m={} len={len}\n", vocab.m());
    for c in chunks {
        if c.len() != len || c.vocab() != vocab || !c.is_clean() {
            return Err(Error::InvalidArgument("chunks must be clean and share one length and vocabulary".into()));
        }
        let line: Vec<String> = c.ids().iter().map(|i| i.to_string()).collect();
        writeln!(out, "{}", line.join(" ")).expect("writing to a String");
    }
    Ok(out)
}

pub fn read_chunks(path: &Path) -> Result<(Vocabulary, Vec<TokenSequence>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_chunks(&text)
}

pub fn parse_chunks(text: &str) -> Result<(Vocabulary, Vec<TokenSequence>)> {
    let bad = |line: usize, reason: String| Error::Config { line, reason };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (m, len) = match fields.as_slice() {
        ["mdc-chunks", "v1", m, len] => {
            let num = |s: &str, key: &str| {
                s.strip_prefix(key)
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| bad(1, format!("bad header field {s:?}")))
            };
            (num(m, "m=")?, num(len, "len=")?)
        }
        _ => return Err(bad(1, format!("bad header {header:?}"))),
    };
    let vocab = Vocabulary::new(m).map_err(|e| bad(1, e.to_string()))?;
    let mut chunks = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let ids: Vec<usize> = line
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|e| bad(i + 1, format!("{s:?}: {e}"))))
            .collect::<Result<_>>()?;
        if ids.len() != len {
            return Err(bad(i + 1, format!("expected {len} ids, found {}", ids.len())));
        }
        chunks.push(TokenSequence::clean(ids, vocab).map_err(|e| bad(i + 1, e.to_string()))?);
    }
    Ok((vocab, chunks))
}

/// Order-0 or order-1 Markov source over `m` symbols.
#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticSource {
    Iid(Vec<f64>),
    Markov(Vec<Vec<f64>>),
}

const STOCHASTIC_TOL: f64 = 1e-9;

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} is empty")));
    }
    if p.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(Error::InvalidArgument(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::InvalidArgument(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

impl SyntheticSource {
    pub fn iid(p: Vec<f64>) -> Result<Self> {
        check_distribution(&p, "distribution")?;
        Ok(Self::Iid(p))
    }

    pub fn uniform(m: usize) -> Result<Self> {
        Self::iid(vec![1.0 / m as f64; m])
    }

    pub fn markov(transition: Vec<Vec<f64>>) -> Result<Self> {
        let m = transition.len();
        for (i, row) in transition.iter().enumerate() {
            if row.len() != m {
                return Err(Error::InvalidArgument(format!("transition row {i} has length {}, expected {m}", row.len())));
            }
            check_distribution(row, &format!("transition row {i}"))?;
        }
        if m == 0 {
            return Err(Error::InvalidArgument("empty transition table".into()));
        }
        Ok(Self::Markov(transition))
    }

    /// Symmetric two-state chain that flips with probability `flip`.
    pub fn two_state(flip: f64) -> Result<Self> {
        Self::markov(vec![vec![1.0 - flip, flip], vec![flip, 1.0 - flip]])
    }

    pub fn m(&self) -> usize {
        match self {
            Self::Iid(p) => p.len(),
            Self::Markov(t) => t.len(),
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.m()).expect("validated source is non-empty")
    }

    /// Stationary distribution. For chains this iterates the lazy operator
    /// `(I + P)/2`, which shares `P`'s fixed point and converges for periodic
    /// chains too, until the L1 change drops below 1e-12.
    pub fn stationary(&self) -> Vec<f64> {
        match self {
            Self::Iid(p) => p.clone(),
            Self::Markov(t) => {
                let m = t.len();
                let mut pi = vec![1.0 / m as f64; m];
                for _ in 0..10_000_000 {
                    let mut next = vec![0.0; m];
                    for i in 0..m {
                        for j in 0..m {
                            next[j] += pi[i] * t[i][j];
                        }
                    }
                    let mut delta = 0.0;
                    for j in 0..m {
                        next[j] = 0.5 * (next[j] + pi[j]);
                        delta += (next[j] - pi[j]).abs();
                    }
                    let z: f64 = next.iter().sum();
                    next.iter_mut().for_each(|x| *x /= z);
                    pi = next;
                    if delta < 1e-12 {
                        break;
                    }
                }
                pi
            }
        }
    }

    /// Entropy rate in nats per symbol.
    pub fn entropy_rate(&self) -> f64 {
        match self {
            Self::Iid(p) => -p.iter().copied().map(plogp).sum::<f64>(),
            Self::Markov(t) => {
                let pi = self.stationary();
                -pi.iter()
                    .zip(t)
                    .map(|(&w, row)| w * row.iter().copied().map(plogp).sum::<f64>())
                    .sum::<f64>()
            }
        }
    }

    pub fn entropy_bits(&self) -> f64 {
        self.entropy_rate() / std::f64::consts::LN_2
    }

    /// Deterministic stream of `total_len` symbols; chains start stationary.
    pub fn generate(&self, total_len: usize, seed: u64) -> Vec<usize> {
        let mut rng = stream(seed, "synthetic-source", 0);
        let start = self.stationary();
        let mut out = Vec::with_capacity(total_len);
        for _ in 0..total_len {
            let p = match (self, out.last()) {
                (Self::Iid(p), _) => p,
                (Self::Markov(t), Some(&prev)) => &t[prev],
                (Self::Markov(_), None) => &start,
            };
            out.push(draw(p, &mut rng));
        }
        out
    }

    /// `count` consecutive chunks of `len` cut from one generated stream.
    pub fn chunks(&self, count: usize, len: usize, seed: u64) -> Vec<TokenSequence> {
        let v = self.vocabulary();
        self.generate(count * len, seed)
            .chunks_exact(len.max(1))
            .map(|c| TokenSequence::from_ids_unchecked(c.to_vec(), v))
            .collect()
    }
}

impl std::str::FromStr for SyntheticSource {
    type Err = Error;

    /// `uniform:<m>`, `two_state:<flip>`, `iid:<p0>,<p1>,…` or
    /// `markov:<row0>;<row1>;…` with comma-separated rows.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: String| Error::InvalidArgument(format!("source {s:?}: {why}"));
        let nums = |v: &str| -> Result<Vec<f64>> {
            v.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|e| bad(format!("{x:?}: {e}"))))
                .collect()
        };
        let (kind, arg) = s.split_once(':').ok_or_else(|| bad("expected kind:args".into()))?;
        match kind.trim() {
            "uniform" => Self::uniform(arg.trim().parse().map_err(|e| bad(format!("{e}")))?),
            "two_state" => Self::two_state(arg.trim().parse().map_err(|e| bad(format!("{e}")))?),
            "iid" => Self::iid(nums(arg)?),
            "markov" => Self::markov(arg.split(';').map(nums).collect::<Result<_>>()?),
            other => Err(bad(format!("unknown kind {other:?}"))),
        }
    }
}

fn draw<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    crate::sampler::categorical(p, rng)
}

/// Renders symbol ids as letters `a, b, …` (then further codepoints).
pub fn synthetic_text(ids: &[usize]) -> String {
    ids.iter()
        .map(|&i| char::from_u32('a' as u32 + i as u32).unwrap_or(UNK_CHAR))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn abab_example() {
        let c = ingest_bytes(b"abab", 2, 2, DEFAULT_HOLDOUT).unwrap();
        // equal counts: the lower codepoint wins id 0
        assert_eq!(c.vocab.symbols(), &['a', 'b']);
        assert_eq!(c.train.len() + c.valid.len(), 2);
        assert_eq!(c.vocab.unk(), None);
    }

    #[test]
    fn cap_keeps_most_frequent_plus_unk() {
        // 30 distinct characters; character k appears k+1 times
        let alphabet: Vec<char> = "abcdefghijklmnopqrstuvwxyz0123".chars().collect();
        let mut text = String::new();
        for (k, &c) in alphabet.iter().enumerate() {
            text.extend(std::iter::repeat_n(c, k + 1));
        }
        let v = CorpusVocab::build(&text, 27).unwrap();
        assert_eq!(v.m(), 27);
        assert_eq!(v.unk(), Some(26));
        let expected: Vec<char> = alphabet.iter().rev().take(26).copied().collect();
        assert_eq!(v.symbols(), expected.as_slice());
        // the four rarest share unk
        for c in ['a', 'b', 'c', 'd'] {
            assert_eq!(v.id(c), Some(26));
        }
    }

    #[test]
    fn split_is_trailing_holdout() {
        let text: String = (0..1000).map(|i| if i % 3 == 0 { 'x' } else { 'y' }).collect();
        let c = ingest_bytes(text.as_bytes(), 27, 10, DEFAULT_HOLDOUT).unwrap();
        assert_eq!(c.train.len(), 98);
        assert_eq!(c.valid.len(), 2);
        let ids = c.vocab.encode(&text).unwrap();
        assert_eq!(c.valid[1].ids(), &ids[990..1000]);
        for ch in c.train.iter().chain(&c.valid) {
            assert!(ch.is_clean());
        }
    }

    #[test]
    fn ingestion_errors_carry_offsets() {
        match ingest_bytes(b"", 4, 2, 0.02) {
            Err(Error::Ingest { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        match ingest_bytes(b"ab\xffcd", 4, 2, 0.02) {
            Err(Error::Ingest { offset: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(ingest(Path::new("/nonexistent/corpus.txt"), 4, 2), Err(Error::Io { .. })));
    }

    #[test]
    fn chunk_file_round_trip() {
        let v = Vocabulary::new(5).unwrap();
        let chunks = vec![
            TokenSequence::clean(vec![0, 4, 2], v).unwrap(),
            TokenSequence::clean(vec![1, 1, 3], v).unwrap(),
        ];
        let text = format_chunks(&chunks, v).unwrap();
        assert!(text.starts_with("mdc-chunks v1 m=5 len=3\n"));
        let (v2, back) = parse_chunks(&text).unwrap();
        assert_eq!(v2, v);
        assert_eq!(back, chunks);
        assert!(parse_chunks("mdc-chunks v1 m=5 len=3\n0 1 5\n").is_err());
        assert!(parse_chunks("mdc-chunks v2 m=5 len=3\n").is_err());
        assert!(parse_chunks("mdc-chunks v1 m=5 len=3\n0 1\n").is_err());
    }

    #[test]
    fn entropy_examples() {
        assert!((SyntheticSource::uniform(4).unwrap().entropy_bits() - 2.0).abs() < 1e-12);
        let h = |p: f64| -(p * p.log2() + (1.0 - p) * (1.0 - p).log2());
        let s = SyntheticSource::two_state(0.1).unwrap();
        assert!((s.entropy_bits() - h(0.1)).abs() < 1e-10);
        assert!((s.entropy_bits() - 0.469).abs() < 1e-3);
    }

    #[test]
    fn periodic_chain_has_stationary_distribution() {
        let s = SyntheticSource::markov(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let pi = s.stationary();
        assert!((pi[0] - 0.5).abs() < 1e-12);
        assert_eq!(s.entropy_rate(), 0.0);
    }

    #[test]
    fn rejects_non_stochastic_tables() {
        assert!(SyntheticSource::markov(vec![vec![0.5, 0.4], vec![0.5, 0.5]]).is_err());
        assert!(SyntheticSource::markov(vec![vec![1.0], vec![1.0]]).is_err());
        assert!(SyntheticSource::iid(vec![1.2, -0.2]).is_err());
    }

    #[test]
    fn unigram_frequencies_match_stationary() {
        let t = vec![vec![0.7, 0.2, 0.1], vec![0.3, 0.3, 0.4], vec![0.25, 0.25, 0.5]];
        let s = SyntheticSource::markov(t).unwrap();
        let pi = s.stationary();
        let n = 1_000_000;
        let x = s.generate(n, 11);
        // samples are correlated, so σ comes from batch means
        let batches = 100;
        for (j, &p) in pi.iter().enumerate() {
            let means: Vec<f64> = x
                .chunks(n / batches)
                .map(|b| b.iter().filter(|&&v| v == j).count() as f64 / b.len() as f64)
                .collect();
            let freq = means.iter().sum::<f64>() / batches as f64;
            let var = means.iter().map(|m| (m - freq).powi(2)).sum::<f64>() / (batches - 1) as f64;
            let sigma = (var / batches as f64).sqrt();
            assert!((freq - p).abs() < 4.0 * sigma, "{j}: {freq} vs {p} (σ {sigma})");
        }
    }

    #[test]
    fn parses_source_specs() {
        assert_eq!("uniform:4".parse::<SyntheticSource>().unwrap(), SyntheticSource::uniform(4).unwrap());
        assert_eq!("two_state:0.1".parse::<SyntheticSource>().unwrap(), SyntheticSource::two_state(0.1).unwrap());
        assert_eq!("iid:0.25, 0.75".parse::<SyntheticSource>().unwrap().m(), 2);
        assert_eq!("markov:0.5,0.5;1,0".parse::<SyntheticSource>().unwrap().m(), 2);
        assert!("markov:0.5,0.4;1,0".parse::<SyntheticSource>().is_err());
        assert!("zipf:2".parse::<SyntheticSource>().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let s = SyntheticSource::two_state(0.2).unwrap();
        assert_eq!(s.generate(500, 3), s.generate(500, 3));
        assert_ne!(s.generate(500, 3), s.generate(500, 4));
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(text in "[a-z ]{1,200}") {
            let v = CorpusVocab::build(&text, 64).unwrap();
            let ids = v.encode(&text).unwrap();
            prop_assert!(ids.iter().all(|&i| i < v.m()));
            prop_assert_eq!(v.decode(&ids), text);
        }

        #[test]
        fn ingestion_is_deterministic(text in "[a-f]{20,120}", len in 1usize..8) {
            let a = ingest_bytes(text.as_bytes(), 4, len, 0.1).unwrap();
            let b = ingest_bytes(text.as_bytes(), 4, len, 0.1).unwrap();
            prop_assert_eq!(&a, &b);
            for c in a.train.iter().chain(&a.valid) {
                prop_assert!(c.ids().iter().all(|&i| i < a.vocab.m()));
            }
        }
    }
}
