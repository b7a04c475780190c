//! Lookup-table predictors for tiny instances and low-order sources.
//!
//! Every position selects one row of an `R × m` logit table through its
//! [`Context`]; the output is the softmax of that row. None of the modes look
//! at `t`: under a scalar schedule the mask pattern is independent of the
//! clean data, so the Bayes-optimal `μ` for a fixed pattern is time-free.

use serde::{Deserialize, Serialize};

use super::{check_input, check_record, fingerprint, log_softmax, log_softmax_backward, Cache};
use super::{Architecture, Predictor, Record};
use crate::error::{Error, Result};
use crate::forward::{TokenSequence, Vocabulary};

/// Largest table accepted for the exhaustive mode.
const MAX_ROWS: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Context {
    /// One row for every position.
    Shared,
    /// One row per position.
    PerPosition { len: usize },
    /// One row per (full input pattern, position).
    Exhaustive { len: usize },
    /// Nearest unmasked value on each side together with its distance, capped
    /// at `max_distance`. Sufficient for first-order Markov sources.
    Neighbors { max_distance: usize },
}

impl Context {
    fn rows(&self, m: usize) -> Result<usize> {
        Ok(match *self {
            Context::Shared => 1,
            Context::PerPosition { len } => len.max(1),
            Context::Exhaustive { len } => (m + 1)
                .checked_pow(len as u32)
                .and_then(|p| p.checked_mul(len.max(1)))
                .filter(|&r| r <= MAX_ROWS)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "exhaustive table for m = {m}, length {len} exceeds {MAX_ROWS} rows"
                    ))
                })?,
            Context::Neighbors { max_distance } => {
                if max_distance == 0 {
                    return Err(Error::InvalidArgument("max_distance must be positive".into()));
                }
                let side = m * max_distance + 1;
                side * side
            }
        })
    }

    fn seq_len(&self) -> Option<usize> {
        match *self {
            Context::PerPosition { len } | Context::Exhaustive { len } => Some(len),
            Context::Shared | Context::Neighbors { .. } => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TabularPredictor {
    vocab: Vocabulary,
    context: Context,
    rows: usize,
    logits: Vec<f64>,
}

impl TabularPredictor {
    /// All-zero logits, i.e. uniform predictions.
    pub fn new(vocab: Vocabulary, context: Context) -> Result<Self> {
        let rows = context.rows(vocab.m())?;
        Ok(Self {
            vocab,
            context,
            rows,
            logits: vec![0.0; rows * vocab.m()],
        })
    }

    pub fn context(&self) -> &Context {
        &self.context
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Sets row `r` so that its softmax equals `probs` (entries must be positive).
    pub fn set_row_probs(&mut self, r: usize, probs: &[f64]) -> Result<()> {
        let m = self.vocab.m();
        if r >= self.rows || probs.len() != m {
            return Err(Error::InvalidArgument(format!(
                "row {r} / width {} outside a {} × {m} table",
                probs.len(),
                self.rows
            )));
        }
        if probs.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidArgument("row probabilities must be positive".into()));
        }
        for (dst, &p) in self.logits[r * m..(r + 1) * m].iter_mut().zip(probs) {
            *dst = p.ln();
        }
        Ok(())
    }

    /// Table row consulted at every position of `xt`.
    pub fn row_keys(&self, xt: &[usize]) -> Vec<usize> {
        let m = self.vocab.m();
        let mask = self.vocab.mask_id();
        let n = xt.len();
        match self.context {
            Context::Shared => vec![0; n],
            Context::PerPosition { .. } => (0..n).collect(),
            Context::Exhaustive { .. } => {
                let pattern = xt.iter().rev().fold(0usize, |acc, &id| acc * (m + 1) + id);
                (0..n).map(|i| pattern * n + i).collect()
            }
            Context::Neighbors { max_distance: d } => {
                let side = m * d + 1;
                let code = |hit: Option<(usize, usize)>| match hit {
                    None => 0,
                    Some((value, dist)) => 1 + value * d + (dist.min(d) - 1),
                };
                let mut left = vec![0; n];
                let mut last: Option<usize> = None;
                for i in 0..n {
                    left[i] = code(last.map(|j| (xt[j], i - j)));
                    if xt[i] != mask {
                        last = Some(i);
                    }
                }
                let mut keys = vec![0; n];
                let mut next: Option<usize> = None;
                for i in (0..n).rev() {
                    keys[i] = left[i] * side + code(next.map(|j| (xt[j], j - i)));
                    if xt[i] != mask {
                        next = Some(i);
                    }
                }
                keys
            }
        }
    }

    fn fingerprint(&self) -> u64 {
        fingerprint(&[1, self.vocab.m() as u64, self.rows as u64])
    }
}

impl Predictor for TabularPredictor {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn seq_len(&self) -> Option<usize> {
        self.context.seq_len()
    }

    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn architecture(&self) -> Architecture {
        Architecture::Tabular {
            m: self.vocab.m(),
            context: self.context.clone(),
        }
    }

    fn forward(&self, xt: &TokenSequence, t: f64) -> Result<Record> {
        check_input(self, xt, t)?;
        let m = self.vocab.m();
        let rows = self.row_keys(xt.ids());
        let mut log_probs = Vec::with_capacity(rows.len() * m);
        for &r in &rows {
            log_probs.extend(log_softmax(&self.logits[r * m..(r + 1) * m]));
        }
        Ok(Record {
            fingerprint: self.fingerprint(),
            xt: xt.ids().to_vec(),
            t,
            m,
            log_probs,
            cache: Cache::Rows(rows),
        })
    }

    fn backward(&self, record: &Record, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        check_record(self.fingerprint(), record, upstream, grad, self.logits.len())?;
        let Cache::Rows(rows) = &record.cache else {
            return Err(Error::Usage("record does not come from a tabular predictor".into()));
        };
        let m = self.vocab.m();
        let mut dz = vec![0.0; m];
        for (n, &r) in rows.iter().enumerate() {
            let up = &upstream[n * m..(n + 1) * m];
            if up.iter().all(|&g| g == 0.0) {
                continue;
            }
            log_softmax_backward(&record.log_probs[n * m..(n + 1) * m], up, &mut dz);
            for (g, d) in grad[r * m..(r + 1) * m].iter_mut().zip(&dz) {
                *g += d;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(m: usize) -> Vocabulary {
        Vocabulary::new(m).unwrap()
    }

    #[test]
    fn uniform_logits_give_uniform_predictions() {
        let p = TabularPredictor::new(vocab(4), Context::Shared).unwrap();
        let xt = TokenSequence::new(vec![4, 1, 4], vocab(4)).unwrap();
        let rec = p.forward(&xt, 0.5).unwrap();
        assert_eq!(rec.probs(0), vec![0.25; 4]);
        assert_eq!(rec.probs(1), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn carry_over_is_one_hot() {
        let v = vocab(8);
        let mut p = TabularPredictor::new(v, Context::PerPosition { len: 2 }).unwrap();
        for (i, x) in p.params_mut().iter_mut().enumerate() {
            *x = (i as f64 * 0.37).sin();
        }
        let xt = TokenSequence::new(vec![5, 8], v).unwrap();
        let rec = p.forward(&xt, 0.3).unwrap();
        let mut hot = vec![0.0; 8];
        hot[5] = 1.0;
        assert_eq!(rec.probs(0), hot);
        assert!((rec.probs(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let v = vocab(3);
        let mut p = TabularPredictor::new(v, Context::Exhaustive { len: 2 }).unwrap();
        for (i, x) in p.params_mut().iter_mut().enumerate() {
            *x = ((i * 7 % 11) as f64 - 5.0) * 0.3;
        }
        let xt = TokenSequence::new(vec![3, 1], v).unwrap();
        let target = 2;
        let loss = |p: &TabularPredictor| p.forward(&xt, 0.5).unwrap().log_mu(0, target);
        let rec = p.forward(&xt, 0.5).unwrap();
        let mut up = vec![0.0; 6];
        up[target] = 1.0;
        let mut grad = vec![0.0; p.num_params()];
        p.backward(&rec, &up, &mut grad).unwrap();
        for (i, &g) in grad.iter().enumerate() {
            let h = 1e-6;
            let mut a = p.clone();
            a.params_mut()[i] += h;
            let mut b = p.clone();
            b.params_mut()[i] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - g).abs() <= 1e-5 * fd.abs().max(1e-3), "{i}: {fd} vs {g}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let v = vocab(3);
        let p = TabularPredictor::new(v, Context::Shared).unwrap();
        let rec = p.forward(&TokenSequence::all_masked(v, 4), 0.2).unwrap();
        let mut grad = vec![0.0; p.num_params()];
        p.backward(&rec, &[0.0; 12], &mut grad).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mismatched_record_is_a_usage_error() {
        let v = vocab(3);
        let a = TabularPredictor::new(v, Context::Shared).unwrap();
        let b = TabularPredictor::new(v, Context::PerPosition { len: 2 }).unwrap();
        let rec = b.forward(&TokenSequence::all_masked(v, 2), 0.2).unwrap();
        let mut grad = vec![0.0; a.num_params()];
        assert!(matches!(a.backward(&rec, &[0.0; 6], &mut grad), Err(Error::Usage(_))));
    }

    #[test]
    fn neighbor_keys() {
        let v = vocab(2);
        let p = TabularPredictor::new(v, Context::Neighbors { max_distance: 3 }).unwrap();
        assert_eq!(p.rows(), 49);
        // side = 7; codes: none = 0, (value, dist) = 1 + value*3 + dist-1
        let keys = p.row_keys(&[1, 2, 2, 2, 2, 0]);
        assert_eq!(keys[1], (1 + 3) * 7 + (1 + 2));
        assert_eq!(keys[4], (1 + 3 + 2) * 7 + 1);
        assert_eq!(keys[0], 1 + 2);
        assert_eq!(keys[5], (1 + 3 + 2) * 7);
    }

    #[test]
    fn exhaustive_size_is_capped() {
        assert!(TabularPredictor::new(vocab(27), Context::Exhaustive { len: 8 }).is_err());
    }
}
