//! Mean-parameterized predictors `μ_θ(x_t, t)`.
//!
//! A predictor maps a partially masked sequence and a time to one distribution
//! over the `m` clean values per position. The raw network output is recorded
//! as log-probabilities for every position; the carry-over rule (unmasked inputs
//! pass through unchanged) is applied by the accessors on [`Record`], never by
//! the network itself.
//!
//! Gradients flow in reverse mode: losses produce upstream gradients on the
//! recorded log-probabilities and [`Predictor::backward`] turns them into a
//! gradient over the flat parameter vector.

pub mod mlp;
pub mod optim;
pub mod tabular;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{TokenSequence, Vocabulary};

pub use mlp::{MlpConfig, MlpPredictor};
pub use optim::{ema_update, AdamState, AdamW};
pub use tabular::{Context, TabularPredictor};

/// Recorded forward pass.
#[derive(Debug, Clone)]
pub struct Record {
    pub(crate) fingerprint: u64,
    pub(crate) xt: Vec<usize>,
    pub(crate) t: f64,
    pub(crate) m: usize,
    /// Row-major `N × m` raw log-probabilities.
    pub(crate) log_probs: Vec<f64>,
    pub(crate) cache: Cache,
}

#[derive(Debug, Clone)]
pub(crate) enum Cache {
    /// Table row used at each position.
    Rows(Vec<usize>),
    /// Layer inputs and pre-activations.
    Layers { inputs: Vec<Vec<f64>>, pre: Vec<Vec<f64>> },
}

impl Record {
    pub fn len(&self) -> usize {
        self.xt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xt.is_empty()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn input(&self) -> &[usize] {
        &self.xt
    }

    pub fn is_masked(&self, n: usize) -> bool {
        self.xt[n] == self.m
    }

    /// Raw network log-probabilities at position `n`, before carry-over.
    pub fn raw_log_probs(&self, n: usize) -> &[f64] {
        &self.log_probs[n * self.m..(n + 1) * self.m]
    }

    /// `log μ_θ(x_t, t)^{(n)}_j` at a masked position.
    pub fn log_mu(&self, n: usize, j: usize) -> f64 {
        debug_assert!(self.is_masked(n));
        self.log_probs[n * self.m + j]
    }

    /// `μ_θ(x_t, t)^{(n)}` with carry-over applied.
    pub fn probs(&self, n: usize) -> Vec<f64> {
        if self.is_masked(n) {
            self.raw_log_probs(n).iter().map(|l| l.exp()).collect()
        } else {
            let mut p = vec![0.0; self.m];
            p[self.xt[n]] = 1.0;
            p
        }
    }

    /// Carry-over distribution at position `n` with logits divided by `temperature`.
    pub fn probs_tempered(&self, n: usize, temperature: f64) -> Vec<f64> {
        if !self.is_masked(n) || temperature == 1.0 {
            return self.probs(n);
        }
        let scaled: Vec<f64> = self.raw_log_probs(n).iter().map(|l| l / temperature).collect();
        softmax(&scaled)
    }
}

/// Model interface shared by every predictor.
pub trait Predictor {
    fn vocab(&self) -> Vocabulary;

    /// Fixed sequence length, if the model has one.
    fn seq_len(&self) -> Option<usize>;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn architecture(&self) -> Architecture;

    fn forward(&self, xt: &TokenSequence, t: f64) -> Result<Record>;

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂ log μ` for every recorded entry.
    fn backward(&self, record: &Record, upstream: &[f64], grad: &mut [f64]) -> Result<()>;
}

/// Serializable description sufficient to rebuild a predictor around a parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Tabular { m: usize, context: Context },
    Mlp(MlpConfig),
}

impl Architecture {
    pub fn build(&self, params: Option<Vec<f64>>, seed: u64) -> Result<AnyPredictor> {
        let mut p = match self {
            Architecture::Tabular { m, context } => {
                AnyPredictor::Tabular(TabularPredictor::new(Vocabulary::new(*m)?, context.clone())?)
            }
            Architecture::Mlp(cfg) => AnyPredictor::Mlp(MlpPredictor::new(cfg.clone(), seed)?),
        };
        if let Some(params) = params {
            if params.len() != p.num_params() {
                return Err(Error::InvalidArgument(format!(
                    "architecture expects {} parameters, got {}",
                    p.num_params(),
                    params.len()
                )));
            }
            p.params_mut().copy_from_slice(&params);
        }
        Ok(p)
    }
}

/// Closed set of built-in predictors.
#[derive(Debug, Clone)]
pub enum AnyPredictor {
    Tabular(TabularPredictor),
    Mlp(MlpPredictor),
}

macro_rules! delegate {
    ($self:ident, $p:ident => $e:expr) => {
        match $self {
            AnyPredictor::Tabular($p) => $e,
            AnyPredictor::Mlp($p) => $e,
        }
    };
}

impl Predictor for AnyPredictor {
    fn vocab(&self) -> Vocabulary {
        delegate!(self, p => p.vocab())
    }
    fn seq_len(&self) -> Option<usize> {
        delegate!(self, p => p.seq_len())
    }
    fn params(&self) -> &[f64] {
        delegate!(self, p => p.params())
    }
    fn params_mut(&mut self) -> &mut [f64] {
        delegate!(self, p => p.params_mut())
    }
    fn architecture(&self) -> Architecture {
        delegate!(self, p => p.architecture())
    }
    fn forward(&self, xt: &TokenSequence, t: f64) -> Result<Record> {
        delegate!(self, p => p.forward(xt, t))
    }
    fn backward(&self, record: &Record, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        delegate!(self, p => p.backward(record, upstream, grad))
    }
}

/// Shared input validation for `forward`.
pub(crate) fn check_input(p: &dyn Predictor, xt: &TokenSequence, t: f64) -> Result<()> {
    if xt.vocab() != p.vocab() {
        return Err(Error::InvalidArgument(format!(
            "sequence vocabulary m = {} does not match predictor m = {}",
            xt.vocab().m(),
            p.vocab().m()
        )));
    }
    if let Some(n) = p.seq_len() {
        if xt.len() != n {
            return Err(Error::InvalidArgument(format!(
                "predictor expects length {n}, got {}",
                xt.len()
            )));
        }
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    if p.params().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("predictor parameters are not finite".into()));
    }
    Ok(())
}

/// Shared validation for `backward`.
pub(crate) fn check_record(
    fingerprint: u64,
    record: &Record,
    upstream: &[f64],
    grad: &[f64],
    num_params: usize,
) -> Result<()> {
    if record.fingerprint != fingerprint {
        return Err(Error::Usage("record was produced by a different predictor".into()));
    }
    if upstream.len() != record.log_probs.len() {
        return Err(Error::Usage(format!(
            "upstream gradient has {} entries, record has {}",
            upstream.len(),
            record.log_probs.len()
        )));
    }
    if grad.len() != num_params {
        return Err(Error::Usage(format!(
            "gradient buffer has {} entries, predictor has {num_params} parameters",
            grad.len()
        )));
    }
    Ok(())
}

/// FNV-1a over a few shape descriptors; identifies which predictor produced a record.
pub(crate) fn fingerprint(parts: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for b in p.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

/// `∂L/∂z` from `∂L/∂ log softmax(z)`: `g_k − p_k Σ_j g_j`.
pub(crate) fn log_softmax_backward(log_probs: &[f64], upstream: &[f64], out: &mut [f64]) {
    let total: f64 = upstream.iter().sum();
    for ((o, &l), &g) in out.iter_mut().zip(log_probs).zip(upstream) {
        *o = g - l.exp() * total;
    }
}
