//! Single-writer training loop.
//!
//! One step: draw a batch of chunks, draw one time per item (antithetic pairs
//! `u, 1 − u` shuffled across the batch when enabled), mask, evaluate the
//! objective's integrand with its gradient, take an AdamW step and update the
//! EMA. Under GenMD4 the exponents are then updated from the two-sample
//! leave-one-out gradient, computed with the pre-update parameters.
//!
//! Every random draw comes from a stream keyed by `(seed, purpose, step)`, so a
//! run is reproducible from its configuration and resumable from a checkpoint.

use rand::seq::SliceRandom;
use rand::Rng;

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::config::{LossKind, TrainConfig};
use super::data::Dataset;
use crate::corpus::CorpusVocab;
use crate::error::{Error, Result};
use crate::forward::{ForwardKernel, Masking, TokenSequence, Vocabulary};
use crate::genmd4_grad::rloo_w_gradient_at;
use crate::losses::{integrand, Form, ScoreView};
use crate::predictor::{ema_update, AdamState, AdamW, AnyPredictor, Predictor};
use crate::rng::{stream, stream2};
use crate::schedule::VectorSchedule;

/// Per-step metrics; `loss` is the batch estimate in nats per token.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub w: Option<Vec<f64>>,
}

impl StepMetrics {
    /// CSV header; `w_*` columns appear only for GenMD4 runs over `m` values.
    pub fn csv_header(w_columns: Option<usize>) -> String {
        let mut h = String::from("step,loss_nats_per_token,grad_norm");
        for i in 0..w_columns.unwrap_or(0) {
            h.push_str(&format!(",w_{i}"));
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{:?},{:?}", self.step, self.loss, self.grad_norm);
        for w in self.w.iter().flatten() {
            r.push_str(&format!(",{w:?}"));
        }
        r
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    vocab: Vocabulary,
    symbols: Option<CorpusVocab>,
    predictor: AnyPredictor,
    ema: Vec<f64>,
    adam: AdamState,
    opt: AdamW,
    /// GenMD4 exponents in log space.
    log_w: Option<Vec<f64>>,
    step: u64,
}

impl Trainer {
    /// Fresh state for chunks of `len` tokens.
    pub fn new(cfg: TrainConfig, vocab: Vocabulary, len: usize, symbols: Option<CorpusVocab>) -> Result<Self> {
        cfg.validate()?;
        let arch = cfg.predictor.architecture(vocab.m(), len);
        let predictor = arch.build(None, cfg.seed)?;
        let n = predictor.num_params();
        let log_w = (cfg.loss == LossKind::GenMd4).then(|| vec![cfg.w_init.ln(); vocab.m()]);
        Ok(Self {
            opt: AdamW {
                weight_decay: cfg.weight_decay,
                ..AdamW::default()
            },
            ema: predictor.params().to_vec(),
            adam: AdamState::zeros(n),
            predictor,
            log_w,
            step: 0,
            vocab,
            symbols,
            cfg,
        })
    }

    pub fn for_dataset(cfg: TrainConfig, data: &Dataset) -> Result<Self> {
        Self::new(cfg, data.vocab, data.chunk_len(), data.symbols.clone())
    }

    /// Resumes from a checkpoint; `cfg` may extend `steps`.
    pub fn from_checkpoint(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let vocab = ckpt.vocabulary()?;
        let predictor = ckpt.predictor(false)?;
        let log_w = if ckpt.w.is_empty() {
            None
        } else {
            Some(ckpt.w.iter().map(|w| w.ln()).collect())
        };
        if log_w.is_some() != (cfg.loss == LossKind::GenMd4) {
            return Err(Error::InvalidArgument("checkpoint and config disagree on GenMD4".into()));
        }
        Ok(Self {
            opt: AdamW {
                weight_decay: cfg.weight_decay,
                ..AdamW::default()
            },
            ema: ckpt.ema.clone(),
            adam: AdamState {
                m: ckpt.adam_m.clone(),
                v: ckpt.adam_v.clone(),
                step: ckpt.meta.adam_step,
            },
            predictor,
            log_w,
            step: ckpt.meta.step,
            symbols: ckpt.corpus_vocab()?,
            vocab,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn predictor(&self) -> &AnyPredictor {
        &self.predictor
    }

    pub fn ema_params(&self) -> &[f64] {
        &self.ema
    }

    pub fn w(&self) -> Option<Vec<f64>> {
        self.log_w.as_ref().map(|l| l.iter().map(|x| x.exp()).collect())
    }

    pub fn kernel(&self) -> Result<ForwardKernel> {
        match self.w() {
            Some(w) => ForwardKernel::new(Masking::Vector(VectorSchedule::new(w)?), self.vocab),
            None => Ok(ForwardKernel::scalar(self.cfg.schedule, self.vocab)),
        }
    }

    fn form(&self) -> Form {
        match self.cfg.loss {
            LossKind::CrossEntropy => Form::CrossEntropy,
            LossKind::Ctmc => Form::Ctmc,
            LossKind::ScoreEntropy => Form::ScoreEntropy(ScoreView::default()),
            LossKind::MaskGit => Form::MaskGit,
            LossKind::GenMd4 => Form::GenMd4,
        }
    }

    /// Batch times in `[t_min, 1)` for `step`.
    pub fn batch_times(&self, step: u64) -> Vec<f64> {
        let mut rng = stream(self.cfg.seed, "train-time", step);
        let b = self.cfg.batch_size;
        let mut u: Vec<f64> = Vec::with_capacity(b);
        if self.cfg.antithetic {
            while u.len() + 2 <= b {
                let x: f64 = rng.random();
                u.push(x);
                u.push(1.0 - x);
            }
        }
        while u.len() < b {
            u.push(rng.random());
        }
        u.shuffle(&mut rng);
        let span = 1.0 - self.cfg.t_min;
        u.into_iter().map(|x| self.cfg.t_min + span * x).collect()
    }

    /// One optimizer step on `data`.
    pub fn step(&mut self, data: &[TokenSequence]) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("no training chunks".into()));
        }
        let step = self.step;
        let b = self.cfg.batch_size;
        let mut pick = stream(self.cfg.seed, "train-batch", step);
        let batch: Vec<&TokenSequence> = (0..b).map(|_| &data[pick.random_range(0..data.len())]).collect();
        let times = self.batch_times(step);
        let kernel = self.kernel()?;
        let form = self.form();
        let span = 1.0 - self.cfg.t_min;

        let mut grad = vec![0.0; self.predictor.num_params()];
        let mut loss = 0.0;
        for (k, (x0, &t)) in batch.iter().zip(&times).enumerate() {
            let mut rng = stream2(self.cfg.seed, "train-mask", step, k as u64);
            let xt = kernel.sample_forward(x0, t, &mut rng)?;
            let scale = span / (b * x0.len()) as f64;
            loss += scale * integrand(form, &self.predictor, &kernel, x0, &xt, t, Some((&mut grad, scale)))?;
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training state at step {step}: loss {loss}, grad norm {grad_norm}, times {times:?}"
            )));
        }

        let w_grad = match &self.log_w {
            Some(log_w) => Some(self.log_w_gradient(&batch, &times, log_w)?),
            None => None,
        };

        self.opt
            .step(self.predictor.params_mut(), &grad, &mut self.adam, self.cfg.lr_at(step))?;
        ema_update(&mut self.ema, self.predictor.params(), self.cfg.ema_decay)?;

        if let (Some(log_w), Some(g)) = (self.log_w.as_mut(), w_grad) {
            for (l, g) in log_w.iter_mut().zip(g) {
                *l -= self.cfg.w_lr * g;
            }
        }
        self.step += 1;
        Ok(StepMetrics {
            step,
            loss,
            grad_norm,
            w: self.w(),
        })
    }

    /// Clipped gradient of the batch loss with respect to `log w`.
    fn log_w_gradient(&self, batch: &[&TokenSequence], times: &[f64], log_w: &[f64]) -> Result<Vec<f64>> {
        let w: Vec<f64> = log_w.iter().map(|l| l.exp()).collect();
        let v = VectorSchedule::new(w.clone())?;
        let span = 1.0 - self.cfg.t_min;
        let mut g = vec![0.0; w.len()];
        for (k, (x0, &t)) in batch.iter().zip(times).enumerate() {
            let mut rng = stream2(self.cfg.seed, "train-rloo", self.step, k as u64);
            let est = rloo_w_gradient_at(x0, &self.predictor, &v, t, &mut rng)?;
            let scale = span / (batch.len() * x0.len()) as f64;
            for (gi, d) in g.iter_mut().zip(est.to_log_space(&w)) {
                *gi += scale * d;
            }
        }
        for (gi, l) in g.iter_mut().zip(log_w) {
            *gi += 2.0 * self.cfg.w_l2 * l;
        }
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite exponent gradient at step {}", self.step)));
        }
        if self.cfg.w_grad_clip > 0.0 && norm > self.cfg.w_grad_clip {
            g.iter_mut().for_each(|x| *x *= self.cfg.w_grad_clip / norm);
        }
        Ok(g)
    }

    /// Runs until `cfg.steps` steps are complete, reporting each one.
    pub fn run<F>(&mut self, data: &[TokenSequence], mut on_step: F) -> Result<()>
    where
        F: FnMut(&StepMetrics) -> Result<()>,
    {
        while self.step < self.cfg.steps {
            let m = self.step(data)?;
            on_step(&m)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                schedule: self.cfg.schedule.to_string(),
                m: self.vocab.m(),
                symbols: self.symbols.as_ref().map(|s| s.symbols().iter().collect()),
                unk: self.symbols.as_ref().is_some_and(|s| s.unk().is_some()),
                architecture: self.predictor.architecture(),
                loss: self.cfg.loss.name().into(),
                step: self.step,
                adam_step: self.adam.step,
                seed: self.cfg.seed,
                t_min: self.cfg.t_min,
                config: self.cfg.to_text(),
            },
            params: self.predictor.params().to_vec(),
            ema: self.ema.clone(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
            w: self.w().unwrap_or_default(),
        }
    }
}

/// Trains on `data.train` and returns the final checkpoint.
pub fn train<F>(cfg: TrainConfig, data: &Dataset, on_step: F) -> Result<Checkpoint>
where
    F: FnMut(&StepMetrics) -> Result<()>,
{
    let mut t = Trainer::for_dataset(cfg, data)?;
    t.run(&data.train, on_step)?;
    Ok(t.checkpoint())
}
