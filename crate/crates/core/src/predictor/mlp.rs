//! Small multilayer perceptron over the flattened sequence.
//!
//! Input: one embedding per position (the table has `m + 1` rows so the mask has
//! its own embedding) concatenated with two time features, `t` and the clipped,
//! rescaled log-SNR of a reference schedule. Hidden layers use the tanh
//! approximation of GELU. The output layer produces `N × m` logits.
//!
//! Parameter layout in the flat vector: embedding table, then `(W, b)` for each
//! layer in order, `W` row-major `out × in`.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_input, check_record, fingerprint, log_softmax, log_softmax_backward, Cache};
use super::{Architecture, Predictor, Record};
use crate::error::{Error, Result};
use crate::forward::{TokenSequence, Vocabulary};
use crate::rng;
use crate::schedule::Schedule;

/// Log-SNR feature is clipped to `±LAMBDA_CLIP` and divided by it.
const LAMBDA_CLIP: f64 = 10.0;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub m: usize,
    pub len: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    /// Schedule whose log-SNR feeds the time features.
    pub time_schedule: String,
}

impl MlpConfig {
    /// Two hidden layers of width 128, embedding width 16, linear time schedule.
    pub fn new(m: usize, len: usize) -> Self {
        Self {
            m,
            len,
            embed_dim: 16,
            hidden: vec![128, 128],
            time_schedule: Schedule::linear().to_string(),
        }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.len * self.embed_dim + 2;
        for &h in &self.hidden {
            dims.push((h, fan_in));
            fan_in = h;
        }
        dims.push((self.len * self.m, fan_in));
        dims
    }
}

#[derive(Debug, Clone)]
pub struct MlpPredictor {
    cfg: MlpConfig,
    vocab: Vocabulary,
    time_schedule: Schedule,
    /// `(out, in, weight offset, bias offset)` per layer.
    layers: Vec<(usize, usize, usize, usize)>,
    params: Vec<f64>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl MlpPredictor {
    /// Weights drawn from `N(0, 1/fan_in)`, embeddings from `N(0, 1)`, biases zero.
    pub fn new(cfg: MlpConfig, seed: u64) -> Result<Self> {
        let vocab = Vocabulary::new(cfg.m)?;
        if cfg.len == 0 || cfg.embed_dim == 0 || cfg.hidden.contains(&0) {
            return Err(Error::InvalidArgument("MLP dimensions must be positive".into()));
        }
        let time_schedule: Schedule = cfg.time_schedule.parse()?;
        let mut offset = (cfg.m + 1) * cfg.embed_dim;
        let mut layers = Vec::new();
        for (out, inp) in cfg.layer_dims() {
            layers.push((out, inp, offset, offset + out * inp));
            offset += out * inp + out;
        }
        let mut params = vec![0.0; offset];
        let mut r = rng::stream(seed, "mlp-init", 0);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        for p in &mut params[..(cfg.m + 1) * cfg.embed_dim] {
            *p = unit.sample(&mut r);
        }
        for &(out, inp, w, _) in &layers {
            let scale = 1.0 / (inp as f64).sqrt();
            for p in &mut params[w..w + out * inp] {
                *p = scale * unit.sample(&mut r);
            }
        }
        Ok(Self {
            cfg,
            vocab,
            time_schedule,
            layers,
            params,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    fn time_features(&self, t: f64) -> [f64; 2] {
        let lambda = if t <= 0.0 {
            LAMBDA_CLIP
        } else if t >= 1.0 {
            -LAMBDA_CLIP
        } else {
            self.time_schedule.log_snr(t).unwrap_or(if t < 0.5 { LAMBDA_CLIP } else { -LAMBDA_CLIP })
        };
        [t, lambda.clamp(-LAMBDA_CLIP, LAMBDA_CLIP) / LAMBDA_CLIP]
    }

    fn fingerprint(&self) -> u64 {
        let mut parts = vec![2, self.cfg.m as u64, self.cfg.len as u64, self.cfg.embed_dim as u64];
        parts.extend(self.cfg.hidden.iter().map(|&h| h as u64));
        fingerprint(&parts)
    }
}

impl Predictor for MlpPredictor {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn seq_len(&self) -> Option<usize> {
        Some(self.cfg.len)
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn architecture(&self) -> Architecture {
        Architecture::Mlp(self.cfg.clone())
    }

    fn forward(&self, xt: &TokenSequence, t: f64) -> Result<Record> {
        check_input(self, xt, t)?;
        let e = self.cfg.embed_dim;
        let mut h = Vec::with_capacity(self.cfg.len * e + 2);
        for &id in xt.ids() {
            h.extend_from_slice(&self.params[id * e..(id + 1) * e]);
        }
        h.extend(self.time_features(t));

        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        for (l, &(out, inp, w, b)) in self.layers.iter().enumerate() {
            let weights = &self.params[w..w + out * inp];
            let z: Vec<f64> = (0..out)
                .map(|o| {
                    let row = &weights[o * inp..(o + 1) * inp];
                    self.params[b + o] + row.iter().zip(&h).map(|(a, x)| a * x).sum::<f64>()
                })
                .collect();
            let next = if l == last { z.clone() } else { z.iter().map(|&v| gelu(v)).collect() };
            inputs.push(std::mem::replace(&mut h, next));
            if l != last {
                pre.push(z);
            }
        }

        let m = self.cfg.m;
        let mut log_probs = Vec::with_capacity(h.len());
        for chunk in h.chunks(m) {
            log_probs.extend(log_softmax(chunk));
        }
        if log_probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("MLP produced non-finite log-probabilities".into()));
        }
        Ok(Record {
            fingerprint: self.fingerprint(),
            xt: xt.ids().to_vec(),
            t,
            m,
            log_probs,
            cache: Cache::Layers { inputs, pre },
        })
    }

    fn backward(&self, record: &Record, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        check_record(self.fingerprint(), record, upstream, grad, self.params.len())?;
        let Cache::Layers { inputs, pre } = &record.cache else {
            return Err(Error::Usage("record does not come from an MLP predictor".into()));
        };
        let m = self.cfg.m;
        let mut delta = vec![0.0; upstream.len()];
        for ((d, lp), up) in delta
            .chunks_mut(m)
            .zip(record.log_probs.chunks(m))
            .zip(upstream.chunks(m))
        {
            if up.iter().any(|&g| g != 0.0) {
                log_softmax_backward(lp, up, d);
            }
        }

        for (l, &(out, inp, w, b)) in self.layers.iter().enumerate().rev() {
            let x = &inputs[l];
            let mut dx = vec![0.0; inp];
            for o in 0..out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grad[b + o] += d;
                let gw = &mut grad[w + o * inp..w + (o + 1) * inp];
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += d * xi;
                }
                let row = &self.params[w + o * inp..w + (o + 1) * inp];
                for (dxi, wi) in dx.iter_mut().zip(row) {
                    *dxi += d * wi;
                }
            }
            delta = if l > 0 {
                dx.iter().zip(&pre[l - 1]).map(|(g, &z)| g * gelu_prime(z)).collect()
            } else {
                dx
            };
        }

        let e = self.cfg.embed_dim;
        for (n, &id) in record.xt.iter().enumerate() {
            for (g, d) in grad[id * e..(id + 1) * e].iter_mut().zip(&delta[n * e..(n + 1) * e]) {
                *g += d;
            }
        }
        Ok(())
    }
}
