//! Flat `key = value` training configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys, duplicates and
//! malformed values are errors carrying the 1-based line number.
//! [`TrainConfig::to_text`] writes the fully resolved configuration in the same
//! format, so a run can be reproduced from its manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::predictor::{Architecture, Context, MlpConfig};
use crate::schedule::{Schedule, T_MIN};

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Ctmc,
    ScoreEntropy,
    MaskGit,
    GenMd4,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::Ctmc => "ctmc",
            LossKind::ScoreEntropy => "score",
            LossKind::MaskGit => "maskgit",
            LossKind::GenMd4 => "genmd4",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ce" | "cross_entropy" => LossKind::CrossEntropy,
            "ctmc" => LossKind::Ctmc,
            "score" | "score_entropy" => LossKind::ScoreEntropy,
            "maskgit" => LossKind::MaskGit,
            "genmd4" => LossKind::GenMd4,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown loss {s:?} (expected ce, ctmc, score, maskgit or genmd4)"
                )))
            }
        })
    }
}

/// Where training chunks come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    /// UTF-8 text file, split into fixed-length chunks.
    Text { path: PathBuf, vocab_cap: usize },
    /// Synthetic source, e.g. `uniform:27`, `two_state:0.1` or `iid:0.1,0.3,0.6`.
    Synthetic { source: String, train_chunks: usize, valid_chunks: usize },
}

/// Predictor family; the sequence length and vocabulary come from the data.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictorSpec {
    Tabular(TabularMode),
    Mlp { embed_dim: usize, hidden: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TabularMode {
    Shared,
    PerPosition,
    Exhaustive,
    Neighbors(usize),
}

impl PredictorSpec {
    pub fn architecture(&self, m: usize, len: usize) -> Architecture {
        match self {
            PredictorSpec::Tabular(mode) => Architecture::Tabular {
                m,
                context: match *mode {
                    TabularMode::Shared => Context::Shared,
                    TabularMode::PerPosition => Context::PerPosition { len },
                    TabularMode::Exhaustive => Context::Exhaustive { len },
                    TabularMode::Neighbors(d) => Context::Neighbors { max_distance: d },
                },
            },
            PredictorSpec::Mlp { embed_dim, hidden } => Architecture::Mlp(MlpConfig {
                embed_dim: *embed_dim,
                hidden: hidden.clone(),
                ..MlpConfig::new(m, len)
            }),
        }
    }

    fn to_text(&self) -> String {
        match self {
            PredictorSpec::Tabular(TabularMode::Shared) => "tabular:shared".into(),
            PredictorSpec::Tabular(TabularMode::PerPosition) => "tabular:position".into(),
            PredictorSpec::Tabular(TabularMode::Exhaustive) => "tabular:exhaustive".into(),
            PredictorSpec::Tabular(TabularMode::Neighbors(d)) => format!("tabular:neighbors:{d}"),
            PredictorSpec::Mlp { .. } => "mlp".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Masking schedule for every objective except GenMD4.
    pub schedule: Schedule,
    pub predictor: PredictorSpec,
    pub data: DataSpec,
    pub chunk_len: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub cosine_decay: bool,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub antithetic: bool,
    pub t_min: f64,
    /// Initial exponent for every value under GenMD4.
    pub w_init: f64,
    /// Step size for `log w`; defaults to `lr / 10`.
    pub w_lr: f64,
    /// Global-norm clip on the `log w` gradient; 0 disables it.
    pub w_grad_clip: f64,
    /// L2 penalty on `log w`.
    pub w_l2: f64,
    pub seed: u64,
    /// Seed for synthetic data, kept apart from `seed` so that runs with
    /// different training seeds see the same data.
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::CrossEntropy,
            schedule: Schedule::linear(),
            predictor: PredictorSpec::Mlp {
                embed_dim: 16,
                hidden: vec![128, 128],
            },
            data: DataSpec::Synthetic {
                source: "two_state:0.1".into(),
                train_chunks: 1024,
                valid_chunks: 64,
            },
            chunk_len: 64,
            batch_size: 32,
            steps: 1000,
            lr: 3e-3,
            warmup_steps: 0,
            cosine_decay: false,
            weight_decay: 0.03,
            ema_decay: 0.9999,
            antithetic: true,
            t_min: T_MIN,
            w_init: 1.0,
            w_lr: 3e-4,
            w_grad_clip: 1.0,
            w_l2: 0.0,
            seed: 0,
            data_seed: 0,
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::Config {
        line,
        reason: format!("{key}: cannot parse {v:?}: {e}"),
    })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config {
            line,
            reason: format!("{key}: expected a boolean, got {v:?}"),
        }),
    }
}

fn parse_predictor(line: usize, v: &str) -> Result<PredictorSpec> {
    let bad = || Error::Config {
        line,
        reason: format!("predictor: unknown kind {v:?}"),
    };
    let parts: Vec<&str> = v.split(':').collect();
    Ok(match parts.as_slice() {
        ["mlp"] => PredictorSpec::Mlp {
            embed_dim: 16,
            hidden: vec![128, 128],
        },
        ["tabular"] | ["tabular", "shared"] => PredictorSpec::Tabular(TabularMode::Shared),
        ["tabular", "position"] => PredictorSpec::Tabular(TabularMode::PerPosition),
        ["tabular", "exhaustive"] => PredictorSpec::Tabular(TabularMode::Exhaustive),
        ["tabular", "neighbors", d] => PredictorSpec::Tabular(TabularMode::Neighbors(parse(line, "predictor", d)?)),
        _ => return Err(bad()),
    })
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen: Vec<String> = Vec::new();
        let mut w_lr_set = false;
        // data keys are collected first because they combine into one DataSpec
        let mut corpus: Option<PathBuf> = None;
        let mut source: Option<String> = None;
        let mut vocab_cap = 27usize;
        let mut train_chunks = 1024usize;
        let mut valid_chunks = 64usize;
        // MLP shape keys may precede or follow `predictor`
        let mut embed_dim: Option<usize> = None;
        let mut hidden: Option<Vec<usize>> = None;

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                reason: format!("expected `key = value`, got {content:?}"),
            })?;
            let (key, v) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config {
                    line,
                    reason: format!("duplicate key {key:?}"),
                });
            }
            seen.push(key.to_string());
            match key {
                "loss" => cfg.loss = v.parse().map_err(|e: Error| Error::Config { line, reason: e.to_string() })?,
                "schedule" => {
                    cfg.schedule = v.parse().map_err(|e: Error| Error::Config { line, reason: e.to_string() })?
                }
                "predictor" => cfg.predictor = parse_predictor(line, v)?,
                "embed_dim" => embed_dim = Some(parse(line, key, v)?),
                "hidden" => {
                    hidden = Some(
                        v.split(',')
                            .map(|h| parse(line, key, h.trim()))
                            .collect::<Result<Vec<usize>>>()?,
                    )
                }
                "corpus" => corpus = Some(PathBuf::from(v)),
                "source" => source = Some(v.to_string()),
                "vocab_cap" => vocab_cap = parse(line, key, v)?,
                "train_chunks" => train_chunks = parse(line, key, v)?,
                "valid_chunks" => valid_chunks = parse(line, key, v)?,
                "chunk_len" => cfg.chunk_len = parse(line, key, v)?,
                "batch_size" => cfg.batch_size = parse(line, key, v)?,
                "steps" => cfg.steps = parse(line, key, v)?,
                "lr" => cfg.lr = parse(line, key, v)?,
                "warmup_steps" => cfg.warmup_steps = parse(line, key, v)?,
                "cosine_decay" => cfg.cosine_decay = parse_bool(line, key, v)?,
                "weight_decay" => cfg.weight_decay = parse(line, key, v)?,
                "ema_decay" => cfg.ema_decay = parse(line, key, v)?,
                "antithetic" => cfg.antithetic = parse_bool(line, key, v)?,
                "t_min" => cfg.t_min = parse(line, key, v)?,
                "w_init" => cfg.w_init = parse(line, key, v)?,
                "w_lr" => {
                    cfg.w_lr = parse(line, key, v)?;
                    w_lr_set = true;
                }
                "w_grad_clip" => cfg.w_grad_clip = parse(line, key, v)?,
                "w_l2" => cfg.w_l2 = parse(line, key, v)?,
                "seed" => cfg.seed = parse(line, key, v)?,
                "data_seed" => cfg.data_seed = parse(line, key, v)?,
                _ => {
                    return Err(Error::Config {
                        line,
                        reason: format!("unknown key {key:?}"),
                    })
                }
            }
        }
        if !w_lr_set {
            cfg.w_lr = cfg.lr / 10.0;
        }
        if let PredictorSpec::Mlp { embed_dim: e, hidden: h } = &mut cfg.predictor {
            if let Some(d) = embed_dim {
                *e = d;
            }
            if let Some(hs) = hidden {
                *h = hs;
            }
        } else if embed_dim.is_some() || hidden.is_some() {
            return Err(Error::Config {
                line: 0,
                reason: "embed_dim and hidden only apply to predictor = mlp".into(),
            });
        }
        cfg.data = match (corpus, source) {
            (Some(_), Some(_)) => {
                return Err(Error::Config {
                    line: 0,
                    reason: "set either corpus or source, not both".into(),
                })
            }
            (Some(path), None) => DataSpec::Text { path, vocab_cap },
            (None, source) => DataSpec::Synthetic {
                source: source.unwrap_or_else(|| "two_state:0.1".into()),
                train_chunks,
                valid_chunks,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::Config { line: 0, reason });
        if self.batch_size == 0 || self.chunk_len == 0 {
            return bad("batch_size and chunk_len must be positive".into());
        }
        for (name, v) in [("lr", self.lr), ("w_lr", self.w_lr), ("w_init", self.w_init)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must be in [0, 1], got {}", self.ema_decay));
        }
        if !(self.weight_decay >= 0.0 && self.w_l2 >= 0.0 && self.w_grad_clip >= 0.0) {
            return bad("weight_decay, w_l2 and w_grad_clip must be non-negative".into());
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return bad(format!("t_min must be in (0, 1), got {}", self.t_min));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a String");
        kv("loss", self.loss.name().into());
        kv("schedule", self.schedule.to_string());
        kv("predictor", self.predictor.to_text());
        if let PredictorSpec::Mlp { embed_dim, hidden } = &self.predictor {
            kv("embed_dim", embed_dim.to_string());
            kv("hidden", hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","));
        }
        match &self.data {
            DataSpec::Text { path, vocab_cap } => {
                kv("corpus", path.display().to_string());
                kv("vocab_cap", vocab_cap.to_string());
            }
            DataSpec::Synthetic {
                source,
                train_chunks,
                valid_chunks,
            } => {
                kv("source", source.clone());
                kv("train_chunks", train_chunks.to_string());
                kv("valid_chunks", valid_chunks.to_string());
            }
        }
        kv("chunk_len", self.chunk_len.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("steps", self.steps.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("cosine_decay", self.cosine_decay.to_string());
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("ema_decay", format!("{:?}", self.ema_decay));
        kv("antithetic", self.antithetic.to_string());
        kv("t_min", format!("{:?}", self.t_min));
        kv("w_init", format!("{:?}", self.w_init));
        kv("w_lr", format!("{:?}", self.w_lr));
        kv("w_grad_clip", format!("{:?}", self.w_grad_clip));
        kv("w_l2", format!("{:?}", self.w_l2));
        kv("seed", self.seed.to_string());
        kv("data_seed", self.data_seed.to_string());
        s
    }

    /// Learning rate at 0-based `step`: linear warmup, then constant or cosine decay to 0.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine_decay {
            return self.lr;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
