//! Likelihood evaluation in bits per token.
//!
//! BPC of a chunk is its negative ELBO, the continuous-time loss on
//! `[t_min, 1]` plus both boundary terms, divided by `N ln 2`. The report
//! averages over chunks, and the standard error is taken across chunks, so it
//! covers both data and Monte Carlo variability.

use serde::Serialize;

use super::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::forward::{ForwardKernel, Masking, TokenSequence};
use crate::losses::exact::exact_continuous;
use crate::losses::{boundary_terms, loss_continuous_ce, loss_genmd4, Form, McConfig};
use crate::predictor::Predictor;
use crate::quadrature::GaussLegendre;
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BpcReport {
    pub bpc: f64,
    pub std_error: f64,
    pub chunks: usize,
    pub draws_per_chunk: usize,
    /// Per-chunk values in bits per token.
    pub per_chunk: Vec<f64>,
}

impl BpcReport {
    fn from_chunks(per_chunk: Vec<f64>, draws_per_chunk: usize) -> Self {
        let n = per_chunk.len() as f64;
        let bpc = per_chunk.iter().sum::<f64>() / n;
        let var = if per_chunk.len() > 1 {
            per_chunk.iter().map(|v| (v - bpc).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            bpc,
            std_error: (var / n).sqrt(),
            chunks: per_chunk.len(),
            draws_per_chunk,
            per_chunk,
        }
    }
}

fn check_chunks(kernel: &ForwardKernel, chunks: &[TokenSequence]) -> Result<()> {
    if chunks.is_empty() {
        return Err(Error::InvalidArgument("no evaluation chunks".into()));
    }
    if let Some(c) = chunks.iter().find(|c| c.vocab() != kernel.vocab() || !c.is_clean()) {
        return Err(Error::InvalidArgument(format!(
            "evaluation chunk over m = {} does not match the model's m = {} or is not clean",
            c.vocab().m(),
            kernel.vocab().m()
        )));
    }
    Ok(())
}

/// Monte Carlo BPC of `predictor` under `kernel`, with antithetic time pairs.
pub fn evaluate_bpc_with<P: Predictor + ?Sized>(
    predictor: &P,
    kernel: &ForwardKernel,
    chunks: &[TokenSequence],
    draws_per_chunk: usize,
    t_min: f64,
    seed: u64,
) -> Result<BpcReport> {
    check_chunks(kernel, chunks)?;
    let mc = McConfig::new(draws_per_chunk).antithetic(true).t_min(t_min);
    let mut per_chunk = Vec::with_capacity(chunks.len());
    for (i, x0) in chunks.iter().enumerate() {
        let mut rng = stream(seed, "eval", i as u64);
        let est = match kernel.masking() {
            Masking::Scalar(_) => loss_continuous_ce(x0, predictor, kernel, &mut rng, &mc)?,
            Masking::Vector(_) => loss_genmd4(x0, predictor, kernel, &mut rng, &mc)?,
        };
        let b = boundary_terms(x0, kernel, t_min)?;
        let nelbo = est.value + b.reconstruction + b.prior_kl;
        per_chunk.push(nelbo / (x0.len() as f64 * std::f64::consts::LN_2));
    }
    Ok(BpcReport::from_chunks(per_chunk, draws_per_chunk))
}

/// BPC of a checkpoint's EMA parameters.
pub fn evaluate_bpc(ckpt: &Checkpoint, chunks: &[TokenSequence], draws_per_chunk: usize, seed: u64) -> Result<BpcReport> {
    let predictor = ckpt.predictor(true)?;
    evaluate_bpc_with(&predictor, &ckpt.kernel()?, chunks, draws_per_chunk, ckpt.meta.t_min, seed)
}

/// Exact BPC by mask-pattern enumeration and Gauss–Legendre quadrature on
/// `[t_min, 1]`; chunks must have at most 20 tokens.
pub fn exact_bpc_with<P: Predictor + ?Sized>(
    predictor: &P,
    kernel: &ForwardKernel,
    chunks: &[TokenSequence],
    t_min: f64,
    quad_order: usize,
) -> Result<BpcReport> {
    check_chunks(kernel, chunks)?;
    let quad = GaussLegendre::new(quad_order);
    let form = match kernel.masking() {
        Masking::Scalar(_) => Form::CrossEntropy,
        Masking::Vector(_) => Form::GenMd4,
    };
    let mut per_chunk = Vec::with_capacity(chunks.len());
    for x0 in chunks {
        let b = boundary_terms(x0, kernel, t_min)?;
        let nelbo = exact_continuous(form, predictor, kernel, x0, t_min, &quad, None)? + b.reconstruction + b.prior_kl;
        per_chunk.push(nelbo / (x0.len() as f64 * std::f64::consts::LN_2));
    }
    Ok(BpcReport::from_chunks(per_chunk, 0))
}
