//! Ancestral sampling by iterative unmasking.
//!
//! The chain starts fully masked at `t = 1` and walks the uniform grid
//! `t(i) = i/T` down to 0. A masked position is revealed between `t` and `s`
//! with probability `ξ_{s,t}` (scalar schedule) or `(1 − (s/t)^{w_i}) μ_i`
//! for each value `i` (vector schedule). Revealed tokens never change again.
//! Positions still masked at the end (possible under an endpoint shift) are
//! filled by one forced draw from `μ_θ(·, t_min)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::forward::{ForwardKernel, Masking, TokenSequence};
use crate::predictor::Predictor;
use crate::schedule::T_MIN;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Divides the predictor's logits; never touches the unmasking times.
    pub temperature: f64,
    pub t_min: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            temperature: 1.0,
            t_min: T_MIN,
        }
    }
}

impl SamplerConfig {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("sampler needs at least one step".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Index drawn from unnormalized weights `p`.
pub fn categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let total: f64 = p.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in p.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(p.len() - 1)
}

/// One reverse step `x_t → x_s`, updating `x` in place. Returns the number of
/// positions unmasked.
pub fn reverse_step<P, R>(
    predictor: &P,
    kernel: &ForwardKernel,
    x: &mut TokenSequence,
    s: f64,
    t: f64,
    temperature: f64,
    rng: &mut R,
) -> Result<usize>
where
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    let masked: Vec<usize> = (0..x.len()).filter(|&n| x.is_masked(n)).collect();
    if masked.is_empty() {
        return Ok(0);
    }
    let mut revealed = 0;
    match kernel.masking() {
        Masking::Scalar(_) => {
            let xi = kernel.unmask_prob(0, s, t)?;
            let chosen: Vec<usize> = masked.into_iter().filter(|_| rng.random::<f64>() < xi).collect();
            if chosen.is_empty() {
                return Ok(0);
            }
            let record = predictor.forward(x, t)?;
            for n in chosen {
                let mu = record.probs_tempered(n, temperature);
                x.set(n, categorical(&mu, rng));
                revealed += 1;
            }
        }
        Masking::Vector(_) => {
            let m = kernel.vocab().m();
            let xi: Vec<f64> = (0..m).map(|i| kernel.unmask_prob(i, s, t)).collect::<Result<_>>()?;
            let record = predictor.forward(x, t)?;
            for n in masked {
                let mu = record.probs_tempered(n, temperature);
                // weights over (value 0..m, stay masked)
                let mut w: Vec<f64> = mu.iter().zip(&xi).map(|(p, x)| p * x).collect();
                w.push(mu.iter().zip(&xi).map(|(p, x)| p * (1.0 - x)).sum());
                let k = categorical(&w, rng);
                if k < m {
                    x.set(n, k);
                    revealed += 1;
                }
            }
        }
    }
    Ok(revealed)
}

fn resolve_residual<P, R>(predictor: &P, x: &mut TokenSequence, cfg: &SamplerConfig, rng: &mut R) -> Result<()>
where
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    if x.mask_count() == 0 {
        return Ok(());
    }
    let record = predictor.forward(x, cfg.t_min)?;
    for n in 0..x.len() {
        if x.is_masked(n) {
            let mu = record.probs_tempered(n, cfg.temperature);
            x.set(n, categorical(&mu, rng));
        }
    }
    Ok(())
}

/// Draws one clean sequence of length `len`.
pub fn sample<P, R>(
    predictor: &P,
    kernel: &ForwardKernel,
    len: usize,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<TokenSequence>
where
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    Ok(trajectory(predictor, kernel, len, cfg, cfg.steps, rng)?
        .pop()
        .expect("trajectory has at least two snapshots"))
}

/// Snapshots of the reverse chain every `stride` steps: `steps/stride + 1`
/// sequences, the first fully masked and the last clean.
pub fn trajectory<P, R>(
    predictor: &P,
    kernel: &ForwardKernel,
    len: usize,
    cfg: &SamplerConfig,
    stride: usize,
    rng: &mut R,
) -> Result<Vec<TokenSequence>>
where
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if stride == 0 || !cfg.steps.is_multiple_of(stride) {
        return Err(Error::InvalidArgument(format!(
            "snapshot stride {stride} must divide the step count {}",
            cfg.steps
        )));
    }
    if predictor.vocab() != kernel.vocab() {
        return Err(Error::InvalidArgument("predictor and kernel vocabularies differ".into()));
    }
    let mut x = TokenSequence::all_masked(kernel.vocab(), len);
    let mut snaps = vec![x.clone()];
    let tf = cfg.steps as f64;
    for i in (1..=cfg.steps).rev() {
        let (s, t) = ((i - 1) as f64 / tf, i as f64 / tf);
        reverse_step(predictor, kernel, &mut x, s, t, cfg.temperature, rng)?;
        if i == 1 {
            resolve_residual(predictor, &mut x, cfg, rng)?;
        }
        if (cfg.steps - i + 1).is_multiple_of(stride) {
            snaps.push(x.clone());
        }
    }
    Ok(snaps)
}
