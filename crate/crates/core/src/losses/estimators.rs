//! Monte Carlo estimators of every loss form.
//!
//! A continuous-time draw picks `t ~ U(t_min, 1)`, samples `x_t ~ q(x_t | x_0)`
//! and returns `(1 − t_min)·integrand`, so the draw mean is unbiased for the
//! integral over `[t_min, 1]`. Antithetic mode draws `u` once per pair and uses
//! both `u` and `1 − u`.

use rand::Rng;

use super::{boundary_terms, ctmc_integrand, ctmc_offset_integrand, integrand, per_step_kl};
use super::{Estimator, Form, LossEstimate, ScoreView};
use crate::error::{Error, Result};
use crate::forward::{ForwardKernel, TokenSequence};
use crate::predictor::Predictor;
use crate::schedule::T_MIN;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub draws: usize,
    pub antithetic: bool,
    pub t_min: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            draws: 1,
            antithetic: false,
            t_min: T_MIN,
        }
    }
}

impl McConfig {
    pub fn new(draws: usize) -> Self {
        Self {
            draws,
            ..Self::default()
        }
    }

    pub fn antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub fn t_min(mut self, t_min: f64) -> Self {
        self.t_min = t_min;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(Error::InvalidArgument("at least one draw is required".into()));
        }
        if !(0.0..1.0).contains(&self.t_min) {
            return Err(Error::InvalidArgument(format!("t_min = {} outside [0, 1)", self.t_min)));
        }
        Ok(())
    }

    /// Time draws grouped into independent units.
    pub fn time_groups<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        let span = 1.0 - self.t_min;
        let map = |u: f64| self.t_min + span * u;
        if self.antithetic {
            let mut groups = Vec::with_capacity(self.draws.div_ceil(2));
            let mut left = self.draws;
            while left > 0 {
                let u: f64 = rng.random();
                if left >= 2 {
                    groups.push(vec![map(u), map(1.0 - u)]);
                    left -= 2;
                } else {
                    groups.push(vec![map(u)]);
                    left -= 1;
                }
            }
            groups
        } else {
            (0..self.draws).map(|_| vec![map(rng.random())]).collect()
        }
    }
}

fn run<R, F>(estimator: Estimator, cfg: &McConfig, rng: &mut R, mut draw: F) -> Result<LossEstimate>
where
    R: Rng + ?Sized,
    F: FnMut(f64, &mut R) -> Result<f64>,
{
    cfg.validate()?;
    let span = 1.0 - cfg.t_min;
    let mut samples = Vec::new();
    for group in cfg.time_groups(rng) {
        let mut acc = 0.0;
        for &t in &group {
            acc += span * draw(t, rng)?;
        }
        samples.push(acc / group.len() as f64);
    }
    Ok(LossEstimate::from_samples(estimator, samples, cfg.draws, cfg.t_min))
}

fn continuous<P, R>(
    estimator: Estimator,
    form: Form,
    x0: &TokenSequence,
    predictor: &P,
    kernel: &ForwardKernel,
    rng: &mut R,
    cfg: &McConfig,
) -> Result<LossEstimate>
where
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    run(estimator, cfg, rng, |t, rng| {
        let xt = kernel.sample_forward(x0, t, rng)?;
        integrand(form, predictor, kernel, x0, &xt, t, None)
    })
}

/// Cross-entropy form.
pub fn loss_continuous_ce<P, R>(
    x0: &TokenSequence,
    predictor: &P,
    kernel: &ForwardKernel,
    rng: &mut R,
    cfg: &McConfig,
) -> Result<LossEstimate>
where
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    continuous(Estimator::CrossEntropy, Form::CrossEntropy, x0, predictor, kernel, rng, cfg)
}

/// Unweighted masked cross-entropy; not a likelihood bound.
pub fn loss_maskgit<P, R>(
    x0: &TokenSequence,
    predictor: &P,
    kernel: &ForwardKernel,
    rng: &mut R,
    cfg: &McConfig,
) -> Result<LossEstimate>
where
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    continuous(Estimator::MaskGit, Form::MaskGit, x0, predictor, kernel, rng, cfg)
}

pub fn loss_score_entropy<P, R>(
    x0: &TokenSequence,
    predictor: &P,
    view: ScoreView,
    kernel: &ForwardKernel,
    rng: &mut R,
    cfg: &McConfig,
) -> Result<LossEstimate>
where
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    continuous(Estimator::ScoreEntropy, Form::ScoreEntropy(view), x0, predictor, kernel, rng, cfg)
}

/// State-dependent form; `kernel` should carry a vector schedule.
pub fn loss_genmd4<P, R>(
    x0: &TokenSequence,
    predictor: &P,
    kernel: &ForwardKernel,
    rng: &mut R,
    cfg: &McConfig,
) -> Result<LossEstimate>
where
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    continuous(Estimator::GenMd4, Form::GenMd4, x0, predictor, kernel, rng, cfg)
}

/// CTMC form with the full neighbour sum. `offset_known_constant` holds the
/// estimate of `L_ce − L_ctmc` from the same time draws.
pub fn loss_ctmc<P, R>(
    x0: &TokenSequence,
    predictor: &P,
    kernel: &ForwardKernel,
    rng: &mut R,
    cfg: &McConfig,
) -> Result<LossEstimate>
where
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    let mut offsets = Vec::new();
    let mut est = run(Estimator::Ctmc, cfg, rng, |t, rng| {
        offsets.push((1.0 - cfg.t_min) * ctmc_offset_integrand(kernel, x0.len(), t)?);
        let xt = kernel.sample_forward(x0, t, rng)?;
        ctmc_integrand(predictor, kernel, x0, &xt, t, None, None)
    })?;
    est.offset_known_constant = Some(super::mean(&offsets));
    Ok(est)
}

/// CTMC form with the neighbour sum replaced by one uniformly chosen unmasked
/// neighbour scaled by their count. Variance baseline only.
pub fn loss_ctmc_doubly_stochastic<P, R>(
    x0: &TokenSequence,
    predictor: &P,
    kernel: &ForwardKernel,
    rng: &mut R,
    cfg: &McConfig,
) -> Result<LossEstimate>
where
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    let mut offsets = Vec::new();
    let mut est = run(Estimator::CtmcDoublyStochastic, cfg, rng, |t, rng| {
        offsets.push((1.0 - cfg.t_min) * ctmc_offset_integrand(kernel, x0.len(), t)?);
        let xt = kernel.sample_forward(x0, t, rng)?;
        let unmasked: Vec<usize> = (0..xt.len()).filter(|&n| !xt.is_masked(n)).collect();
        let only = if unmasked.is_empty() {
            None
        } else {
            Some(unmasked[rng.random_range(0..unmasked.len())])
        };
        ctmc_integrand(predictor, kernel, x0, &xt, t, only, None)
    })?;
    est.offset_known_constant = Some(super::mean(&offsets));
    Ok(est)
}

/// Discrete-time `L_T` on the grid `t(i) = i/T`: each draw picks
/// `i ~ U{2, …, T}` and scales the summed per-step KL by `T − 1`.
/// With `full_elbo`, the reconstruction term at `t(1)` and the prior KL are added.
pub fn loss_discrete<P, R>(
    x0: &TokenSequence,
    predictor: &P,
    kernel: &ForwardKernel,
    rng: &mut R,
    steps: usize,
    draws: usize,
    full_elbo: bool,
) -> Result<LossEstimate>
where
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("discrete loss needs T >= 2, got {steps}")));
    }
    if draws == 0 {
        return Err(Error::InvalidArgument("at least one draw is required".into()));
    }
    let tf = steps as f64;
    let mut samples = Vec::with_capacity(draws);
    for _ in 0..draws {
        let i = rng.random_range(2..=steps);
        let (s, t) = ((i - 1) as f64 / tf, i as f64 / tf);
        let xt = kernel.sample_forward(x0, t, rng)?;
        samples.push((tf - 1.0) * discrete_step_sum(predictor, kernel, x0, &xt, s, t)?);
    }
    let est = LossEstimate::from_samples(Estimator::Discrete { steps }, samples, draws, 1.0 / tf);
    if full_elbo {
        Ok(est.with_boundary(boundary_terms(x0, kernel, 1.0 / tf)?))
    } else {
        Ok(est)
    }
}

/// `Σ_n KL(q(x_s⁽ⁿ⁾ | x_t, x_0) ‖ p_θ(x_s⁽ⁿ⁾ | x_t))` for one `x_t`.
pub(crate) fn discrete_step_sum<P: Predictor + ?Sized>(
    predictor: &P,
    kernel: &ForwardKernel,
    x0: &TokenSequence,
    xt: &TokenSequence,
    s: f64,
    t: f64,
) -> Result<f64> {
    xt.check_consistent(x0)?;
    if xt.mask_count() == 0 {
        return Ok(0.0);
    }
    let record = predictor.forward(xt, t)?;
    let mut total = 0.0;
    for n in (0..xt.len()).filter(|&n| xt.is_masked(n)) {
        total += per_step_kl(kernel, x0.ids()[n], xt.ids()[n], s, t, &record.probs(n))?;
    }
    Ok(total)
}
