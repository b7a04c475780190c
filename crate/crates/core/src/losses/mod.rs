//! Negative-ELBO forms for the masked diffusion model.
//!
//! All continuous-time forms are integrals over `t ∈ [t_min, 1]` of an
//! expectation over `x_t ~ q(x_t | x_0)`. This module evaluates the integrand of
//! each form at a fixed `(x_0, x_t, t)`, optionally accumulating the parameter
//! gradient; [`estimators`] turns integrands into Monte Carlo estimates and
//! [`exact`] integrates them by enumeration and quadrature on tiny instances.
//!
//! Values are in nats. With `γ = α′/(1 − α) < 0` and `β = −α′/α`:
//!
//! | form | integrand |
//! |---|---|
//! | cross-entropy | `γ Σ_{masked n} log μ⁽ⁿ⁾_{x0}` |
//! | CTMC | `−γ·#masked − β Σ_{unmasked n} log(−γ μ⁽ⁿ⁾(x_t with n masked)_{x0})` |
//! | score entropy | `β Σ_{masked n} (Σ_j s_j − r log s_{x0} + ψ(r))`, `r = α/(1 − α)` |
//! | MaskGIT | `−Σ_{masked n} log μ⁽ⁿ⁾_{x0}` |
//! | GenMD4 | `Σ_{masked n} γ_{x0}(1 + log μ_{x0}) − Σ_i γ_i μ_i` |
//!
//! The CTMC form differs from the cross-entropy form by a constant that does
//! not depend on the predictor.

pub mod estimators;
pub mod exact;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{ForwardKernel, Masking, TokenSequence};
use crate::predictor::{Predictor, Record};

pub use estimators::{
    loss_continuous_ce, loss_ctmc, loss_ctmc_doubly_stochastic, loss_discrete, loss_genmd4,
    loss_maskgit, loss_score_entropy, McConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Discrete { steps: usize },
    CrossEntropy,
    Ctmc,
    CtmcDoublyStochastic,
    ScoreEntropy,
    MaskGit,
    GenMd4,
}

impl Estimator {
    pub fn name(&self) -> String {
        match self {
            Estimator::Discrete { steps } => format!("discrete_t{steps}"),
            Estimator::CrossEntropy => "cross_entropy".into(),
            Estimator::Ctmc => "ctmc".into(),
            Estimator::CtmcDoublyStochastic => "ctmc_doubly_stochastic".into(),
            Estimator::ScoreEntropy => "score_entropy".into(),
            Estimator::MaskGit => "maskgit".into(),
            Estimator::GenMd4 => "genmd4".into(),
        }
    }
}

/// Monte Carlo loss estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossEstimate {
    pub estimator: Estimator,
    /// Mean over `samples`, including boundary terms when they were requested.
    pub value: f64,
    /// Number of integrand evaluations.
    pub draws: usize,
    /// Independent units: single draws, or pair means under antithetic sampling.
    pub samples: Vec<f64>,
    /// Estimate of the predictor-independent offset to the cross-entropy form
    /// (CTMC forms only): `L_ce = L_ctmc + offset`.
    pub offset_known_constant: Option<f64>,
    pub t_min: f64,
    /// Boundary terms folded into `value`.
    pub boundary: Option<BoundaryTerms>,
}

impl LossEstimate {
    pub(crate) fn from_samples(estimator: Estimator, samples: Vec<f64>, draws: usize, t_min: f64) -> Self {
        let value = mean(&samples);
        Self {
            estimator,
            value,
            draws,
            samples,
            offset_known_constant: None,
            t_min,
            boundary: None,
        }
    }

    pub(crate) fn with_boundary(mut self, b: BoundaryTerms) -> Self {
        self.value += b.reconstruction + b.prior_kl;
        self.boundary = Some(b);
        self
    }

    /// Sample variance of the independent units.
    pub fn sample_variance(&self) -> f64 {
        variance(&self.samples)
    }

    /// Variance per integrand evaluation, comparable across plain and antithetic runs.
    pub fn variance_per_draw(&self) -> f64 {
        if self.samples.is_empty() {
            return f64::NAN;
        }
        self.sample_variance() * self.draws as f64 / self.samples.len() as f64
    }

    pub fn std_error(&self) -> f64 {
        (self.sample_variance() / self.samples.len() as f64).sqrt()
    }
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

pub(crate) fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let mu = mean(x);
    x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (x.len() - 1) as f64
}

/// `ψ(y) = y log y − y`.
pub fn psi(y: f64) -> f64 {
    if y == 0.0 {
        0.0
    } else {
        y * y.ln() - y
    }
}

/// Sequence totals of the two boundary terms of the full negative ELBO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryTerms {
    /// `Σ_n (1 − α_{t_min, x0n}) log m`: masked tokens at `t_min` decoded uniformly.
    pub reconstruction: f64,
    /// `Σ_n α_{1, x0n} log m`: KL to the prior that puts `α_1/m` on each clean value.
    pub prior_kl: f64,
}

/// Per-token boundary terms `((1 − α_{t_min}) log m, α_1 log m)` for a scalar schedule.
pub fn boundary_terms_per_token(kernel: &ForwardKernel, t_min: f64) -> Result<(f64, f64)> {
    let Masking::Scalar(s) = kernel.masking() else {
        return Err(Error::InvalidArgument(
            "per-token boundary terms need a scalar schedule; use boundary_terms".into(),
        ));
    };
    let log_m = (kernel.vocab().m() as f64).ln();
    Ok((s.one_minus_alpha(t_min)? * log_m, s.alpha(1.0)? * log_m))
}

pub fn boundary_terms(x0: &TokenSequence, kernel: &ForwardKernel, t_min: f64) -> Result<BoundaryTerms> {
    let log_m = (kernel.vocab().m() as f64).ln();
    let mut reconstruction = 0.0;
    let mut prior_kl = 0.0;
    for &v in x0.ids() {
        kernel.vocab().check_clean(v)?;
        reconstruction += kernel.masking().one_minus_alpha(v, t_min)? * log_m;
        prior_kl += kernel.masking().alpha(v, 1.0)? * log_m;
    }
    Ok(BoundaryTerms {
        reconstruction,
        prior_kl,
    })
}

/// Score view `s_θ(m, t)_j = α_t/(1 − α_t)·μ_θ(m, t)_j` at masked positions.
///
/// `constrained = false` replaces the score by `μ` itself; it exists as a fault
/// fixture for the sum-rule check and never appears in training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreView {
    pub constrained: bool,
}

impl Default for ScoreView {
    fn default() -> Self {
        Self { constrained: true }
    }
}

impl ScoreView {
    pub fn ratio(kernel: &ForwardKernel, t: f64) -> Result<f64> {
        let Masking::Scalar(s) = kernel.masking() else {
            return Err(Error::InvalidArgument("score view needs a scalar schedule".into()));
        };
        let om = s.one_minus_alpha(t)?;
        if om <= 0.0 {
            return Err(Error::Singular(format!("score ratio diverges at t = {t}")));
        }
        Ok(s.alpha(t)? / om)
    }

    /// Score vector at masked position `n`.
    pub fn score(&self, record: &Record, n: usize, kernel: &ForwardKernel) -> Result<Vec<f64>> {
        if !record.is_masked(n) {
            return Err(Error::InvalidArgument(format!("position {n} is not masked")));
        }
        let scale = if self.constrained { Self::ratio(kernel, record.time())? } else { 1.0 };
        Ok(record.probs(n).into_iter().map(|p| scale * p).collect())
    }

    /// `Σ_j s_j − α/(1 − α)`, zero under the constraint.
    pub fn sum_rule_residual(&self, record: &Record, n: usize, kernel: &ForwardKernel) -> Result<f64> {
        let s: f64 = self.score(record, n, kernel)?.iter().sum();
        Ok(s - Self::ratio(kernel, record.time())?)
    }
}

/// `KL(q(x_s | x_t, x_0) ‖ p_θ(x_s | x_t))` for one token with predicted `mu`.
pub fn per_step_kl(
    kernel: &ForwardKernel,
    x0: usize,
    xt: usize,
    s: f64,
    t: f64,
    mu: &[f64],
) -> Result<f64> {
    let vocab = kernel.vocab();
    vocab.check_clean(x0)?;
    vocab.check(xt)?;
    if xt != x0 && !vocab.is_mask(xt) {
        return Err(Error::Inconsistent { x0, xt });
    }
    if mu.len() != vocab.m() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {} entries for m = {}",
            mu.len(),
            vocab.m()
        )));
    }
    if xt == x0 {
        return Ok(0.0);
    }
    match kernel.masking() {
        Masking::Scalar(_) => {
            let xi = kernel.unmask_prob(x0, s, t)?;
            Ok(kl_term(xi, xi * mu[x0]))
        }
        Masking::Vector(_) => {
            let xi: Vec<f64> = (0..vocab.m())
                .map(|i| kernel.unmask_prob(i, s, t))
                .collect::<Result<_>>()?;
            let stay: f64 = xi.iter().zip(mu).map(|(x, p)| (1.0 - x) * p).sum();
            Ok(kl_term(xi[x0], xi[x0] * mu[x0]) + kl_term(1.0 - xi[x0], stay))
        }
    }
}

/// `p log(p/q)` with `0 log 0 = 0`.
fn kl_term(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / q).ln()
    }
}

/// Continuous-time loss forms evaluated by [`integrand`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Form {
    CrossEntropy,
    Ctmc,
    ScoreEntropy(ScoreView),
    MaskGit,
    GenMd4,
}

/// Optional gradient sink: `(buffer, scale)` accumulates `scale·∂integrand/∂θ`.
pub type GradSink<'a> = Option<(&'a mut [f64], f64)>;

/// Integrand of `form` at `(x0, xt, t)`.
///
/// The CTMC form requires one extra predictor call per unmasked position.
pub fn integrand<P: Predictor + ?Sized>(
    form: Form,
    predictor: &P,
    kernel: &ForwardKernel,
    x0: &TokenSequence,
    xt: &TokenSequence,
    t: f64,
    grad: GradSink<'_>,
) -> Result<f64> {
    xt.check_consistent(x0)?;
    match form {
        Form::Ctmc => return ctmc_integrand(predictor, kernel, x0, xt, t, None, grad),
        Form::GenMd4 => return genmd4_integrand(predictor, kernel, x0, xt, t, grad),
        _ => {}
    }
    let Masking::Scalar(sched) = kernel.masking() else {
        return Err(Error::InvalidArgument(format!("{form:?} needs a scalar schedule")));
    };
    if xt.mask_count() == 0 {
        return Ok(0.0);
    }
    let m = kernel.vocab().m();
    let record = predictor.forward(xt, t)?;
    let mut upstream = grad.as_ref().map(|_| vec![0.0; record.log_probs.len()]);
    let mut value = 0.0;
    match form {
        Form::CrossEntropy | Form::MaskGit => {
            let w = if form == Form::CrossEntropy { sched.ce_weight(t)? } else { -1.0 };
            for n in (0..xt.len()).filter(|&n| xt.is_masked(n)) {
                let c = x0.ids()[n];
                value += w * record.log_mu(n, c);
                if let Some(up) = upstream.as_mut() {
                    up[n * m + c] += w;
                }
            }
        }
        Form::ScoreEntropy(view) => {
            let beta = sched.beta(t)?;
            let r = ScoreView::ratio(kernel, t)?;
            for n in (0..xt.len()).filter(|&n| xt.is_masked(n)) {
                let c = x0.ids()[n];
                let s = view.score(&record, n, kernel)?;
                let total: f64 = s.iter().sum();
                value += beta * (total - r * s[c].ln() + psi(r));
                if let Some(up) = upstream.as_mut() {
                    // ∂s_j/∂log μ_j = s_j; ∂log s_c/∂log μ_c = 1
                    for (j, sj) in s.iter().enumerate() {
                        up[n * m + j] += beta * sj;
                    }
                    up[n * m + c] -= beta * r;
                }
            }
        }
        Form::Ctmc | Form::GenMd4 => unreachable!(),
    }
    if let (Some((buf, scale)), Some(mut up)) = (grad, upstream) {
        up.iter_mut().for_each(|u| *u *= scale);
        predictor.backward(&record, &up, buf)?;
    }
    Ok(value)
}

/// CTMC integrand; with `only = Some(n)` the unmasked sum is replaced by
/// `U·term(n)` (the doubly-stochastic single-neighbour estimate).
pub(crate) fn ctmc_integrand<P: Predictor + ?Sized>(
    predictor: &P,
    kernel: &ForwardKernel,
    x0: &TokenSequence,
    xt: &TokenSequence,
    t: f64,
    only: Option<usize>,
    mut grad: GradSink<'_>,
) -> Result<f64> {
    let Masking::Scalar(sched) = kernel.masking() else {
        return Err(Error::InvalidArgument("the CTMC form needs a scalar schedule".into()));
    };
    let gamma = -sched.ce_weight(t)?;
    let masked = xt.mask_count();
    let unmasked = xt.len() - masked;
    let mut value = gamma * masked as f64;
    if unmasked == 0 {
        return Ok(value);
    }
    let beta = sched.beta(t)?;
    let mask = kernel.vocab().mask_id();
    let m = kernel.vocab().m();
    let (positions, factor): (Vec<usize>, f64) = match only {
        Some(n) => {
            if xt.is_masked(n) {
                return Err(Error::InvalidArgument(format!("position {n} is already masked")));
            }
            (vec![n], unmasked as f64)
        }
        None => ((0..xt.len()).filter(|&n| !xt.is_masked(n)).collect(), 1.0),
    };
    for n in positions {
        let mut ids = xt.ids().to_vec();
        ids[n] = mask;
        let neighbour = TokenSequence::from_ids_unchecked(ids, xt.vocab());
        let record = predictor.forward(&neighbour, t)?;
        let c = x0.ids()[n];
        value -= factor * beta * (gamma.ln() + record.log_mu(n, c));
        if let Some((buf, scale)) = grad.as_mut() {
            let mut up = vec![0.0; record.log_probs.len()];
            up[n * m + c] = -factor * beta * *scale;
            predictor.backward(&record, &up, buf)?;
        }
    }
    Ok(value)
}

fn genmd4_integrand<P: Predictor + ?Sized>(
    predictor: &P,
    kernel: &ForwardKernel,
    x0: &TokenSequence,
    xt: &TokenSequence,
    t: f64,
    grad: GradSink<'_>,
) -> Result<f64> {
    let m = kernel.vocab().m();
    let gamma: Vec<f64> = match kernel.masking() {
        Masking::Vector(v) => v.ce_weight(t)?,
        Masking::Scalar(s) => vec![s.ce_weight(t)?; m],
    };
    if xt.mask_count() == 0 {
        return Ok(0.0);
    }
    let record = predictor.forward(xt, t)?;
    let mut upstream = grad.as_ref().map(|_| vec![0.0; record.log_probs.len()]);
    let mut value = 0.0;
    for n in (0..xt.len()).filter(|&n| xt.is_masked(n)) {
        let c = x0.ids()[n];
        let mu = record.probs(n);
        let dot: f64 = gamma.iter().zip(&mu).map(|(g, p)| g * p).sum();
        value += gamma[c] * (1.0 + record.log_mu(n, c)) - dot;
        if let Some(up) = upstream.as_mut() {
            for j in 0..m {
                up[n * m + j] -= gamma[j] * mu[j];
            }
            up[n * m + c] += gamma[c];
        }
    }
    if let (Some((buf, scale)), Some(mut up)) = (grad, upstream) {
        up.iter_mut().for_each(|u| *u *= scale);
        predictor.backward(&record, &up, buf)?;
    }
    Ok(value)
}

/// Per-sequence integrand of the predictor-independent offset
/// `L_ce − L_ctmc`: `N (α′ − α′ log(−γ))`.
pub fn ctmc_offset_integrand(kernel: &ForwardKernel, len: usize, t: f64) -> Result<f64> {
    let Masking::Scalar(s) = kernel.masking() else {
        return Err(Error::InvalidArgument("the CTMC form needs a scalar schedule".into()));
    };
    let d = s.alpha_prime(t)?;
    let gamma = -s.ce_weight(t)?;
    Ok(len as f64 * (d - d * gamma.ln()))
}
