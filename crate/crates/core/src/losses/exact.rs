//! Exact evaluation on tiny instances.
//!
//! The expectation over `x_t` is a sum over all `2^N` mask patterns, weighted by
//! the factorized forward marginal. The time integral uses Gauss–Legendre
//! quadrature on `[t_lo, 1]`.

use super::estimators::discrete_step_sum;
use super::{boundary_terms, ctmc_integrand, ctmc_offset_integrand, integrand, Form};
use crate::error::{Error, Result};
use crate::forward::{ForwardKernel, TokenSequence};
use crate::predictor::Predictor;
use crate::quadrature::GaussLegendre;

/// Largest sequence length accepted for pattern enumeration.
pub const MAX_EXACT_LEN: usize = 20;

/// Calls `f(x_t, q(x_t | x_0))` for every mask pattern with nonzero probability.
pub fn for_each_pattern<F>(kernel: &ForwardKernel, x0: &TokenSequence, t: f64, mut f: F) -> Result<()>
where
    F: FnMut(&TokenSequence, f64) -> Result<()>,
{
    let n = x0.len();
    if n > MAX_EXACT_LEN {
        return Err(Error::InvalidArgument(format!(
            "exact enumeration supports up to {MAX_EXACT_LEN} tokens, got {n}"
        )));
    }
    let keep: Vec<f64> = x0.ids().iter().map(|&c| kernel.keep_prob(c, t)).collect::<Result<_>>()?;
    let drop: Vec<f64> = x0
        .ids()
        .iter()
        .map(|&c| kernel.masking().one_minus_alpha(c, t))
        .collect::<Result<_>>()?;
    let mask = kernel.vocab().mask_id();
    for bits in 0u32..(1u32 << n) {
        let mut p = 1.0;
        let mut ids = x0.ids().to_vec();
        for i in 0..n {
            if bits >> i & 1 == 1 {
                p *= drop[i];
                ids[i] = mask;
            } else {
                p *= keep[i];
            }
        }
        if p > 0.0 {
            f(&TokenSequence::from_ids_unchecked(ids, x0.vocab()), p)?;
        }
    }
    Ok(())
}

/// `∫_{t_lo}^1 E_{q(x_t|x_0)}[integrand] dt`, accumulating its gradient into `grad`.
pub fn exact_continuous<P: Predictor + ?Sized>(
    form: Form,
    predictor: &P,
    kernel: &ForwardKernel,
    x0: &TokenSequence,
    t_lo: f64,
    quad: &GaussLegendre,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    let mut total = 0.0;
    for (t, w) in quad.on_interval(t_lo, 1.0) {
        for_each_pattern(kernel, x0, t, |xt, p| {
            let sink = grad.as_deref_mut().map(|g| (g, w * p));
            total += w * p * integrand(form, predictor, kernel, x0, xt, t, sink)?;
            Ok(())
        })?;
    }
    Ok(total)
}

/// Integrand of the continuous form at a single `t`, averaged exactly over `x_t`.
pub fn exact_at_time<P: Predictor + ?Sized>(
    form: Form,
    predictor: &P,
    kernel: &ForwardKernel,
    x0: &TokenSequence,
    t: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for_each_pattern(kernel, x0, t, |xt, p| {
        total += p * integrand(form, predictor, kernel, x0, xt, t, None)?;
        Ok(())
    })?;
    Ok(total)
}

/// Exact `L_T`, plus the boundary terms at `t(1) = 1/T` when `full_elbo` is set.
pub fn exact_discrete<P: Predictor + ?Sized>(
    predictor: &P,
    kernel: &ForwardKernel,
    x0: &TokenSequence,
    steps: usize,
    full_elbo: bool,
) -> Result<f64> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("discrete loss needs T >= 2, got {steps}")));
    }
    let tf = steps as f64;
    let mut total = 0.0;
    for i in 2..=steps {
        let (s, t) = ((i - 1) as f64 / tf, i as f64 / tf);
        for_each_pattern(kernel, x0, t, |xt, p| {
            total += p * discrete_step_sum(predictor, kernel, x0, xt, s, t)?;
            Ok(())
        })?;
    }
    if full_elbo {
        let b = boundary_terms(x0, kernel, 1.0 / tf)?;
        total += b.reconstruction + b.prior_kl;
    }
    Ok(total)
}

/// `∫_{t_lo}^1 N (α′ − α′ log(−γ)) dt`, the offset `L_ce − L_ctmc`.
pub fn exact_ctmc_offset(kernel: &ForwardKernel, len: usize, t_lo: f64, quad: &GaussLegendre) -> Result<f64> {
    let mut total = 0.0;
    for (t, w) in quad.on_interval(t_lo, 1.0) {
        total += w * ctmc_offset_integrand(kernel, len, t)?;
    }
    Ok(total)
}

/// Single-draw estimators whose moments [`exact_draw_moments`] can compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrawKind {
    CrossEntropy,
    /// CTMC form with one uniformly chosen unmasked neighbour.
    CtmcDoublyStochastic,
}

/// Exact moments of one draw `X = (1 − t_min)·h(t, x_t)` with `t ~ U(t_min, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrawMoments {
    pub mean: f64,
    pub second_moment: f64,
    /// `Cov(X_u, X_{1−u})` for the antithetic partner drawn at the reflected time
    /// with an independent `x_t`.
    pub antithetic_cov: f64,
}

impl DrawMoments {
    /// Per-draw variance of independent draws.
    pub fn variance(&self) -> f64 {
        self.second_moment - self.mean * self.mean
    }

    /// Per-draw variance under antithetic pairs: twice the variance of a pair mean.
    pub fn antithetic_variance(&self) -> f64 {
        self.variance() + self.antithetic_cov
    }
}

/// Time nodes on `[t_min, 1]` that are symmetric under `t ↦ 1 + t_min − t` and
/// graded geometrically toward both ends, where the draw weights blow up.
fn graded_nodes(t_min: f64, quad: &GaussLegendre) -> Vec<(f64, f64)> {
    let span = 1.0 - t_min;
    let mut cuts = vec![0.0];
    let mut g = 0.5f64;
    let mut inner = Vec::new();
    while g > 1e-15 {
        inner.push(g);
        g *= 0.5;
    }
    cuts.extend(inner.iter().rev());
    cuts.extend(inner.iter().skip(1).map(|g| 1.0 - g));
    cuts.push(1.0);
    let mut nodes = Vec::new();
    for w in cuts.windows(2) {
        for (u, wu) in quad.on_interval(w[0], w[1]) {
            nodes.push((t_min + span * u, span * wu));
        }
    }
    nodes
}

/// Exact per-draw mean, second moment and antithetic covariance of `kind`.
///
/// Every term is finite for shifted schedules; with an unshifted schedule the
/// doubly-stochastic second moment diverges logarithmically at `t = 1`.
pub fn exact_draw_moments<P: Predictor + ?Sized>(
    kind: DrawKind,
    predictor: &P,
    kernel: &ForwardKernel,
    x0: &TokenSequence,
    t_min: f64,
    quad: &GaussLegendre,
) -> Result<DrawMoments> {
    let span = 1.0 - t_min;
    let nodes = graded_nodes(t_min, quad);
    // conditional mean and second moment of h at each node
    let mut cond = Vec::with_capacity(nodes.len());
    for &(t, _) in &nodes {
        let (mut m1, mut m2) = (0.0, 0.0);
        for_each_pattern(kernel, x0, t, |xt, p| {
            match kind {
                DrawKind::CrossEntropy => {
                    let h = integrand(Form::CrossEntropy, predictor, kernel, x0, xt, t, None)?;
                    m1 += p * h;
                    m2 += p * h * h;
                }
                DrawKind::CtmcDoublyStochastic => {
                    let unmasked: Vec<usize> = (0..xt.len()).filter(|&n| !xt.is_masked(n)).collect();
                    if unmasked.is_empty() {
                        let h = ctmc_integrand(predictor, kernel, x0, xt, t, None, None)?;
                        m1 += p * h;
                        m2 += p * h * h;
                    }
                    let q = p / unmasked.len().max(1) as f64;
                    for &n in &unmasked {
                        let h = ctmc_integrand(predictor, kernel, x0, xt, t, Some(n), None)?;
                        m1 += q * h;
                        m2 += q * h * h;
                    }
                }
            }
            Ok(())
        })?;
        cond.push((m1, m2));
    }
    // E[X] = ∫ h̄ dt, E[X²] = span ∫ E[h²|t] dt, E[X_u X_{1−u}] = span ∫ h̄(t) h̄(t̃) dt
    let k = nodes.len();
    let (mut mean, mut second, mut cross) = (0.0, 0.0, 0.0);
    for (i, (&(_, w), &(m1, m2))) in nodes.iter().zip(&cond).enumerate() {
        mean += w * m1;
        second += span * w * m2;
        cross += span * w * m1 * cond[k - 1 - i].0;
    }
    Ok(DrawMoments {
        mean,
        second_moment: second,
        antithetic_cov: cross - mean * mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{Masking, Vocabulary};
    use crate::losses::ScoreView;
    use crate::predictor::{Context, TabularPredictor};
    use crate::schedule::{Schedule, VectorSchedule};

    fn random_tabular(v: Vocabulary, len: usize, seed: u64) -> TabularPredictor {
        let mut p = TabularPredictor::new(v, Context::Exhaustive { len }).unwrap();
        let mut x = seed as f64;
        for q in p.params_mut() {
            x = (x * 12.9898 + 78.233).sin() * 43758.5453;
            *q = 2.0 * (x - x.floor()) - 1.0;
        }
        p
    }

    #[test]
    fn pattern_probabilities_sum_to_one() {
        let v = Vocabulary::new(3).unwrap();
        let k = ForwardKernel::scalar(Schedule::cosine(), v);
        let x0 = TokenSequence::clean(vec![0, 2, 1], v).unwrap();
        let mut s = 0.0;
        for_each_pattern(&k, &x0, 0.4, |_, p| {
            s += p;
            Ok(())
        })
        .unwrap();
        assert!((s - 1.0).abs() < 1e-14);
    }

    #[test]
    fn single_token_constant_predictor_gives_cross_entropy() {
        // ∫ α′ dt = −1 on [0,1], so the weighted loss collapses to −log p_{x0}
        let v = Vocabulary::new(3).unwrap();
        let p = [0.5, 0.3, 0.2];
        let mut pred = TabularPredictor::new(v, Context::Shared).unwrap();
        pred.set_row_probs(0, &p).unwrap();
        let quad = GaussLegendre::new(64);
        for sched in [Schedule::linear(), Schedule::cosine(), Schedule::polynomial(2.0).unwrap()] {
            let k = ForwardKernel::scalar(sched, v);
            let mut expected = 0.0;
            let mut entropy = 0.0;
            for (c, &pc) in p.iter().enumerate() {
                let x0 = TokenSequence::clean(vec![c], v).unwrap();
                expected += pc * exact_continuous(Form::CrossEntropy, &pred, &k, &x0, 0.0, &quad, None).unwrap();
                entropy -= pc * pc.ln();
            }
            assert!((expected - entropy).abs() < 1e-6, "{sched}: {expected} vs {entropy}");
        }
    }

    #[test]
    fn score_entropy_equals_cross_entropy() {
        let v = Vocabulary::new(3).unwrap();
        let pred = random_tabular(v, 2, 1);
        let k = ForwardKernel::scalar(Schedule::linear(), v);
        let quad = GaussLegendre::new(64);
        let x0 = TokenSequence::clean(vec![1, 2], v).unwrap();
        let ce = exact_continuous(Form::CrossEntropy, &pred, &k, &x0, 0.0, &quad, None).unwrap();
        let se = exact_continuous(Form::ScoreEntropy(ScoreView::default()), &pred, &k, &x0, 0.0, &quad, None)
            .unwrap();
        assert!((ce - se).abs() < 1e-9);
    }

    #[test]
    fn equal_exponents_reduce_to_cross_entropy() {
        let v = Vocabulary::new(3).unwrap();
        let pred = random_tabular(v, 2, 4);
        let quad = GaussLegendre::new(64);
        let x0 = TokenSequence::clean(vec![0, 2], v).unwrap();
        let lin = ForwardKernel::scalar(Schedule::linear(), v);
        let vec1 = ForwardKernel::new(Masking::Vector(VectorSchedule::uniform(3, 1.0).unwrap()), v).unwrap();
        let a = exact_continuous(Form::CrossEntropy, &pred, &lin, &x0, 0.0, &quad, None).unwrap();
        let b = exact_continuous(Form::GenMd4, &pred, &vec1, &x0, 0.0, &quad, None).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let v = Vocabulary::new(3).unwrap();
        let pred = random_tabular(v, 2, 9);
        let k = ForwardKernel::scalar(Schedule::cosine(), v);
        let quad = GaussLegendre::new(16);
        let x0 = TokenSequence::clean(vec![2, 0], v).unwrap();
        for form in [Form::CrossEntropy, Form::Ctmc, Form::MaskGit] {
            let mut g = vec![0.0; pred.num_params()];
            exact_continuous(form, &pred, &k, &x0, 0.01, &quad, Some(&mut g)).unwrap();
            for i in (0..pred.num_params()).step_by(7) {
                let h = 1e-6;
                let mut a = pred.clone();
                a.params_mut()[i] += h;
                let mut b = pred.clone();
                b.params_mut()[i] -= h;
                let fa = exact_continuous(form, &a, &k, &x0, 0.01, &quad, None).unwrap();
                let fb = exact_continuous(form, &b, &k, &x0, 0.01, &quad, None).unwrap();
                let fd = (fa - fb) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(1e-4), "{form:?} {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn draw_moments_match_monte_carlo() {
        use crate::losses::{loss_continuous_ce, loss_ctmc_doubly_stochastic, McConfig};
        let v = Vocabulary::new(3).unwrap();
        let pred = random_tabular(v, 2, 3);
        let k = ForwardKernel::scalar(Schedule::linear().with_shift(1e-2).unwrap(), v);
        let x0 = TokenSequence::clean(vec![1, 0], v).unwrap();
        let quad = GaussLegendre::new(12);
        let ce = exact_draw_moments(DrawKind::CrossEntropy, &pred, &k, &x0, 1e-3, &quad).unwrap();
        let reference = exact_continuous(Form::CrossEntropy, &pred, &k, &x0, 1e-3, &GaussLegendre::new(200), None).unwrap();
        assert!((ce.mean - reference).abs() < 1e-9 * reference.abs(), "{} vs {reference}", ce.mean);

        let draws = 200_000;
        for (kind, anti) in [(DrawKind::CrossEntropy, false), (DrawKind::CrossEntropy, true), (DrawKind::CtmcDoublyStochastic, false), (DrawKind::CtmcDoublyStochastic, true)] {
            let m = exact_draw_moments(kind, &pred, &k, &x0, 1e-3, &quad).unwrap();
            let cfg = McConfig::new(draws).antithetic(anti).t_min(1e-3);
            let mut rng = crate::rng::stream(11, "draw-moments", anti as u64);
            let est = match kind {
                DrawKind::CrossEntropy => loss_continuous_ce(&x0, &pred, &k, &mut rng, &cfg).unwrap(),
                DrawKind::CtmcDoublyStochastic => loss_ctmc_doubly_stochastic(&x0, &pred, &k, &mut rng, &cfg).unwrap(),
            };
            let want = if anti { m.antithetic_variance() } else { m.variance() };
            let got = est.variance_per_draw();
            assert!((est.value - m.mean).abs() < 5.0 * est.std_error(), "{kind:?} {anti}: mean {} vs {}", est.value, m.mean);
            assert!((got / want - 1.0).abs() < 0.05, "{kind:?} {anti}: variance {got} vs {want}");
        }
    }
}
