//! Gradients for the exponents `w` of the per-value schedule `α_{t,i} = 1 − t^{w_i}`.
//!
//! The loss integrand at time `t` is `−f(x_t, x_0)/t` with
//!
//! ```text
//! g(x_t, x_0) = Σ_{masked n} (e_{x0n} − μ⁽ⁿ⁾ + e_{x0n} log μ⁽ⁿ⁾_{x0n}),   f = wᵀg
//! ```
//!
//! and `x_t` itself depends on `w`. The gradient therefore has a pathwise part
//! `−E[g]/t` and a score-function part `−E[f ∇_w log q(x_t|x_0)]/t`. Two forward
//! draws at a shared `t` give the leave-one-out estimate
//!
//! ```text
//! −(1/2t) { g₁ + g₂ + (∇_w log q₁ − ∇_w log q₂)(f₁ − f₂) }
//! ```
//!
//! Dropping the score-function part is biased.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{ForwardKernel, Masking, TokenSequence};
use crate::losses::exact::for_each_pattern;
use crate::predictor::Predictor;
use crate::schedule::VectorSchedule;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WGradient {
    pub grad_w: Vec<f64>,
    pub pathwise: Vec<f64>,
    pub rloo: Vec<f64>,
    pub sample_count: usize,
    pub t: f64,
}

impl WGradient {
    fn scaled(mut self, c: f64) -> Self {
        for v in self
            .grad_w
            .iter_mut()
            .chain(self.pathwise.iter_mut())
            .chain(self.rloo.iter_mut())
        {
            *v *= c;
        }
        self
    }

    /// Gradient with respect to `log w` (chain rule factor `w_i`).
    pub fn to_log_space(&self, w: &[f64]) -> Vec<f64> {
        self.grad_w.iter().zip(w).map(|(g, w)| g * w).collect()
    }
}

pub fn g_vector<P: Predictor + ?Sized>(
    x0: &TokenSequence,
    xt: &TokenSequence,
    predictor: &P,
    t: f64,
) -> Result<Vec<f64>> {
    xt.check_consistent(x0)?;
    let m = x0.vocab().m();
    let mut g = vec![0.0; m];
    if xt.mask_count() == 0 {
        return Ok(g);
    }
    let record = predictor.forward(xt, t)?;
    for n in (0..xt.len()).filter(|&n| xt.is_masked(n)) {
        let c = x0.ids()[n];
        for (gi, p) in g.iter_mut().zip(record.probs(n)) {
            *gi -= p;
        }
        g[c] += 1.0 + record.log_mu(n, c);
    }
    Ok(g)
}

pub fn f_scalar(w: &[f64], g: &[f64]) -> f64 {
    w.iter().zip(g).map(|(a, b)| a * b).sum()
}

/// `∇_w log q(x_t | x_0)`.
pub fn grad_log_q(x0: &TokenSequence, xt: &TokenSequence, v: &VectorSchedule, t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!("score of q(x_t|x_0) needs t in (0, 1), got {t}")));
    }
    xt.check_consistent(x0)?;
    let w = v.exponents();
    let lt = t.ln();
    let mut out = vec![0.0; w.len()];
    for (n, &c) in x0.ids().iter().enumerate() {
        if xt.is_masked(n) {
            out[c] += lt;
        } else {
            let tw = t.powf(w[c]);
            out[c] -= tw * lt / (1.0 - tw);
        }
    }
    Ok(out)
}

/// Leave-one-out estimate from two given draws at the same `t`.
pub fn rloo_from_draws<P: Predictor + ?Sized>(
    x0: &TokenSequence,
    xt1: &TokenSequence,
    xt2: &TokenSequence,
    predictor: &P,
    v: &VectorSchedule,
    t: f64,
) -> Result<WGradient> {
    let w = v.exponents();
    let g1 = g_vector(x0, xt1, predictor, t)?;
    let g2 = g_vector(x0, xt2, predictor, t)?;
    let d1 = grad_log_q(x0, xt1, v, t)?;
    let d2 = grad_log_q(x0, xt2, v, t)?;
    let df = f_scalar(w, &g1) - f_scalar(w, &g2);
    let c = -1.0 / (2.0 * t);
    let pathwise: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| c * (a + b)).collect();
    let rloo: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| c * (a - b) * df).collect();
    let grad_w = pathwise.iter().zip(&rloo).map(|(a, b)| a + b).collect();
    Ok(WGradient {
        grad_w,
        pathwise,
        rloo,
        sample_count: 2,
        t,
    })
}

fn kernel_for(x0: &TokenSequence, v: &VectorSchedule) -> Result<ForwardKernel> {
    ForwardKernel::new(Masking::Vector(v.clone()), x0.vocab())
}

/// Estimate of the time-`t` integrand's gradient, using two fresh forward draws.
pub fn rloo_w_gradient_at<P, R>(
    x0: &TokenSequence,
    predictor: &P,
    v: &VectorSchedule,
    t: f64,
    rng: &mut R,
) -> Result<WGradient>
where
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    let kernel = kernel_for(x0, v)?;
    let xt1 = kernel.sample_forward(x0, t, rng)?;
    let xt2 = kernel.sample_forward(x0, t, rng)?;
    rloo_from_draws(x0, &xt1, &xt2, predictor, v, t)
}

/// Estimate of `∇_w ∫_{t_min}^1 (…) dt` with `t ~ U(t_min, 1)`.
pub fn rloo_w_gradient<P, R>(
    x0: &TokenSequence,
    predictor: &P,
    v: &VectorSchedule,
    t_min: f64,
    rng: &mut R,
) -> Result<WGradient>
where
    P: Predictor + ?Sized,
    R: Rng + ?Sized,
{
    let t = t_min + (1.0 - t_min) * rng.random::<f64>();
    Ok(rloo_w_gradient_at(x0, predictor, v, t, rng)?.scaled(1.0 - t_min))
}

/// Exact gradient of the time-`t` integrand by enumerating mask patterns.
pub fn exact_w_gradient_at<P: Predictor + ?Sized>(
    x0: &TokenSequence,
    predictor: &P,
    v: &VectorSchedule,
    t: f64,
) -> Result<Vec<f64>> {
    let kernel = kernel_for(x0, v)?;
    let w = v.exponents();
    let mut out = vec![0.0; w.len()];
    for_each_pattern(&kernel, x0, t, |xt, p| {
        let g = g_vector(x0, xt, predictor, t)?;
        let f = f_scalar(w, &g);
        let d = grad_log_q(x0, xt, v, t)?;
        for i in 0..out.len() {
            out[i] -= p * (g[i] + f * d[i]) / t;
        }
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::Vocabulary;
    use crate::losses::exact::exact_at_time;
    use crate::losses::Form;
    use crate::predictor::{Context, TabularPredictor};
    use crate::rng::stream;

    fn fixture() -> (Vocabulary, TabularPredictor, TokenSequence) {
        let v = Vocabulary::new(2).unwrap();
        let mut p = TabularPredictor::new(v, Context::Exhaustive { len: 2 }).unwrap();
        for (i, q) in p.params_mut().iter_mut().enumerate() {
            *q = ((i as f64) * 0.91).sin();
        }
        let x0 = TokenSequence::clean(vec![0, 1], v).unwrap();
        (v, p, x0)
    }

    #[test]
    fn g_examples() {
        let (v, p, x0) = fixture();
        assert_eq!(g_vector(&x0, &x0, &p, 0.5).unwrap(), vec![0.0, 0.0]);

        let xt = TokenSequence::new(vec![2, 1], v).unwrap();
        let rec = p.forward(&xt, 0.5).unwrap();
        let mu = rec.probs(0);
        let g = g_vector(&x0, &xt, &p, 0.5).unwrap();
        assert!((g[0] - (1.0 - mu[0] + mu[0].ln())).abs() < 1e-12);
        assert!((g[1] + mu[1]).abs() < 1e-12);
        assert_eq!(f_scalar(&[2.0, 3.0], &[1.0, -1.0]), -1.0);
    }

    #[test]
    fn perfect_predictor_gives_zero_g() {
        let v = Vocabulary::new(3).unwrap();
        let mut p = TabularPredictor::new(v, Context::PerPosition { len: 2 }).unwrap();
        p.set_row_probs(0, &[1.0, 1e-300, 1e-300]).unwrap();
        p.set_row_probs(1, &[1e-300, 1e-300, 1.0]).unwrap();
        let x0 = TokenSequence::clean(vec![0, 2], v).unwrap();
        let xt = TokenSequence::all_masked(v, 2);
        let g = g_vector(&x0, &xt, &p, 0.3).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn grad_log_q_matches_finite_differences() {
        let (v, _, x0) = fixture();
        let w = vec![1.3, 0.7];
        let t = 0.37;
        for xt in [vec![0, 1], vec![2, 1], vec![0, 2], vec![2, 2]] {
            let xt = TokenSequence::new(xt, v).unwrap();
            let logq = |w: &[f64]| -> f64 {
                let vs = VectorSchedule::new(w.to_vec()).unwrap();
                let k = ForwardKernel::new(Masking::Vector(vs), v).unwrap();
                (0..2).map(|n| k.marginal(x0.ids()[n], t).unwrap()[xt.ids()[n]].ln()).sum()
            };
            let an = grad_log_q(&x0, &xt, &VectorSchedule::new(w.clone()).unwrap(), t).unwrap();
            for i in 0..2 {
                let h = 1e-6;
                let mut a = w.clone();
                a[i] += h;
                let mut b = w.clone();
                b[i] -= h;
                let fd = (logq(&a) - logq(&b)) / (2.0 * h);
                assert!((fd - an[i]).abs() < 1e-6, "{fd} vs {}", an[i]);
            }
        }
        assert!(grad_log_q(&x0, &x0, &VectorSchedule::new(w).unwrap(), 1.0).is_err());
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let (v, p, x0) = fixture();
        let w = vec![1.3, 0.7];
        let t = 0.45;
        let value = |w: &[f64]| {
            let k = ForwardKernel::new(Masking::Vector(VectorSchedule::new(w.to_vec()).unwrap()), v).unwrap();
            exact_at_time(Form::GenMd4, &p, &k, &x0, t).unwrap()
        };
        let an = exact_w_gradient_at(&x0, &p, &VectorSchedule::new(w.clone()).unwrap(), t).unwrap();
        for i in 0..2 {
            let h = 1e-6;
            let mut a = w.clone();
            a[i] += h;
            let mut b = w.clone();
            b[i] -= h;
            let fd = (value(&a) - value(&b)) / (2.0 * h);
            assert!((fd - an[i]).abs() < 1e-7 * fd.abs().max(1.0), "{fd} vs {}", an[i]);
        }
    }

    #[test]
    fn identical_draws_leave_only_pathwise() {
        let (v, p, x0) = fixture();
        let vs = VectorSchedule::new(vec![1.3, 0.7]).unwrap();
        let xt = TokenSequence::new(vec![2, 1], v).unwrap();
        let est = rloo_from_draws(&x0, &xt, &xt, &p, &vs, 0.6).unwrap();
        assert!(est.rloo.iter().all(|&r| r == 0.0));
        assert_eq!(est.grad_w, est.pathwise);
    }

    #[test]
    fn swapping_draws_is_exact_symmetry() {
        let (v, p, x0) = fixture();
        let vs = VectorSchedule::new(vec![1.3, 0.7]).unwrap();
        let a = TokenSequence::new(vec![2, 1], v).unwrap();
        let b = TokenSequence::new(vec![0, 2], v).unwrap();
        let ab = rloo_from_draws(&x0, &a, &b, &p, &vs, 0.6).unwrap();
        let ba = rloo_from_draws(&x0, &b, &a, &p, &vs, 0.6).unwrap();
        assert_eq!(ab.grad_w, ba.grad_w);
    }

    #[test]
    fn estimator_mean_is_close_to_exact() {
        let (_, p, x0) = fixture();
        let vs = VectorSchedule::new(vec![1.3, 0.7]).unwrap();
        let t = 0.5;
        let exact = exact_w_gradient_at(&x0, &p, &vs, t).unwrap();
        let mut r = stream(17, "rloo", 0);
        let n = 20_000;
        let draws: Vec<Vec<f64>> =
            (0..n).map(|_| rloo_w_gradient_at(&x0, &p, &vs, t, &mut r).unwrap().grad_w).collect();
        for i in 0..2 {
            let xs: Vec<f64> = draws.iter().map(|d| d[i]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((mean - exact[i]).abs() < 4.0 * se + 1e-12, "{i}: {mean} vs {}", exact[i]);
        }
    }
}
