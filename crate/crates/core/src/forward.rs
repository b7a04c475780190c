//! Forward masking process.
//!
//! Every kernel here has the structure `diag(a) + (I − diag(a))·1·e_mᵀ`: a token
//! either keeps its value or jumps to the mask id `m`, and the mask is absorbing.
//! Kernels are exposed through entry lookups and row materialization; the dense
//! `(m+1)²` forms exist for tests and small diagnostics only.

use rand::Rng;

use crate::error::{Error, Result};
use crate::schedule::{Schedule, VectorSchedule};

/// `m` clean values `0..m` plus the mask id `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vocabulary {
    m: usize,
}

impl Vocabulary {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("vocabulary needs at least one value".into()));
        }
        Ok(Self { m })
    }

    /// Number of clean values.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn mask_id(&self) -> usize {
        self.m
    }

    /// Number of states including the mask.
    pub fn states(&self) -> usize {
        self.m + 1
    }

    pub fn is_mask(&self, id: usize) -> bool {
        id == self.m
    }

    pub fn check(&self, id: usize) -> Result<()> {
        if id > self.m {
            Err(Error::InvalidArgument(format!("token id {id} exceeds mask id {}", self.m)))
        } else {
            Ok(())
        }
    }

    pub fn check_clean(&self, id: usize) -> Result<()> {
        if id >= self.m {
            Err(Error::InvalidArgument(format!(
                "token id {id} is not a clean value (m = {})",
                self.m
            )))
        } else {
            Ok(())
        }
    }
}

/// Length-`N` sequence of ids in `0..=m`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
    vocab: Vocabulary,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab: Vocabulary) -> Result<Self> {
        for &id in &ids {
            vocab.check(id)?;
        }
        Ok(Self { ids, vocab })
    }

    /// Sequence without mask ids.
    pub fn clean(ids: Vec<usize>, vocab: Vocabulary) -> Result<Self> {
        for &id in &ids {
            vocab.check_clean(id)?;
        }
        Ok(Self { ids, vocab })
    }

    pub fn all_masked(vocab: Vocabulary, len: usize) -> Self {
        Self {
            ids: vec![vocab.mask_id(); len],
            vocab,
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_masked(&self, n: usize) -> bool {
        self.ids[n] == self.vocab.mask_id()
    }

    pub fn mask_count(&self) -> usize {
        self.ids.iter().filter(|&&id| id == self.vocab.mask_id()).count()
    }

    pub fn is_clean(&self) -> bool {
        self.mask_count() == 0
    }

    pub(crate) fn set(&mut self, n: usize, id: usize) {
        debug_assert!(id <= self.vocab.mask_id());
        self.ids[n] = id;
    }

    pub(crate) fn from_ids_unchecked(ids: Vec<usize>, vocab: Vocabulary) -> Self {
        Self { ids, vocab }
    }

    /// Fails unless every position is `x0` or the mask.
    pub fn check_consistent(&self, x0: &TokenSequence) -> Result<()> {
        if self.len() != x0.len() || self.vocab != x0.vocab {
            return Err(Error::InvalidArgument(format!(
                "sequence shapes differ: {} vs {} tokens",
                self.len(),
                x0.len()
            )));
        }
        for (&xt, &c) in self.ids.iter().zip(&x0.ids) {
            if xt != c && xt != self.vocab.mask_id() {
                return Err(Error::Inconsistent { x0: c, xt });
            }
        }
        Ok(())
    }
}

/// Which survival curve drives the forward process.
#[derive(Debug, Clone, PartialEq)]
pub enum Masking {
    Scalar(Schedule),
    Vector(VectorSchedule),
}

impl Masking {
    /// `α_t` for a token with clean value `x0`.
    pub fn alpha(&self, x0: usize, t: f64) -> Result<f64> {
        match self {
            Masking::Scalar(s) => s.alpha(t),
            Masking::Vector(v) => Ok(v.alpha(t)?[x0]),
        }
    }

    /// `1 − α_t` for value `x0`, without cancellation.
    pub fn one_minus_alpha(&self, x0: usize, t: f64) -> Result<f64> {
        match self {
            Masking::Scalar(s) => s.one_minus_alpha(t),
            Masking::Vector(v) => {
                v.alpha(t)?;
                Ok(t.powf(v.exponents()[x0]))
            }
        }
    }

    pub fn alpha_prime(&self, x0: usize, t: f64) -> Result<f64> {
        match self {
            Masking::Scalar(s) => s.alpha_prime(t),
            Masking::Vector(v) => Ok(v.alpha_prime(t)?[x0]),
        }
    }

    /// `α′_t / (1 − α_t)` for value `x0`.
    pub fn ce_weight(&self, x0: usize, t: f64) -> Result<f64> {
        match self {
            Masking::Scalar(s) => s.ce_weight(t),
            Masking::Vector(v) => Ok(v.ce_weight(t)?[x0]),
        }
    }
}

/// Forward kernel `Q̄(s, t)` over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardKernel {
    masking: Masking,
    vocab: Vocabulary,
}

impl ForwardKernel {
    pub fn new(masking: Masking, vocab: Vocabulary) -> Result<Self> {
        if let Masking::Vector(v) = &masking {
            if v.len() != vocab.m() {
                return Err(Error::InvalidArgument(format!(
                    "vector schedule has {} exponents for m = {}",
                    v.len(),
                    vocab.m()
                )));
            }
        }
        Ok(Self { masking, vocab })
    }

    pub fn scalar(schedule: Schedule, vocab: Vocabulary) -> Self {
        Self {
            masking: Masking::Scalar(schedule),
            vocab,
        }
    }

    pub fn masking(&self) -> &Masking {
        &self.masking
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn check_order(s: f64, t: f64) -> Result<()> {
        if s < t {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("time pair needs s < t, got s = {s}, t = {t}")))
        }
    }

    /// Probability that clean value `x0` is still unmasked at `t`.
    pub fn keep_prob(&self, x0: usize, t: f64) -> Result<f64> {
        self.vocab.check_clean(x0)?;
        self.masking.alpha(x0, t)
    }

    /// `q(x_t | x_0)` as a vector over `0..=m`.
    pub fn marginal(&self, x0: usize, t: f64) -> Result<Vec<f64>> {
        let a = self.keep_prob(x0, t)?;
        let mut row = vec![0.0; self.vocab.states()];
        row[x0] = a;
        row[self.vocab.mask_id()] = self.masking.one_minus_alpha(x0, t)?;
        Ok(row)
    }

    /// Keep probability `α_t / α_s` of an unmasked `xs` between `s` and `t`.
    pub fn transition_keep(&self, xs: usize, s: f64, t: f64) -> Result<f64> {
        Self::check_order(s, t)?;
        self.vocab.check_clean(xs)?;
        let a_s = self.masking.alpha(xs, s)?;
        let a_t = self.masking.alpha(xs, t)?;
        // α_s = 0 forces α_t = 0; such a token cannot be unmasked at s
        Ok(if a_s > 0.0 { a_t / a_s } else { 0.0 })
    }

    /// `1 − α_t/α_s` as `(α_s − α_t)/α_s`, computed from `1 − α` so it keeps
    /// full relative precision while `α ≈ 1`.
    fn transition_drop(&self, xs: usize, s: f64, t: f64, keep: f64) -> Result<f64> {
        let a_s = self.masking.alpha(xs, s)?;
        if a_s <= 0.0 {
            return Ok(1.0 - keep);
        }
        let om_s = self.masking.one_minus_alpha(xs, s)?;
        let om_t = self.masking.one_minus_alpha(xs, t)?;
        Ok(((om_t - om_s) / a_s).clamp(0.0, 1.0))
    }

    /// `q(x_t | x_s)` as a vector over `0..=m`.
    pub fn transition(&self, xs: usize, s: f64, t: f64) -> Result<Vec<f64>> {
        self.vocab.check(xs)?;
        let mut row = vec![0.0; self.vocab.states()];
        let mask = self.vocab.mask_id();
        if xs == mask {
            Self::check_order(s, t)?;
            row[mask] = 1.0;
        } else {
            let keep = self.transition_keep(xs, s, t)?;
            row[xs] = keep;
            row[mask] = self.transition_drop(xs, s, t, keep)?;
        }
        Ok(row)
    }

    /// `ξ_{s,t} = (α_s − α_t)/(1 − α_t)`: probability that a token masked at `t`
    /// with clean value `x0` is unmasked at `s`.
    pub fn unmask_prob(&self, x0: usize, s: f64, t: f64) -> Result<f64> {
        Self::check_order(s, t)?;
        self.vocab.check_clean(x0)?;
        let om_t = self.masking.one_minus_alpha(x0, t)?;
        let om_s = self.masking.one_minus_alpha(x0, s)?;
        if om_t <= 0.0 {
            return Err(Error::Singular(format!(
                "reverse posterior undefined at t = {t} (alpha = 1)"
            )));
        }
        Ok(((om_t - om_s) / om_t).clamp(0.0, 1.0))
    }

    /// `q(x_s | x_t, x_0)` as a vector over `0..=m`.
    pub fn reverse_posterior(&self, xt: usize, x0: usize, s: f64, t: f64) -> Result<Vec<f64>> {
        self.vocab.check(xt)?;
        self.vocab.check_clean(x0)?;
        let mask = self.vocab.mask_id();
        if xt != x0 && xt != mask {
            return Err(Error::Inconsistent { x0, xt });
        }
        let mut row = vec![0.0; self.vocab.states()];
        if xt == mask {
            let xi = self.unmask_prob(x0, s, t)?;
            row[x0] = xi;
            row[mask] = 1.0 - xi;
        } else {
            Self::check_order(s, t)?;
            row[xt] = 1.0;
        }
        Ok(row)
    }

    /// Forward rate `Q(t)`.
    pub fn forward_rate(&self, t: f64) -> Result<ForwardRate> {
        let beta = match &self.masking {
            Masking::Scalar(s) => vec![s.beta(t)?; self.vocab.m()],
            Masking::Vector(v) => {
                let a = v.alpha(t)?;
                let d = v.alpha_prime(t)?;
                if a.iter().any(|&x| x <= 0.0) {
                    return Err(Error::Singular(format!("forward rate diverges at t = {t}")));
                }
                a.iter().zip(&d).map(|(a, d)| -d / a).collect()
            }
        };
        Ok(ForwardRate { beta })
    }

    /// Reverse rate `R^{x0}(t)`; only the mask row is nonzero.
    pub fn reverse_rate_given_x0(&self, x0: usize, t: f64) -> Result<ReverseRate> {
        self.vocab.check_clean(x0)?;
        let rate = -self.masking.ce_weight(x0, t)?;
        Ok(ReverseRate {
            x0,
            rate,
            m: self.vocab.m(),
        })
    }

    /// Masks each position of `x0` independently with probability `1 − α_t`.
    pub fn sample_forward<R: Rng + ?Sized>(
        &self,
        x0: &TokenSequence,
        t: f64,
        rng: &mut R,
    ) -> Result<TokenSequence> {
        let mut out = x0.clone();
        match &self.masking {
            Masking::Scalar(s) => {
                let keep = s.alpha(t)?;
                for n in 0..x0.len() {
                    self.vocab.check_clean(x0.ids[n])?;
                    if rng.random::<f64>() >= keep {
                        out.set(n, self.vocab.mask_id());
                    }
                }
            }
            Masking::Vector(v) => {
                let keep = v.alpha(t)?;
                for n in 0..x0.len() {
                    self.vocab.check_clean(x0.ids[n])?;
                    if rng.random::<f64>() >= keep[x0.ids[n]] {
                        out.set(n, self.vocab.mask_id());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Dense `Q̄(t)`, row `j` = distribution of `x_t` given `x_0 = j` (mask row absorbing).
    pub fn dense_marginal(&self, t: f64) -> Result<Vec<Vec<f64>>> {
        let mask = self.vocab.mask_id();
        let mut rows = Vec::with_capacity(self.vocab.states());
        for j in 0..self.vocab.m() {
            rows.push(self.marginal(j, t)?);
        }
        let mut last = vec![0.0; self.vocab.states()];
        last[mask] = 1.0;
        rows.push(last);
        Ok(rows)
    }

    /// Dense `Q̄(s, t)`.
    pub fn dense_transition(&self, s: f64, t: f64) -> Result<Vec<Vec<f64>>> {
        (0..self.vocab.states()).map(|j| self.transition(j, s, t)).collect()
    }
}

/// `Q(t)_{jk} = β_j(t)(δ_{km} − δ_{jk})`; the mask row is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRate {
    beta: Vec<f64>,
}

impl ForwardRate {
    /// Per-value jump rates `β_j`.
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn entry(&self, j: usize, k: usize) -> f64 {
        let m = self.beta.len();
        if j == m {
            return 0.0;
        }
        let b = self.beta[j];
        match (k == m, j == k) {
            (true, _) => b,
            (false, true) => -b,
            _ => 0.0,
        }
    }

    pub fn row(&self, j: usize) -> Vec<f64> {
        (0..=self.beta.len()).map(|k| self.entry(j, k)).collect()
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        (0..=self.beta.len()).map(|j| self.row(j)).collect()
    }
}

/// `R^{x0}(t) = γ·e_m(x_0 − e_m)ᵀ` with `γ = −α′_t/(1 − α_t) ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseRate {
    x0: usize,
    rate: f64,
    m: usize,
}

impl ReverseRate {
    /// Unmasking rate `γ`.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn entry(&self, k: usize, j: usize) -> f64 {
        if k != self.m {
            0.0
        } else if j == self.x0 {
            self.rate
        } else if j == self.m {
            -self.rate
        } else {
            0.0
        }
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        (0..=self.m).map(|j| self.entry(k, j)).collect()
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        (0..=self.m).map(|k| self.row(k)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn vocab(m: usize) -> Vocabulary {
        Vocabulary::new(m).unwrap()
    }

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect())
            .collect()
    }

    fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn kernels(m: usize) -> Vec<ForwardKernel> {
        let v = vocab(m);
        let w: Vec<f64> = (0..m).map(|i| 0.5 + 0.7 * i as f64).collect();
        vec![
            ForwardKernel::scalar(Schedule::linear(), v),
            ForwardKernel::scalar(Schedule::cosine().with_shift(1e-3).unwrap(), v),
            ForwardKernel::scalar(Schedule::geometric(1e-5, 20.0).unwrap(), v),
            ForwardKernel::new(Masking::Vector(VectorSchedule::new(w).unwrap()), v).unwrap(),
        ]
    }

    #[test]
    fn marginal_examples() {
        let k = ForwardKernel::scalar(Schedule::linear(), vocab(4));
        let p = k.marginal(2, 0.3).unwrap();
        assert_eq!(p.len(), 5);
        assert!((p[2] - 0.7).abs() < 1e-15 && (p[4] - 0.3).abs() < 1e-15);
        assert_eq!(k.marginal(1, 0.0).unwrap(), vec![0.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(k.marginal(4, 0.5).is_err());

        let v = VectorSchedule::new(vec![2.0, 1.0]).unwrap();
        let k = ForwardKernel::new(Masking::Vector(v), vocab(2)).unwrap();
        assert_eq!(k.marginal(0, 0.5).unwrap()[0], 0.75);
    }

    #[test]
    fn transition_examples() {
        let k = ForwardKernel::scalar(Schedule::linear(), vocab(3));
        assert_eq!(k.transition(3, 0.1, 0.5).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
        let row = k.transition(1, 0.2, 0.6).unwrap();
        assert!((row[1] - 0.5).abs() < 1e-15);
        assert!(k.transition(1, 0.6, 0.2).is_err());
        assert!(k.transition(1, 0.5, 0.5).is_err());
    }

    #[test]
    fn reverse_posterior_examples() {
        // linear: α_s = 0.8, α_t = 0.5
        let k = ForwardKernel::scalar(Schedule::linear(), vocab(4));
        let row = k.reverse_posterior(4, 3, 0.2, 0.5).unwrap();
        assert!((row[3] - 0.6).abs() < 1e-15 && (row[4] - 0.4).abs() < 1e-15);
        assert_eq!(k.reverse_posterior(2, 2, 0.2, 0.5).unwrap(), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(
            k.reverse_posterior(1, 2, 0.2, 0.5),
            Err(Error::Inconsistent { x0: 2, xt: 1 })
        ));
    }

    #[test]
    fn chapman_kolmogorov_marginal() {
        for k in kernels(5) {
            let (s, t) = (0.23, 0.71);
            for x0 in 0..5 {
                let direct = k.marginal(x0, t).unwrap();
                let ms = k.marginal(x0, s).unwrap();
                let mut composed = vec![0.0; 6];
                for (xs, p) in ms.iter().enumerate() {
                    for (xt, q) in k.transition(xs, s, t).unwrap().iter().enumerate() {
                        composed[xt] += p * q;
                    }
                }
                for (a, b) in direct.iter().zip(&composed) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn reverse_posterior_matches_bayes() {
        for k in kernels(3) {
            let (s, t) = (0.31, 0.64);
            let mask = 3;
            for x0 in 0..3 {
                let q_t = k.marginal(x0, t).unwrap();
                let q_s = k.marginal(x0, s).unwrap();
                for xt in [x0, mask] {
                    let bayes: Vec<f64> = (0..4)
                        .map(|xs| k.transition(xs, s, t).unwrap()[xt] * q_s[xs] / q_t[xt])
                        .collect();
                    let post = k.reverse_posterior(xt, x0, s, t).unwrap();
                    for (a, b) in bayes.iter().zip(&post) {
                        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn rate_examples() {
        let k = ForwardKernel::scalar(Schedule::linear(), vocab(6));
        let t = 0.4;
        let q = k.forward_rate(t).unwrap();
        assert!((q.beta()[0] - 1.0 / 0.6).abs() < 1e-14);
        for x0 in 0..6 {
            let r = k.reverse_rate_given_x0(x0, t).unwrap();
            assert!((r.rate() - 1.0 / t).abs() < 1e-14);
            for row in r.dense() {
                assert_eq!(row.iter().sum::<f64>(), 0.0);
            }
        }
        for row in q.dense() {
            assert_eq!(row.iter().sum::<f64>(), 0.0);
            assert!(row.iter().all(|v| v.is_finite()));
        }
        for j in 0..6 {
            for kk in 0..=6 {
                if j != kk {
                    assert!(q.entry(j, kk) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn rate_relation_by_enumeration() {
        for k in kernels(4) {
            let t = 0.37;
            let q = k.forward_rate(t).unwrap();
            for x0 in 0..4 {
                let r = k.reverse_rate_given_x0(x0, t).unwrap();
                let marg = k.marginal(x0, t).unwrap();
                for kk in 0..5 {
                    for j in 0..5 {
                        if j == kk || marg[kk] == 0.0 {
                            continue;
                        }
                        let expect = q.entry(j, kk) * marg[j] / marg[kk];
                        let got = r.entry(kk, j);
                        assert!((expect - got).abs() <= 1e-12 * (1.0 + got.abs()), "{expect} {got}");
                    }
                }
            }
        }
    }

    #[test]
    fn taylor_decay_is_quadratic() {
        for k in kernels(4) {
            let t = 0.42;
            let q = k.forward_rate(t).unwrap().dense();
            let mut errs = Vec::new();
            for d in [1e-2, 1e-3, 1e-4] {
                let dense = k.dense_transition(t, t + d).unwrap();
                let mut err: f64 = 0.0;
                for i in 0..5 {
                    for j in 0..5 {
                        let lin = if i == j { 1.0 } else { 0.0 } + q[i][j] * d;
                        err = err.max((dense[i][j] - lin).abs());
                    }
                }
                errs.push(err / (d * d));
            }
            // err/Δ² stays bounded as Δ shrinks
            assert!(errs[2] < 2.0 * errs[0] + 1e-6, "{errs:?}");
        }
    }

    #[test]
    fn sample_forward_endpoints_and_rate() {
        let v = vocab(4);
        let k = ForwardKernel::scalar(Schedule::linear(), v);
        let x0 = TokenSequence::clean(vec![0, 1, 2, 3, 1], v).unwrap();
        let mut rng = stream(1, "test", 0);
        assert_eq!(k.sample_forward(&x0, 0.0, &mut rng).unwrap(), x0);
        assert_eq!(k.sample_forward(&x0, 1.0, &mut rng).unwrap().mask_count(), 5);

        let one = TokenSequence::clean(vec![2], v).unwrap();
        let n = 100_000;
        let masked = (0..n)
            .filter(|_| k.sample_forward(&one, 0.3, &mut rng).unwrap().mask_count() == 1)
            .count() as f64;
        let sd = (n as f64 * 0.3 * 0.7).sqrt();
        assert!((masked - 0.3 * n as f64).abs() < 3.0 * sd, "{masked}");
    }

    proptest! {
        #[test]
        fn chapman_kolmogorov_dense(a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0) {
            let mut ts = [a, b, c];
            ts.sort_by(f64::total_cmp);
            prop_assume!(ts[1] - ts[0] > 1e-6 && ts[2] - ts[1] > 1e-6);
            for k in kernels(3) {
                let st = k.dense_transition(ts[0], ts[1]).unwrap();
                let tu = k.dense_transition(ts[1], ts[2]).unwrap();
                let su = k.dense_transition(ts[0], ts[2]).unwrap();
                prop_assert!(max_abs_diff(&matmul(&st, &tu), &su) < 1e-12);
            }
        }

        #[test]
        fn posterior_rows_are_distributions(a in 0.0f64..1.0, b in 0.0f64..1.0, x0 in 0usize..3) {
            prop_assume!((a - b).abs() > 1e-9);
            let (s, t) = if a < b { (a, b) } else { (b, a) };
            for k in kernels(3) {
                for xt in [x0, 3] {
                    let row = k.reverse_posterior(xt, x0, s, t).unwrap();
                    prop_assert!(row.iter().all(|&p| p >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
