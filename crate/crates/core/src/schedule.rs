//! Masking schedules.
//!
//! A schedule `α_t` is the probability that a token is still unmasked at time
//! `t ∈ [0, 1]`. Scalar schedules apply the same survival curve to every token
//! value; [`VectorSchedule`] gives each value `i` its own curve `1 − t^{w_i}`.
//!
//! Scalar schedules carry an optional endpoint shift `ε` that keeps `α` inside
//! `[ε, 1 − ε]`: `α_t = (1 − 2ε)·α_raw(t) + ε`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Default endpoint shift used for training runs.
pub const DEFAULT_SHIFT: f64 = 1e-4;
/// Largest endpoint shift accepted.
pub const MAX_SHIFT: f64 = 0.01;
/// Lower end of the time interval used by integrators and estimators.
pub const T_MIN: f64 = 1e-5;

pub const GEOMETRIC_BETA_MIN: f64 = 1e-5;
pub const GEOMETRIC_BETA_MAX: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    /// `1 − t`
    Linear,
    /// `1 − t^w`
    Polynomial { w: f64 },
    /// `exp(−β_min^{1−t} β_max^t)`
    Geometric { beta_min: f64, beta_max: f64 },
    /// `1 − cos(π/2 · (1 − t))`
    Cosine,
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Polynomial { .. } => "polynomial",
            ScheduleKind::Geometric { .. } => "geometric",
            ScheduleKind::Cosine => "cosine",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            ScheduleKind::Polynomial { w } if !(w.is_finite() && w > 0.0) => Err(
                Error::InvalidArgument(format!("polynomial exponent must be positive, got {w}")),
            ),
            ScheduleKind::Geometric { beta_min, beta_max }
                if !(beta_min.is_finite()
                    && beta_max.is_finite()
                    && beta_min > 0.0
                    && beta_max > beta_min) =>
            {
                Err(Error::InvalidArgument(format!(
                    "geometric schedule needs 0 < beta_min < beta_max, got ({beta_min}, {beta_max})"
                )))
            }
            _ => Ok(()),
        }
    }

    /// `β_min^{1−t} β_max^t` for the geometric schedule.
    fn geometric_total(beta_min: f64, beta_max: f64, t: f64) -> f64 {
        beta_min * (t * (beta_max / beta_min).ln()).exp()
    }

    fn raw_alpha(&self, t: f64) -> f64 {
        match *self {
            ScheduleKind::Linear => 1.0 - t,
            ScheduleKind::Polynomial { w } => 1.0 - t.powf(w),
            ScheduleKind::Geometric { beta_min, beta_max } => {
                (-Self::geometric_total(beta_min, beta_max, t)).exp()
            }
            // cos(π/2·(1 − t)) = sin(π t / 2); the sine form hits both endpoints exactly
            ScheduleKind::Cosine => 1.0 - (FRAC_PI_2 * t).sin(),
        }
    }

    /// `1 − α_raw(t)` without cancellation.
    fn raw_one_minus_alpha(&self, t: f64) -> f64 {
        match *self {
            ScheduleKind::Linear => t,
            ScheduleKind::Polynomial { w } => t.powf(w),
            ScheduleKind::Geometric { beta_min, beta_max } => {
                -(-Self::geometric_total(beta_min, beta_max, t)).exp_m1()
            }
            ScheduleKind::Cosine => (FRAC_PI_2 * t).sin(),
        }
    }

    fn raw_alpha_prime(&self, t: f64) -> f64 {
        match *self {
            ScheduleKind::Linear => -1.0,
            ScheduleKind::Polynomial { w } => -w * t.powf(w - 1.0),
            ScheduleKind::Geometric { beta_min, beta_max } => {
                let b = Self::geometric_total(beta_min, beta_max, t);
                -(-b).exp() * b * (beta_max / beta_min).ln()
            }
            ScheduleKind::Cosine => -FRAC_PI_2 * (FRAC_PI_2 * t).cos(),
        }
    }

    /// Inverse of `raw_alpha`, `None` when `a` is outside the schedule's range.
    fn raw_inverse(&self, a: f64) -> Option<f64> {
        let t = match *self {
            ScheduleKind::Linear => 1.0 - a,
            ScheduleKind::Polynomial { w } => (1.0 - a).powf(1.0 / w),
            ScheduleKind::Geometric { beta_min, beta_max } => {
                if a <= 0.0 {
                    return None;
                }
                let b = -a.ln();
                (b / beta_min).ln() / (beta_max / beta_min).ln()
            }
            ScheduleKind::Cosine => (1.0 - a).asin() / FRAC_PI_2,
        };
        (t.is_finite() && (-1e-12..=1.0 + 1e-12).contains(&t)).then(|| t.clamp(0.0, 1.0))
    }
}

/// Scalar masking schedule with endpoint shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    shift: f64,
}

impl Default for Schedule {
    /// Linear schedule with the default training shift.
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            shift: DEFAULT_SHIFT,
        }
    }
}

impl Schedule {
    /// Unshifted schedule of the given kind.
    pub fn new(kind: ScheduleKind) -> Result<Self> {
        kind.validate()?;
        Ok(Self { kind, shift: 0.0 })
    }

    pub fn linear() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            shift: 0.0,
        }
    }

    pub fn polynomial(w: f64) -> Result<Self> {
        Self::new(ScheduleKind::Polynomial { w })
    }

    pub fn geometric(beta_min: f64, beta_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::Geometric { beta_min, beta_max })
    }

    pub fn cosine() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            shift: 0.0,
        }
    }

    pub fn with_shift(mut self, shift: f64) -> Result<Self> {
        if !(0.0..=MAX_SHIFT).contains(&shift) {
            return Err(Error::InvalidArgument(format!(
                "endpoint shift must lie in [0, {MAX_SHIFT}], got {shift}"
            )));
        }
        self.shift = shift;
        Ok(self)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    fn check_time(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain(format!("time {t} outside [0, 1]")))
        }
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        Ok(self.alpha_unchecked(t))
    }

    pub(crate) fn alpha_unchecked(&self, t: f64) -> f64 {
        let e = self.shift;
        if e == 0.0 {
            self.kind.raw_alpha(t)
        } else {
            (1.0 - 2.0 * e) * self.kind.raw_alpha(t) + e
        }
    }

    /// `1 − α_t`, evaluated without cancellation near `t = 0`.
    pub fn one_minus_alpha(&self, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        let e = self.shift;
        Ok((1.0 - 2.0 * e) * self.kind.raw_one_minus_alpha(t) + e)
    }

    pub fn alpha_prime(&self, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        let d = (1.0 - 2.0 * self.shift) * self.kind.raw_alpha_prime(t);
        if d.is_finite() {
            Ok(d)
        } else {
            Err(Error::Domain(format!(
                "{} schedule derivative is singular at t = {t}",
                self.kind.name()
            )))
        }
    }

    /// Cross-entropy loss weight `α′_t / (1 − α_t)`; strictly negative.
    pub fn ce_weight(&self, t: f64) -> Result<f64> {
        let om = self.one_minus_alpha(t)?;
        if om <= 0.0 {
            return Err(Error::Singular(format!(
                "cross-entropy weight diverges at t = {t} (alpha = 1)"
            )));
        }
        Ok(self.alpha_prime(t)? / om)
    }

    /// Forward jump rate `β(t) = −α′_t / α_t`.
    pub fn beta(&self, t: f64) -> Result<f64> {
        let a = self.alpha(t)?;
        if a <= 0.0 {
            return Err(Error::Singular(format!("forward rate diverges at t = {t} (alpha = 0)")));
        }
        Ok(-self.alpha_prime(t)? / a)
    }

    /// `λ_t = log(α_t / (1 − α_t))`.
    pub fn log_snr(&self, t: f64) -> Result<f64> {
        let a = self.alpha(t)?;
        let om = self.one_minus_alpha(t)?;
        if a <= 0.0 || om <= 0.0 {
            return Err(Error::Domain(format!(
                "log-SNR undefined at t = {t} (alpha = {a})"
            )));
        }
        Ok(a.ln() - om.ln())
    }

    /// Time at which the log-SNR equals `lambda`.
    pub fn log_snr_inv(&self, lambda: f64) -> Result<f64> {
        if !lambda.is_finite() {
            return Err(Error::Domain(format!("log-SNR {lambda} is not finite")));
        }
        let a = 1.0 / (1.0 + (-lambda).exp());
        let e = self.shift;
        let raw = (a - e) / (1.0 - 2.0 * e);
        self.kind.raw_inverse(raw).ok_or_else(|| {
            Error::Domain(format!(
                "log-SNR {lambda} is outside the range of the {} schedule",
                self.kind.name()
            ))
        })
    }
}

impl fmt::Display for Schedule {
    /// `kind[:params][@shift]`, parseable by [`FromStr`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ScheduleKind::Linear => write!(f, "linear")?,
            ScheduleKind::Polynomial { w } => write!(f, "polynomial:{w}")?,
            ScheduleKind::Geometric { beta_min, beta_max } => {
                write!(f, "geometric:{beta_min}:{beta_max}")?
            }
            ScheduleKind::Cosine => write!(f, "cosine")?,
        }
        if self.shift != 0.0 {
            write!(f, "@{}", self.shift)?;
        }
        Ok(())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::InvalidArgument(format!("schedule '{s}': {why}"));
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad("bad number"));
        let (body, shift) = match s.split_once('@') {
            Some((b, e)) => (b, num(e)?),
            None => (s, 0.0),
        };
        let mut parts = body.trim().split(':');
        let name = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let kind = match (name, args.as_slice()) {
            ("linear", []) => ScheduleKind::Linear,
            ("cosine", []) => ScheduleKind::Cosine,
            ("polynomial" | "poly", [w]) => ScheduleKind::Polynomial { w: num(w)? },
            ("geometric", []) => ScheduleKind::Geometric {
                beta_min: GEOMETRIC_BETA_MIN,
                beta_max: GEOMETRIC_BETA_MAX,
            },
            ("geometric", [lo, hi]) => ScheduleKind::Geometric {
                beta_min: num(lo)?,
                beta_max: num(hi)?,
            },
            _ => return Err(bad("expected linear, cosine, polynomial:<w> or geometric[:<min>:<max>]")),
        };
        Schedule::new(kind)?.with_shift(shift)
    }
}

/// Per-value schedules `α_{t,i} = 1 − t^{w_i}` with learnable exponents.
///
/// Only the `m` non-mask values carry an exponent; the mask slot never
/// appears as a clean value.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSchedule {
    w: Vec<f64>,
}

impl VectorSchedule {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidArgument("vector schedule needs at least one exponent".into()));
        }
        if let Some((i, &v)) = w.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "exponent w[{i}] = {v} must be positive"
            )));
        }
        Ok(Self { w })
    }

    pub fn uniform(m: usize, w: f64) -> Result<Self> {
        Self::new(vec![w; m])
    }

    pub fn exponents(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    fn check_time(t: f64) -> Result<()> {
        Schedule::check_time(t)
    }

    /// `α_{t,i}` for one value.
    pub fn alpha_of(&self, i: usize, t: f64) -> f64 {
        1.0 - t.powf(self.w[i])
    }

    pub fn alpha(&self, t: f64) -> Result<Vec<f64>> {
        Self::check_time(t)?;
        Ok((0..self.w.len()).map(|i| self.alpha_of(i, t)).collect())
    }

    pub fn alpha_prime(&self, t: f64) -> Result<Vec<f64>> {
        Self::check_time(t)?;
        let d: Vec<f64> = self.w.iter().map(|&w| -w * t.powf(w - 1.0)).collect();
        if d.iter().all(|v| v.is_finite()) {
            Ok(d)
        } else {
            Err(Error::Domain(format!("vector schedule derivative is singular at t = {t}")))
        }
    }

    /// `α′_{t,i} / (1 − α_{t,i}) = −w_i / t`.
    pub fn ce_weight(&self, t: f64) -> Result<Vec<f64>> {
        Self::check_time(t)?;
        if t <= 0.0 {
            return Err(Error::Singular("vector cross-entropy weight diverges at t = 0".into()));
        }
        Ok(self.w.iter().map(|&w| -w / t).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn all_kinds() -> Vec<Schedule> {
        vec![
            Schedule::linear(),
            Schedule::polynomial(2.0).unwrap(),
            Schedule::polynomial(0.5).unwrap(),
            Schedule::geometric(GEOMETRIC_BETA_MIN, GEOMETRIC_BETA_MAX).unwrap(),
            Schedule::cosine(),
        ]
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(Schedule::linear().alpha(0.5).unwrap(), 0.5);
        assert_eq!(Schedule::cosine().alpha(0.0).unwrap(), 1.0);
        assert_eq!(Schedule::cosine().alpha(1.0).unwrap(), 0.0);
        let g = Schedule::geometric(1e-5, 20.0).unwrap();
        let a1 = g.alpha(1.0).unwrap();
        assert!((a1 - (-20.0f64).exp()).abs() <= 1e-12 * (-20.0f64).exp());
        assert!((g.alpha(0.0).unwrap() - (-1e-5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_time_is_a_domain_error() {
        let s = Schedule::linear();
        assert!(matches!(s.alpha(-0.1), Err(Error::Domain(_))));
        assert!(matches!(s.alpha(1.5), Err(Error::Domain(_))));
        assert!(matches!(s.alpha(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn derivative_examples() {
        for t in [0.1, 0.5, 0.9] {
            assert_eq!(Schedule::linear().alpha_prime(t).unwrap(), -1.0);
        }
        assert_eq!(Schedule::polynomial(2.0).unwrap().alpha_prime(0.5).unwrap(), -1.0);
    }

    #[test]
    fn ce_weight_examples() {
        assert_eq!(Schedule::linear().ce_weight(0.25).unwrap(), -4.0);
        assert!((Schedule::polynomial(3.0).unwrap().ce_weight(0.5).unwrap() + 6.0).abs() < 1e-12);
        let c = Schedule::cosine().ce_weight(0.5).unwrap();
        assert!((c + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ce_weight_singular_at_zero_without_shift() {
        assert!(matches!(Schedule::linear().ce_weight(0.0), Err(Error::Singular(_))));
        let shifted = Schedule::linear().with_shift(1e-4).unwrap();
        assert!(shifted.ce_weight(0.0).unwrap() < 0.0);
    }

    #[test]
    fn shift_bounds_alpha() {
        for s in all_kinds() {
            let s = s.with_shift(1e-3).unwrap();
            for i in 0..=100 {
                let a = s.alpha(i as f64 / 100.0).unwrap();
                assert!((1e-3 - 1e-15..=1.0 - 1e-3 + 1e-15).contains(&a), "{s}: {a}");
            }
        }
        assert!(Schedule::linear().with_shift(0.02).is_err());
    }

    #[test]
    fn log_snr_examples() {
        let s = Schedule::linear();
        assert_eq!(s.log_snr(0.5).unwrap(), 0.0);
        assert!((s.log_snr(0.9).unwrap() - (1.0f64 / 9.0).ln()).abs() < 1e-12);
        assert!((s.log_snr_inv(s.log_snr(0.37).unwrap()).unwrap() - 0.37).abs() < 1e-9);
        assert!(matches!(s.log_snr(0.0), Err(Error::Domain(_))));
        assert!(matches!(s.log_snr(1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn log_snr_round_trip_all_kinds() {
        for s in all_kinds() {
            for shift in [0.0, 1e-4] {
                let s = s.with_shift(shift).unwrap();
                for i in 1..20 {
                    let t = i as f64 / 20.0;
                    let back = s.log_snr_inv(s.log_snr(t).unwrap()).unwrap();
                    assert!((back - t).abs() < 1e-9, "{s} t={t} back={back}");
                }
            }
        }
    }

    #[test]
    fn display_parse_round_trip() {
        for s in all_kinds() {
            let s = s.with_shift(1e-4).unwrap();
            let back: Schedule = s.to_string().parse().unwrap();
            assert_eq!(back, s);
        }
        assert!("quadratic".parse::<Schedule>().is_err());
        assert!("polynomial:-1".parse::<Schedule>().is_err());
    }

    #[test]
    fn vector_schedule_examples() {
        let v = VectorSchedule::new(vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(v.alpha(0.5).unwrap(), vec![0.5, 0.5, 0.5]);
        let v = VectorSchedule::new(vec![2.0, 1.0]).unwrap();
        assert_eq!(v.ce_weight(0.5).unwrap(), vec![-4.0, -2.0]);
        let v = VectorSchedule::new(vec![1.5]).unwrap();
        assert!((v.alpha(0.25).unwrap()[0] - 0.875).abs() < 1e-15);
        assert!(VectorSchedule::new(vec![1.0, 0.0]).is_err());
        assert!(VectorSchedule::new(vec![-1.0]).is_err());
    }

    #[test]
    fn vector_schedule_endpoints() {
        let v = VectorSchedule::new(vec![0.3, 1.0, 4.0]).unwrap();
        assert!(v.alpha(0.0).unwrap().iter().all(|&a| a == 1.0));
        assert!(v.alpha(1.0).unwrap().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn equal_exponents_match_polynomial() {
        let w = 1.7;
        let v = VectorSchedule::uniform(4, w).unwrap();
        let p = Schedule::polynomial(w).unwrap();
        for i in 1..50 {
            let t = i as f64 / 50.0;
            for a in v.alpha(t).unwrap() {
                assert_eq!(a, p.alpha(t).unwrap());
            }
            for d in v.alpha_prime(t).unwrap() {
                assert_eq!(d, p.alpha_prime(t).unwrap());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn derivative_matches_central_differences(t in 0.01f64..0.99, shift in prop::sample::select(vec![0.0, 1e-4])) {
            for s in all_kinds() {
                let s = s.with_shift(shift).unwrap();
                let h = 1e-6;
                let fd = (s.alpha(t + h).unwrap() - s.alpha(t - h).unwrap()) / (2.0 * h);
                let an = s.alpha_prime(t).unwrap();
                prop_assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-8), "{} t={} fd={} an={}", s, t, fd, an);
            }
        }

        #[test]
        fn weight_times_survivor_is_derivative(t in 0.001f64..0.999) {
            for s in all_kinds() {
                let w = s.ce_weight(t).unwrap();
                let lhs = w * (1.0 - s.alpha(t).unwrap());
                let rhs = s.alpha_prime(t).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
                prop_assert!(w < 0.0);
            }
        }

        #[test]
        fn log_snr_decreases(a in 0.001f64..0.999, b in 0.001f64..0.999) {
            prop_assume!((a - b).abs() > 1e-6);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            for s in all_kinds() {
                prop_assert!(s.log_snr(lo).unwrap() > s.log_snr(hi).unwrap());
                prop_assert!((s.log_snr_inv(s.log_snr(lo).unwrap()).unwrap() - lo).abs() < 1e-9);
            }
        }
    }
}
