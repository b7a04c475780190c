//! AdamW with decoupled weight decay, and parameter EMA.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.03,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

impl AdamW {
    /// One update:
    /// `θ ← θ − lr·λ·θ`, then `θ ← θ − lr·m̂/(√v̂ + eps)` with bias-corrected moments.
    pub fn step(&self, params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
        let n = params.len();
        if grads.len() != n || state.m.len() != n || state.v.len() != n {
            return Err(Error::InvalidArgument(format!(
                "shape mismatch: {n} params, {} grads, {} / {} moments",
                grads.len(),
                state.m.len(),
                state.v.len()
            )));
        }
        if !lr.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient or learning rate".into()));
        }
        state.step += 1;
        let k = state.step.min(i32::MAX as u64) as i32;
        let c1 = 1.0 - self.beta1.powi(k);
        let c2 = 1.0 - self.beta2.powi(k);
        let decay = 1.0 - lr * self.weight_decay;
        for i in 0..n {
            let g = grads[i];
            state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * g;
            state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = state.m[i] / c1;
            let v_hat = state.v[i] / c2;
            params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// `ema ← decay·ema + (1 − decay)·params`.
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) -> Result<()> {
    if ema.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "EMA has {} entries, params {}",
            ema.len(),
            params.len()
        )));
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidArgument(format!("EMA decay {decay} outside [0, 1]")));
    }
    if decay == 0.0 {
        ema.copy_from_slice(params);
        return Ok(());
    }
    for (e, &p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_by_hand() {
        // β = (0.9, 0.999), eps = 1e-8, λ = 0.1, lr = 0.01
        let opt = AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        };
        let mut p = [1.0, -2.0];
        let g = [0.5, -0.25];
        let mut s = AdamState::zeros(2);
        opt.step(&mut p, &g, &mut s, 0.01).unwrap();
        // m̂ = g, v̂ = g², so the Adam part is lr·g/(|g| + eps)
        let expect0 = 1.0 * (1.0 - 0.001) - 0.01 * 0.5 / (0.5 + 1e-8);
        let expect1 = -2.0 * (1.0 - 0.001) - 0.01 * -0.25 / (0.25 + 1e-8);
        assert!((p[0] - expect0).abs() < 1e-15);
        assert!((p[1] - expect1).abs() < 1e-15);
        assert_eq!(s.step, 1);
        assert!((s.m[0] - 0.05).abs() < 1e-15);
        assert!((s.v[1] - 0.001 * 0.0625).abs() < 1e-18);
    }

    #[test]
    fn zero_betas_reduce_to_normalized_step() {
        let opt = AdamW {
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-3,
            weight_decay: 0.0,
        };
        let mut p = [0.0, 0.0, 0.0];
        let g = [2.0, -0.5, 0.0];
        let mut s = AdamState::zeros(3);
        for _ in 0..3 {
            let before = p;
            opt.step(&mut p, &g, &mut s, 0.1).unwrap();
            for i in 0..3 {
                let expect = before[i] - 0.1 * g[i] / (g[i].abs() + 1e-3);
                assert!((p[i] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ema_decay_zero_copies() {
        let mut e = [1.0, 2.0];
        ema_update(&mut e, &[3.0, 4.0], 0.0).unwrap();
        assert_eq!(e, [3.0, 4.0]);
        ema_update(&mut e, &[5.0, 8.0], 0.5).unwrap();
        assert_eq!(e, [4.0, 6.0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut s = AdamState::zeros(1);
        let r = AdamW::default().step(&mut [0.0], &[f64::NAN], &mut s, 0.1);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
