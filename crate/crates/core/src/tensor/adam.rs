use serde::{Deserialize, Serialize};

use super::ParamVector;
use crate::error::{Result, RftfError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, in place.
///
/// A non-finite gradient aborts before anything is modified.
pub fn adam_step(
    params: &mut ParamVector,
    grad: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(RftfError::Config(format!(
            "adam: params {} / gradient {} / state {} lengths differ",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(RftfError::numerical(
            format!("adam step {}, parameter {i}", state.step + 1),
            format!("non-finite gradient {}", grad[i]),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(grad)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Segment;

    fn scalar(v: f64) -> ParamVector {
        ParamVector::from_parts(
            vec![Segment {
                name: "x".into(),
                offset: 0,
                shape: vec![1],
            }],
            vec![v],
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = scalar(1.25);
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[0.0], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p.values()[0], 1.25);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(0.0);
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &AdamConfig::with_lr(0.1)).unwrap();
        // m_hat = 1, v_hat = 1 => step = 0.1 / (1 + 1e-8)
        assert!((p.values()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = scalar(0.3);
            let mut s = AdamState::new(1);
            for k in 0..50 {
                let g = (k as f64 * 0.37).sin();
                adam_step(&mut p, &[g], &mut s, &AdamConfig::default()).unwrap();
            }
            p.values()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_aborts_with_step_index() {
        let mut p = scalar(0.3);
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &AdamConfig::default()).unwrap();
        let before = p.clone();
        let err = adam_step(&mut p, &[f64::INFINITY], &mut s, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("step 2"), "{err}");
        assert_eq!(p, before);
        assert_eq!(s.step(), 1);
    }
}
