//! Adam for the embedding network, plain SGD for the loss-head vectors, and
//! the step-decay learning-rate schedule.

use crate::error::{Error, Result};

fn check_grads(grads: &[&[f64]], params: &[&mut [f64]]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape(format!("{} gradient tensors for {} parameters", grads.len(), params.len())));
    }
    for (i, (g, p)) in grads.iter().zip(params).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Shape(format!("tensor {i}: gradient has {} values, parameter {}", g.len(), p.len())));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of tensor {i} at index {j}")));
        }
    }
    Ok(())
}

fn all_zero(grads: &[&[f64]]) -> bool {
    grads.iter().all(|g| g.iter().all(|v| *v == 0.0))
}

/// Adam moments for a fixed list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. A step whose gradients are all exactly
/// zero leaves both parameters and state untouched.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, lr: f64) -> Result<()> {
    check_grads(grads, params)?;
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
        return Err(Error::Shape("optimizer state does not match parameter shapes".into()));
    }
    if all_zero(grads) {
        return Ok(());
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// `p ← p − lr·g`.
pub fn sgd_step(params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
    check_grads(grads, params)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (pi, gi) in p.iter_mut().zip(g.iter()) {
            *pi -= lr * gi;
        }
    }
    Ok(())
}

/// `base · factor^floor(epoch / every)`.
pub fn lr_at_epoch(epoch: usize, base: f64, factor: f64, every: usize) -> f64 {
    if every == 0 {
        return base;
    }
    base * factor.powi((epoch / every) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(&[2], 0.9, 0.999, 1e-8);
        adam_step(&mut [&mut p], &[&[0.0, 0.0]], &mut st, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.t, 0);
        sgd_step(&mut [&mut p], &[&[0.0, 0.0]], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_adam_step_is_lr() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(&[1], 0.9, 0.999, 1e-8);
        adam_step(&mut [&mut p], &[&[1.0]], &mut st, 3e-4).unwrap();
        // m̂ = v̂ = 1 ⇒ Δ = −lr / (1 + ε)
        assert!((p[0] + 3e-4 / (1.0 + 1e-8)).abs() < 1e-18);
        assert!((p[0] + 3e-4).abs() < 1e-6 * 3e-4);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn constant_gradient_steps_approach_sign() {
        let (lr, g) = (1e-3, -0.37);
        let mut p = vec![0.0];
        let mut st = AdamState::new(&[1], 0.9, 0.999, 1e-8);
        let mut last = 0.0;
        for _ in 0..1000 {
            let before = p[0];
            adam_step(&mut [&mut p], &[&[g]], &mut st, lr).unwrap();
            last = p[0] - before;
        }
        // with constant g both bias-corrected moments equal g and g², so the
        // step is −lr·g/(|g| + ε)
        let expected = -lr * g / (g.abs() + 1e-8);
        assert!((last - expected).abs() < 1e-9, "{last} vs {expected}");
        assert!((last - lr).abs() < 1e-7);
    }

    #[test]
    fn sgd_arithmetic_and_scalar_oracle() {
        let mut p = vec![1.0];
        sgd_step(&mut [&mut p], &[&[2.0]], 0.1).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);

        let grads = [0.5, -1.0, 3.0, 0.25, -0.125];
        let mut p = vec![2.0, -1.0];
        let mut oracle = [2.0f64, -1.0];
        for g in grads {
            sgd_step(&mut [&mut p], &[&[g, 2.0 * g]], 0.05).unwrap();
            oracle[0] -= 0.05 * g;
            oracle[1] -= 0.05 * (2.0 * g);
        }
        assert_eq!(p, oracle.to_vec());
    }

    #[test]
    fn non_finite_grads_rejected_without_update() {
        let mut p = vec![1.0];
        let mut st = AdamState::new(&[1], 0.9, 0.999, 1e-8);
        assert!(matches!(adam_step(&mut [&mut p], &[&[f64::NAN]], &mut st, 0.1), Err(Error::NonFinite(_))));
        assert!(sgd_step(&mut [&mut p], &[&[f64::INFINITY]], 0.1).is_err());
        assert_eq!(p, vec![1.0]);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_at_epoch(0, 0.0003, 0.5, 10), 0.0003);
        assert!((lr_at_epoch(9, 0.0003, 0.5, 10) - 0.0003).abs() < 1e-18);
        assert!((lr_at_epoch(10, 0.0003, 0.5, 10) - 0.00015).abs() < 1e-18);
        assert!((lr_at_epoch(25, 0.0003, 0.5, 10) - 0.000075).abs() < 1e-18);
    }
}
