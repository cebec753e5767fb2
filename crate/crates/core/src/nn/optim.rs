//! Adam and the half-period cosine learning-rate schedule.

use super::model::ParamSet;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        let zeros = |p: &ParamSet<F>| p.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect();
        AdamState {
            m: zeros(params),
            v: zeros(params),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. The gradients are checked before any
/// parameter is touched, so a failed step leaves everything unchanged.
pub fn adam_step<F: Scalar>(
    state: &mut AdamState<F>,
    params: &mut ParamSet<F>,
    grads: &[Tensor<F>],
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients / {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.names.iter().zip(&params.tensors).zip(grads) {
        if g.shape != p.shape {
            return Err(Error::Shape(format!("gradient shape for {name}")));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (fb1, fb2) = (F::of(b1), F::of(b2));
    let (g1, g2) = (F::of(1.0 - b1), F::of(1.0 - b2));
    let (fc1, fc2) = (F::of(c1), F::of(c2));
    let (flr, feps) = (F::of(lr), F::of(state.eps));
    for (i, g) in grads.iter().enumerate() {
        let p = &mut params.tensors[i].data;
        let m = &mut state.m[i].data;
        let v = &mut state.v[i].data;
        for j in 0..p.len() {
            let gj = g.data[j];
            m[j] = fb1 * m[j] + g1 * gj;
            v[j] = fb2 * v[j] + g2 * gj * gj;
            let m_hat = m[j] / fc1;
            let v_hat = v[j] / fc2;
            p[j] = p[j] - flr * m_hat / (v_hat.sqrt() + feps);
        }
    }
    Ok(())
}

/// `eta0 * 0.5 * (1 + cos(pi * t / T))`.
pub fn cosine_lr(t: u64, total: u64, eta0: f64) -> Result<f64> {
    if t > total {
        return Err(Error::OutOfRange(format!("step {t} beyond schedule length {total}")));
    }
    if total == 0 {
        return Ok(eta0);
    }
    Ok(eta0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::default();
        p.push("theta", Tensor::new(vec![1], vec![v]));
        p
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = single(0.7);
        let mut s = AdamState::new(&p);
        adam_step(&mut s, &mut p, &[Tensor::zeros(&[1])], 0.1).unwrap();
        assert_eq!(p.tensors[0].data[0], 0.7);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [0.003, -2.0, 50.0] {
            let mut p = single(1.0);
            let mut s = AdamState::new(&p);
            adam_step(&mut s, &mut p, &[Tensor::new(vec![1], vec![g])], 0.01).unwrap();
            let delta = (p.tensors[0].data[0] - 1.0).abs();
            let want = 0.01 * g.abs() / (g.abs() + 1e-8);
            assert!((delta - want).abs() < 1e-12, "{delta} vs {want}");
        }
    }

    #[test]
    fn doubling_gradients_barely_changes_first_update() {
        let run = |g: f64| {
            let mut p = single(0.0);
            let mut s = AdamState::new(&p);
            adam_step(&mut s, &mut p, &[Tensor::new(vec![1], vec![g])], 0.05).unwrap();
            p.tensors[0].data[0]
        };
        let (a, b) = (run(0.4), run(0.8));
        assert!(((a - b) / a).abs() < 1e-6);
    }

    #[test]
    fn minimizes_square() {
        let mut p = single(1.0);
        let mut s = AdamState::new(&p);
        let mut reached = None;
        for step in 0..500 {
            let th = p.tensors[0].data[0];
            if th.abs() < 1e-3 {
                reached = Some(step);
                break;
            }
            adam_step(&mut s, &mut p, &[Tensor::new(vec![1], vec![2.0 * th])], 0.1).unwrap();
        }
        assert!(reached.is_some(), "theta = {}", p.tensors[0].data[0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(1.0);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut s, &mut p, &[Tensor::new(vec![1], vec![f64::NAN])], 0.1);
        assert!(matches!(err, Err(Error::NonFiniteGradient(ref n)) if n == "theta"));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 0.1).unwrap(), 0.1);
        assert!(cosine_lr(100, 100, 0.1).unwrap().abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.1).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.1).is_err());
        let lrs: Vec<f64> = (0..=100).map(|t| cosine_lr(t, 100, 0.1).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
