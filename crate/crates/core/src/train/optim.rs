use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::tensor::Element;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    SgdNesterov {
        lr0: f64,
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        step: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn sgd(lr0: f64) -> Self {
        Optimizer::SgdNesterov {
            lr0,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }

    pub fn adam() -> Self {
        Optimizer::Adam {
            step: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn initial_lr(&self) -> f64 {
        match *self {
            Optimizer::SgdNesterov { lr0, .. } => lr0,
            Optimizer::Adam { step, .. } => step,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::SgdNesterov { .. } => "sgd-nesterov",
            Optimizer::Adam { .. } => "adam",
        }
    }
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape("optimizer", format!("{}: {} values vs {}", what, a, b)));
    }
    Ok(())
}

/// One Nesterov step with L2 weight decay folded into the gradient:
/// `g += wd * p; v = mu * v - lr * g; p += mu * v - lr * g`.
pub fn sgd_nesterov_step<T: Element>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_len("gradient", params.len(), grads.len())?;
    check_len("velocity", params.len(), velocity.len())?;
    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + wd * *p;
        *v = mu * *v - lr * g;
        *p += mu * *v - lr * g;
    }
    Ok(())
}

/// Bias-corrected Adam moments for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }
}

pub fn adam_step<T: Element>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    step: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check_len("gradient", params.len(), grads.len())?;
    check_len("moments", params.len(), state.m.len())?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - Float::powi(beta1, t);
    let c2 = 1.0 - Float::powi(beta2, t);
    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        let m_hat = m.to_f64() / c1;
        let v_hat = v.to_f64() / c2;
        *p -= T::from_f64(step * m_hat / (Float::sqrt(v_hat) + eps));
    }
    Ok(())
}

/// Per-tensor optimizer memory for one model.
#[derive(Clone, Debug)]
pub(crate) enum OptState<T> {
    Sgd(Vec<Vec<T>>),
    Adam(Vec<AdamState<T>>),
}

impl<T: Element> OptState<T> {
    pub fn new(opt: &Optimizer, sizes: impl Iterator<Item = usize>) -> Self {
        match opt {
            Optimizer::SgdNesterov { .. } => OptState::Sgd(sizes.map(|n| vec![T::zero(); n]).collect()),
            Optimizer::Adam { .. } => OptState::Adam(sizes.map(AdamState::new).collect()),
        }
    }

    /// Updates tensor `i` with learning rate `lr`; `decay` selects whether
    /// weight decay applies to it.
    pub fn step(
        &mut self,
        opt: &Optimizer,
        i: usize,
        params: &mut [T],
        grads: &[T],
        lr: f64,
        decay: bool,
    ) -> Result<()> {
        match (self, *opt) {
            (
                OptState::Sgd(vel),
                Optimizer::SgdNesterov {
                    momentum, weight_decay, ..
                },
            ) => {
                let wd = if decay { weight_decay } else { 0.0 };
                sgd_nesterov_step(params, grads, &mut vel[i], lr, momentum, wd)
            }
            (OptState::Adam(st), Optimizer::Adam { beta1, beta2, eps, .. }) => {
                adam_step(params, grads, &mut st[i], lr, beta1, beta2, eps)
            }
            _ => Err(Error::InvalidArgument(
                "optimizer state does not match optimizer".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_descent_without_momentum() {
        let mut p = [1.0f64, -2.0];
        let mut v = [0.0; 2];
        sgd_nesterov_step(&mut p, &[0.5, 1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, [0.95, -2.1]);
    }

    #[test]
    fn nesterov_two_steps_on_quadratic() {
        let mut p = [1.0f64];
        let mut v = [0.0];
        let g = [p[0]];
        sgd_nesterov_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] - 0.81).abs() < 1e-15 && (v[0] + 0.1).abs() < 1e-15);
        let g = [p[0]];
        sgd_nesterov_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] - 0.5751).abs() < 1e-15 && (v[0] + 0.171).abs() < 1e-15);
    }

    #[test]
    fn velocity_decays_without_gradient() {
        let mut p = [0.0f64];
        let mut v = [1.0];
        for k in 1..=5 {
            sgd_nesterov_step(&mut p, &[0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
            assert!((v[0] - 0.9f64.powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = [0.0f64; 2];
        let mut v = [0.0; 2];
        assert!(sgd_nesterov_step(&mut p, &[0.0], &mut v, 0.1, 0.9, 0.0).is_err());
        let mut st = AdamState::new(2);
        assert!(adam_step(&mut p, &[0.0; 3], &mut st, 1e-3, 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn adam_first_step_has_step_size_magnitude() {
        for g in [1e-3f64, 0.5, -7.0] {
            let mut p = [0.0f64];
            let mut st = AdamState::new(1);
            adam_step(&mut p, &[g], &mut st, 1e-3, 0.9, 0.999, 1e-8).unwrap();
            assert!((p[0].abs() - 1e-3).abs() < 1e-6, "{}", p[0]);
        }
    }

    #[test]
    fn adam_ignores_zero_gradients() {
        let mut p = [0.3f64, -1.0];
        let mut st = AdamState::new(2);
        for _ in 0..50 {
            adam_step(&mut p, &[0.0, 0.0], &mut st, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        }
        assert_eq!(p, [0.3, -1.0]);
    }

    #[test]
    fn adam_solves_scalar_quadratic() {
        let mut p = [1.0f64];
        let mut st = AdamState::new(1);
        for _ in 0..200 {
            let g = [p[0]];
            adam_step(&mut p, &g, &mut st, 0.05, 0.9, 0.999, 1e-8).unwrap();
        }
        assert!(p[0].abs() < 1e-2, "{}", p[0]);
    }
}
