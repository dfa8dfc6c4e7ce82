//! Adam optimiser with bias correction.

use super::Tensor;
use crate::error::{Error, Result};

/// Optimiser state for one parameter group. Moment buffers are zero at step 0
/// and the step counter increments by exactly one per update.
#[derive(Debug)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }
}

/// One Adam update over `params`, in place. Every parameter must carry a
/// populated gradient; gradients are cleared afterwards.
pub fn adam_step(params: &[Tensor], state: &mut AdamState) -> Result<()> {
    if state.first_moment.is_empty() {
        for p in params {
            state.first_moment.push(vec![0.0; p.len()]);
            state.second_moment.push(vec![0.0; p.len()]);
        }
    }
    // Validate before mutating anything so a failed step has no effect.
    let mut grads = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        match p.grad() {
            Some(g) => grads.push(g),
            None => {
                let name = p.name().unwrap_or_else(|| format!("param[{i}]"));
                return Err(Error::MissingGrad(name));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter().zip(&grads).zip(
        state
            .first_moment
            .iter_mut()
            .zip(state.second_moment.iter_mut()),
    ) {
        for (mi, gi) in m.iter_mut().zip(g.iter()) {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * gi;
        }
        for (vi, gi) in v.iter_mut().zip(g.iter()) {
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * gi * gi;
        }
        let (lr, eps) = (state.lr, state.eps);
        p.apply_update(|i, value| {
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            value - lr * mhat / (vhat.sqrt() + eps)
        });
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_sign() {
        let p = Tensor::param(&[2], vec![1.0, -1.0], "p").unwrap();
        let loss = p.mul(&Tensor::new(&[2], vec![3.0, -2.0]).unwrap()).unwrap().sum();
        loss.backward().unwrap();
        let mut st = AdamState::new(0.1);
        adam_step(&[p.clone()], &mut st).unwrap();
        let d = p.data();
        assert!((d[0] - (1.0 - 0.1)).abs() < 1e-6, "moved by -lr*sign(g)");
        assert!((d[1] - (-1.0 + 0.1)).abs() < 1e-6);
        assert!(p.grad().is_none(), "grads cleared");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_param_is_unchanged() {
        let p = Tensor::param(&[1], vec![4.0], "p").unwrap();
        let q = Tensor::param(&[1], vec![2.0], "q").unwrap();
        // p enters the loss multiplied by zero: gradient present but zero.
        let loss = p.mul_scalar(0.0).add(&q.square()).unwrap().sum();
        loss.backward().unwrap();
        let mut st = AdamState::new(0.1);
        adam_step(&[p.clone(), q.clone()], &mut st).unwrap();
        assert_eq!(p.data(), vec![4.0]);
        assert!(q.data()[0] < 2.0);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let p = Tensor::param(&[1], vec![1.0], "orphan").unwrap();
        let mut st = AdamState::new(0.1);
        let err = adam_step(&[p], &mut st).unwrap_err();
        assert!(err.to_string().contains("orphan"));
    }

    #[test]
    fn lr_zero_is_noop() {
        let p = Tensor::param(&[1], vec![3.0], "p").unwrap();
        let loss = p.square();
        loss.backward().unwrap();
        let mut st = AdamState::new(0.0);
        adam_step(&[p.clone()], &mut st).unwrap();
        assert_eq!(p.data(), vec![3.0]);
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = (w-5)^2, w0 = 0, lr = 0.1 converges to 5 within 2000 steps
        let w = Tensor::param(&[1], vec![0.0], "w").unwrap();
        let mut st = AdamState::new(0.1);
        for _ in 0..2000 {
            let loss = w.add_scalar(-5.0).square();
            loss.backward().unwrap();
            adam_step(&[w.clone()], &mut st).unwrap();
        }
        assert!((w.data()[0] - 5.0).abs() < 1e-3, "w = {}", w.data()[0]);
    }
}
