//! Adam with decoupled weight decay, plus the linear-warmup schedule.

use crate::error::{Result, VawiError};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]], lr: f64, weight_decay: f64) -> Self {
        AdamState {
            step_count: 0,
            first_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }
}

/// One Adam update. Weight decay is applied as `p ← p − lr·wd·p` before the
/// moment update; the moments never see it.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(VawiError::dim(
            "adam_step",
            &[params.len(), state.first_moment.len()],
            &[grads.len()],
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.shape() != g.shape() {
            return Err(VawiError::dim("adam_step", p.shape(), g.shape()));
        }
        if p.shape() != m.shape() {
            return Err(VawiError::dim("adam_step", p.shape(), m.shape()));
        }
    }

    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (lr, b1, b2, eps, wd) = (state.lr, state.beta1, state.beta2, state.epsilon, state.weight_decay);

    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first_moment[i].data_mut();
        let pd = p.data_mut();
        for j in 0..pd.len() {
            pd[j] -= lr * wd * pd[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
        }
        let v = state.second_moment[i].data_mut();
        let m = state.first_moment[i].data();
        for j in 0..pd.len() {
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            pd[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Number of warmup steps for a run of `total_steps`.
pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    (warmup_fraction * total_steps as f64).round() as usize
}

/// Learning rate at 1-based `step`: linear ramp `lr·step/warmup` during warmup,
/// constant afterwards.
pub fn scheduled_lr(base_lr: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        base_lr
    } else {
        base_lr * step as f64 / warmup as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let mut p = Tensor::row_vector(vec![0.5, -1.25, 3.0]);
        let before = p.clone();
        let mut st = AdamState::new(&[&[1, 3]], 1e-3, 0.0);
        adam_step(&mut [&mut p], &[Tensor::zeros(&[1, 3])], &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let lr = 2e-5;
        for g in [0.5, -3.0, 1e-3] {
            let mut p = Tensor::scalar(1.0);
            let mut st = AdamState::new(&[&[]], lr, 0.0);
            adam_step(&mut [&mut p], &[Tensor::scalar(g)], &mut st).unwrap();
            let delta = (p.item() - 1.0).abs();
            // bias-corrected first step: m_hat = g, v_hat = g^2
            let expected = lr * g.abs() / (g.abs() + st.epsilon);
            assert!((delta - expected).abs() < expected * 1e-9, "{delta} vs {expected}");
            assert!((delta - lr).abs() < lr * 2e-5);
            assert_eq!((p.item() - 1.0).signum(), -g.signum());
        }
    }

    #[test]
    fn decay_only_closed_form() {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new(&[&[]], 2e-5, 0.01);
        adam_step(&mut [&mut p], &[Tensor::scalar(0.0)], &mut st).unwrap();
        assert!((p.item() - 0.9999998).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = Tensor::zeros(&[2, 2]);
        let mut st = AdamState::new(&[&[2, 2]], 1e-3, 0.0);
        let err = adam_step(&mut [&mut p], &[Tensor::zeros(&[2, 3])], &mut st).unwrap_err();
        assert!(matches!(err, VawiError::Dimension { .. }));
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn warmup_schedule_table() {
        let base = 1e-3;
        let w = warmup_steps(100, 0.06);
        assert_eq!(w, 6);
        for step in 1..=6 {
            let expected = base * step as f64 / 6.0;
            assert_eq!(scheduled_lr(base, step, w), expected);
        }
        assert_eq!(scheduled_lr(base, 3, w), 0.5 * base);
        for step in 7..=100 {
            assert_eq!(scheduled_lr(base, step, w), base);
        }
        assert_eq!(scheduled_lr(base, 1, 0), base);
    }
}
