//! Adam with bias correction over flat parameter groups.

/// Optimizer constants. `eps` sits outside the square root:
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 0.05,
        }
    }
}

/// First/second moment buffers for a fixed list of parameter groups.
/// `t` counts completed steps and increments by exactly one per step.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update over all groups. `grads[i]` of `None` means a zero
    /// gradient for group `i`; with a fresh state that leaves the group's
    /// parameters untouched.
    pub fn step(
        &mut self,
        params: &mut [&mut Vec<f64>],
        grads: &[Option<&[f64]>],
        hyper: AdamHyper,
    ) {
        assert_eq!(params.len(), self.m.len(), "adam group count");
        assert_eq!(grads.len(), self.m.len(), "adam gradient count");
        self.t += 1;
        let bc1 = 1.0 - hyper.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hyper.beta2.powi(self.t as i32);
        for (gi, p) in params.iter_mut().enumerate() {
            debug_assert_eq!(p.len(), self.m[gi].len(), "adam group size");
            let m = &mut self.m[gi];
            let v = &mut self.v[gi];
            for i in 0..p.len() {
                let g = grads[gi].map_or(0.0, |g| g[i]);
                m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
                v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULT_HYPER: AdamHyper = AdamHyper {
        lr: 0.001,
        beta1: 0.9,
        beta2: 0.98,
        eps: 0.05,
    };

    #[test]
    fn zero_gradient_fresh_state_is_identity_on_params() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut state = AdamState::new(&[3]);
        for _ in 0..5 {
            state.step(&mut [&mut p], &[None], DEFAULT_HYPER);
        }
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(state.steps(), 5);
    }

    #[test]
    fn unit_gradient_first_step_magnitude() {
        // m_hat = v_hat = 1 after bias correction, so the step is
        // lr / (1 + eps) = 0.001 / 1.05.
        let mut p = vec![0.0];
        let mut state = AdamState::new(&[1]);
        state.step(&mut [&mut p], &[Some(&[1.0])], DEFAULT_HYPER);
        let want = 0.001 / 1.05;
        assert!((p[0] - (-want)).abs() < 1e-12, "step was {}", p[0]);
    }

    #[test]
    fn degenerate_betas_reduce_to_sign_sgd() {
        // With beta1 = beta2 = 0 every step is lr * g / (|g| + eps).
        let hyper = AdamHyper {
            lr: 0.001,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.05,
        };
        let g = -0.3;
        let mut p = vec![1.0];
        let mut state = AdamState::new(&[1]);
        state.step(&mut [&mut p], &[Some(&[g])], hyper);
        state.step(&mut [&mut p], &[Some(&[g])], hyper);
        let per_step = hyper.lr * g / (g.abs() + hyper.eps);
        assert!((p[0] - (1.0 - 2.0 * per_step)).abs() < 1e-15);
    }

    #[test]
    fn step_counter_increments_once_per_step() {
        let mut p = vec![0.0];
        let mut state = AdamState::new(&[1]);
        assert_eq!(state.steps(), 0);
        state.step(&mut [&mut p], &[Some(&[0.5])], DEFAULT_HYPER);
        assert_eq!(state.steps(), 1);
        state.step(&mut [&mut p], &[Some(&[0.5])], DEFAULT_HYPER);
        assert_eq!(state.steps(), 2);
    }
}
