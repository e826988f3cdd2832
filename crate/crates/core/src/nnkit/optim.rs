use crate::{Error, Result};

/// Adam moments plus the hyperparameters that drive them.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
}

impl OptimState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            lr,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-12,
            warmup_steps: 0,
            clip_norm: 1.0,
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn with_warmup(mut self, warmup_steps: u64) -> Self {
        self.warmup_steps = warmup_steps;
        self
    }

    pub fn with_clip(mut self, clip_norm: f64) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// Learning rate for the upcoming step, ramped linearly during warmup.
    pub fn current_lr(&self) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((self.step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to the gradient (1 when clipping was inactive).
    pub clip_scale: f64,
    pub lr: f64,
}

pub fn global_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One bias-corrected Adam update with global-norm clipping and linear
/// warmup. No weight decay.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimState) -> Result<AdamStats> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(format!(
            "adam lengths differ: params {}, grads {}, m {}, v {}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient coordinate {i} is {} at optimizer step {}",
            grads[i], state.step
        )));
    }
    let grad_norm = global_norm(grads);
    let clip_scale = if state.clip_norm > 0.0 && grad_norm > state.clip_norm {
        state.clip_norm / grad_norm
    } else {
        1.0
    };
    let lr = state.current_lr();
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g * clip_scale;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(AdamStats {
        grad_norm,
        clip_scale,
        lr,
    })
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: Vec<f64>,
    pub decay: f64,
}

impl EmaState {
    pub fn new(params: &[f64], decay: f64) -> Self {
        Self {
            shadow: params.to_vec(),
            decay,
        }
    }

    /// `shadow ← decay · shadow + (1 − decay) · params`.
    pub fn update(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::shape(format!(
                "ema shadow has {} entries, params {}",
                self.shadow.len(),
                params.len()
            )));
        }
        let d = self.decay;
        for (s, &p) in self.shadow.iter_mut().zip(params) {
            *s = d * *s + (1.0 - d) * p;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut st = OptimState::new(3, 0.1);
        adam_step(&mut p, &[0.0; 3], &mut st).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_betas_give_sign_step() {
        let g = [0.3, -0.02, 0.5];
        let mut p = vec![0.0; 3];
        let mut st = OptimState::new(3, 0.01).with_betas(0.0, 0.0).with_clip(0.0);
        adam_step(&mut p, &g, &mut st).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            let expect = -0.01 * gi / (gi.abs() + 1e-12);
            assert!((pi - expect).abs() < 1e-15);
            assert!((pi + 0.01 * gi.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn clipping_scales_gradient() {
        let g = [6.0, 8.0];
        let mut p = vec![0.0; 2];
        let mut st = OptimState::new(2, 0.1).with_clip(1.0);
        let stats = adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(stats.grad_norm, 10.0);
        assert!((stats.clip_scale - 0.1).abs() < 1e-15);
        assert!((st.m[0] - (1.0 - 0.9) * 0.6).abs() < 1e-15);
        assert!((st.m[1] - (1.0 - 0.9) * 0.8).abs() < 1e-15);
    }

    #[test]
    fn nonfinite_gradient_rejected() {
        let mut p = vec![0.0; 2];
        let mut st = OptimState::new(2, 0.1);
        let err = adam_step(&mut p, &[1.0, f64::NAN], &mut st).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn warmup_is_linear() {
        let mut st = OptimState::new(1, 1.0).with_warmup(4);
        let mut p = vec![0.0];
        let mut lrs = Vec::new();
        for _ in 0..6 {
            lrs.push(adam_step(&mut p, &[1.0], &mut st).unwrap().lr);
        }
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn ema_cases() {
        let mut e = EmaState::new(&[0.0, 4.0], 0.0);
        e.update(&[2.0, 2.0]).unwrap();
        assert_eq!(e.shadow, vec![2.0, 2.0]);
        let mut e = EmaState::new(&[0.0, 4.0], 1.0);
        e.update(&[2.0, 2.0]).unwrap();
        assert_eq!(e.shadow, vec![0.0, 4.0]);
        let mut e = EmaState::new(&[0.0], 0.5);
        e.update(&[2.0]).unwrap();
        assert_eq!(e.shadow, vec![1.0]);
        assert!(e.update(&[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn clipped_direction_invariant_to_loss_scale(
            g in proptest::collection::vec(-5.0f64..5.0, 2..12),
            c in 1.5f64..50.0,
        ) {
            let norm = global_norm(&g);
            prop_assume!(norm > 1.0);
            let scaled: Vec<f64> = g.iter().map(|v| v * c).collect();
            let mut s1 = OptimState::new(g.len(), 0.1);
            let mut s2 = OptimState::new(g.len(), 0.1);
            let mut p1 = vec![0.0; g.len()];
            let mut p2 = vec![0.0; g.len()];
            adam_step(&mut p1, &g, &mut s1).unwrap();
            adam_step(&mut p2, &scaled, &mut s2).unwrap();
            for (a, b) in s1.m.iter().zip(&s2.m) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn ema_stays_between_shadow_and_params(
            pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..16),
            decay in 0.0f64..=1.0,
        ) {
            let shadow: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let params: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let mut e = EmaState::new(&shadow, decay);
            e.update(&params).unwrap();
            for ((s, p), n) in shadow.iter().zip(&params).zip(&e.shadow) {
                let lo = s.min(*p) - 1e-12;
                let hi = s.max(*p) + 1e-12;
                prop_assert!(*n >= lo && *n <= hi);
            }
        }
    }
}
