use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub hyper: AdamHyper,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// State for parameters of the given lengths.
    pub fn new(hyper: AdamHyper, lens: &[usize]) -> Self {
        Self {
            hyper,
            step: 0,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter with its gradient.
    pub fn step(&mut self, params: &mut [&mut Array], grads: &[Array]) -> Result<()> {
        self.step_with_lr(params, grads, self.hyper.lr)
    }

    pub fn step_with_lr(&mut self, params: &mut [&mut Array], grads: &[Array], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("{} params, {} grads, state for {}", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw_step", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adamw_step" });
            }
        }
        self.step += 1;
        let AdamHyper {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *theta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(opt: &mut AdamW, theta: &mut f64, g: f64) {
        let mut p = Array::vector(vec![*theta]);
        opt.step(&mut [&mut p], &[Array::vector(vec![g])]).unwrap();
        *theta = p.data()[0];
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = AdamW::new(AdamHyper::default(), &[1]);
        let mut theta = 0.0;
        scalar_step(&mut opt, &mut theta, 0.5);
        assert!((theta + 1e-4 * (0.5 / (0.5 + 1e-8))).abs() < 1e-20);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = AdamW::new(AdamHyper::default(), &[3]);
        let mut p = Array::vector(vec![1.0, -2.0, 3.0]);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[Array::zeros(&[3])]).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn quadratic_matches_closed_form_moments() {
        // m_t and v_t expanded as weighted sums of the gradient history
        let h = AdamHyper::default();
        let mut opt = AdamW::new(h, &[1]);
        let mut theta = 1.0;
        let mut reference = 1.0f64;
        let mut history = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * theta;
            scalar_step(&mut opt, &mut theta, g);
            history.push(2.0 * reference);
            let m: f64 = history
                .iter()
                .enumerate()
                .map(|(i, g)| (1.0 - h.beta1) * h.beta1.powi(t - 1 - i as i32) * g)
                .sum();
            let v: f64 = history
                .iter()
                .enumerate()
                .map(|(i, g)| (1.0 - h.beta2) * h.beta2.powi(t - 1 - i as i32) * g * g)
                .sum();
            let m_hat = m / (1.0 - h.beta1.powi(t));
            let v_hat = v / (1.0 - h.beta2.powi(t));
            reference -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
            assert!((theta - reference).abs() <= 1e-12, "step {t}: {theta} vs {reference}");
        }
    }

    #[test]
    fn zero_decay_equals_plain_adam() {
        let h = AdamHyper {
            lr: 3e-3,
            ..AdamHyper::default()
        };
        let mut opt = AdamW::new(h, &[4]);
        let mut p = Array::vector(vec![0.3, -1.2, 2.0, 0.0]);
        let (mut m, mut v, mut q) = (vec![0.0; 4], vec![0.0; 4], p.data().to_vec());
        for t in 1..=20 {
            let g: Vec<f64> = q.iter().map(|x| x.sin() + 0.1 * t as f64).collect();
            opt.step(&mut [&mut p], &[Array::vector(g.clone())]).unwrap();
            for i in 0..4 {
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
                v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
                let mh = m[i] / (1.0 - h.beta1.powi(t));
                let vh = v[i] / (1.0 - h.beta2.powi(t));
                q[i] -= h.lr * mh / (vh.sqrt() + h.eps);
            }
            for (a, b) in p.data().iter().zip(&q) {
                assert!((a - b).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn decay_shrinks_toward_zero() {
        let h = AdamHyper {
            weight_decay: 0.1,
            ..AdamHyper::default()
        };
        let mut opt = AdamW::new(h, &[1]);
        let mut theta = 2.0;
        scalar_step(&mut opt, &mut theta, 0.0);
        assert!((theta - (2.0 - 1e-4 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut opt = AdamW::new(AdamHyper::default(), &[1]);
        let mut p = Array::vector(vec![0.0]);
        assert!(opt.step(&mut [&mut p], &[Array::vector(vec![f64::NAN])]).is_err());
        assert_eq!(opt.steps(), 0);
    }
}
