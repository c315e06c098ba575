//! Learning-rate schedule, global-norm clipping, and AdamW.

use std::f64::consts::PI;

use super::config::TrainConfig;

/// Linear warmup from 0 to `lr`, then cosine decay to `lr_min` at
/// `total_steps`; flat at `lr_min` afterwards.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let (lr, lr_min) = (config.lr, config.lr_min);
    if step < config.warmup_steps {
        return lr * step as f64 / config.warmup_steps as f64;
    }
    if step >= config.total_steps {
        return lr_min;
    }
    let progress = (step - config.warmup_steps) as f64 / (config.total_steps - config.warmup_steps) as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (PI * progress).cos())
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= scale;
        }
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: &TrainConfig) -> Self {
        AdamW {
            beta1: config.betas[0],
            beta2: config.betas[1],
            eps: config.eps,
            weight_decay: config.weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of `params` against `grads` (aligned tensor by tensor).
    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter tensor");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps) + self.weight_decay * *pi;
                *pi -= lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 0.0);
        assert!((lr_at(50, &c) - 5e-5).abs() < 1e-18);
        assert!((lr_at(100, &c) - 1e-4).abs() < 1e-18);
        assert!((lr_at(2000, &c) - 1e-6).abs() < 1e-18);
        assert!((lr_at(1050, &c) - (1e-4 + 1e-6) / 2.0).abs() < 1e-12);
        assert_eq!(lr_at(5000, &c), 1e-6);
        for s in 100..2000 {
            assert!(lr_at(s + 1, &c) <= lr_at(s, &c));
        }
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut grads = vec![vec![3.0, 4.0], vec![12.0]];
        let before = clip_global_norm(&mut grads, 1.0);
        assert_eq!(before, 13.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-9);

        let mut small = vec![vec![0.1, 0.2]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![vec![0.1, 0.2]]);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut opt = AdamW::new(&TrainConfig::default());
        let mut p = vec![0.3, -1.2, 7.5];
        let original = p.clone();
        opt.update(vec![&mut p], &[vec![1.0, -2.0, 0.5]], 0.0);
        assert_eq!(p, original);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut config = TrainConfig::default();
        config.weight_decay = 0.0;
        let mut opt = AdamW::new(&config);
        let mut p = vec![1.0, 1.0];
        opt.update(vec![&mut p], &[vec![0.5, -3.0]], 0.01);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] - 1.01).abs() < 1e-9);
    }
}
