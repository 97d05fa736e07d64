//! AdamW with decoupled weight decay, global-norm gradient clipping and a
//! linear-warmup / cosine-decay learning-rate schedule (decay target 0).

use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Warmup length as a fraction of `total_steps`; used when
    /// `warmup_steps` is not set explicitly.
    pub warmup_ratio: f64,
    /// Explicit warmup step count, overriding the ratio form.
    pub warmup_steps: Option<usize>,
    pub total_steps: usize,
    pub clip_norm: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            warmup_ratio: 0.3333,
            warmup_steps: None,
            total_steps: 1,
            clip_norm: 1.0,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn warmup_len(&self) -> usize {
        self.warmup_steps
            .unwrap_or((self.warmup_ratio * self.total_steps as f64).floor() as usize)
            .min(self.total_steps)
    }

    /// Learning rate applied at optimizer step `step` (1-indexed; the step
    /// counter is incremented before the lookup). `scheduled_lr(0) == 0`
    /// and `scheduled_lr(total_steps) == 0` by construction.
    pub fn scheduled_lr(&self, step: usize) -> f64 {
        let w = self.warmup_len();
        if step <= w && w > 0 {
            return self.lr * step as f64 / w as f64;
        }
        if self.total_steps <= w {
            return self.lr;
        }
        let span = (self.total_steps - w) as f64;
        let progress = ((step - w) as f64 / span).min(1.0);
        self.lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Per-parameter moment state plus the step counter.
pub struct OptimizerState {
    pub cfg: OptimConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(cfg: OptimConfig, param_sizes: &[usize]) -> Self {
        OptimizerState {
            cfg,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One AdamW step over parallel slices. `trainable[i] == false` skips
    /// parameter `i` entirely (freeze semantics). Gradients of trainable
    /// parameters are clipped in place by global norm first. Returns the
    /// learning rate that was applied.
    pub fn step(
        &mut self,
        params: &mut [Vec<f64>],
        grads: &mut [Vec<f64>],
        trainable: &[bool],
    ) -> f64 {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), trainable.len());

        let norm = global_norm(grads, trainable);
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            let s = self.cfg.clip_norm / norm;
            for (g, &t) in grads.iter_mut().zip(trainable) {
                if t {
                    for v in g.iter_mut() {
                        *v *= s;
                    }
                }
            }
        }

        self.step += 1;
        let lr = self.cfg.scheduled_lr(self.step);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);

        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            let (p, g) = (&mut params[i], &grads[i]);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * (mh / (vh.sqrt() + self.cfg.eps) + self.cfg.weight_decay * p[j]);
            }
        }
        lr
    }
}

fn global_norm(grads: &[Vec<f64>], trainable: &[bool]) -> f64 {
    let mut acc = 0.0;
    for (g, &t) in grads.iter().zip(trainable) {
        if t {
            for v in g {
                acc += v * v;
            }
        }
    }
    acc.sqrt()
}
