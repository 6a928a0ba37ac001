//! Decoupled-weight-decay adaptive-moment optimizer and the warmup +
//! cosine learning-rate schedule.

use crate::tensor::{Element, Tensor};

/// Per-parameter first/second moments plus the shared step counter.
pub struct AdamW<E: Element> {
    params: Vec<Tensor<E>>,
    moments: Vec<(Vec<E>, Vec<E>)>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: usize,
}

impl<E: Element> AdamW<E> {
    pub fn new(params: &[(String, Tensor<E>)], beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let params: Vec<Tensor<E>> = params.iter().map(|(_, p)| p.clone()).collect();
        let moments = params
            .iter()
            .map(|p| (vec![E::zero(); p.numel()], vec![E::zero(); p.numel()]))
            .collect();
        AdamW {
            params,
            moments,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// One bias-corrected update at learning rate `lr`. Parameters whose
    /// gradient is absent this step are skipped entirely (no moment decay,
    /// no weight decay), mirroring the none-grad convention.
    pub fn step(&mut self, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (E::of(self.beta1), E::of(self.beta2));
        let one_m_b1 = E::of(1.0 - self.beta1);
        let one_m_b2 = E::of(1.0 - self.beta2);
        let lr_e = E::of(lr);
        let wd = E::of(self.weight_decay);
        let eps = E::of(self.eps);
        let inv_bc1 = E::of(1.0 / bc1);
        let inv_bc2 = E::of(1.0 / bc2);

        for (p, (m, v)) in self.params.iter().zip(self.moments.iter_mut()) {
            let Some(grad) = p.grad() else { continue };
            p.with_data_mut(|data| {
                for i in 0..data.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + one_m_b1 * g;
                    v[i] = b2 * v[i] + one_m_b2 * g * g;
                    let m_hat = m[i] * inv_bc1;
                    let v_hat = v[i] * inv_bc2;
                    // decoupled decay: applied directly to the parameter,
                    // outside the adaptive term
                    data[i] = data[i] - lr_e * (m_hat / (v_hat.sqrt() + eps) + wd * data[i]);
                }
            });
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.clear_grad();
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<E: Element>(params: &[(String, Tensor<E>)], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, p) in params {
        if let Some(g) = p.grad() {
            for v in g {
                let v = v.to64();
                sq += v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = E::of(max_norm / norm);
        for (_, p) in params {
            if let Some(g) = p.grad() {
                let scaled: Vec<E> = g.iter().map(|&v| v * scale).collect();
                p.clear_grad();
                p.accum_grad_public(&scaled);
            }
        }
    }
    norm
}

/// Linear warmup to `base`, then cosine decay to exactly 0 at
/// `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base: f64, warmup_steps: usize, total_steps: usize) -> Self {
        CosineSchedule {
            base,
            warmup_steps,
            total_steps,
        }
    }

    /// Learning rate used for update number `step` (0-based).
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
