//! AdamW and SGD-with-momentum with the two learning-rate schedules the
//! pipeline uses: linear warmup + linear decay (pretraining) and linear
//! warmup + step decay (detection finetuning).

use std::collections::BTreeMap;

use crate::tensor::{Real, Tensor};

/// Linear warmup to `peak` over `warmup` steps, then linear decay to zero at
/// `total`.
pub fn warmup_linear_decay(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    peak * (1.0 - progress.min(1.0))
}

/// Linear warmup, then multiply by `factor` at each milestone fraction.
pub fn warmup_step_decay(
    step: usize,
    warmup: usize,
    total: usize,
    peak: f64,
    milestones: &[f64],
    factor: f64,
) -> f64 {
    if warmup > 0 && step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let frac = step as f64 / total.max(1) as f64;
    let hits = milestones.iter().filter(|&&m| frac >= m).count();
    peak * factor.powi(hits as i32)
}

pub struct AdamW<T> {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: usize,
    pub total: usize,
    step: usize,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(peak_lr: f64, weight_decay: f64, warmup: usize, total: usize) -> Self {
        AdamW {
            peak_lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup,
            total,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        warmup_linear_decay(self.step, self.warmup, self.total, self.peak_lr)
    }

    /// One update. Parameters without a gradient entry are left untouched.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor<T>)],
        grads: &BTreeMap<String, Tensor<T>>,
    ) {
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, param) in params.iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
            let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
            let one = T::one();
            for ((p, &g), (mi, vi)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = mi.to_f64() / bc1;
                let v_hat = vi.to_f64() / bc2;
                let update = m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p.to_f64();
                *p = T::from_f64(p.to_f64() - lr * update);
            }
        }
        self.step += 1;
    }
}

pub struct SgdMomentum<T> {
    pub peak_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub total: usize,
    pub milestones: Vec<f64>,
    pub decay_factor: f64,
    step: usize,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> SgdMomentum<T> {
    pub fn new(
        peak_lr: f64,
        momentum: f64,
        weight_decay: f64,
        warmup: usize,
        total: usize,
        milestones: Vec<f64>,
        decay_factor: f64,
    ) -> Self {
        SgdMomentum {
            peak_lr,
            momentum,
            weight_decay,
            warmup,
            total,
            milestones,
            decay_factor,
            step: 0,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        warmup_step_decay(self.step, self.warmup, self.total, self.peak_lr, &self.milestones, self.decay_factor)
    }

    /// One update; `lr_scale` returns a per-parameter learning-rate multiplier
    /// (the backbone ratio).
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor<T>)],
        grads: &BTreeMap<String, Tensor<T>>,
        lr_scale: &dyn Fn(&str) -> f64,
    ) {
        let base_lr = self.current_lr();
        for (name, param) in params.iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            let lr = base_lr * lr_scale(name);
            if lr == 0.0 {
                continue;
            }
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
            let mu = T::from_f64(self.momentum);
            let wd = T::from_f64(self.weight_decay);
            let lr_t = T::from_f64(lr);
            for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(vel.data_mut()) {
                let g_total = g + wd * *p;
                *v = mu * *v + g_total;
                *p = *p - lr_t * *v;
            }
        }
        self.step += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_starts_at_zero_and_peaks_at_warmup_end() {
        assert_eq!(warmup_linear_decay(0, 100, 1000, 0.5), 0.0);
        assert_eq!(warmup_linear_decay(100, 100, 1000, 0.5), 0.5);
        assert!(warmup_linear_decay(550, 100, 1000, 0.5) < 0.5);
        assert_eq!(warmup_linear_decay(1000, 100, 1000, 0.5), 0.0);
    }

    #[test]
    fn step_decay_applies_milestones() {
        let lr = |s| warmup_step_decay(s, 0, 100, 1.0, &[0.8, 0.9, 0.95], 0.1);
        assert_eq!(lr(50), 1.0);
        assert!((lr(80) - 0.1).abs() < 1e-12);
        assert!((lr(90) - 0.01).abs() < 1e-12);
        assert!((lr(95) - 0.001).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut opt = AdamW::<f64>::new(0.0, 0.01, 0, 10);
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::new(vec![2], vec![0.3, 0.7]));
        let snapshot = p.clone();
        opt.step(&mut [("p".to_string(), &mut p)], &grads);
        assert_eq!(p, snapshot);
    }

    #[test]
    fn sgd_backbone_ratio_zero_freezes_parameter() {
        let mut opt = SgdMomentum::<f64>::new(0.1, 0.9, 0.0, 0, 10, vec![], 0.1);
        let mut a = Tensor::new(vec![1], vec![1.0]);
        let mut b = Tensor::new(vec![1], vec![1.0]);
        let mut grads = BTreeMap::new();
        grads.insert("backbone.w".to_string(), Tensor::new(vec![1], vec![1.0]));
        grads.insert("head.w".to_string(), Tensor::new(vec![1], vec![1.0]));
        opt.step(
            &mut [("backbone.w".to_string(), &mut a), ("head.w".to_string(), &mut b)],
            &grads,
            &|name| if name.starts_with("backbone") { 0.0 } else { 1.0 },
        );
        assert_eq!(a.data(), &[1.0]);
        assert!(b.data()[0] < 1.0);
    }
}
