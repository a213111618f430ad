//! AdamW with a one-cycle learning-rate and momentum schedule.

use serde::{Deserialize, Serialize};

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OneCycle {
    pub max_lr: f64,
    /// Starting rate is `max_lr / div`.
    pub div: f64,
    /// Final rate is `max_lr / final_div`.
    pub final_div: f64,
    pub warmup_frac: f64,
    /// `(low, high)`: momentum starts high, dips to low at the peak rate.
    pub momentum: (f64, f64),
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            max_lr: 2e-3,
            div: 10.0,
            final_div: 1e4,
            warmup_frac: 0.4,
            momentum: (0.85, 0.95),
        }
    }
}

fn cos_anneal(start: f64, end: f64, pct: f64) -> f64 {
    end + (start - end) / 2.0 * (1.0 + (std::f64::consts::PI * pct).cos())
}

/// Learning rate and first-moment coefficient at `step` of `total`.
pub fn lr_schedule(step: usize, total: usize, cfg: &OneCycle) -> (f64, f64) {
    let total = total.max(1) as f64;
    let step = (step as f64).min(total);
    let warm = cfg.warmup_frac * total;
    let (lo, hi) = cfg.momentum;
    if step <= warm && warm > 0.0 {
        let pct = step / warm;
        (
            cos_anneal(cfg.max_lr / cfg.div, cfg.max_lr, pct),
            cos_anneal(hi, lo, pct),
        )
    } else {
        let pct = if total > warm {
            (step - warm) / (total - warm)
        } else {
            1.0
        };
        (
            cos_anneal(cfg.max_lr, cfg.max_lr / cfg.final_div, pct),
            cos_anneal(lo, hi, pct),
        )
    }
}

/// Decoupled weight-decay Adam over the trainable parameters of a store.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    /// Running product of the first-moment coefficients, for bias
    /// correction under a varying coefficient.
    beta1_prod: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
            beta1_prod: 1.0,
        }
    }

    /// Applies one update with the given gradients.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64, beta1: f64) {
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.steps += 1;
        self.beta1_prod *= beta1;
        let c1 = 1.0 - self.beta1_prod;
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let p = store.value_mut(*id);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * p.data[i]);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.data.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|(_, g)| g.scale_assign(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn schedule_endpoints() {
        let cfg = OneCycle {
            max_lr: 1e-3,
            ..OneCycle::default()
        };
        let (lr0, m0) = lr_schedule(0, 1000, &cfg);
        assert_abs_diff_eq!(lr0, 1e-4, epsilon = 1e-15);
        assert_abs_diff_eq!(m0, 0.95, epsilon = 1e-15);
        let (lr1, m1) = lr_schedule(400, 1000, &cfg);
        assert_abs_diff_eq!(lr1, 1e-3, epsilon = 1e-15);
        assert_abs_diff_eq!(m1, 0.85, epsilon = 1e-15);
        let (lr2, m2) = lr_schedule(1000, 1000, &cfg);
        assert_abs_diff_eq!(lr2, 1e-7, epsilon = 1e-18);
        assert_abs_diff_eq!(m2, 0.95, epsilon = 1e-15);
        let mut prev = 0.0;
        for s in 0..=400 {
            let (lr, _) = lr_schedule(s, 1000, &cfg);
            assert!(lr >= prev);
            prev = lr;
        }
        for s in 400..=1000 {
            let (lr, _) = lr_schedule(s, 1000, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]));
        let frozen = store.add("q", Tensor::from_vec(1, 1, vec![3.0]));
        store.set_trainable(frozen, false);
        let mut opt = AdamW::new(0.0);
        let grads = vec![
            (id, Tensor::from_vec(1, 3, vec![0.3, -4.0, 0.0])),
            (frozen, Tensor::from_vec(1, 1, vec![1.0])),
        ];
        opt.step(&mut store, &grads, 0.1, 0.9);
        // bias-corrected first step is lr·sign(g)
        let p = store.value(id);
        assert_abs_diff_eq!(p.data[0], 0.9, epsilon = 1e-6);
        assert_abs_diff_eq!(p.data[1], -1.9, epsilon = 1e-6);
        assert_eq!(p.data[2], 0.5);
        assert_eq!(store.value(frozen).data[0], 3.0);
    }

    #[test]
    fn decay_shrinks_weights_without_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(1, 1, vec![2.0]));
        let mut opt = AdamW::new(0.5);
        opt.step(&mut store, &[(id, Tensor::zeros(1, 1))], 0.1, 0.9);
        assert_abs_diff_eq!(store.value(id).data[0], 2.0 - 0.1 * 0.5 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![
            (ParamId(0), Tensor::from_vec(1, 2, vec![3.0, 0.0])),
            (ParamId(1), Tensor::from_vec(1, 1, vec![4.0])),
        ];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].1.data, vec![3.0, 0.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert_abs_diff_eq!(g[1].1.data[0], 0.8, epsilon = 1e-12);
    }
}
