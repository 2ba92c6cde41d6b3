//! Adam with optional decoupled weight decay (AdamW).

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to [`crate::params::ParamKind::Weight`] tensors.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam state: first and second moments per tensor, in visiting order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub hyper: AdamHyper,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new<P: ParamSet<T>>(params: &P, hyper: AdamHyper) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, _, p| m.push(vec![T::zero(); p.as_slice().len()]));
        Self {
            hyper,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr` (the schedule lives with the caller).
    pub fn step<P: ParamSet<T>>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.t += 1;
        let h = self.hyper;
        let b1 = lit::<T>(h.beta1);
        let b2 = lit::<T>(h.beta2);
        let one = T::one();
        let bc1 = lit::<T>(1.0 - h.beta1.powi(self.t as i32));
        let bc2 = lit::<T>(1.0 - h.beta2.powi(self.t as i32));
        let lr_t = lit::<T>(lr);
        let eps = lit::<T>(h.eps);
        let decay = lit::<T>(1.0 - lr * h.weight_decay);

        let mut grad_slices: Vec<Vec<T>> = Vec::new();
        grads.visit(&mut |_, _, g| grad_slices.push(g.as_slice().to_vec()));

        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        params.visit_mut(&mut |_, kind, p| {
            let g = &grad_slices[idx];
            let wd = kind.decays() && h.weight_decay != 0.0;
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for (((x, &gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                if wd {
                    *x *= decay;
                }
                *x -= lr_t * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
            idx += 1;
        });
    }
}

/// Linear warmup to `peak` over `warmup` steps, then constant.
pub fn warmup_lr(peak: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        peak
    } else {
        peak * (step + 1) as f64 / warmup as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::impl_param_set;
    use crate::tensor::Mat;

    #[derive(Debug, Clone, PartialEq)]
    struct Toy<T> {
        w: Mat<T>,
        b: Mat<T>,
    }
    impl_param_set!(Toy { w: Weight, b: Bias });

    fn toy(w: f64, b: f64) -> Toy<f64> {
        Toy {
            w: Mat::from_vec(1, 1, vec![w]),
            b: Mat::from_vec(1, 1, vec![b]),
        }
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut p = toy(0.7, -0.2);
        let g = p.zeros_like();
        let mut opt = Adam::new(&p, AdamHyper::default());
        for _ in 0..5 {
            opt.step(&mut p, &g, 0.1);
        }
        assert_eq!(p, toy(0.7, -0.2));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = toy(1.0, 1.0);
        let g = toy(1.0, 1.0);
        let mut opt = Adam::new(&p, AdamHyper::default());
        opt.step(&mut p, &g, 0.1);
        let moved = 1.0 - p.w.get(0, 0);
        assert!((moved - 0.1).abs() < 1e-8, "{moved}");
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn decoupled_decay_skips_biases() {
        let mut p = toy(2.0, 2.0);
        let g = p.zeros_like();
        let hyper = AdamHyper {
            weight_decay: 0.02,
            ..AdamHyper::default()
        };
        let mut opt = Adam::new(&p, hyper);
        opt.step(&mut p, &g, 0.5);
        assert!((p.w.get(0, 0) - 2.0 * (1.0 - 0.5 * 0.02)).abs() < 1e-15);
        assert_eq!(p.b.get(0, 0), 2.0);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut p = toy(0.3, 0.4);
            let mut opt = Adam::new(&p, AdamHyper::default());
            for i in 0..10 {
                let g = toy((i as f64).sin(), (i as f64).cos());
                opt.step(&mut p, &g, 0.01);
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn warmup_ramps_linearly() {
        assert_eq!(warmup_lr(1.0, 4, 0), 0.25);
        assert_eq!(warmup_lr(1.0, 4, 3), 1.0);
        assert_eq!(warmup_lr(1.0, 4, 100), 1.0);
        assert_eq!(warmup_lr(1.0, 0, 0), 1.0);
    }
}
