use crate::nn::{ParamSet, Scalar};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Cosine annealing from `lr_init` at step 0 to zero at the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr_init: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps <= 1 {
            return self.lr_init;
        }
        let t = step.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        0.5 * self.lr_init * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub m: ParamSet<F>,
    pub v: ParamSet<F>,
    /// Updates applied so far.
    pub t: u64,
    pub weight_decay: f64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(params: &ParamSet<F>, weight_decay: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            weight_decay,
        }
    }

    /// One update; frozen tensors are left untouched and decay applies only
    /// to tensors flagged for it.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &ParamSet<F>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let (b1, b2) = (F::of(BETA1), F::of(BETA2));
        let (a1, a2) = (F::of(1.0 - BETA1), F::of(1.0 - BETA2));
        let step_size = F::of(lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(EPSILON);
        let shrink = F::of(1.0 - lr * self.weight_decay);
        let entries = params.entries_mut().iter_mut();
        let moments = self.m.entries_mut().iter_mut().zip(self.v.entries_mut().iter_mut());
        for ((p, g), (m, v)) in entries.zip(grads.entries()).zip(moments) {
            if !p.trainable {
                continue;
            }
            let decay = p.decay;
            ndarray::Zip::from(&mut p.value)
                .and(&g.value)
                .and(&mut m.value)
                .and(&mut v.value)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + a1 * g;
                    *v = b2 * *v + a2 * g * g;
                    if decay {
                        *w = *w * shrink;
                    }
                    *w = *w - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_endpoints() {
        let s = CosineSchedule {
            lr_init: 3e-4,
            total_steps: 500,
        };
        assert_eq!(s.lr(0), 3e-4);
        assert!(s.lr(499) <= 0.01 * 3e-4);
        assert!(s.lr(250) < s.lr(100));
        let one = CosineSchedule {
            lr_init: 1.0,
            total_steps: 1,
        };
        assert_eq!(one.lr(0), 1.0);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = ParamSet::<f64>::new();
        let a = p.add("a", array![[1.0, -1.0]], false);
        let b = p.add("b", array![[1.0, 1.0]], true);
        let mut g = p.zeros_like();
        *g.get_mut(a) = array![[0.5, -2.0]];
        *g.get_mut(b) = array![[0.0, 0.0]];
        let mut opt = AdamW::new(&p, 0.1);
        opt.step(&mut p, &g, 0.01);
        let got = p.get(a);
        assert!((got[[0, 0]] - 0.99).abs() < 1e-6);
        assert!((got[[0, 1]] + 0.99).abs() < 1e-6);
        // zero gradient: only the decoupled decay acts
        assert!((p.get(b)[[0, 0]] - (1.0 - 0.01 * 0.1)).abs() < 1e-12);
    }
}
