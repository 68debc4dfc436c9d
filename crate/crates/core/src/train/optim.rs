//! Adam and reduce-on-plateau scheduling.

use serde::{Deserialize, Serialize};

use crate::real::Real;

/// Adam with bias correction. Moments live next to the parameters they
/// track, one array per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, shapes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        Adam {
            beta1,
            beta2,
            eps,
            m,
            v,
            step: 0,
        }
    }

    /// One update. Returns `false` and leaves everything untouched when a
    /// gradient entry is not finite.
    pub fn update(&mut self, params: &mut [Vec<T>], grads: &[Vec<T>], lr: f64) -> bool {
        assert_eq!(params.len(), grads.len(), "parameter / gradient count");
        assert_eq!(params.len(), self.m.len(), "parameter / moment count");
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return false;
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len(), "gradient shape");
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = g[i].f64();
                let mi = self.beta1 * m[i].f64() + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i].f64() + (1.0 - self.beta2) * gi * gi;
                m[i] = T::c(mi);
                v[i] = T::c(vi);
                let step = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p[i] = T::c(p[i].f64() - step);
            }
        }
        true
    }
}

/// Reduce-on-plateau: after `patience` epochs without an improvement larger
/// than `threshold`, multiply the rate by `factor` (not below `min_lr`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
    pub lr: f64,
    /// Best metric so far; `None` before the first epoch.
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64, min_lr: f64) -> Self {
        Plateau {
            factor,
            patience,
            threshold,
            min_lr,
            lr,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Feeds one epoch's metric; returns `true` when the rate was lowered.
    pub fn observe(&mut self, metric: f64) -> bool {
        match self.best {
            Some(b) if metric >= b - self.threshold => self.bad_epochs += 1,
            _ => {
                self.best = Some(metric);
                self.bad_epochs = 0;
                return false;
            }
        }
        if self.bad_epochs < self.patience {
            return false;
        }
        self.bad_epochs = 0;
        let next = (self.lr * self.factor).max(self.min_lr);
        let reduced = next < self.lr;
        self.lr = next;
        reduced
    }
}
