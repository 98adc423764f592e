//! Adam with cosine learning-rate decay and global-norm gradient clipping.

use std::collections::BTreeMap;

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// Advances the step counter; call once before the updates of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64], lr: f64) {
        let (m, v) = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..param.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            param[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Cosine decay from `lr` at step 0 to zero at `total`.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    let p = (step as f64 / total as f64).min(1.0);
    lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Scales every gradient so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<'a>(grads: impl IntoIterator<Item = &'a mut [f64]>, max_norm: f64) -> f64 {
    let mut all: Vec<&mut [f64]> = grads.into_iter().collect();
    let norm = all
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in all.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Adam::new();
        let mut x = vec![3.0, -2.0];
        for step in 0..2000 {
            opt.begin_step();
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.update("x", &mut x, &g, cosine_lr(0.05, step, 2000));
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn clipping_and_schedule() {
        let mut a = vec![3.0];
        let mut b = vec![4.0];
        let n = clip_global_norm([a.as_mut_slice(), b.as_mut_slice()], 1.0);
        assert_eq!(n, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-15 && (b[0] - 0.8).abs() < 1e-15);
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-15);
    }
}
