//! AdamW with decoupled weight decay, and global-norm clipping.

use ndarray::Array2;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::{GradientSet, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Scales `grads` in place to global norm `max_norm` if it exceeds it;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradientSet, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::config(format!("clip norm must be positive, got {max_norm}")));
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}

/// First and second moments per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Array2::zeros(t.dim())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// `theta <- theta - lr m_hat / (sqrt(v_hat) + eps) - lr wd theta`, the
    /// decay term using the pre-update `theta`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradientSet) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, theta) in params.tensors_mut().enumerate() {
            let g = grads.get(i);
            if g.dim() != theta.dim() {
                return Err(Error::shape(
                    "adamw",
                    format!("gradient {:?} vs parameter {:?}", g.dim(), theta.dim()),
                ));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(theta)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|theta, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    let old = *theta;
                    *theta = old - c.lr * m_hat / (v_hat.sqrt() + c.eps) - c.lr * c.weight_decay * old;
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn one(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", array![[value]]);
        s
    }

    fn grads(values: &[Tensor]) -> GradientSet {
        let mut store = ParamStore::new();
        for (i, v) in values.iter().enumerate() {
            store.insert(format!("p{i}"), v.clone());
        }
        let mut g = GradientSet::zeros_like(&store);
        for (i, v) in values.iter().enumerate() {
            g.get_mut(i).assign(v);
        }
        g
    }

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn clipping_examples() {
        let mut g = grads(&[array![[6.0, 0.0]], array![[8.0]]]);
        let before = clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(before, 10.0);
        assert_abs_diff_eq!(g.get(0)[[0, 0]], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(g.global_norm(), 1.0, epsilon = 1e-12);

        let mut g = grads(&[array![[0.3, 0.4]]]);
        clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(g.get(0), &array![[0.3, 0.4]]);

        let mut g = grads(&[array![[0.0, 0.0]]]);
        assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 0.0);
        assert!(g.is_finite());
        assert!(clip_global_norm(&mut g, 0.0).is_err());
    }

    #[test]
    fn first_step() {
        let mut p = one(0.5);
        let mut opt = AdamW::new(cfg(0.1, 0.0), &p);
        opt.step(&mut p, &grads(&[array![[1.0]]])).unwrap();
        assert_abs_diff_eq!(p.get("w").unwrap()[[0, 0]], 0.5 - 0.1 / (1.0 + 1e-8), epsilon = 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = one(0.5);
        let mut opt = AdamW::new(cfg(0.1, 0.0), &p);
        opt.step(&mut p, &grads(&[array![[1.0]]])).unwrap();
        let after_first = p.get("w").unwrap()[[0, 0]];
        let m1 = opt.first_moments()[0][[0, 0]];
        let mut q = one(after_first);
        let mut fresh = AdamW::new(cfg(0.1, 0.0), &q);
        fresh.step(&mut q, &grads(&[array![[0.0]]])).unwrap();
        assert_eq!(q.get("w").unwrap()[[0, 0]], after_first);
        opt.step(&mut p, &grads(&[array![[0.0]]])).unwrap();
        assert!(opt.first_moments()[0][[0, 0]].abs() < m1.abs());
    }

    #[test]
    fn pure_decoupled_decay() {
        let mut p = one(1.0);
        let mut opt = AdamW::new(cfg(0.1, 0.01), &p);
        opt.step(&mut p, &grads(&[array![[0.0]]])).unwrap();
        assert_abs_diff_eq!(p.get("w").unwrap()[[0, 0]], 0.999, epsilon = 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = one(1.0);
        let mut opt = AdamW::new(cfg(0.1, 0.0), &p);
        assert!(opt.step(&mut p, &grads(&[array![[1.0, 2.0]]])).is_err());
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(values in prop::collection::vec(-100.0f64..100.0, 1..20), max in 1e-3f64..10.0) {
            let n = values.len();
            let mut g = grads(&[Array2::from_shape_vec((1, n), values).unwrap()]);
            clip_global_norm(&mut g, max).unwrap();
            prop_assert!(g.global_norm() <= max + 1e-9);
        }
    }
}
