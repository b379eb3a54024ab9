use crate::numerics::Tensor;
use crate::params::ParamStore;

use super::OptimConfig;

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![Tensor::vector(vec![3.0, 0.0]), Tensor::vector(vec![4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[0] - 0.8).abs() < 1e-15);
        let mut small = vec![Tensor::vector(vec![0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.1]);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let cfg = OptimConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.update(&mut p, &[Tensor::vector(vec![4.0, -0.3, 0.0])]);
        let x = p.get("x").unwrap().data();
        assert!((x[0] - 0.99).abs() < 1e-9);
        assert!((x[1] + 1.99).abs() < 1e-9);
        assert_eq!(x[2], 0.5);
    }

    #[test]
    fn decay_alone_shrinks_geometrically() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![2.0]));
        let cfg = OptimConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        for _ in 0..3 {
            opt.update(&mut p, &[Tensor::vector(vec![0.0])]);
        }
        assert!((p.get("x").unwrap().data()[0] - 2.0 * 0.95f64.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![3.0, -4.0]));
        let cfg = OptimConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        for _ in 0..2000 {
            let g: Vec<f64> = p.get("x").unwrap().data().iter().map(|x| 2.0 * x).collect();
            opt.update(&mut p, &[Tensor::vector(g)]);
        }
        assert!(p.get("x").unwrap().data().iter().all(|x| x.abs() < 1e-2));
    }
}
