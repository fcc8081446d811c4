//! Parameter update rules and learning-rate schedules.

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Cosine decay from the base rate to zero over `total` steps.
    Cosine { total: usize },
}

impl Schedule {
    pub fn lr_at(&self, base: f64, step: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::Cosine { total } => {
                let t = (step as f64 / total.max(1) as f64).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

fn check_pair<T: Element>(p: &Tensor<T>, g: &Tensor<T>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::ShapeMismatch {
            op: "optimizer step",
            lhs: p.shape().to_vec(),
            rhs: g.shape().to_vec(),
        });
    }
    Ok(())
}

/// Plain stochastic gradient descent.
pub fn sgd_step<T: Element>(param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
    }
    check_pair(param, grad)?;
    let lr = T::from_f64_lossy(lr);
    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p = *p - lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers mirror the parameter set.
#[derive(Debug, Clone)]
pub struct Adam<T: Element> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> Adam<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        Adam {
            config,
            m: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            t: 0,
        }
    }

    /// Apply one update. Parameters whose gradient is `None` are left as is
    /// but still count toward the shared step counter.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
        }
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let step_size = T::from_f64_lossy(lr / bc1);
        let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
        let (one, eps_t, sqrt_bc2) = (T::one(), T::from_f64_lossy(eps), T::from_f64_lossy(bc2.sqrt()));
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            check_pair(p, g)?;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let denom = vv.sqrt() / sqrt_bc2 + eps_t;
                *pv = *pv - step_size * *mv / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_basic_update() {
        let mut p = Tensor::<f64>::scalar(1.0);
        sgd_step(&mut p, &Tensor::scalar(2.0), 0.1).unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut p = Tensor::<f32>::from_f64(vec![3], &[1.0, -2.0, 3.5]).unwrap();
        let before = p.clone();
        sgd_step(&mut p, &Tensor::zeros(&[3]), 0.5).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_rejects_bad_inputs() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        assert!(sgd_step(&mut p, &Tensor::zeros(&[3]), 0.1).is_err());
        assert!(sgd_step(&mut p, &Tensor::zeros(&[2]), 0.0).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [-3.0, 0.01, 250.0] {
            let mut params = ParamSet::new();
            params.insert("w", Tensor::<f64>::scalar(1.0));
            let mut adam = Adam::new(&params, AdamConfig::default());
            adam.step(&mut params, &[Some(Tensor::scalar(g))], 1e-3).unwrap();
            let moved = params.get("w").unwrap().item() - 1.0;
            // |m̂| / sqrt(v̂) = 1 on the first step, up to eps.
            assert!((moved + 1e-3 * f64::signum(g)).abs() < 1e-8, "g={g} moved={moved}");
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = Schedule::Cosine { total: 100 };
        assert_eq!(s.lr_at(1.0, 0), 1.0);
        assert!((s.lr_at(1.0, 50) - 0.5).abs() < 1e-12);
        assert!(s.lr_at(1.0, 100).abs() < 1e-12);
    }
}
