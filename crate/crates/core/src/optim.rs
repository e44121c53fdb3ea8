//! First-order optimizers over candle `Var`s.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

pub trait Optimizer {
    fn step(&mut self, grads: &GradStore) -> Result<()>;
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
pub struct Sgd {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = vec![None; vars.len()];
        Self {
            vars,
            velocity,
            lr,
            momentum,
            weight_decay,
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // Gradients carry their autograd history; detached, the buffers below don't pin it.
            let mut g = g.detach();
            if self.weight_decay != 0.0 {
                g = (g + (var.as_tensor().detach() * self.weight_decay)?)?;
            }
            let v = match vel.take() {
                Some(prev) if self.momentum != 0.0 => ((prev * self.momentum)? + g)?,
                _ => g,
            };
            var.set(&(var.as_tensor() - (&v * self.lr)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Adam with bias correction.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: i32,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let n = vars.len();
        Self {
            vars,
            m: vec![None; n],
            v: vec![None; n],
            t: 0,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((var, m), v) in self.vars.iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = g.detach();
            let m_new = match m.take() {
                Some(prev) => ((prev * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v_new = match v.take() {
                Some(prev) => ((prev * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let m_hat = (&m_new / c1)?;
            let v_hat = (&v_new / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            *m = Some(m_new);
            *v = Some(v_new);
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Divides `base` by `factor` once every `every` epochs.
pub fn step_decay(base: f64, epoch: usize, every: usize, factor: f64) -> f64 {
    if every == 0 {
        return base;
    }
    base / factor.powi((epoch / every) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn quadratic_grad(var: &Var) -> GradStore {
        // loss = sum((x - 3)^2)
        let loss = (var.as_tensor() - 3.0).unwrap().sqr().unwrap().sum_all().unwrap();
        loss.backward().unwrap()
    }

    #[test]
    fn sgd_single_step() {
        let var = Var::new(&[1.0f64, 5.0], &Device::Cpu).unwrap();
        let mut opt = Sgd::new(vec![var.clone()], 0.1, 0.9, 0.0);
        opt.step(&quadratic_grad(&var)).unwrap();
        // grad = 2(x-3) = [-4, 4]
        assert_eq!(var.to_vec1::<f64>().unwrap(), vec![1.4, 4.6]);
        opt.step(&quadratic_grad(&var)).unwrap();
        // v = 0.9·[-4,4] + [-3.2,3.2] = [-6.8, 6.8]
        let v = var.to_vec1::<f64>().unwrap();
        assert!((v[0] - 2.08).abs() < 1e-12 && (v[1] - 3.92).abs() < 1e-12, "{v:?}");
    }

    #[test]
    fn sgd_weight_decay() {
        let var = Var::new(&[3.0f64], &Device::Cpu).unwrap();
        let mut opt = Sgd::new(vec![var.clone()], 0.5, 0.0, 0.1);
        opt.step(&quadratic_grad(&var)).unwrap();
        assert!((var.to_vec1::<f64>().unwrap()[0] - 2.85).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let var = Var::new(&[0.0f64, 10.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![var.clone()], 0.01, 0.0, 0.9);
        opt.step(&quadratic_grad(&var)).unwrap();
        let v = var.to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.01).abs() < 1e-6 && (v[1] - 9.99).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn adam_converges() {
        let var = Var::zeros(4, DType::F64, &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![var.clone()], 0.1, 0.9, 0.999);
        for _ in 0..500 {
            opt.step(&quadratic_grad(&var)).unwrap();
        }
        assert!(var.to_vec1::<f64>().unwrap().iter().all(|x| (x - 3.0).abs() < 1e-2));
    }

    #[test]
    fn decay_schedule() {
        assert_eq!(step_decay(0.1, 0, 30, 10.0), 0.1);
        assert!((step_decay(0.1, 30, 30, 10.0) - 0.01).abs() < 1e-15);
        assert!((step_decay(3e-4, 89, 30, 10.0) - 3e-6).abs() < 1e-18);
        assert_eq!(step_decay(0.1, 100, 0, 10.0), 0.1);
    }
}
