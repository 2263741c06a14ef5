use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// SGD with momentum and a log-space learning-rate decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub total_epochs: usize,
}

impl SgdConfig {
    /// 0.005 → 0.0005 with momentum 0.9.
    pub fn full(total_epochs: usize) -> Self {
        SgdConfig {
            lr_start: 0.005,
            lr_end: 0.0005,
            momentum: 0.9,
            total_epochs,
        }
    }

    pub fn constant(lr: f64, momentum: f64) -> Self {
        SgdConfig {
            lr_start: lr,
            lr_end: lr,
            momentum,
            total_epochs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// Geometric interpolation from `lr_start` at epoch 0 to `lr_end` at the
    /// last epoch (`total_epochs - 1`); both endpoints are returned verbatim.
    pub fn lr(&self, epoch: usize) -> f64 {
        let last = self.total_epochs.saturating_sub(1);
        if epoch == 0 || last == 0 {
            return self.lr_start;
        }
        if epoch >= last {
            return self.lr_end;
        }
        let t = epoch as f64 / last as f64;
        (self.lr_start.ln() + t * (self.lr_end.ln() - self.lr_start.ln())).exp()
    }
}

/// Optimizer state: one velocity buffer per parameter.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &ParamStore) -> Self {
        Sgd {
            config,
            velocity: params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: Vec<Tensor>) -> Result<()> {
        if v.len() != self.velocity.len()
            || v.iter().zip(&self.velocity).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        self.velocity = v;
        Ok(())
    }

    /// `v ← m·v + g; p ← p − lr(epoch)·v`. Parameters with no gradient are
    /// left untouched. A non-finite gradient rejects the whole step.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], epoch: usize) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != params.get(id).shape() {
                    return Err(Error::shape("sgd_step", params.get(id).shape(), g.shape()));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
                }
            }
        }
        let lr = self.config.lr(epoch);
        let m = self.config.momentum;
        for ((id, g), v) in params.ids().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            let p = params.get_mut(id);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = m * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamGroup;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", ParamGroup::Head, Tensor::full(&[2], v));
        s
    }

    #[test]
    fn plain_step() {
        let mut p = store(1.0);
        let mut opt = Sgd::new(SgdConfig::constant(0.1, 0.0), &p);
        opt.step(&mut p, &[Some(Tensor::full(&[2], 1.0))], 0).unwrap();
        let id = p.ids().next().unwrap();
        assert!((p.get(id).data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let (p0, g, lr) = (2.0, 0.3, 0.05);
        let mut p = store(p0);
        let mut opt = Sgd::new(SgdConfig::constant(lr, 0.9), &p);
        let grads = [Some(Tensor::full(&[2], g))];
        opt.step(&mut p, &grads, 0).unwrap();
        opt.step(&mut p, &grads, 0).unwrap();
        let id = p.ids().next().unwrap();
        let expected = p0 - lr * (g + 1.9 * g);
        assert!((p.get(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn paper_schedule_endpoints() {
        let cfg = SgdConfig::full(50);
        assert_eq!(cfg.lr(0), 0.005);
        assert_eq!(cfg.lr(49), 0.0005);
        for e in 1..50 {
            assert!(cfg.lr(e) < cfg.lr(e - 1));
        }
        let mid = cfg.lr(49 / 2);
        assert!(mid < 0.005 && mid > 0.0005);
    }

    #[test]
    fn non_finite_gradient_rejected_without_change() {
        let mut p = store(1.0);
        let mut opt = Sgd::new(SgdConfig::constant(0.1, 0.9), &p);
        let bad = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(opt.step(&mut p, &[Some(bad)], 0).unwrap_err().is_numeric());
        let id = p.ids().next().unwrap();
        assert_eq!(p.get(id).data(), &[1.0, 1.0]);
    }
}
