use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay over a named parameter map.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Updates every parameter named in `grads`. A zero learning rate leaves
    /// parameters untouched.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!("learning rate {lr} must be finite and non-negative")));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step);
        let bc2 = 1.0 - beta2.powi(self.step);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::dim(format!("gradient shape mismatch for `{name}`")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                if lr > 0.0 {
                    *pi -= lr * weight_decay * *pi;
                    *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    /// Reductions that would go below this are skipped.
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 2,
            min_delta: 1e-4,
            min_lr: 1e-8,
        }
    }
}

/// Reduce-on-plateau. The first evaluation sets the reference; once
/// `patience` consecutive evaluations fail to beat it by `min_delta` the
/// learning rate is multiplied by `factor` and the count restarts.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    cfg: PlateauConfig,
    lr: f64,
    best: Option<f64>,
    bad: usize,
}

impl Plateau {
    pub fn new(cfg: PlateauConfig, lr: f64) -> Self {
        Self {
            cfg,
            lr,
            best: None,
            bad: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one evaluation; returns whether the rate was reduced.
    pub fn step(&mut self, metric: f64) -> bool {
        match self.best {
            Some(b) if metric >= b - self.cfg.min_delta => self.bad += 1,
            _ => {
                self.best = Some(metric);
                self.bad = 0;
                return false;
            }
        }
        if self.bad < self.cfg.patience {
            return false;
        }
        self.bad = 0;
        let next = self.lr * self.cfg.factor;
        if next < self.cfg.min_lr {
            return false;
        }
        self.lr = next;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, t: Tensor) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), t)])
    }

    #[test]
    fn zero_gradient_applies_only_decay() {
        let mut p = one("w", Tensor::row_vector(&[1.0, -2.0]));
        let g = one("w", Tensor::zeros(&[1, 2]));
        AdamW::new(AdamWConfig::default()).step(&mut p, &g, 0.1).unwrap();
        let expect = [1.0 - 0.1 * 0.01 * 1.0, -2.0 - 0.1 * 0.01 * -2.0];
        assert_eq!(p["w"].data(), &expect);
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        let orig = Tensor::row_vector(&[0.0, -0.0, 3.5]);
        let mut p = one("w", orig.clone());
        let g = one("w", Tensor::row_vector(&[1.0, 2.0, 3.0]));
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..3 {
            opt.step(&mut p, &g, 0.0).unwrap();
        }
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p["w"]), bits(&orig));
    }

    #[test]
    fn first_step_moves_by_the_rate() {
        let mut p = one("w", Tensor::row_vector(&[0.0]));
        let g = one("w", Tensor::row_vector(&[4.0]));
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        AdamW::new(cfg).step(&mut p, &g, 0.01).unwrap();
        assert!((p["w"].data()[0] + 0.01).abs() < 1e-10);
    }

    #[test]
    fn improving_losses_never_reduce() {
        let mut s = Plateau::new(PlateauConfig::default(), 1e-3);
        for i in 0..20 {
            assert!(!s.step(1.0 - 0.01 * i as f64));
        }
        assert_eq!(s.lr(), 1e-3);
    }

    #[test]
    fn flat_losses_halve_once_after_patience_plus_one() {
        let mut s = Plateau::new(PlateauConfig::default(), 1e-3);
        let reductions: Vec<bool> = (0..3).map(|_| s.step(0.5)).collect();
        assert_eq!(reductions, [false, false, true]);
        assert_eq!(s.lr(), 5e-4);
    }

    #[test]
    fn rate_freezes_above_the_floor() {
        let mut s = Plateau::new(PlateauConfig::default(), 1.5e-8);
        for _ in 0..10 {
            s.step(1.0);
        }
        assert_eq!(s.lr(), 1.5e-8);
    }
}
