use serde::{Deserialize, Serialize};

use super::{Model, ParamGroup};
use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Wq,
    Wk,
    Wv,
    Wo,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [LoraTarget::Wq, LoraTarget::Wk, LoraTarget::Wv, LoraTarget::Wo];

    fn key(self) -> &'static str {
        match self {
            LoraTarget::Wq => "wq",
            LoraTarget::Wk => "wk",
            LoraTarget::Wv => "wv",
            LoraTarget::Wo => "wo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: LoraTarget::ALL.to_vec(),
        }
    }
}

impl LoraConfig {
    /// `α / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("rank", "must be positive"));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("alpha", "must be positive"));
        }
        if self.targets.is_empty() {
            return Err(Error::config("targets", "at least one projection is required"));
        }
        Ok(())
    }
}

fn weight_name(layer: usize, t: LoraTarget) -> String {
    format!("layers.{layer}.attn.{}", t.key())
}

impl Model {
    /// Adds `A` (Gaussian, std `1/√d`) and zero `B` to each target projection
    /// of every layer, so the adapted forward starts equal to the base one.
    pub fn lora_attach(&mut self, cfg: &LoraConfig) -> Result<()> {
        cfg.validate()?;
        if self.lora.is_some() {
            return Err(Error::contract("LoRA adapters are already attached"));
        }
        let d = self.cfg.d_model;
        let root = SeededRng::new(self.cfg.seed, "lora-init");
        let mut targets = cfg.targets.clone();
        targets.sort();
        targets.dedup();
        for l in 0..self.cfg.n_layers {
            for &t in &targets {
                let w = weight_name(l, t);
                let mut rng = root.fork(&w);
                let a = Tensor::randn(&[d, cfg.rank], 1.0 / (d as f64).sqrt(), &mut rng);
                self.params.insert(format!("{w}.lora_a"), a);
                self.params.insert(format!("{w}.lora_b"), Tensor::zeros(&[cfg.rank, d]));
            }
        }
        self.lora = Some(LoraConfig {
            targets,
            ..cfg.clone()
        });
        Ok(())
    }

    /// Folds `(α/r)·A·B` into each adapted weight and removes the adapters.
    pub fn lora_merge(&mut self) -> Result<()> {
        let cfg = self
            .lora
            .take()
            .ok_or_else(|| Error::contract("no LoRA adapters to merge"))?;
        for l in 0..self.cfg.n_layers {
            for &t in &cfg.targets {
                let w = weight_name(l, t);
                let a = self.params.remove(&format!("{w}.lora_a")).expect("attached adapter");
                let b = self.params.remove(&format!("{w}.lora_b")).expect("attached adapter");
                let delta = a.matmul(&b)?.scale(cfg.scale());
                let merged = self.param(&w)?.add(&delta)?;
                self.params.insert(w, merged);
            }
        }
        debug_assert_eq!(self.count_params(ParamGroup::Lora), 0);
        Ok(())
    }
}
