//! A small decoder-only transformer whose attention layer can be swapped
//! between causal softmax and the hybrid kernel, with LoRA adapters on the
//! attention projections and a binary checkpoint format.

pub mod checkpoint;
mod forward;
mod lora;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{Activation, FeatureMapParams};
use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, Stage};
pub use forward::{
    forward_logits, forward_tape, lm_loss, next_token_targets, AttentionKind, ForwardOptions,
    ForwardOutput, HeadTrace, ParamVars,
};
pub use lora::{LoraConfig, LoraTarget};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_width: usize,
    pub max_t: usize,
    pub seed: u64,
    /// Projection width `d′` of each feature map; `None` means `h_d / 2`.
    pub feature_dim: Option<usize>,
    pub activation: Activation,
    pub phi_init_noise: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            mlp_width: 512,
            max_t: 256,
            seed: 0,
            feature_dim: None,
            activation: Activation::Softmax,
            phi_init_noise: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim.unwrap_or(self.head_dim() / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("mlp_width", self.mlp_width),
            ("max_t", self.max_t),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "n_heads",
                format!("d_model {} is not divisible by {}", self.d_model, self.n_heads),
            ));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config("d_model", "head dimension must be even for RoPE"));
        }
        if self.feature_dim() == 0 {
            return Err(Error::config("feature_dim", "must be positive"));
        }
        if !(self.phi_init_noise >= 0.0 && self.phi_init_noise.is_finite()) {
            return Err(Error::config("phi_init_noise", "must be a finite non-negative number"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Base,
    FeatureMap,
    Lora,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.contains(".phi.") {
            ParamGroup::FeatureMap
        } else if name.contains(".lora_") {
            ParamGroup::Lora
        } else {
            ParamGroup::Base
        }
    }
}

pub(crate) fn phi_names(layer: usize, head: usize) -> (String, String) {
    let p = format!("layers.{layer}.phi.{head}");
    (format!("{p}.weight"), format!("{p}.bias"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    /// Every parameter by name. Feature-map tensors contain `.phi.`, adapter
    /// tensors `.lora_`.
    pub params: BTreeMap<String, Tensor>,
    pub lora: Option<LoraConfig>,
}

/// Builds a model whose parameters depend only on `cfg` (including its seed).
pub fn init_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed, "init");
    let (d, v, m) = (cfg.d_model, cfg.vocab_size, cfg.mlp_width);
    let mut params = BTreeMap::new();
    let mut randn = |name: String, shape: &[usize], std: f64| {
        let mut rng = root.fork(&name);
        params.insert(name, Tensor::randn(shape, std, &mut rng));
    };
    let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let resid = lin(d) / ((2 * cfg.n_layers) as f64).sqrt();
    randn("embed".into(), &[v, d], 1.0);
    randn("head".into(), &[d, v], lin(d));
    for l in 0..cfg.n_layers {
        for w in ["wq", "wk", "wv"] {
            randn(format!("layers.{l}.attn.{w}"), &[d, d], lin(d));
        }
        randn(format!("layers.{l}.attn.wo"), &[d, d], resid);
        randn(format!("layers.{l}.mlp.w1"), &[d, m], lin(d));
        randn(format!("layers.{l}.mlp.w2"), &[m, d], lin(m) / ((2 * cfg.n_layers) as f64).sqrt());
    }
    for l in 0..cfg.n_layers {
        params.insert(format!("layers.{l}.mlp.b1"), Tensor::zeros(&[1, m]));
        params.insert(format!("layers.{l}.mlp.b2"), Tensor::zeros(&[1, d]));
        for ln in ["ln1", "ln2"] {
            params.insert(format!("layers.{l}.{ln}.gain"), Tensor::ones(&[1, d]));
            params.insert(format!("layers.{l}.{ln}.bias"), Tensor::zeros(&[1, d]));
        }
    }
    params.insert("ln_f.gain".into(), Tensor::ones(&[1, d]));
    params.insert("ln_f.bias".into(), Tensor::zeros(&[1, d]));

    let mut model = Model {
        cfg: cfg.clone(),
        params,
        lora: None,
    };
    model.reset_feature_maps(cfg.phi_init_noise)?;
    Ok(model)
}

impl Model {
    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    /// Re-initialises every feature map to identity plus `N(0, noise_std)`.
    pub fn reset_feature_maps(&mut self, noise_std: f64) -> Result<()> {
        let cfg = &self.cfg;
        let root = SeededRng::new(cfg.seed, "phi-init");
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_heads {
                let (wn, bn) = phi_names(l, h);
                let mut rng = root.fork(&wn);
                let fm = FeatureMapParams::identity_init(
                    cfg.head_dim(),
                    cfg.feature_dim(),
                    cfg.activation,
                    noise_std,
                    &mut rng,
                );
                self.params.insert(wn, fm.weight);
                self.params.insert(bn, fm.bias);
            }
        }
        Ok(())
    }

    pub fn feature_map(&self, layer: usize, head: usize) -> Result<FeatureMapParams> {
        let (wn, bn) = phi_names(layer, head);
        Ok(FeatureMapParams {
            weight: self.param(&wn)?.clone(),
            bias: self.param(&bn)?.clone(),
            activation: self.cfg.activation,
        })
    }

    pub fn count_params(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| ParamGroup::of(n) == group)
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Rounds every parameter to `f32`, the precision checkpoints store.
    pub fn quantize_f32(&mut self) {
        for t in self.params.values_mut() {
            t.quantize_f32();
        }
    }
}
