//! Run configuration: a TOML document whose every key has a default.
//!
//! | key | default |
//! |---|---|
//! | `run_id` | `"run"` |
//! | `seed` | `0` |
//! | `output_dir` | `"out"` (overridden by `HAFX_OUT_DIR`) |
//! | `objective` | `"weights-ce"` |
//! | `[model]` | vocab 64, d_model 128, 4 layers, 4 heads, mlp 512, max_t 256 |
//! | `[attention]` | softmax φ, d′ = h_d/2, noise 0.1, window 64, 8 sinks, g 0.5, no overlap |
//! | `[lora]` | rank 8, alpha 16, targets wq wk wv wo |
//! | `[train]` | lr 3e-3 / 1e-2 / 1e-4 (pretrain / transfer / finetune), batch 16 × 4 |
//! | `[ssd]` | absent |
//! | `[[tasks]]` | recall at length 32; copy and char-LM at length 128 |

use serde::{Deserialize, Serialize};

use crate::attention::{Activation, HybridSpec, WindowSpec};
use crate::conversion::{SSDSchedule, TrainConfig, TransferObjective};
use crate::error::{Error, Result};
use crate::evalbench::{TaskKind, TaskSpec, TaskSplit};
use crate::model::{LoraConfig, ModelConfig};

pub const OUT_DIR_ENV: &str = "HAFX_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_width: usize,
    pub max_t: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            vocab_size: m.vocab_size,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            mlp_width: m.mlp_width,
            max_t: m.max_t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionSection {
    pub activation: Activation,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    pub phi_init_noise: f64,
    pub window: usize,
    /// Window used for evaluation; defaults to `window`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_window: Option<usize>,
    pub sink_count: usize,
    pub sinks_in_window: bool,
    pub g: f64,
    pub overlap: bool,
}

impl Default for AttentionSection {
    fn default() -> Self {
        let w = WindowSpec::default();
        let h = HybridSpec::default();
        Self {
            activation: Activation::Softmax,
            feature_dim: None,
            phi_init_noise: 0.1,
            window: w.window,
            eval_window: None,
            sink_count: w.sink_count,
            sinks_in_window: w.sinks_in_window,
            g: h.g,
            overlap: h.overlap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub kind: TaskKind,
    pub length: usize,
    pub n_examples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Keeps only the first this many evaluation sequences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_examples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub output_dir: String,
    pub objective: TransferObjective,
    pub model: ModelSection,
    pub attention: AttentionSection,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssd: Option<SSDSchedule>,
    pub tasks: Vec<TaskEntry>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 0,
            output_dir: "out".into(),
            objective: TransferObjective::WeightsCE,
            model: ModelSection::default(),
            attention: AttentionSection::default(),
            lora: LoraConfig::default(),
            train: TrainConfig::default(),
            ssd: None,
            tasks: TaskKind::ALL
                .into_iter()
                .map(|kind| TaskEntry {
                    kind,
                    length: if kind == TaskKind::AssocRecall { 32 } else { 128 },
                    n_examples: 512,
                    seed: None,
                    eval_examples: None,
                })
                .collect(),
        }
    }
}

/// 1-based line of `key` inside `[section]` (or the top level when
/// `section` is empty).
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let l = line.trim();
        if let Some(h) = l.strip_prefix('[') {
            current = h.trim_start_matches('[').trim_end_matches(']').trim().to_string();
            continue;
        }
        let Some((k, _)) = l.split_once('=') else { continue };
        let k = k.trim();
        let (sec, k) = match k.rsplit_once('.') {
            Some((prefix, k)) if current.is_empty() => (prefix.to_string(), k),
            _ => (current.clone(), k),
        };
        if sec == section && k == key {
            return Some(i + 1);
        }
    }
    None
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RunConfig {
    /// Parses and validates a configuration document.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field"))
                .unwrap_or("document")
                .to_string();
            Error::Config {
                key,
                line: e.span().map(|s| line_of(text, s.start)),
                message: msg,
            }
        })?;
        cfg.validate().map_err(|e| match e {
            Error::Config { key, line: None, message } => {
                let line = ["", "model", "attention", "lora", "train", "ssd", "train.plateau", "train.adamw"]
                    .iter()
                    .find_map(|s| locate(text, s, &key));
                Error::Config { key, line, message }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let a = &self.attention;
        if a.window == 0 {
            return Err(Error::config("window", "must be positive"));
        }
        if a.eval_window == Some(0) {
            return Err(Error::config("eval_window", "must be positive"));
        }
        if a.sink_count == 0 {
            return Err(Error::config("sink_count", "must be positive"));
        }
        self.hybrid().validate()?;
        self.lora.validate()?;
        self.train.validate()?;
        for (key, lr) in [
            ("lr_pretrain", self.train.lr_pretrain),
            ("lr_transfer", self.train.lr_transfer),
            ("lr_finetune", self.train.lr_finetune),
        ] {
            if lr <= 0.0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if let Some(s) = &self.ssd {
            s.validate()?;
        }
        if self.tasks.is_empty() {
            return Err(Error::config("tasks", "at least one task is required"));
        }
        for spec in self.task_specs() {
            spec.validate()?;
            if spec.length > self.model.max_t {
                return Err(Error::config("length", format!("{} exceeds model max_t", spec.length)));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size: m.vocab_size,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            mlp_width: m.mlp_width,
            max_t: m.max_t,
            seed: self.seed,
            feature_dim: self.attention.feature_dim,
            activation: self.attention.activation,
            phi_init_noise: self.attention.phi_init_noise,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn window(&self) -> WindowSpec {
        WindowSpec {
            window: self.attention.window,
            sink_count: self.attention.sink_count,
            sinks_in_window: self.attention.sinks_in_window,
        }
    }

    pub fn eval_window(&self) -> WindowSpec {
        WindowSpec {
            window: self.attention.eval_window.unwrap_or(self.attention.window),
            ..self.window()
        }
    }

    pub fn hybrid(&self) -> HybridSpec {
        HybridSpec {
            g: self.attention.g,
            overlap: self.attention.overlap,
        }
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks
            .iter()
            .map(|t| TaskSpec::new(t.kind, t.length, self.model.vocab_size, t.n_examples, t.seed.unwrap_or(self.seed)))
            .collect()
    }

    /// Every task's splits, with evaluation sets capped at `eval_examples`.
    pub fn generate_tasks(&self) -> Result<Vec<(TaskKind, TaskSplit)>> {
        self.task_specs()
            .into_iter()
            .zip(&self.tasks)
            .map(|(spec, entry)| {
                let mut split = spec.generate()?;
                if let Some(n) = entry.eval_examples {
                    split.eval.examples.truncate(n);
                }
                Ok((spec.kind, split))
            })
            .collect()
    }

    /// `output_dir`, unless `HAFX_OUT_DIR` is set.
    pub fn output_dir(&self) -> std::path::PathBuf {
        std::env::var_os(OUT_DIR_ENV)
            .map(Into::into)
            .unwrap_or_else(|| self.output_dir.clone().into())
    }
}
