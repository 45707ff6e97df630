#![allow(dead_code)]

use hafx::attention::{HybridSpec, WindowSpec};
use hafx::conversion::TrainConfig;
use hafx::evalbench::{Dataset, TaskKind, TaskSpec, TaskSplit};
use hafx::model::{init_model, Model, ModelConfig};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        mlp_width: 32,
        max_t: 32,
        seed: 3,
        ..ModelConfig::default()
    }
}

pub fn tiny_model() -> Model {
    init_model(&tiny_config()).unwrap()
}

pub fn tiny_task(kind: TaskKind, n: usize) -> TaskSplit {
    TaskSpec::new(kind, 14, 32, n, 1).generate().unwrap()
}

pub fn tiny_train() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        grad_accum: 2,
        pretrain_epochs: 1,
        transfer_epochs: 1,
        finetune_epochs: 2,
        transfer_eval_examples: 8,
        ..TrainConfig::default()
    }
}

pub fn window() -> WindowSpec {
    WindowSpec {
        window: 4,
        sink_count: 1,
        sinks_in_window: false,
    }
}

pub fn hybrid() -> HybridSpec {
    HybridSpec::default()
}

pub fn recall(n: usize) -> (Dataset, Dataset) {
    let s = tiny_task(TaskKind::AssocRecall, n);
    (s.train, s.eval)
}
