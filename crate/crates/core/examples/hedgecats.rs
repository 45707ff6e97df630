//! The two-stage pipeline on a small copy-task model: weight transfer with
//! linear attention alone, then hybrid LoRA fine-tuning that stops once the
//! linear branch no longer adds accuracy over the window alone.
//!
//! ```text
//! cargo run --release --example hedgecats
//! ```

use hafx::attention::{HybridSpec, WindowSpec};
use hafx::conversion::{run_hedgecats, run_pretrain, HedgeCatsConfig, HedgeCatsData, TrainConfig};
use hafx::evalbench::{TaskKind, TaskSpec};
use hafx::model::{init_model, Checkpoint, LoraConfig, ModelConfig, Stage};

fn main() -> anyhow::Result<()> {
    let task = TaskSpec::new(TaskKind::Copy, 24, 32, 600, 0).generate()?;
    let mut model = init_model(&ModelConfig {
        vocab_size: 32,
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        mlp_width: 64,
        max_t: 32,
        ..ModelConfig::default()
    })?;
    let train = TrainConfig {
        pretrain_epochs: 3,
        finetune_epochs: 3,
        batch_size: 8,
        grad_accum: 1,
        lr_finetune: 1e-3,
        ..TrainConfig::default()
    };
    let pre = run_pretrain(&mut model, &train, &task.train, &task.eval)?;
    println!("pretrain eval loss {:.3?}", pre.final_eval_loss());

    let base = Checkpoint::new(&model, Stage::Base);
    let cfg = HedgeCatsConfig {
        train,
        lora: LoraConfig::default(),
        win: WindowSpec::with_window(4),
        hy: HybridSpec::default(),
        stage2_epochs: 3,
    };
    let data = HedgeCatsData {
        train: &task.train,
        heldout: &task.eval,
        early_stop: &task.eval,
    };
    let out = run_hedgecats(&base, &cfg, &data)?;
    for r in &out.reports {
        println!("{}: eval loss {:.4?} -> {:.4?}", r.stage, r.initial_eval_loss, r.final_eval_loss());
    }
    for (i, g) in out.gaps.iter().enumerate() {
        println!("stage-2 epoch {}: full-hybrid − swa-only accuracy {g:+.4}", i + 1);
    }
    println!("selected epoch {} ({})", out.selected_epoch, out.selected().stage.name());
    Ok(())
}
