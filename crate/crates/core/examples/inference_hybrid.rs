//! A model converted to linear attention alone, then evaluated with the
//! sliding window added back at inference only, with and without overlap.

use hafx::attention::{AblationMode, HybridSpec, WindowSpec};
use hafx::conversion::{inference_time_hybrid, run_attention_transfer, run_pretrain, TrainConfig, TransferObjective, TransferSetup};
use hafx::evalbench::{base_scores, TaskKind, TaskSpec};
use hafx::model::{init_model, Checkpoint, ModelConfig, Stage};

fn main() -> anyhow::Result<()> {
    let task = TaskSpec::new(TaskKind::CharLM, 32, 64, 400, 0).generate()?;
    let mut model = init_model(&ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        mlp_width: 64,
        max_t: 32,
        ..ModelConfig::default()
    })?;
    let train = TrainConfig {
        pretrain_epochs: 2,
        batch_size: 8,
        grad_accum: 1,
        ..TrainConfig::default()
    };
    run_pretrain(&mut model, &train, &task.train, &task.eval)?;
    let tasks = [(TaskKind::CharLM, &task.eval)];
    let base = base_scores(&model, &tasks)?;

    let win = WindowSpec::with_window(8);
    let setup = TransferSetup {
        objective: TransferObjective::WeightsCE,
        win,
        hy: HybridSpec::default(),
    };
    run_attention_transfer(&mut model, setup, &train, &task.train)?;
    let ckpt = Checkpoint::new(&model, Stage::PostTransfer);

    for overlap in [false, true] {
        let eval = inference_time_hybrid(&ckpt, win, HybridSpec { g: 0.5, overlap })?;
        let label = if overlap { "overlap" } else { "disjoint" };
        let report = eval.ablate(label, &tasks, &[AblationMode::FullHybrid, AblationMode::LAOnly, AblationMode::SWAOnly], &base)?;
        print!("{}", report.to_csv("inference-hybrid", !overlap));
    }
    Ok(())
}
