//! Component collapse on associative recall.
//!
//! Pretrains the softmax model described by a recipe, converts it twice
//! (hybrid-output MSE and attention-weight cross-entropy) and prints the
//! ablation table for each at the recipe's evaluation window. The
//! cross-entropy model is also scored as a pure linear-attention model.
//!
//! ```text
//! cargo run --release --example collapse [recipes/collapse.cfg]
//! ```

use std::collections::BTreeMap;
use std::time::Instant;

use hafx::attention::{AblationMode, HybridSpec};
use hafx::cli::RunConfig;
use hafx::conversion::{run_attention_transfer, run_pretrain, TransferObjective, TransferSetup};
use hafx::evalbench::{base_scores, evaluate_ablations, TaskKind};
use hafx::model::init_model;

fn main() -> anyhow::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../recipes/collapse.cfg").to_string());
    let cfg = RunConfig::parse(&std::fs::read_to_string(&path)?)?;
    let train = cfg.train_config();
    let (_, task) = cfg
        .generate_tasks()?
        .into_iter()
        .find(|(k, _)| *k == TaskKind::AssocRecall)
        .ok_or_else(|| anyhow::anyhow!("{path} has no assoc-recall task"))?;

    let t0 = Instant::now();
    let mut base = init_model(&cfg.model_config())?;
    let report = run_pretrain(&mut base, &train, &task.train, &task.eval)?;
    for e in &report.epochs {
        println!("pretrain epoch {} train {:.3} eval {:.3?} ({:.1}s)", e.epoch, e.train_loss, e.eval_loss, e.wall_time_s);
    }
    base.quantize_f32();
    let tasks = [(TaskKind::AssocRecall, &task.eval)];
    let reference = base_scores(&base, &tasks)?;
    println!("softmax accuracy {:?} after {:.1}s", reference, t0.elapsed().as_secs_f64());

    let eval_win = cfg.eval_window();
    for objective in [TransferObjective::HybridOutputsMSE, TransferObjective::WeightsCE] {
        let mut m = base.clone();
        let setup = TransferSetup {
            objective,
            win: cfg.window(),
            hy: cfg.hybrid(),
        };
        let r = run_attention_transfer(&mut m, setup, &train, &task.train)?;
        m.quantize_f32();
        println!("{objective}: loss {:.4?} -> {:.4?}", r.initial_eval_loss, r.final_eval_loss());
        let report =
            evaluate_ablations(&m, objective.name(), &tasks, &AblationMode::ALL, cfg.hybrid(), eval_win, &reference)?;
        print!("{}", report.to_csv(&cfg.run_id, false));
        if objective == TransferObjective::WeightsCE {
            let la = HybridSpec { g: 0.0, overlap: true };
            let report =
                evaluate_ablations(&m, "weights-ce-la", &tasks, &[AblationMode::LAOnly], la, eval_win, &BTreeMap::new())?;
            print!("{}", report.to_csv(&cfg.run_id, false));
        }
    }
    Ok(())
}
