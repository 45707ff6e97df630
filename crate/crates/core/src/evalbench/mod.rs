//! Synthetic tasks, the ablation harness, the recovered-performance metric
//! and the streaming-versus-quadratic scaling benchmark.

pub mod bench;
pub mod tasks;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::attention::{AblationMode, HybridSpec, WindowSpec};
use crate::error::{Error, Result};
use crate::model::{forward_logits, AttentionKind, Model};

pub use bench::{benchmark_scaling, BenchReport, BenchRow, BenchPath};
pub use tasks::{corpus_ids, Dataset, Example, TaskKind, TaskSpec, TaskSplit};

/// `100 · mode_avg / base_avg`.
pub fn recovered_performance(mode_avg: f64, base_avg: f64) -> Result<f64> {
    if !(base_avg > 0.0) {
        return Err(Error::contract(format!("base score {base_avg} must be positive")));
    }
    Ok(100.0 * mode_avg / base_avg)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskScore {
    pub accuracy: f64,
    pub loss: f64,
    /// Number of scored positions.
    pub n: usize,
}

impl TaskScore {
    /// Standard error of the accuracy under a binomial model with success
    /// probability `p`.
    pub fn binomial_sigma(&self, p: f64) -> f64 {
        (p * (1.0 - p) / self.n.max(1) as f64).sqrt()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy and mean cross-entropy over every scored position of `data`.
pub fn evaluate_model(model: &Model, attention: &AttentionKind, data: &Dataset) -> Result<TaskScore> {
    let (mut correct, mut n, mut loss) = (0usize, 0usize, 0.0);
    for ex in &data.examples {
        let logits = forward_logits(model, &ex.tokens, attention)?;
        for (t, y) in ex.targets.iter().enumerate() {
            let Some(y) = *y else { continue };
            let row = logits.row(t);
            if argmax(row) == y {
                correct += 1;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Input("evaluation set has no scored positions".into()));
    }
    Ok(TaskScore {
        accuracy: correct as f64 / n as f64,
        loss: loss / n as f64,
        n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub mode: AblationMode,
    /// A task name, or `avg` for the mean over tasks.
    pub task: String,
    pub score: TaskScore,
    pub recovered_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub stage: String,
    pub rows: Vec<EvalRow>,
    /// Softmax-attention reference accuracy per task.
    pub base: BTreeMap<String, f64>,
}

pub const EVAL_CSV_HEADER: &str = "run_id,stage,mode,task,metric,value,recovered_pct";

impl EvalReport {
    pub fn row(&self, mode: AblationMode, task: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.mode == mode && r.task == task)
    }

    pub fn accuracy(&self, mode: AblationMode, task: &str) -> Option<f64> {
        self.row(mode, task).map(|r| r.score.accuracy)
    }

    /// Accuracy rows tagged with `run_id`, in a fixed column order.
    pub fn to_csv(&self, run_id: &str, with_header: bool) -> String {
        let mut out = String::new();
        if with_header {
            out.push_str(EVAL_CSV_HEADER);
            out.push('\n');
        }
        for r in &self.rows {
            let rec = r.recovered_pct.map(|p| format!("{p:.2}")).unwrap_or_default();
            writeln!(out, "{run_id},{},{},{},accuracy,{:.6},{rec}", self.stage, r.mode, r.task, r.score.accuracy)
                .expect("writing to a string");
        }
        out
    }
}

/// Per-mode scores on every task, with identical data for each mode.
/// `base` holds reference accuracies keyed by task name; recovered
/// percentages are filled in where a positive reference exists. With more
/// than one task an `avg` row per mode is appended.
pub fn evaluate_ablations(
    model: &Model,
    stage: &str,
    tasks: &[(TaskKind, &Dataset)],
    modes: &[AblationMode],
    hy: HybridSpec,
    win: WindowSpec,
    base: &BTreeMap<String, f64>,
) -> Result<EvalReport> {
    hy.validate()?;
    let mut rows = Vec::new();
    for &mode in modes {
        let attention = AttentionKind::Hybrid { win, hy, mode };
        let mut accs = Vec::new();
        for (kind, data) in tasks {
            let score = evaluate_model(model, &attention, data)?;
            let task = kind.name().to_string();
            let recovered_pct = match base.get(&task) {
                Some(&b) if b > 0.0 => Some(recovered_performance(score.accuracy, b)?),
                _ => None,
            };
            accs.push(score);
            rows.push(EvalRow {
                mode,
                task,
                score,
                recovered_pct,
            });
        }
        if tasks.len() > 1 {
            let k = accs.len() as f64;
            let avg = TaskScore {
                accuracy: accs.iter().map(|s| s.accuracy).sum::<f64>() / k,
                loss: accs.iter().map(|s| s.loss).sum::<f64>() / k,
                n: accs.iter().map(|s| s.n).sum(),
            };
            let base_avg = tasks
                .iter()
                .map(|(t, _)| base.get(t.name()).copied())
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.iter().sum::<f64>() / k);
            let recovered_pct = match base_avg {
                Some(b) if b > 0.0 => Some(recovered_performance(avg.accuracy, b)?),
                _ => None,
            };
            rows.push(EvalRow {
                mode,
                task: "avg".into(),
                score: avg,
                recovered_pct,
            });
        }
    }
    Ok(EvalReport {
        stage: stage.to_string(),
        rows,
        base: base.clone(),
    })
}

/// Reference accuracies of `model` under full causal softmax attention.
pub fn base_scores(model: &Model, tasks: &[(TaskKind, &Dataset)]) -> Result<BTreeMap<String, f64>> {
    tasks
        .iter()
        .map(|(k, d)| Ok((k.name().to_string(), evaluate_model(model, &AttentionKind::Softmax, d)?.accuracy)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use proptest::prelude::*;

    #[test]
    fn recovered_performance_arithmetic() {
        assert!((recovered_performance(65.56, 68.26).unwrap() - 96.04).abs() < 0.01);
        assert!((recovered_performance(34.40, 68.26).unwrap() - 50.39).abs() < 0.01);
        assert_eq!(recovered_performance(3.0, 3.0).unwrap(), 100.0);
        assert!(matches!(recovered_performance(1.0, 0.0), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn recovered_performance_is_scale_invariant(m in 0.0f64..100.0, b in 0.01f64..100.0, c in 0.01f64..100.0) {
            let a = recovered_performance(m, b).unwrap();
            let s = recovered_performance(c * m, c * b).unwrap();
            prop_assert!((a - s).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    fn tiny() -> Model {
        init_model(&ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            mlp_width: 16,
            max_t: 32,
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn report_has_one_row_per_mode_and_task() {
        let m = tiny();
        let recall = TaskSpec::new(TaskKind::AssocRecall, 12, 64, 4, 0).generate().unwrap();
        let copy = TaskSpec::new(TaskKind::Copy, 12, 64, 4, 0).generate().unwrap();
        let tasks = [(TaskKind::AssocRecall, &recall.eval), (TaskKind::Copy, &copy.eval)];
        let base = base_scores(&m, &tasks).unwrap();
        let r = evaluate_ablations(
            &m,
            "base",
            &tasks,
            &AblationMode::ALL,
            HybridSpec::default(),
            WindowSpec::with_window(4),
            &base,
        )
        .unwrap();
        assert_eq!(r.rows.len(), 6 * 3);
        let csv = r.to_csv("r1", true);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], EVAL_CSV_HEADER);
        assert_eq!(lines.len(), 19);
        assert!(lines[1].starts_with("r1,base,full-hybrid,assoc-recall,accuracy,"));
        assert_eq!(r.to_csv("r1", true), csv);
        assert_eq!(r.to_csv("r1", false), csv.split_once('\n').unwrap().1);
    }

    #[test]
    fn binomial_sigma() {
        let s = TaskScore {
            accuracy: 0.5,
            loss: 0.0,
            n: 100,
        };
        assert!((s.binomial_sigma(0.5) - 0.05).abs() < 1e-15);
    }
}
