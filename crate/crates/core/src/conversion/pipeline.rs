//! Multi-stage conversion pipelines.

use super::objective::TransferObjective;
use super::train::{run_attention_transfer, FinetuneSetup, Finetuner, StageReport, TrainConfig, TransferSetup};
use crate::attention::{AblationMode, HybridSpec, WindowSpec};
use crate::error::{Error, Result};
use crate::evalbench::{evaluate_ablations, evaluate_model, Dataset, EvalReport, TaskKind, TaskScore};
use crate::model::{AttentionKind, Checkpoint, LoraConfig, Model, Stage};

#[derive(Clone, Debug, PartialEq)]
pub struct HedgeCatsConfig {
    pub train: TrainConfig,
    pub lora: LoraConfig,
    /// Window and mix used while fine-tuning and for the early-stop check.
    pub win: WindowSpec,
    pub hy: HybridSpec,
    pub stage2_epochs: usize,
}

pub struct HedgeCatsData<'a> {
    pub train: &'a Dataset,
    pub heldout: &'a Dataset,
    /// Task examples scored for the early-stop gap.
    pub early_stop: &'a Dataset,
}

#[derive(Clone, Debug)]
pub struct HedgeCatsOutcome {
    pub stage1: Checkpoint,
    /// One checkpoint per completed stage-2 epoch.
    pub stage2: Vec<Checkpoint>,
    /// FullHybrid minus SWAOnly accuracy after each stage-2 epoch.
    pub gaps: Vec<f64>,
    /// 0 selects the stage-1 checkpoint.
    pub selected_epoch: usize,
    pub reports: Vec<StageReport>,
}

impl HedgeCatsOutcome {
    pub fn selected(&self) -> &Checkpoint {
        match self.selected_epoch {
            0 => &self.stage1,
            e => &self.stage2[e - 1],
        }
    }
}

fn gap(model: &Model, data: &Dataset, win: WindowSpec, hy: HybridSpec) -> Result<f64> {
    let acc = |mode| -> Result<f64> {
        Ok(evaluate_model(model, &AttentionKind::Hybrid { win, hy, mode }, data)?.accuracy)
    };
    Ok(acc(AblationMode::FullHybrid)? - acc(AblationMode::SWAOnly)?)
}

/// Stage 1: attention-weight transfer with linear attention alone. Stage 2:
/// LoRA fine-tuning through the hybrid, stopping after the first epoch whose
/// FullHybrid − SWAOnly accuracy gap is not positive. The selected
/// checkpoint is the last one with a positive gap (stage 1 if none).
/// Parameters are rounded to checkpoint precision at every stage boundary so
/// a run resumed from a stage checkpoint continues identically.
pub fn run_hedgecats(base: &Checkpoint, cfg: &HedgeCatsConfig, data: &HedgeCatsData<'_>) -> Result<HedgeCatsOutcome> {
    if base.stage != Stage::Base || base.model.lora.is_some() {
        return Err(Error::contract(format!(
            "HedgeCATs starts from a base checkpoint, got stage `{}`",
            base.stage.name()
        )));
    }
    let mut model = base.model.clone();
    let setup = TransferSetup {
        objective: TransferObjective::WeightsCE,
        win: cfg.win,
        hy: cfg.hy,
    };
    let mut t_report = run_attention_transfer(&mut model, setup, &cfg.train, data.train)?;
    let stage1 = Checkpoint::new(&model, Stage::PostTransfer);
    if let Some(e) = t_report.epochs.last_mut() {
        e.checkpoint = Some("hedgecats-stage1".into());
    }
    let mut reports = vec![t_report];
    if cfg.stage2_epochs == 0 {
        return Ok(HedgeCatsOutcome {
            stage1,
            stage2: vec![],
            gaps: vec![],
            selected_epoch: 0,
            reports,
        });
    }

    let (stage2, gaps, selected_epoch, report) = run_stage2(&stage1, cfg, data)?;
    reports.push(report);
    Ok(HedgeCatsOutcome {
        stage1,
        stage2,
        gaps,
        selected_epoch,
        reports,
    })
}

/// Stage 2 of [`run_hedgecats`], resumable from its stage-1 checkpoint.
pub fn run_stage2(
    stage1: &Checkpoint,
    cfg: &HedgeCatsConfig,
    data: &HedgeCatsData<'_>,
) -> Result<(Vec<Checkpoint>, Vec<f64>, usize, StageReport)> {
    if stage1.stage != Stage::PostTransfer {
        return Err(Error::contract("stage 2 needs a post-transfer checkpoint"));
    }
    let mut model = stage1.model.clone();
    model.lora_attach(&cfg.lora)?;
    let mut tuner = Finetuner::new(&cfg.train, FinetuneSetup::hybrid(cfg.win, cfg.hy))?;
    let mut report = StageReport {
        stage: "finetune".into(),
        initial_eval_loss: Some(tuner.heldout_loss(&model, data.heldout)?),
        epochs: vec![],
    };
    let (mut ckpts, mut gaps, mut selected) = (vec![], vec![], 0);
    for epoch in 1..=cfg.stage2_epochs {
        let mut rec = tuner.epoch(&mut model, data.train, data.heldout, epoch)?;
        let g = gap(&model, data.early_stop, cfg.win, cfg.hy)?;
        rec.eval_gap = Some(g);
        rec.checkpoint = Some(format!("hedgecats-stage2-epoch{epoch}"));
        report.epochs.push(rec);
        ckpts.push(Checkpoint::new(&model, Stage::PostFinetune));
        gaps.push(g);
        if g <= 0.0 {
            break;
        }
        selected = epoch;
    }
    Ok((ckpts, gaps, selected, report))
}

/// A converted model evaluated with sliding-window attention added back at
/// inference only. Weights are not modified.
#[derive(Clone, Debug)]
pub struct HybridEvaluator {
    pub model: Model,
    pub win: WindowSpec,
    pub hy: HybridSpec,
}

pub fn inference_time_hybrid(ckpt: &Checkpoint, win: WindowSpec, hy: HybridSpec) -> Result<HybridEvaluator> {
    hy.validate()?;
    Ok(HybridEvaluator {
        model: ckpt.model.clone(),
        win,
        hy,
    })
}

impl HybridEvaluator {
    pub fn attention(&self, mode: AblationMode) -> AttentionKind {
        AttentionKind::Hybrid {
            win: self.win,
            hy: self.hy,
            mode,
        }
    }

    pub fn score(&self, mode: AblationMode, data: &Dataset) -> Result<TaskScore> {
        evaluate_model(&self.model, &self.attention(mode), data)
    }

    pub fn ablate(
        &self,
        stage: &str,
        tasks: &[(TaskKind, &Dataset)],
        modes: &[AblationMode],
        base: &std::collections::BTreeMap<String, f64>,
    ) -> Result<EvalReport> {
        evaluate_ablations(&self.model, stage, tasks, modes, self.hy, self.win, base)
    }
}
