use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::objective::{transfer_loss_tape, TransferObjective};
use super::optim::{AdamW, AdamWConfig, Plateau, PlateauConfig};
use super::ssd::{ssd_sample, SSDSchedule};
use crate::attention::{AblationMode, HybridSpec, WindowSpec};
use crate::error::{Error, Result};
use crate::evalbench::{Dataset, Example};
use crate::model::{forward_tape, AttentionKind, ForwardOptions, Model, ParamGroup, ParamVars};
use crate::tensor::{SeededRng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_pretrain: f64,
    pub lr_transfer: f64,
    pub lr_finetune: f64,
    pub adamw: AdamWConfig,
    pub plateau: PlateauConfig,
    pub pretrain_epochs: usize,
    pub transfer_epochs: usize,
    pub finetune_epochs: usize,
    /// Sequences per micro-batch.
    pub batch_size: usize,
    /// Micro-batches per optimiser step.
    pub grad_accum: usize,
    /// Also train the feature maps during LoRA fine-tuning.
    pub train_phi_in_finetune: bool,
    /// Examples scored for the before/after transfer loss.
    pub transfer_eval_examples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_pretrain: 3e-3,
            lr_transfer: 1e-2,
            lr_finetune: 1e-4,
            adamw: AdamWConfig::default(),
            plateau: PlateauConfig::default(),
            pretrain_epochs: 4,
            transfer_epochs: 1,
            finetune_epochs: 2,
            batch_size: 16,
            grad_accum: 4,
            train_phi_in_finetune: false,
            transfer_eval_examples: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, lr) in [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_transfer", self.lr_transfer),
            ("lr_finetune", self.lr_finetune),
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::config(key, format!("{lr} is not a usable learning rate")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.grad_accum == 0 {
            return Err(Error::config("grad_accum", "must be at least 1"));
        }
        Ok(())
    }

    /// Sequences per optimiser step.
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }
}

/// One epoch of one stage. Everything here is deterministic given the seed
/// and config except `wall_time_s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub step_losses: Vec<f64>,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    /// Learning rate after this epoch's plateau step.
    pub lr: f64,
    pub guard_hits: usize,
    pub swa_dropped_steps: usize,
    /// Per step, the norm of the gradient reaching the unweighted
    /// sliding-window outputs (fine-tuning only).
    pub swa_grad_norms: Vec<f64>,
    /// FullHybrid minus SWAOnly accuracy, where evaluated.
    pub eval_gap: Option<f64>,
    pub checkpoint: Option<String>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    /// Held-out loss before the first update.
    pub initial_eval_loss: Option<f64>,
    pub epochs: Vec<EpochRecord>,
}

impl StageReport {
    fn new(stage: &str) -> Self {
        Self {
            stage: stage.to_string(),
            initial_eval_loss: None,
            epochs: Vec::new(),
        }
    }

    /// The report with timings zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.epochs.iter_mut().for_each(|e| e.wall_time_s = 0.0);
        r
    }

    pub fn final_eval_loss(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.eval_loss)
    }

    /// Appends one JSON line per epoch.
    pub fn append_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        for e in &self.epochs {
            let line = serde_json::to_string(e).expect("records serialise");
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

struct ExampleOut {
    loss: Var,
    guard_hits: usize,
    swa: Vec<Var>,
}

struct StepOut {
    grads: BTreeMap<String, Tensor>,
    loss: f64,
    guard_hits: usize,
    swa_grad_sq: f64,
}

fn diverged(stage: &str, epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            stage: stage.to_string(),
            epoch,
            step,
            source: Box::new(e),
        },
        other => other,
    }
}

/// Gradients averaged over `batch`, one tape per sequence.
fn accumulate(model: &Model, batch: &[&Example], trainable: &dyn Fn(ParamGroup) -> bool, f: &ExampleFn) -> Result<StepOut> {
    let mut grads: BTreeMap<String, Tensor> = model
        .params
        .iter()
        .filter(|(n, _)| trainable(ParamGroup::of(n)))
        .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
        .collect();
    let (mut loss, mut guard_hits, mut swa_grad_sq) = (0.0, 0, 0.0);
    for ex in batch {
        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, model, trainable);
        let out = f(&mut tape, model, &pv, ex)?;
        let l = tape.value(out.loss).item();
        if !l.is_finite() {
            return Err(Error::NonFinite { op: "loss".into() });
        }
        loss += l;
        guard_hits += out.guard_hits;
        let g = tape.backward(out.loss)?;
        for (name, acc) in grads.iter_mut() {
            if let Some(gt) = g.get(pv.get(name)?) {
                acc.add_assign(gt);
            }
        }
        swa_grad_sq += out.swa.iter().filter_map(|v| g.get(*v)).map(|t| t.sum_sq()).sum::<f64>();
    }
    let n = batch.len() as f64;
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    Ok(StepOut {
        grads,
        loss: loss / n,
        guard_hits,
        swa_grad_sq,
    })
}

fn epoch_order(n: usize, seed: u64, stage: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(seed, &format!("{stage}-order")).fork(&epoch.to_string()).shuffle(&mut order);
    order
}

/// Mean of `f`'s loss over `data` without updating anything.
fn mean_loss(model: &Model, data: &[Example], f: &ExampleFn) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let mut total = 0.0;
    for ex in data {
        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, model, |_| false);
        let out = f(&mut tape, model, &pv, ex)?;
        total += tape.value(out.loss).item();
    }
    Ok(total / data.len() as f64)
}

type ExampleFn = dyn Fn(&mut Tape, &Model, &ParamVars, &Example) -> Result<ExampleOut>;

fn lm_example(attention: AttentionKind, drop_swa: bool) -> Box<ExampleFn> {
    Box::new(move |tape, model, pv, ex| {
        let opts = ForwardOptions {
            attention,
            drop_swa,
            detach_layer_inputs: false,
        };
        let out = forward_tape(tape, model, pv, &ex.tokens, &opts)?;
        let loss = tape.cross_entropy(out.logits, &ex.targets)?;
        let swa = out.heads.iter().flatten().filter_map(|h| h.swa_raw).collect();
        Ok(ExampleOut {
            loss,
            guard_hits: out.guard_hits,
            swa,
        })
    })
}

/// Attention transfer settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferSetup {
    pub objective: TransferObjective,
    pub win: WindowSpec,
    pub hy: HybridSpec,
}

impl TransferSetup {
    /// The attention the student's residual stream runs on: linear attention
    /// alone over the full context for the weight and output objectives, the
    /// hybrid for the hybrid objective.
    pub fn stream_attention(&self) -> AttentionKind {
        match self.objective {
            TransferObjective::WeightsCE | TransferObjective::OutputsMSE => AttentionKind::Hybrid {
                win: self.win,
                hy: HybridSpec { g: 0.0, overlap: true },
                mode: AblationMode::LAOnly,
            },
            TransferObjective::HybridOutputsMSE => AttentionKind::Hybrid {
                win: self.win,
                hy: self.hy,
                mode: AblationMode::FullHybrid,
            },
        }
    }
}

fn transfer_example(setup: TransferSetup) -> Box<ExampleFn> {
    Box::new(move |tape, model, pv, ex| {
        let opts = ForwardOptions {
            attention: setup.stream_attention(),
            drop_swa: false,
            detach_layer_inputs: true,
        };
        let out = forward_tape(tape, model, pv, &ex.tokens, &opts)?;
        let mut total: Option<Var> = None;
        for layer in &out.heads {
            let mut layer_sum: Option<Var> = None;
            for h in layer {
                let l = transfer_loss_tape(tape, setup.objective, h.q, h.k, h.v, h.phi, setup.win, setup.hy)?;
                layer_sum = Some(match layer_sum {
                    Some(s) => tape.add(s, l)?,
                    None => l,
                });
            }
            let layer_mean = tape.scale(layer_sum.expect("at least one head"), 1.0 / layer.len() as f64)?;
            total = Some(match total {
                Some(s) => tape.add(s, layer_mean)?,
                None => layer_mean,
            });
        }
        Ok(ExampleOut {
            loss: total.expect("at least one layer"),
            guard_hits: out.guard_hits,
            swa: vec![],
        })
    })
}

struct EpochStats {
    step_losses: Vec<f64>,
    guard_hits: usize,
    dropped: usize,
    swa_grad_norms: Vec<f64>,
}

/// Runs one pass over `data` in shuffled order. `per_step` yields the
/// example function and whether the sliding-window branch is dropped.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut Model,
    cfg: &TrainConfig,
    stage: &str,
    epoch: usize,
    data: &Dataset,
    trainable: &dyn Fn(ParamGroup) -> bool,
    opt: &mut AdamW,
    lr: f64,
    mut per_step: impl FnMut() -> Result<(Box<ExampleFn>, bool)>,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Input(format!("{stage}: empty training set")));
    }
    let order = epoch_order(data.len(), cfg.seed, stage, epoch);
    let mut stats = EpochStats {
        step_losses: vec![],
        guard_hits: 0,
        dropped: 0,
        swa_grad_norms: vec![],
    };
    for (step, chunk) in order.chunks(cfg.effective_batch()).enumerate() {
        let batch: Vec<&Example> = chunk.iter().map(|&i| &data.examples[i]).collect();
        let (f, dropped) = per_step()?;
        let out = accumulate(model, &batch, trainable, &*f).map_err(|e| diverged(stage, epoch, step, e))?;
        opt.step(&mut model.params, &out.grads, lr)?;
        stats.step_losses.push(out.loss);
        stats.guard_hits += out.guard_hits;
        stats.dropped += dropped as usize;
        stats.swa_grad_norms.push(out.swa_grad_sq.sqrt());
    }
    Ok(stats)
}

fn record(stage: &str, epoch: usize, stats: EpochStats, eval_loss: Option<f64>, lr: f64, start: Instant) -> EpochRecord {
    let n = stats.step_losses.len().max(1) as f64;
    EpochRecord {
        stage: stage.to_string(),
        epoch,
        train_loss: stats.step_losses.iter().sum::<f64>() / n,
        step_losses: stats.step_losses,
        eval_loss,
        lr,
        guard_hits: stats.guard_hits,
        swa_dropped_steps: stats.dropped,
        swa_grad_norms: stats.swa_grad_norms,
        eval_gap: None,
        checkpoint: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    }
}

/// Trains all base parameters with causal softmax attention, standing in for
/// a pretrained model.
pub fn run_pretrain(model: &mut Model, cfg: &TrainConfig, train: &Dataset, heldout: &Dataset) -> Result<StageReport> {
    cfg.validate()?;
    let stage = "pretrain";
    let trainable = |g: ParamGroup| g == ParamGroup::Base;
    let f = || lm_example(AttentionKind::Softmax, false);
    let mut opt = AdamW::new(cfg.adamw);
    let mut plateau = Plateau::new(cfg.plateau, cfg.lr_pretrain);
    let mut report = StageReport::new(stage);
    report.initial_eval_loss = Some(mean_loss(model, &heldout.examples, &*f())?);
    for epoch in 1..=cfg.pretrain_epochs {
        let start = Instant::now();
        let stats = run_epoch(model, cfg, stage, epoch, train, &trainable, &mut opt, plateau.lr(), || Ok((f(), false)))?;
        let eval = mean_loss(model, &heldout.examples, &*f())?;
        plateau.step(eval);
        report.epochs.push(record(stage, epoch, stats, Some(eval), plateau.lr(), start));
    }
    Ok(report)
}

/// Trains only the feature maps so linear attention mimics each layer's
/// softmax attention. Layer inputs are the student's own (detached) hidden
/// states; queries, keys and values come from the frozen projections.
pub fn run_attention_transfer(
    model: &mut Model,
    setup: TransferSetup,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<StageReport> {
    cfg.validate()?;
    setup.hy.validate()?;
    let stage = "transfer";
    let trainable = |g: ParamGroup| g == ParamGroup::FeatureMap;
    let probe: Vec<Example> = data.examples.iter().take(cfg.transfer_eval_examples.max(1)).cloned().collect();
    let mut opt = AdamW::new(cfg.adamw);
    let mut report = StageReport::new(stage);
    report.initial_eval_loss = Some(mean_loss(model, &probe, &*transfer_example(setup))?);
    for epoch in 1..=cfg.transfer_epochs {
        let start = Instant::now();
        let stats = run_epoch(model, cfg, stage, epoch, data, &trainable, &mut opt, cfg.lr_transfer, || {
            Ok((transfer_example(setup), false))
        })?;
        let eval = mean_loss(model, &probe, &*transfer_example(setup))?;
        report.epochs.push(record(stage, epoch, stats, Some(eval), cfg.lr_transfer, start));
    }
    Ok(report)
}

/// LoRA fine-tuning settings. `mode` selects the attention trained through
/// (`FullHybrid` normally, `LAOnly` for linear-only fine-tuning).
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSetup {
    pub win: WindowSpec,
    pub hy: HybridSpec,
    pub mode: AblationMode,
    pub ssd: Option<SSDSchedule>,
}

impl FinetuneSetup {
    pub fn hybrid(win: WindowSpec, hy: HybridSpec) -> Self {
        Self {
            win,
            hy,
            mode: AblationMode::FullHybrid,
            ssd: None,
        }
    }

    fn eval_attention(&self) -> AttentionKind {
        AttentionKind::Hybrid {
            win: self.win,
            hy: self.hy,
            mode: self.mode,
        }
    }
}

/// Optimiser, scheduler and dropout state carried across fine-tuning epochs.
#[derive(Clone, Debug)]
pub struct Finetuner {
    cfg: TrainConfig,
    setup: FinetuneSetup,
    opt: AdamW,
    plateau: Plateau,
    ssd_rng: SeededRng,
}

impl Finetuner {
    pub fn new(cfg: &TrainConfig, setup: FinetuneSetup) -> Result<Self> {
        cfg.validate()?;
        setup.hy.validate()?;
        if let Some(s) = &setup.ssd {
            s.validate()?;
        }
        Ok(Self {
            opt: AdamW::new(cfg.adamw),
            plateau: Plateau::new(cfg.plateau, cfg.lr_finetune),
            ssd_rng: SeededRng::new(cfg.seed, "ssd"),
            cfg: cfg.clone(),
            setup,
        })
    }

    pub fn lr(&self) -> f64 {
        self.plateau.lr()
    }

    /// Held-out LM loss under the configured evaluation attention.
    pub fn heldout_loss(&self, model: &Model, heldout: &Dataset) -> Result<f64> {
        mean_loss(model, &heldout.examples, &*lm_example(self.setup.eval_attention(), false))
    }

    /// One epoch (numbered from 1). Each optimiser step draws one global
    /// dropout decision and window from the schedule; a dropped step zeroes
    /// the sliding-window branch in every layer without rescaling.
    pub fn epoch(&mut self, model: &mut Model, train: &Dataset, heldout: &Dataset, epoch: usize) -> Result<EpochRecord> {
        if model.lora.is_none() {
            return Err(Error::contract("fine-tuning needs LoRA adapters attached"));
        }
        let stage = "finetune";
        let phi = self.cfg.train_phi_in_finetune;
        let trainable = move |g: ParamGroup| g == ParamGroup::Lora || (phi && g == ParamGroup::FeatureMap);
        let start = Instant::now();
        let setup = self.setup.clone();
        let rng = &mut self.ssd_rng;
        let stats = run_epoch(
            model,
            &self.cfg,
            stage,
            epoch,
            train,
            &trainable,
            &mut self.opt,
            self.plateau.lr(),
            || {
                let (drop, win) = match &setup.ssd {
                    Some(s) => {
                        let (drop, w) = ssd_sample(s, epoch, rng)?;
                        (drop, WindowSpec { window: w, ..setup.win })
                    }
                    None => (false, setup.win),
                };
                let attention = AttentionKind::Hybrid {
                    win,
                    hy: setup.hy,
                    mode: setup.mode,
                };
                Ok((lm_example(attention, drop), drop))
            },
        )?;
        let eval = self.heldout_loss(model, heldout)?;
        self.plateau.step(eval);
        Ok(record(stage, epoch, stats, Some(eval), self.plateau.lr(), start))
    }
}

/// One fine-tuning epoch; see [`Finetuner::epoch`].
pub fn finetune_epoch(
    tuner: &mut Finetuner,
    model: &mut Model,
    train: &Dataset,
    heldout: &Dataset,
    epoch: usize,
) -> Result<EpochRecord> {
    tuner.epoch(model, train, heldout, epoch)
}

/// `cfg.finetune_epochs` epochs of LoRA fine-tuning.
pub fn run_finetune(
    model: &mut Model,
    cfg: &TrainConfig,
    setup: FinetuneSetup,
    train: &Dataset,
    heldout: &Dataset,
) -> Result<StageReport> {
    let mut tuner = Finetuner::new(cfg, setup)?;
    let mut report = StageReport::new("finetune");
    report.initial_eval_loss = Some(tuner.heldout_loss(model, heldout)?);
    for epoch in 1..=cfg.finetune_epochs {
        report.epochs.push(tuner.epoch(model, train, heldout, epoch)?);
    }
    Ok(report)
}
