mod common;

use common::*;
use hafx::attention::AblationMode;
use hafx::conversion::{
    inference_time_hybrid, run_attention_transfer, run_finetune, run_hedgecats, run_pretrain, run_stage2,
    FinetuneSetup, Finetuner, HedgeCatsConfig, HedgeCatsData, SSDSchedule, TrainConfig, TransferObjective,
    TransferSetup,
};
use hafx::error::Error;
use hafx::evalbench::evaluate_model;
use hafx::model::{AttentionKind, Checkpoint, LoraConfig, Model, ParamGroup, Stage};

fn setup(objective: TransferObjective) -> TransferSetup {
    TransferSetup {
        objective,
        win: window(),
        hy: hybrid(),
    }
}

fn lora_model() -> Model {
    let mut m = tiny_model();
    m.lora_attach(&LoraConfig::default()).unwrap();
    m
}

fn ssd(rate: f64) -> FinetuneSetup {
    FinetuneSetup {
        ssd: Some(SSDSchedule {
            dropout_per_epoch: vec![rate],
            window_per_epoch: vec![window().window],
        }),
        ..FinetuneSetup::hybrid(window(), hybrid())
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let (train, eval) = recall(16);
    let cfg = TrainConfig {
        lr_pretrain: 0.0,
        lr_transfer: 0.0,
        lr_finetune: 0.0,
        ..tiny_train()
    };
    let mut m = tiny_model();
    let before = m.params.clone();
    run_pretrain(&mut m, &cfg, &train, &eval).unwrap();
    run_attention_transfer(&mut m, setup(TransferObjective::WeightsCE), &cfg, &train).unwrap();
    assert_eq!(m.params, before);

    let mut m = lora_model();
    let before = m.params.clone();
    run_finetune(&mut m, &cfg, FinetuneSetup::hybrid(window(), hybrid()), &train, &eval).unwrap();
    assert_eq!(m.params, before);
}

#[test]
fn transfer_moves_only_feature_maps() {
    let (train, _) = recall(16);
    for objective in [
        TransferObjective::WeightsCE,
        TransferObjective::OutputsMSE,
        TransferObjective::HybridOutputsMSE,
    ] {
        let mut m = tiny_model();
        let before = m.params.clone();
        run_attention_transfer(&mut m, setup(objective), &tiny_train(), &train).unwrap();
        let mut phi_moved = false;
        for (name, t) in &m.params {
            if ParamGroup::of(name) == ParamGroup::FeatureMap {
                phi_moved |= t != &before[name];
            } else {
                assert_eq!(t, &before[name], "{objective}: {name}");
            }
        }
        assert!(phi_moved, "{objective}");
    }
}

#[test]
fn weights_ce_transfer_reduces_its_loss() {
    let (train, _) = recall(64);
    let cfg = TrainConfig {
        transfer_epochs: 2,
        ..tiny_train()
    };
    let mut m = tiny_model();
    let r = run_attention_transfer(&mut m, setup(TransferObjective::WeightsCE), &cfg, &train).unwrap();
    assert!(r.final_eval_loss().unwrap() < r.initial_eval_loss.unwrap(), "{r:?}");
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (train, eval) = recall(16);
    let run = || {
        let mut m = tiny_model();
        let a = run_pretrain(&mut m, &tiny_train(), &train, &eval).unwrap();
        let b = run_attention_transfer(&mut m, setup(TransferObjective::WeightsCE), &tiny_train(), &train).unwrap();
        m.lora_attach(&LoraConfig::default()).unwrap();
        let c = run_finetune(&mut m, &tiny_train(), ssd(0.5), &train, &eval).unwrap();
        let bytes = Checkpoint::new(&m, Stage::PostFinetune).to_bytes();
        ([a, b, c].map(|r| r.without_timing()), bytes)
    };
    assert!(run() == run());
}

#[test]
fn full_dropout_trains_exactly_like_linear_only() {
    let (train, eval) = recall(16);
    let mut dropped = lora_model();
    let r_drop = run_finetune(&mut dropped, &tiny_train(), ssd(1.0), &train, &eval).unwrap();
    let mut la = lora_model();
    let la_setup = FinetuneSetup {
        mode: AblationMode::LAOnly,
        ..FinetuneSetup::hybrid(window(), hybrid())
    };
    let r_la = run_finetune(&mut la, &tiny_train(), la_setup, &train, &eval).unwrap();
    assert_eq!(dropped.params, la.params);
    for (d, l) in r_drop.epochs.iter().zip(&r_la.epochs) {
        assert_eq!(d.step_losses, l.step_losses);
        assert_eq!(d.swa_dropped_steps, d.step_losses.len());
        assert!(!d.swa_grad_norms.is_empty());
        assert!(d.swa_grad_norms.iter().all(|&n| n == 0.0));
    }
}

#[test]
fn zero_dropout_matches_plain_hybrid() {
    let (train, eval) = recall(16);
    let mut a = lora_model();
    let ra = run_finetune(&mut a, &tiny_train(), ssd(0.0), &train, &eval).unwrap();
    let mut b = lora_model();
    let rb = run_finetune(&mut b, &tiny_train(), FinetuneSetup::hybrid(window(), hybrid()), &train, &eval).unwrap();
    assert_eq!(a.params, b.params);
    for (x, y) in ra.epochs.iter().zip(&rb.epochs) {
        assert_eq!(x.step_losses, y.step_losses);
        assert_eq!(x.swa_dropped_steps, 0);
        assert!(x.swa_grad_norms.iter().all(|&n| n > 0.0));
    }
}

#[test]
fn finetuning_without_adapters_is_a_contract_error() {
    let (train, eval) = recall(8);
    let mut m = tiny_model();
    let mut tuner = Finetuner::new(&tiny_train(), FinetuneSetup::hybrid(window(), hybrid())).unwrap();
    assert!(matches!(tuner.epoch(&mut m, &train, &eval, 1), Err(Error::Contract(_))));
}

fn hedgecats_config(stage2_epochs: usize) -> HedgeCatsConfig {
    HedgeCatsConfig {
        train: tiny_train(),
        lora: LoraConfig::default(),
        win: window(),
        hy: hybrid(),
        stage2_epochs,
    }
}

#[test]
fn hedgecats_without_stage_two_returns_stage_one() {
    let (train, eval) = recall(16);
    let data = HedgeCatsData {
        train: &train,
        heldout: &eval,
        early_stop: &eval,
    };
    let base = Checkpoint::new(&tiny_model(), Stage::Base);
    let out = run_hedgecats(&base, &hedgecats_config(0), &data).unwrap();
    assert_eq!(out.selected_epoch, 0);
    assert!(out.stage2.is_empty());
    assert_eq!(out.selected().stage, Stage::PostTransfer);
    assert!(out.selected().model.lora.is_none());
    assert_eq!(out.reports.len(), 1);
}

#[test]
fn hedgecats_rejects_converted_inputs() {
    let (train, eval) = recall(8);
    let data = HedgeCatsData {
        train: &train,
        heldout: &eval,
        early_stop: &eval,
    };
    let ckpt = Checkpoint::new(&tiny_model(), Stage::PostTransfer);
    assert!(matches!(run_hedgecats(&ckpt, &hedgecats_config(1), &data), Err(Error::Contract(_))));
    let ckpt = Checkpoint::new(&lora_model(), Stage::Base);
    assert!(matches!(run_hedgecats(&ckpt, &hedgecats_config(1), &data), Err(Error::Contract(_))));
}

#[test]
fn hedgecats_selection_and_resumption() {
    let (train, eval) = recall(16);
    let data = HedgeCatsData {
        train: &train,
        heldout: &eval,
        early_stop: &eval,
    };
    let cfg = hedgecats_config(3);
    let base = Checkpoint::new(&tiny_model(), Stage::Base);
    let out = run_hedgecats(&base, &cfg, &data).unwrap();
    assert_eq!(out.stage2.len(), out.gaps.len());
    assert!(!out.gaps.is_empty() && out.gaps.len() <= 3);
    assert!(out.selected_epoch <= out.gaps.len());
    assert!(out.gaps[..out.selected_epoch].iter().all(|&g| g > 0.0));
    if out.gaps.len() < 3 {
        assert!(*out.gaps.last().unwrap() <= 0.0);
    }

    let stage1 = Checkpoint::from_bytes(&out.stage1.to_bytes()).unwrap();
    let (ckpts, gaps, selected, report) = run_stage2(&stage1, &cfg, &data).unwrap();
    assert_eq!(gaps, out.gaps);
    assert_eq!(selected, out.selected_epoch);
    assert_eq!(report.without_timing(), out.reports[1].without_timing());
    for (a, b) in ckpts.iter().zip(&out.stage2) {
        assert_eq!(a.to_bytes(), b.to_bytes());
    }
}

#[test]
fn inference_time_hybrid_leaves_weights_alone() {
    let (_, eval) = recall(16);
    let m = tiny_model();
    let ckpt = Checkpoint::new(&m, Stage::PostTransfer);
    let h = inference_time_hybrid(&ckpt, window(), hybrid()).unwrap();
    assert_eq!(h.model.params, ckpt.model.params);
    for mode in AblationMode::ALL {
        let direct = evaluate_model(&ckpt.model, &h.attention(mode), &eval).unwrap();
        assert_eq!(h.score(mode, &eval).unwrap(), direct);
    }
    let overlap = hafx::attention::HybridSpec { g: 0.5, overlap: true };
    let h = inference_time_hybrid(&ckpt, window(), overlap).unwrap();
    assert!(matches!(
        h.attention(AblationMode::FullHybrid),
        AttentionKind::Hybrid { hy, .. } if hy.overlap
    ));
    let bad = hafx::attention::HybridSpec { g: -0.1, overlap: false };
    assert!(inference_time_hybrid(&ckpt, window(), bad).is_err());
}
