//! Conversion of a softmax-attention model to hybrid attention: transfer
//! objectives, LoRA fine-tuning with scheduled sliding-window dropout, the
//! two-stage HedgeCATs pipeline and the optimiser plumbing they share.

mod objective;
mod optim;
mod pipeline;
mod ssd;
mod train;

pub use objective::{soft_label_ce_tape, transfer_loss, transfer_loss_tape, TransferObjective, CE_EPS};
pub use optim::{AdamW, AdamWConfig, Plateau, PlateauConfig};
pub use pipeline::{
    inference_time_hybrid, run_hedgecats, run_stage2, HedgeCatsConfig, HedgeCatsData, HedgeCatsOutcome,
    HybridEvaluator,
};
pub use ssd::{ssd_sample, SSDSchedule};
pub use train::{
    finetune_epoch, run_attention_transfer, run_finetune, run_pretrain, EpochRecord, FinetuneSetup, Finetuner,
    StageReport, TrainConfig, TransferSetup,
};
