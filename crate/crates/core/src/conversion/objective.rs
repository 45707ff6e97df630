//! Attention-transfer objectives. The teacher is always full causal softmax
//! attention on the same queries, keys and values the student sees.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{
    band_softmax_attention_tape, causal_softmax_weights, feature_map_tape, hybrid_head_tape,
    linear_attention_tape, AblationMode, AttentionInputs, FeatureMapParams, FeatureMapVars,
    HybridSpec, KeyBand, WindowSpec, LA_EPS,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Guard inside the logarithm of the soft-label cross-entropy.
pub const CE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransferObjective {
    /// Soft-label cross-entropy between softmax and linear attention weights.
    #[serde(rename = "weights-ce")]
    WeightsCE,
    /// MSE between softmax outputs and linear-attention-only outputs.
    #[serde(rename = "outputs-mse")]
    OutputsMSE,
    /// MSE between softmax outputs and hybrid outputs.
    #[serde(rename = "hybrid-outputs-mse")]
    HybridOutputsMSE,
}

impl TransferObjective {
    pub const ALL: [TransferObjective; 3] = [
        TransferObjective::WeightsCE,
        TransferObjective::OutputsMSE,
        TransferObjective::HybridOutputsMSE,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransferObjective::WeightsCE => "weights-ce",
            TransferObjective::OutputsMSE => "outputs-mse",
            TransferObjective::HybridOutputsMSE => "hybrid-outputs-mse",
        }
    }
}

impl fmt::Display for TransferObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransferObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::config("objective", format!("unknown transfer objective `{s}`")))
    }
}

fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        m.row_mut(i)[..=i].fill(1.0);
    }
    m
}

/// `−mean_t Σ_i teacher(t,i) · log p(t,i)` where `p` row-normalises the
/// causally masked non-negative `scores`.
pub fn soft_label_ce_tape(tape: &mut Tape, teacher: &Tensor, scores: Var) -> Result<Var> {
    let (t, c) = tape.value(scores).dims2();
    if teacher.shape() != [t, c] || t != c {
        return Err(Error::dim("teacher and student weights must both be T×T"));
    }
    let mask = tape.constant(causal_mask(t));
    let masked = tape.mul(scores, mask)?;
    let p = tape.row_normalize(masked, LA_EPS)?;
    let logp = tape.log_eps(p, CE_EPS)?;
    let w = tape.constant(teacher.clone());
    let prod = tape.mul(logp, w)?;
    let total = tape.sum(prod)?;
    tape.scale(total, -1.0 / t as f64)
}

fn mse(tape: &mut Tape, teacher: &Tensor, student: Var) -> Result<Var> {
    let t = tape.constant(teacher.clone());
    let diff = tape.sub(student, t)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// One head's transfer loss. `q`, `k`, `v` are that head's (post-RoPE)
/// queries, keys and values; only `phi` should carry gradients.
#[allow(clippy::too_many_arguments)]
pub fn transfer_loss_tape(
    tape: &mut Tape,
    objective: TransferObjective,
    q: Var,
    k: Var,
    v: Var,
    phi: FeatureMapVars,
    win: WindowSpec,
    hy: HybridSpec,
) -> Result<Var> {
    match objective {
        TransferObjective::WeightsCE => {
            let teacher = causal_softmax_weights(tape.value(q), tape.value(k))?;
            let fq = feature_map_tape(tape, phi, q)?;
            let fk = feature_map_tape(tape, phi, k)?;
            let scores = tape.matmul_bt(fq, fk)?;
            soft_label_ce_tape(tape, &teacher, scores)
        }
        TransferObjective::OutputsMSE => {
            let teacher = teacher_outputs(tape, q, k, v)?;
            let fq = feature_map_tape(tape, phi, q)?;
            let fk = feature_map_tape(tape, phi, k)?;
            let (la, _) = linear_attention_tape(tape, fq, fk, v, 0)?;
            mse(tape, &teacher, la)
        }
        TransferObjective::HybridOutputsMSE => {
            let teacher = teacher_outputs(tape, q, k, v)?;
            let head = hybrid_head_tape(tape, q, k, v, phi, win, hy, AblationMode::FullHybrid, false)?;
            mse(tape, &teacher, head.out)
        }
    }
}

fn teacher_outputs(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Tensor> {
    let mut scratch = Tape::new();
    let (q, k, v) = (
        scratch.constant(tape.value(q).clone()),
        scratch.constant(tape.value(k).clone()),
        scratch.constant(tape.value(v).clone()),
    );
    let o = band_softmax_attention_tape(&mut scratch, q, k, v, KeyBand::Causal)?;
    Ok(scratch.value(o).clone())
}

/// Value of [`transfer_loss_tape`] for plain tensors.
pub fn transfer_loss(
    objective: TransferObjective,
    inputs: &AttentionInputs,
    fm: &FeatureMapParams,
    win: WindowSpec,
    hy: HybridSpec,
) -> Result<f64> {
    inputs.validate()?;
    let mut tape = Tape::new();
    let q = tape.constant(inputs.q.clone());
    let k = tape.constant(inputs.k.clone());
    let v = tape.constant(inputs.v.clone());
    let phi = FeatureMapVars::record(&mut tape, fm, false);
    let l = transfer_loss_tape(&mut tape, objective, q, k, v, phi, win, hy)?;
    Ok(tape.value(l).item())
}
