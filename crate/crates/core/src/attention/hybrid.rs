//! Fixed-mix hybrid of sliding-window softmax and linear attention, plus the
//! inference-time ablation modes used to attribute performance to each branch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::feature_map::{feature_map_tape, FeatureMapParams, FeatureMapVars};
use super::linear::linear_attention_tape;
use super::softmax::{band_softmax_attention_tape, KeyBand};
use super::AttentionInputs;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window: usize,
    pub sink_count: usize,
    /// Let the hybrid's sliding window also see the first `sink_count` tokens.
    pub sinks_in_window: bool,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            window: 64,
            sink_count: 8,
            sinks_in_window: false,
        }
    }
}

impl WindowSpec {
    pub fn with_window(window: usize) -> Self {
        Self {
            window,
            ..Self::default()
        }
    }

    fn swa_band(&self) -> KeyBand {
        if self.sinks_in_window {
            KeyBand::WindowWithSinks {
                window: self.window,
                sinks: self.sink_count,
            }
        } else {
            KeyBand::Window(self.window)
        }
    }
}

/// `a = g·1`, `b = (1 − g)·1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridSpec {
    pub g: f64,
    /// Linear attention also sees the tokens inside the window.
    pub overlap: bool,
}

impl Default for HybridSpec {
    fn default() -> Self {
        Self {
            g: 0.5,
            overlap: false,
        }
    }
}

impl HybridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.g) {
            return Err(Error::config("g", format!("{} is outside [0, 1]", self.g)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    FullHybrid,
    #[serde(rename = "swa-only")]
    SWAOnly,
    #[serde(rename = "la-only")]
    LAOnly,
    SinksOnly,
    NoAttention,
    HybridOverlap,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::FullHybrid,
        AblationMode::SWAOnly,
        AblationMode::LAOnly,
        AblationMode::SinksOnly,
        AblationMode::NoAttention,
        AblationMode::HybridOverlap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::FullHybrid => "full-hybrid",
            AblationMode::SWAOnly => "swa-only",
            AblationMode::LAOnly => "la-only",
            AblationMode::SinksOnly => "sinks-only",
            AblationMode::NoAttention => "no-attention",
            AblationMode::HybridOverlap => "hybrid-overlap",
        }
    }

    fn uses_swa(self) -> bool {
        matches!(
            self,
            AblationMode::FullHybrid | AblationMode::SWAOnly | AblationMode::HybridOverlap
        )
    }

    fn uses_la(self) -> bool {
        matches!(
            self,
            AblationMode::FullHybrid | AblationMode::LAOnly | AblationMode::HybridOverlap
        )
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("mode", format!("unknown ablation mode `{s}`")))
    }
}

/// Handles to one head's hybrid output and its (already weighted) branches.
#[derive(Clone, Copy, Debug)]
pub struct HybridHead {
    pub out: Var,
    /// Unweighted sliding-window output, when that branch ran.
    pub swa_raw: Option<Var>,
    /// `a ⊙ SWA` (zero when dropped), when that branch ran.
    pub swa: Option<Var>,
    /// `b ⊙ LA`, when that branch ran.
    pub la: Option<Var>,
    pub guard_hits: usize,
}

/// One head of hybrid attention on the tape. `q` and `k` must already carry
/// their rotary embedding; φ is applied to them for the linear branch while
/// the sliding-window branch uses them directly.
///
/// With `drop_swa` the sliding-window branch is still computed but weighted by
/// zero, without rescaling the linear branch.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_head_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    fm: FeatureMapVars,
    win: WindowSpec,
    hy: HybridSpec,
    mode: AblationMode,
    drop_swa: bool,
) -> Result<HybridHead> {
    AttentionInputs::check_shapes(tape.value(q), tape.value(k), tape.value(v))?;
    if win.window == 0 {
        return Err(Error::contract("sliding window must be at least 1"));
    }
    let (t_len, dv) = tape.value(v).dims2();
    match mode {
        AblationMode::NoAttention => {
            let out = tape.constant(Tensor::zeros(&[t_len, dv]));
            return Ok(HybridHead {
                out,
                swa_raw: None,
                swa: None,
                la: None,
                guard_hits: 0,
            });
        }
        AblationMode::SinksOnly => {
            if win.sink_count == 0 {
                return Err(Error::contract("sink_count must be at least 1"));
            }
            let out = band_softmax_attention_tape(tape, q, k, v, KeyBand::Sinks(win.sink_count))?;
            return Ok(HybridHead {
                out,
                swa_raw: None,
                swa: None,
                la: None,
                guard_hits: 0,
            });
        }
        _ => {}
    }

    let (swa_raw, swa) = if mode.uses_swa() {
        let s = band_softmax_attention_tape(tape, q, k, v, win.swa_band())?;
        let a = if drop_swa { 0.0 } else { hy.g };
        (Some(s), Some(tape.scale(s, a)?))
    } else {
        (None, None)
    };
    let mut guard_hits = 0;
    let la = if mode.uses_la() {
        let overlap = hy.overlap || mode == AblationMode::HybridOverlap;
        let lag = if overlap { 0 } else { win.window };
        let fq = feature_map_tape(tape, fm, q)?;
        let fk = feature_map_tape(tape, fm, k)?;
        let (l, hits) = linear_attention_tape(tape, fq, fk, v, lag)?;
        guard_hits = hits;
        Some(tape.scale(l, 1.0 - hy.g)?)
    } else {
        None
    };
    let out = match (swa, la) {
        (Some(s), Some(l)) => tape.add(s, l)?,
        (Some(s), None) => s,
        (None, Some(l)) => l,
        (None, None) => unreachable!("modes without a branch return early"),
    };
    Ok(HybridHead {
        out,
        swa_raw,
        swa,
        la,
        guard_hits,
    })
}

/// `a ⊙ SWA + b ⊙ LA` for one head, with the branch selection of `mode`.
pub fn hybrid_attention(
    inputs: &AttentionInputs,
    fm: &FeatureMapParams,
    win: WindowSpec,
    hy: HybridSpec,
    mode: AblationMode,
) -> Result<Tensor> {
    inputs.validate()?;
    let mut tape = Tape::new();
    let q = tape.constant(inputs.q.clone());
    let k = tape.constant(inputs.k.clone());
    let v = tape.constant(inputs.v.clone());
    let fmv = FeatureMapVars::record(&mut tape, fm, false);
    let head = hybrid_head_tape(&mut tape, q, k, v, fmv, win, hy, mode, false)?;
    Ok(tape.value(head.out).clone())
}
