//! Softmax attention restricted to a per-query set of visible keys.
//!
//! Causal, sliding-window and sink attention are all the same kernel with a
//! different band rule. The kernel works row by row and never forms a `T×T`
//! matrix, except for [`causal_softmax_weights`] which exists to produce
//! distillation targets.

use super::AttentionInputs;
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, CustomOp, Tape, Tensor, Var};

/// Which keys query `t` may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyBand {
    /// `0..=t`
    Causal,
    /// `t+1-w..=t`
    Window(usize),
    /// `0..=min(t, sinks-1)`
    Sinks(usize),
    /// The window plus the first `sinks` positions.
    WindowWithSinks { window: usize, sinks: usize },
}

impl KeyBand {
    /// Ascending key indices visible to query `t`.
    pub fn keys(self, t: usize) -> Vec<usize> {
        match self {
            KeyBand::Causal => (0..=t).collect(),
            KeyBand::Window(0) | KeyBand::Sinks(0) => Vec::new(),
            KeyBand::Window(w) => ((t + 1).saturating_sub(w)..=t).collect(),
            KeyBand::Sinks(s) => (0..=t.min(s - 1)).collect(),
            KeyBand::WindowWithSinks { window, sinks } => {
                let lo = (t + 1).saturating_sub(window);
                let mut keys: Vec<usize> = (0..sinks.min(lo)).collect();
                if window > 0 {
                    keys.extend(lo..=t);
                }
                keys
            }
        }
    }
}

struct BandForward {
    out: Tensor,
    /// Attention weights per query over its band.
    probs: Vec<Vec<f64>>,
}

fn band_forward(q: &Tensor, k: &Tensor, v: &Tensor, band: KeyBand) -> BandForward {
    let (t_len, d) = q.dims2();
    let dv = v.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Tensor::zeros(&[t_len, dv]);
    let mut probs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let keys = band.keys(t);
        if keys.is_empty() {
            probs.push(Vec::new());
            continue;
        }
        let qt = q.row(t);
        let mut p: Vec<f64> = keys
            .iter()
            .map(|&i| scale * qt.iter().zip(k.row(i)).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        softmax_in_place(&mut p);
        let o = out.row_mut(t);
        for (pi, &i) in p.iter().zip(&keys) {
            for (oj, vj) in o.iter_mut().zip(v.row(i)) {
                *oj += pi * vj;
            }
        }
        probs.push(p);
    }
    BandForward { out, probs }
}

/// Softmax attention of `inputs` over the band of keys allowed per query.
pub fn band_softmax_attention(inputs: &AttentionInputs, band: KeyBand) -> Result<Tensor> {
    inputs.validate()?;
    Ok(band_forward(&inputs.q, &inputs.k, &inputs.v, band).out)
}

pub fn softmax_attention_causal(inputs: &AttentionInputs) -> Result<Tensor> {
    band_softmax_attention(inputs, KeyBand::Causal)
}

pub fn sliding_window_attention(inputs: &AttentionInputs, window: usize) -> Result<Tensor> {
    if window == 0 {
        return Err(Error::contract("sliding window must be at least 1"));
    }
    band_softmax_attention(inputs, KeyBand::Window(window))
}

pub fn sinks_attention(inputs: &AttentionInputs, sink_count: usize) -> Result<Tensor> {
    if sink_count == 0 {
        return Err(Error::contract("sink_count must be at least 1"));
    }
    band_softmax_attention(inputs, KeyBand::Sinks(sink_count))
}

/// The full causal attention weight matrix (zeros above the diagonal).
pub fn causal_softmax_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (t_len, d) = q.dims2();
    if k.dims2() != (t_len, d) {
        return Err(Error::dim("queries and keys must share shape"));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut w = Tensor::zeros(&[t_len, t_len]);
    for t in 0..t_len {
        let row = &mut w.row_mut(t)[..=t];
        for (i, r) in row.iter_mut().enumerate() {
            *r = scale * q.row(t).iter().zip(k.row(i)).map(|(a, b)| a * b).sum::<f64>();
        }
        softmax_in_place(row);
    }
    Ok(w)
}

#[derive(Debug)]
struct BandOp {
    band: KeyBand,
    probs: Vec<Vec<f64>>,
}

impl CustomOp for BandOp {
    fn name(&self) -> &'static str {
        "band_softmax_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let (t_len, d) = q.dims2();
        let scale = 1.0 / (d as f64).sqrt();
        let mut dq = Tensor::zeros(&[t_len, d]);
        let mut dk = Tensor::zeros(&[t_len, d]);
        let mut dv = Tensor::zeros(v.shape());
        for t in 0..t_len {
            let keys = self.band.keys(t);
            if keys.is_empty() {
                continue;
            }
            let p = &self.probs[t];
            let gt = g.row(t);
            let dp: Vec<f64> = keys
                .iter()
                .map(|&i| gt.iter().zip(v.row(i)).map(|(a, b)| a * b).sum())
                .collect();
            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for (j, &i) in keys.iter().enumerate() {
                for (d, gv) in dv.row_mut(i).iter_mut().zip(gt) {
                    *d += p[j] * gv;
                }
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for (d, kv) in dq.row_mut(t).iter_mut().zip(k.row(i)) {
                    *d += ds * kv;
                }
                for (d, qv) in dk.row_mut(i).iter_mut().zip(q.row(t)) {
                    *d += ds * qv;
                }
            }
        }
        Ok(vec![Some(dq), Some(dk), Some(dv)])
    }
}

/// Tape version of [`band_softmax_attention`].
pub fn band_softmax_attention_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    band: KeyBand,
) -> Result<Var> {
    AttentionInputs::check_shapes(tape.value(q), tape.value(k), tape.value(v))?;
    let fwd = band_forward(tape.value(q), tape.value(k), tape.value(v), band);
    tape.custom(
        &[q, k, v],
        fwd.out,
        Box::new(BandOp {
            band,
            probs: fwd.probs,
        }),
    )
}
