use std::collections::BTreeMap;

use super::{phi_names, Model, ParamGroup};
use crate::attention::{
    band_softmax_attention_tape, hybrid_head_tape, rope_tape, AblationMode, FeatureMapVars,
    HybridSpec, KeyBand, RopeParams, WindowSpec,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionKind {
    Softmax,
    Hybrid {
        win: WindowSpec,
        hy: HybridSpec,
        mode: AblationMode,
    },
}

impl AttentionKind {
    pub fn hybrid(window: usize, mode: AblationMode) -> Self {
        AttentionKind::Hybrid {
            win: WindowSpec::with_window(window),
            hy: HybridSpec::default(),
            mode,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub attention: AttentionKind,
    /// Zero the sliding-window branch for this pass while still computing it,
    /// so its gradient can be observed.
    pub drop_swa: bool,
    /// Cut the gradient path between layers.
    pub detach_layer_inputs: bool,
}

impl ForwardOptions {
    pub fn new(attention: AttentionKind) -> Self {
        Self {
            attention,
            drop_swa: false,
            detach_layer_inputs: false,
        }
    }
}

/// Per-head values recorded during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct HeadTrace {
    /// Queries and keys after RoPE.
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub phi: FeatureMapVars,
    pub out: Var,
    /// Unweighted sliding-window output, when that branch ran.
    pub swa_raw: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Indexed `[layer][head]`.
    pub heads: Vec<Vec<HeadTrace>>,
    pub guard_hits: usize,
}

/// Tape handles for a model's parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    pub vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Records every parameter, marking those whose group passes `trainable`.
    pub fn record(tape: &mut Tape, model: &Model, trainable: impl Fn(ParamGroup) -> bool) -> Self {
        let vars = model
            .params
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), trainable(ParamGroup::of(n)))))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }
}

fn projection(tape: &mut Tape, model: &Model, pv: &ParamVars, x: Var, name: &str) -> Result<Var> {
    let y = tape.matmul(x, pv.get(name)?)?;
    let Some(lora) = &model.lora else {
        return Ok(y);
    };
    let a_name = format!("{name}.lora_a");
    if !pv.vars.contains_key(&a_name) {
        return Ok(y);
    }
    let xa = tape.matmul(x, pv.get(&a_name)?)?;
    let xab = tape.matmul(xa, pv.get(&format!("{name}.lora_b"))?)?;
    let xab = tape.scale(xab, lora.scale())?;
    tape.add(y, xab)
}

pub(crate) fn check_tokens(model: &Model, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > model.cfg.max_t {
        return Err(Error::Input(format!(
            "sequence of {} tokens exceeds max_t {}",
            tokens.len(),
            model.cfg.max_t
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= model.cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token {bad} is outside the vocabulary of {}",
            model.cfg.vocab_size
        )));
    }
    Ok(())
}

/// Records a full forward pass on `tape`.
pub fn forward_tape(
    tape: &mut Tape,
    model: &Model,
    pv: &ParamVars,
    tokens: &[usize],
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    check_tokens(model, tokens)?;
    let cfg = &model.cfg;
    let hd = cfg.head_dim();
    let rope = RopeParams::default();
    let mut x = tape.embedding(pv.get("embed")?, tokens)?;
    let mut heads = Vec::with_capacity(cfg.n_layers);
    let mut guard_hits = 0;

    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        if opts.detach_layer_inputs {
            x = tape.detach(x);
        }
        let h = tape.layer_norm(x, pv.get(&p("ln1.gain"))?, pv.get(&p("ln1.bias"))?, LN_EPS)?;
        let q = projection(tape, model, pv, h, &p("attn.wq"))?;
        let k = projection(tape, model, pv, h, &p("attn.wk"))?;
        let v = projection(tape, model, pv, h, &p("attn.wv"))?;

        let mut layer = Vec::with_capacity(cfg.n_heads);
        let mut outs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, head * hd, hd)?;
            let qh = rope_tape(tape, qh, rope)?;
            let kh = tape.slice_cols(k, head * hd, hd)?;
            let kh = rope_tape(tape, kh, rope)?;
            let vh = tape.slice_cols(v, head * hd, hd)?;
            let (wn, bn) = phi_names(l, head);
            let phi = FeatureMapVars {
                weight: pv.get(&wn)?,
                bias: pv.get(&bn)?,
                activation: cfg.activation,
            };
            let (out, swa_raw) = match opts.attention {
                AttentionKind::Softmax => {
                    (band_softmax_attention_tape(tape, qh, kh, vh, KeyBand::Causal)?, None)
                }
                AttentionKind::Hybrid { win, hy, mode } => {
                    let hh = hybrid_head_tape(tape, qh, kh, vh, phi, win, hy, mode, opts.drop_swa)?;
                    guard_hits += hh.guard_hits;
                    (hh.out, hh.swa_raw)
                }
            };
            layer.push(HeadTrace {
                q: qh,
                k: kh,
                v: vh,
                phi,
                out,
                swa_raw,
            });
            outs.push(out);
        }
        let att = tape.concat_cols(&outs)?;
        let o = projection(tape, model, pv, att, &p("attn.wo"))?;
        x = tape.add(x, o)?;

        let h2 = tape.layer_norm(x, pv.get(&p("ln2.gain"))?, pv.get(&p("ln2.bias"))?, LN_EPS)?;
        let m = tape.matmul(h2, pv.get(&p("mlp.w1"))?)?;
        let m = tape.add_row(m, pv.get(&p("mlp.b1"))?)?;
        let m = tape.gelu(m)?;
        let m = tape.matmul(m, pv.get(&p("mlp.w2"))?)?;
        let m = tape.add_row(m, pv.get(&p("mlp.b2"))?)?;
        x = tape.add(x, m)?;
        heads.push(layer);
    }
    let x = tape.layer_norm(x, pv.get("ln_f.gain")?, pv.get("ln_f.bias")?, LN_EPS)?;
    let logits = tape.matmul(x, pv.get("head")?)?;
    Ok(ForwardOutput {
        logits,
        heads,
        guard_hits,
    })
}

/// `T × vocab` logits with all parameters frozen.
pub fn forward_logits(model: &Model, tokens: &[usize], attention: &AttentionKind) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, model, |_| false);
    let out = forward_tape(&mut tape, model, &pv, tokens, &ForwardOptions::new(*attention))?;
    Ok(tape.value(out.logits).clone())
}

/// Position `t` predicts `tokens[t + 1]`; the last position is unscored.
pub fn next_token_targets(tokens: &[usize]) -> Vec<Option<usize>> {
    let mut t: Vec<Option<usize>> = tokens.iter().skip(1).map(|&x| Some(x)).collect();
    t.push(None);
    t
}

/// Mean cross-entropy over the positions with a target.
pub fn lm_loss(logits: &Tensor, targets: &[Option<usize>]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, targets)?;
    Ok(tape.value(loss).item())
}
