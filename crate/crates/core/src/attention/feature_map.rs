//! The learned feature map `φ(x) = [σ(Wᵀx + b) ⊕ σ(−Wᵀx − b)]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// Softmax over each half's feature axis.
    Softmax,
    Exponential,
    Relu,
    OnePlusElu,
    None,
}

impl Activation {
    pub const ALL: [Activation; 5] = [
        Activation::Softmax,
        Activation::Exponential,
        Activation::Relu,
        Activation::OnePlusElu,
        Activation::None,
    ];

    /// Whether φ is guaranteed non-negative.
    pub fn is_non_negative(self) -> bool {
        !matches!(self, Activation::None)
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Softmax => 0,
            Activation::Exponential => 1,
            Activation::Relu => 2,
            Activation::OnePlusElu => 3,
            Activation::None => 4,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Softmax => "softmax",
            Activation::Exponential => "exponential",
            Activation::Relu => "relu",
            Activation::OnePlusElu => "one-plus-elu",
            Activation::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapParams {
    /// `h_d × d′` projection.
    pub weight: Tensor,
    /// `1 × d′`.
    pub bias: Tensor,
    pub activation: Activation,
}

impl FeatureMapParams {
    /// Identity-initialised projection plus `N(0, noise_std)` noise and a zero
    /// bias. For `d′ < h_d` the first `d′` identity columns are used; for
    /// `d′ > h_d` the extra columns start at zero.
    pub fn identity_init(
        head_dim: usize,
        feature_dim: usize,
        activation: Activation,
        noise_std: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let mut weight = Tensor::zeros(&[head_dim, feature_dim]);
        for i in 0..head_dim.min(feature_dim) {
            weight.set(i, i, 1.0);
        }
        if noise_std > 0.0 {
            let noise = Tensor::randn(&[head_dim, feature_dim], noise_std, rng);
            weight = weight.add(&noise).expect("same shape");
        }
        Self {
            weight,
            bias: Tensor::zeros(&[1, feature_dim]),
            activation,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Output width `2·d′`.
    pub fn output_dim(&self) -> usize {
        2 * self.feature_dim()
    }

    /// Warnings about configurations that break linear attention's
    /// assumptions. These are reported, never raised.
    pub fn warnings(&self) -> Vec<String> {
        if self.activation.is_non_negative() {
            vec![]
        } else {
            vec![format!(
                "feature map activation `{}` can produce negative features; \
                 linear attention denominators rely on the clamp",
                self.activation.name()
            )]
        }
    }
}

/// Tape handles for one feature map.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMapVars {
    pub weight: Var,
    pub bias: Var,
    pub activation: Activation,
}

impl FeatureMapVars {
    pub fn record(tape: &mut Tape, params: &FeatureMapParams, trainable: bool) -> Self {
        Self {
            weight: tape.leaf(params.weight.clone(), trainable),
            bias: tape.leaf(params.bias.clone(), trainable),
            activation: params.activation,
        }
    }
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Softmax => tape.row_softmax(x),
        Activation::Exponential => tape.exp(x),
        Activation::Relu => tape.relu(x),
        Activation::OnePlusElu => tape.elu1p(x),
        Activation::None => Ok(x),
    }
}

pub fn feature_map_tape(tape: &mut Tape, fm: FeatureMapVars, x: Var) -> Result<Var> {
    let hd = tape.value(fm.weight).rows();
    if tape.value(x).cols() != hd {
        return Err(Error::dim(format!(
            "feature map expects width {hd}, got {}",
            tape.value(x).cols()
        )));
    }
    let z = tape.matmul(x, fm.weight)?;
    let z = tape.add_row(z, fm.bias)?;
    let neg = tape.neg(z)?;
    let pos = activate(tape, z, fm.activation)?;
    let neg = activate(tape, neg, fm.activation)?;
    tape.concat_cols(&[pos, neg])
}

/// `φ` applied to each row of `x` (`T × h_d` → `T × 2d′`).
pub fn feature_map_apply(params: &FeatureMapParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let fm = FeatureMapVars::record(&mut tape, params, false);
    let xv = tape.constant(x.clone());
    let out = feature_map_tape(&mut tape, fm, xv)?;
    Ok(tape.value(out).clone())
}
