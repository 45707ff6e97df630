//! Rotary position embeddings over adjacent dimension pairs `(2i, 2i+1)`.

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeParams {
    pub base: f64,
}

impl Default for RopeParams {
    fn default() -> Self {
        Self { base: 10_000.0 }
    }
}

fn rotate(x: &Tensor, params: RopeParams, sign: f64) -> Result<Tensor> {
    let (t, hd) = x.dims2();
    if hd % 2 != 0 {
        return Err(Error::dim(format!("RoPE needs an even head dimension, got {hd}")));
    }
    let freqs: Vec<f64> = (0..hd / 2)
        .map(|i| params.base.powf(-2.0 * i as f64 / hd as f64))
        .collect();
    let mut out = x.clone();
    for pos in 0..t {
        let row = out.row_mut(pos);
        for (i, f) in freqs.iter().enumerate() {
            let (s, c) = (sign * pos as f64 * f).sin_cos();
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
    Ok(out)
}

/// Rotates row `t` of `x` by position `t`.
pub fn apply_rope(x: &Tensor, params: RopeParams) -> Result<Tensor> {
    rotate(x, params, 1.0)
}

#[derive(Debug)]
struct RopeOp(RopeParams);

impl CustomOp for RopeOp {
    fn name(&self) -> &'static str {
        "rope"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        // The Jacobian is a rotation; its transpose is the inverse rotation.
        Ok(vec![Some(rotate(grad, self.0, -1.0)?)])
    }
}

pub fn rope_tape(tape: &mut Tape, x: Var, params: RopeParams) -> Result<Var> {
    let out = apply_rope(tape.value(x), params)?;
    tape.custom(&[x], out, Box::new(RopeOp(params)))
}
