//! Streaming linear attention over feature-mapped queries and keys.
//!
//! Query `t` sees keys `i <= t - lag`: `lag = 0` is ordinary causal linear
//! attention, `lag = w` restricts it to tokens outside a sliding window of
//! size `w`. State is the running `S = Σ φ(k_i) v_iᵀ` and `z = Σ φ(k_i)`;
//! nothing quadratic in `T` is ever allocated.

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Tape, Tensor, Var};

/// Denominators below this are clamped to it.
pub const LA_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearAttentionOutput {
    pub output: Tensor,
    /// Number of queries whose denominator had to be clamped.
    pub guard_hits: usize,
}

struct StreamForward {
    out: Tensor,
    /// Denominator actually used per query; `None` for an empty context.
    dens: Vec<Option<f64>>,
    clamped: Vec<bool>,
    guard_hits: usize,
}

fn check(fq: &Tensor, fk: &Tensor, v: &Tensor) -> Result<()> {
    let (t, f) = fq.dims2();
    if fk.dims2() != (t, f) {
        return Err(Error::dim(format!(
            "feature-mapped queries {:?} and keys {:?} differ",
            fq.shape(),
            fk.shape()
        )));
    }
    if v.rows() != t {
        return Err(Error::dim("values length differs from queries"));
    }
    if t == 0 {
        return Err(Error::dim("empty sequence"));
    }
    Ok(())
}

fn stream_forward(fq: &Tensor, fk: &Tensor, v: &Tensor, lag: usize) -> StreamForward {
    let (t_len, f) = fq.dims2();
    let dv = v.cols();
    let mut s = vec![0.0; f * dv];
    let mut z = vec![0.0; f];
    let mut out = Tensor::zeros(&[t_len, dv]);
    let mut dens = Vec::with_capacity(t_len);
    let mut clamped = Vec::with_capacity(t_len);
    let mut guard_hits = 0;
    for t in 0..t_len {
        if t >= lag {
            let i = t - lag;
            let (ki, vi) = (fk.row(i), v.row(i));
            for (a, &kv) in ki.iter().enumerate() {
                z[a] += kv;
                for (sv, &vv) in s[a * dv..(a + 1) * dv].iter_mut().zip(vi) {
                    *sv += kv * vv;
                }
            }
        } else {
            dens.push(None);
            clamped.push(false);
            continue;
        }
        let qt = fq.row(t);
        let mut den: f64 = qt.iter().zip(&z).map(|(a, b)| a * b).sum();
        let was_clamped = den < LA_EPS;
        if was_clamped {
            den = LA_EPS;
            guard_hits += 1;
        }
        let o = out.row_mut(t);
        for (a, &qv) in qt.iter().enumerate() {
            if qv == 0.0 {
                continue;
            }
            for (oj, sv) in o.iter_mut().zip(&s[a * dv..(a + 1) * dv]) {
                *oj += qv * sv;
            }
        }
        o.iter_mut().for_each(|x| *x /= den);
        dens.push(Some(den));
        clamped.push(was_clamped);
    }
    StreamForward {
        out,
        dens,
        clamped,
        guard_hits,
    }
}

/// Single-pass linear attention, `o_t = φ(q_t)ᵀ S_t / max(φ(q_t)ᵀ z_t, ε)`.
/// Queries with no visible keys output zero.
pub fn linear_attention_streaming(
    fq: &Tensor,
    fk: &Tensor,
    v: &Tensor,
    lag: usize,
) -> Result<LinearAttentionOutput> {
    check(fq, fk, v)?;
    let f = stream_forward(fq, fk, v, lag);
    Ok(LinearAttentionOutput {
        output: f.out,
        guard_hits: f.guard_hits,
    })
}

/// The same quantity computed from the explicit masked kernel matrix
/// `κ(t, i) = φ(q_t)ᵀ φ(k_i)`. Quadratic in `T`; used as a check.
pub fn linear_attention_quadratic_oracle(
    fq: &Tensor,
    fk: &Tensor,
    v: &Tensor,
    lag: usize,
) -> Result<LinearAttentionOutput> {
    check(fq, fk, v)?;
    let mut kernel = fq.matmul_bt(fk)?;
    let t_len = kernel.rows();
    let mut guard_hits = 0;
    let mut dens = vec![0.0; t_len];
    for t in 0..t_len {
        let row = kernel.row_mut(t);
        for (i, x) in row.iter_mut().enumerate() {
            if i + lag > t {
                *x = 0.0;
            }
        }
        if t >= lag {
            let den: f64 = row.iter().sum();
            dens[t] = if den < LA_EPS {
                guard_hits += 1;
                LA_EPS
            } else {
                den
            };
        }
    }
    let mut out = kernel.matmul(v)?;
    for (t, den) in dens.iter().enumerate() {
        if t >= lag {
            out.row_mut(t).iter_mut().for_each(|x| *x /= den);
        }
    }
    Ok(LinearAttentionOutput {
        output: out,
        guard_hits,
    })
}

/// Number of accumulator values the streaming form keeps: `S` plus `z`.
pub fn streaming_state_size(feature_width: usize, value_width: usize) -> usize {
    feature_width * value_width + feature_width
}

#[derive(Debug)]
struct StreamOp {
    lag: usize,
    dens: Vec<Option<f64>>,
    clamped: Vec<bool>,
}

impl CustomOp for StreamOp {
    fn name(&self) -> &'static str {
        "linear_attention"
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (fq, fk, v) = (inputs[0], inputs[1], inputs[2]);
        let (t_len, f) = fq.dims2();
        let dv = v.cols();
        let lag = self.lag;

        // Per-query upstream terms: dnum_t = g_t / den_t and
        // dden_t = -(g_t · o_t) / den_t (zero where the clamp was active).
        let mut dnum = Tensor::zeros(&[t_len, dv]);
        let mut dden = vec![0.0; t_len];
        for t in 0..t_len {
            let Some(den) = self.dens[t] else { continue };
            let gt = g.row(t);
            dnum.row_mut(t).iter_mut().zip(gt).for_each(|(d, gv)| *d = gv / den);
            if !self.clamped[t] {
                dden[t] = -gt.iter().zip(out.row(t)).map(|(a, b)| a * b).sum::<f64>() / den;
            }
        }

        // Forward sweep again for dφq_t = S_t dnum_t + z_t dden_t.
        let mut dfq = Tensor::zeros(&[t_len, f]);
        let mut s = vec![0.0; f * dv];
        let mut z = vec![0.0; f];
        for t in lag..t_len {
            let i = t - lag;
            for (a, &kv) in fk.row(i).iter().enumerate() {
                z[a] += kv;
                for (sv, &vv) in s[a * dv..(a + 1) * dv].iter_mut().zip(v.row(i)) {
                    *sv += kv * vv;
                }
            }
            let dn = dnum.row(t);
            let row = dfq.row_mut(t);
            for a in 0..f {
                let sd: f64 = s[a * dv..(a + 1) * dv].iter().zip(dn).map(|(x, y)| x * y).sum();
                row[a] = sd + z[a] * dden[t];
            }
        }

        // Reverse sweep: R = Σ_{t >= i+lag} φq_t dnum_tᵀ, r = Σ φq_t dden_t.
        let mut dfk = Tensor::zeros(&[t_len, f]);
        let mut dvv = Tensor::zeros(&[t_len, dv]);
        let mut big_r = vec![0.0; f * dv];
        let mut r = vec![0.0; f];
        for i in (0..t_len).rev() {
            let t = i + lag;
            if t < t_len {
                let (qt, dn) = (fq.row(t), dnum.row(t));
                for (a, &qv) in qt.iter().enumerate() {
                    r[a] += qv * dden[t];
                    for (rv, &dnv) in big_r[a * dv..(a + 1) * dv].iter_mut().zip(dn) {
                        *rv += qv * dnv;
                    }
                }
            }
            let (ki, vi) = (fk.row(i), v.row(i));
            let dk = dfk.row_mut(i);
            for a in 0..f {
                let ra = &big_r[a * dv..(a + 1) * dv];
                dk[a] = ra.iter().zip(vi).map(|(x, y)| x * y).sum::<f64>() + r[a];
            }
            let dvi = dvv.row_mut(i);
            for (a, &kv) in ki.iter().enumerate() {
                for (d, rv) in dvi.iter_mut().zip(&big_r[a * dv..(a + 1) * dv]) {
                    *d += kv * rv;
                }
            }
        }
        Ok(vec![Some(dfq), Some(dfk), Some(dvv)])
    }
}

/// Tape version of [`linear_attention_streaming`]; also returns guard hits.
pub fn linear_attention_tape(
    tape: &mut Tape,
    fq: Var,
    fk: Var,
    v: Var,
    lag: usize,
) -> Result<(Var, usize)> {
    let (q, k, vv) = (tape.value(fq), tape.value(fk), tape.value(v));
    check(q, k, vv)?;
    let fwd = stream_forward(q, k, vv, lag);
    let hits = fwd.guard_hits;
    let out = tape.custom(
        &[fq, fk, v],
        fwd.out,
        Box::new(StreamOp {
            lag,
            dens: fwd.dens,
            clamped: fwd.clamped,
        }),
    )?;
    Ok((out, hits))
}
