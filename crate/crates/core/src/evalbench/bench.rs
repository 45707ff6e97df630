//! Wall-clock scaling of streaming linear attention against quadratic
//! softmax attention.

use std::fmt::{self, Write as _};
use std::hint::black_box;
use std::time::Instant;

use crate::attention::{linear_attention_streaming, streaming_state_size};
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, SeededRng, Tensor};

/// Samples shorter than this are repeated until they are not.
const MIN_SAMPLE_MS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchPath {
    StreamingLa,
    QuadraticSoftmax,
}

impl fmt::Display for BenchPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchPath::StreamingLa => "streaming-la",
            BenchPath::QuadraticSoftmax => "quadratic-softmax",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub path: BenchPath,
    pub t: usize,
    /// Median time of one kernel call.
    pub median_ms: f64,
    /// Memory held besides inputs and output: the running state for the
    /// streaming path, the score matrix for the quadratic one.
    pub aux_bytes: usize,
    /// Calls per timed sample, raised until a sample takes at least 1 ms.
    pub calls_per_sample: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

pub const BENCH_CSV_HEADER: &str = "path,T,median_ms,aux_bytes";

impl BenchReport {
    pub fn rows_for(&self, path: BenchPath) -> Vec<&BenchRow> {
        self.rows.iter().filter(|r| r.path == path).collect()
    }

    /// `(T, time(T) / time(T_prev))` for consecutive lengths of one path.
    pub fn growth_ratios(&self, path: BenchPath) -> Vec<(usize, f64)> {
        self.rows_for(path)
            .windows(2)
            .map(|w| (w[1].t, w[1].median_ms / w[0].median_ms))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{BENCH_CSV_HEADER}\n");
        for r in &self.rows {
            writeln!(out, "{},{},{:.6},{}", r.path, r.t, r.median_ms, r.aux_bytes).expect("writing to a string");
        }
        out
    }
}

/// Causal softmax attention that materialises the full `T × T` score matrix.
pub fn quadratic_softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (t_len, d) = q.dims2();
    if k.dims2() != (t_len, d) || v.rows() != t_len {
        return Err(Error::dim("queries, keys and values must share length"));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut s = Tensor::zeros(&[t_len, t_len]);
    let mut out = Tensor::zeros(&[t_len, v.cols()]);
    for t in 0..t_len {
        let row = &mut s.row_mut(t)[..=t];
        let qt = q.row(t);
        for (i, x) in row.iter_mut().enumerate() {
            *x = scale * qt.iter().zip(k.row(i)).map(|(a, b)| a * b).sum::<f64>();
        }
        softmax_in_place(row);
        let o = out.row_mut(t);
        for (i, &p) in row.iter().enumerate() {
            for (oj, vj) in o.iter_mut().zip(v.row(i)) {
                *oj += p * vj;
            }
        }
    }
    black_box(&s);
    Ok(out)
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_ms(calls: usize, f: &mut impl FnMut() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..calls {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

fn measure(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, usize)> {
    f()?;
    let mut calls = 1usize;
    while time_ms(calls, &mut f)? < MIN_SAMPLE_MS {
        calls *= 2;
    }
    let mut samples = (0..reps)
        .map(|_| time_ms(calls, &mut f).map(|ms| ms / calls as f64))
        .collect::<Result<Vec<_>>>()?;
    Ok((median(&mut samples), calls))
}

/// Times both paths at each length with head dimension `d` and feature
/// projection width `d_prime` (features are `2·d_prime` wide). Runs on the
/// calling thread only.
pub fn benchmark_scaling(t_list: &[usize], d: usize, d_prime: usize, reps: usize, seed: u64) -> Result<BenchReport> {
    if reps < 3 {
        return Err(Error::config("reps", "at least 3 repetitions are required"));
    }
    if t_list.is_empty() || t_list.contains(&0) || t_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("T", "lengths must be positive and strictly increasing"));
    }
    if d == 0 || d_prime == 0 {
        return Err(Error::config("d", "dimensions must be positive"));
    }
    let f = 2 * d_prime;
    let mut rows = Vec::new();
    for &t in t_list {
        let mut rng = SeededRng::new(seed, &format!("bench-{t}"));
        let q = Tensor::randn(&[t, d], 1.0, &mut rng);
        let k = Tensor::randn(&[t, d], 1.0, &mut rng);
        let v = Tensor::randn(&[t, d], 1.0, &mut rng);
        let fq = Tensor::uniform(&[t, f], 0.0, 1.0, &mut rng);
        let fk = Tensor::uniform(&[t, f], 0.0, 1.0, &mut rng);

        let (ms, calls) = measure(reps, || {
            black_box(linear_attention_streaming(black_box(&fq), black_box(&fk), black_box(&v), 0)?);
            Ok(())
        })?;
        rows.push(BenchRow {
            path: BenchPath::StreamingLa,
            t,
            median_ms: ms,
            aux_bytes: streaming_state_size(f, d) * std::mem::size_of::<f64>(),
            calls_per_sample: calls,
        });
        let (ms, calls) = measure(reps, || {
            black_box(quadratic_softmax_attention(black_box(&q), black_box(&k), black_box(&v))?);
            Ok(())
        })?;
        rows.push(BenchRow {
            path: BenchPath::QuadraticSoftmax,
            t,
            median_ms: ms,
            aux_bytes: t * t * std::mem::size_of::<f64>(),
            calls_per_sample: calls,
        });
    }
    Ok(BenchReport { rows })
}
