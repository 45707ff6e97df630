//! Streaming linear attention against quadratic softmax attention.
//!
//! ```text
//! cargo run --release --example scaling_bench -- 256,512,1024,2048
//! ```

use hafx::evalbench::{benchmark_scaling, BenchPath};

fn main() -> anyhow::Result<()> {
    let t_list: Vec<usize> = match std::env::args().nth(1) {
        Some(arg) => arg.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None => vec![256, 512, 1024, 2048],
    };
    let report = benchmark_scaling(&t_list, 32, 16, 5, 0)?;
    print!("{}", report.to_csv());
    for path in [BenchPath::StreamingLa, BenchPath::QuadraticSoftmax] {
        for (t, ratio) in report.growth_ratios(path) {
            println!("{path}: time({t}) / previous = {ratio:.2}");
        }
    }
    Ok(())
}
