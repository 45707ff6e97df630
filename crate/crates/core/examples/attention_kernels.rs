//! Every attention kernel on one random head, plus the hybrid's branch
//! algebra.
//!
//! ```text
//! cargo run --release --example attention_kernels
//! ```

use hafx::attention::{
    feature_map_apply, hybrid_attention, linear_attention_quadratic_oracle, linear_attention_streaming,
    sinks_attention, sliding_window_attention, softmax_attention_causal, AblationMode, Activation, AttentionInputs,
    FeatureMapParams, HybridSpec, RopeParams, WindowSpec,
};
use hafx::tensor::{SeededRng, Tensor};

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> anyhow::Result<()> {
    let (t, hd) = (24, 8);
    let mut rng = SeededRng::new(7, "kernels");
    let inputs = AttentionInputs::new(
        Tensor::randn(&[t, hd], 1.0, &mut rng),
        Tensor::randn(&[t, hd], 1.0, &mut rng),
        Tensor::randn(&[t, hd], 1.0, &mut rng),
    )?
    .with_rope(RopeParams::default())?;

    let full = softmax_attention_causal(&inputs)?;
    let swa = sliding_window_attention(&inputs, 6)?;
    let sinks = sinks_attention(&inputs, t)?;
    println!("window 6 vs causal softmax:    {:.3e}", max_abs(&swa, &full));
    println!("sinks covering T vs causal:    {:.3e}", max_abs(&sinks, &full));

    let fm = FeatureMapParams::identity_init(hd, hd / 2, Activation::Softmax, 0.1, &mut rng);
    let fq = feature_map_apply(&fm, &inputs.q)?;
    let fk = feature_map_apply(&fm, &inputs.k)?;
    for lag in [0, 6] {
        let s = linear_attention_streaming(&fq, &fk, &inputs.v, lag)?;
        let o = linear_attention_quadratic_oracle(&fq, &fk, &inputs.v, lag)?;
        println!("streaming vs kernel matrix, lag {lag}: {:.3e}", max_abs(&s.output, &o.output));
    }

    let win = WindowSpec::with_window(6);
    let hy = HybridSpec::default();
    let run = |mode| hybrid_attention(&inputs, &fm, win, hy, mode);
    let sum = run(AblationMode::SWAOnly)?.add(&run(AblationMode::LAOnly)?)?;
    println!("hybrid − (swa-only + la-only): {:.3e}", max_abs(&run(AblationMode::FullHybrid)?, &sum));
    let none = run(AblationMode::NoAttention)?;
    println!("no-attention max |out|:        {:.3e}", none.data().iter().fold(0.0f64, |m, x| m.max(x.abs())));
    Ok(())
}
