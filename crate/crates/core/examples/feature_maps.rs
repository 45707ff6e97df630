//! Feature-map activations and dimensionality.
//!
//! Prints output width and value range for each activation, and how far the
//! linear-attention weights start from softmax weights for several `d′`.

use hafx::attention::{causal_softmax_weights, feature_map_apply, Activation, FeatureMapParams};
use hafx::tensor::{SeededRng, Tensor};

fn linear_weights(fq: &Tensor, fk: &Tensor) -> anyhow::Result<Tensor> {
    let mut k = fq.matmul_bt(fk)?;
    for t in 0..k.rows() {
        let row = k.row_mut(t);
        row[t + 1..].fill(0.0);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s.max(1e-6));
    }
    Ok(k)
}

fn main() -> anyhow::Result<()> {
    let (t, hd) = (16, 16);
    let mut rng = SeededRng::new(3, "feature-maps");
    let q = Tensor::randn(&[t, hd], 1.0, &mut rng);
    let k = Tensor::randn(&[t, hd], 1.0, &mut rng);

    println!("{:<14} {:>6} {:>10} {:>10}", "activation", "width", "min", "max");
    for act in Activation::ALL {
        let fm = FeatureMapParams::identity_init(hd, hd / 2, act, 0.1, &mut rng);
        let out = feature_map_apply(&fm, &q)?;
        let (lo, hi) = out.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        println!("{:<14} {:>6} {:>10.4} {:>10.4}", act.name(), out.cols(), lo, hi);
        for w in fm.warnings() {
            println!("  warning: {w}");
        }
    }

    let teacher = causal_softmax_weights(&q, &k)?;
    println!("\nd′    mean |A_linear − A_softmax| at init (softmax φ)");
    for d_prime in [2, 4, 8, 16, 32] {
        let fm = FeatureMapParams::identity_init(hd, d_prime, Activation::Softmax, 0.1, &mut rng);
        let a = linear_weights(&feature_map_apply(&fm, &q)?, &feature_map_apply(&fm, &k)?)?;
        let diff: f64 = a.data().iter().zip(teacher.data()).map(|(x, y)| (x - y).abs()).sum();
        println!("{d_prime:<5} {:.4}", diff / (t * (t + 1) / 2) as f64);
    }
    Ok(())
}
