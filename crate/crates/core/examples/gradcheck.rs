//! Central finite differences against tape gradients for the three
//! attention-transfer losses.

use hafx::attention::{Activation, FeatureMapParams, FeatureMapVars, HybridSpec, WindowSpec};
use hafx::conversion::{transfer_loss_tape, TransferObjective};
use hafx::tensor::{finite_diff_check_multi, SeededRng, Tensor};

fn main() -> anyhow::Result<()> {
    let (t, hd) = (10, 4);
    let mut rng = SeededRng::new(11, "gradcheck");
    let q = Tensor::randn(&[t, hd], 1.0, &mut rng);
    let k = Tensor::randn(&[t, hd], 1.0, &mut rng);
    let v = Tensor::randn(&[t, hd], 1.0, &mut rng);
    let fm = FeatureMapParams::identity_init(hd, hd, Activation::Softmax, 0.3, &mut rng);
    let win = WindowSpec::with_window(3);
    for objective in [
        TransferObjective::WeightsCE,
        TransferObjective::OutputsMSE,
        TransferObjective::HybridOutputsMSE,
    ] {
        let err = finite_diff_check_multi(
            |tape, p| {
                let phi = FeatureMapVars {
                    weight: p[0],
                    bias: p[1],
                    activation: Activation::Softmax,
                };
                let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
                transfer_loss_tape(tape, objective, q, k, v, phi, win, HybridSpec::default())
            },
            &[fm.weight.clone(), fm.bias.clone()],
            1e-5,
        )?;
        println!("{:<20} max relative error {err:.2e}", objective.name());
    }
    Ok(())
}
