//! LoRA adapters: a zero-initialised attach is a no-op, a trained adapter
//! merges into the base weights exactly.

use hafx::attention::{AblationMode, HybridSpec, WindowSpec};
use hafx::model::{forward_logits, init_model, AttentionKind, LoraConfig, ModelConfig, ParamGroup};
use hafx::tensor::{SeededRng, Tensor};

fn main() -> anyhow::Result<()> {
    let mut model = init_model(&ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        mlp_width: 64,
        ..ModelConfig::default()
    })?;
    let tokens: Vec<usize> = (0..20).map(|i| (i * 7) % 60).collect();
    let attention = AttentionKind::Hybrid {
        win: WindowSpec::with_window(4),
        hy: HybridSpec::default(),
        mode: AblationMode::FullHybrid,
    };
    let before = forward_logits(&model, &tokens, &attention)?;

    let lora = LoraConfig::default();
    model.lora_attach(&lora)?;
    println!("rank {} alpha {} scale {}", lora.rank, lora.alpha, lora.scale());
    println!(
        "parameters: base {} / feature maps {} / lora {}",
        model.count_params(ParamGroup::Base),
        model.count_params(ParamGroup::FeatureMap),
        model.count_params(ParamGroup::Lora)
    );
    let attached = forward_logits(&model, &tokens, &attention)?;
    println!("logits unchanged after attach: {}", attached == before);

    let mut rng = SeededRng::new(1, "lora-demo");
    for (_, t) in model.params.iter_mut().filter(|(n, _)| n.contains(".lora_b")) {
        *t = Tensor::randn(t.shape(), 0.05, &mut rng);
    }
    let adapted = forward_logits(&model, &tokens, &attention)?;
    model.lora_merge()?;
    let merged = forward_logits(&model, &tokens, &attention)?;
    let diff = adapted.data().iter().zip(merged.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("adapters merged: max |Δlogit| = {diff:.2e}, lora params left = {}", model.count_params(ParamGroup::Lora));
    Ok(())
}
