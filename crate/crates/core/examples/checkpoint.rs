//! Writes a checkpoint, reads it back and shows how damaged files are
//! classified.

use hafx::model::{init_model, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, ModelConfig, Stage};

fn main() -> anyhow::Result<()> {
    let model = init_model(&ModelConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        mlp_width: 64,
        ..ModelConfig::default()
    })?;
    let dir = std::env::temp_dir().join("hafx-checkpoint-demo");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("base.hafx");
    let ckpt = Checkpoint::new(&model, Stage::Base);
    save_checkpoint(&path, &ckpt)?;
    let back = load_checkpoint(&path)?;
    println!(
        "{}: {} bytes, {} tensors, stage {}, identical: {}",
        path.display(),
        std::fs::metadata(&path)?.len(),
        back.model.params.len(),
        back.stage.name(),
        back.model.params == ckpt.model.params
    );

    let bytes = ckpt.to_bytes();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut bad_version = bytes.clone();
    bad_version[4] = 99;
    for (label, data) in [
        ("truncated", &bytes[..bytes.len() / 2]),
        ("bad magic", &bad_magic[..]),
        ("future version", &bad_version[..]),
    ] {
        let err: CheckpointError = Checkpoint::from_bytes(data).unwrap_err();
        println!("{label:<15} -> {err}");
    }
    Ok(())
}
