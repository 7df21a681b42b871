//! Saves a training state, reloads it, and shows that a flipped bit is caught.

use dadl::data::synth_shapes;
use dadl::model::{AdapterSpec, Model, ModelConfig};
use dadl::train::{decode, encode, load_checkpoint, quantize, save_checkpoint, train_from, TrainConfig, TrainState};

fn main() -> dadl::Result<()> {
    let cfg = ModelConfig { width: 16, depth: 1, heads: 2, patch_size: 4, patch_stride: 4, image_size: 16, num_classes: 4, ..ModelConfig::vit_micro() }
        .with_adapter(AdapterSpec::ClsToken);
    let data = synth_shapes(128, 16, 4, 1)?;
    let tc = TrainConfig { epochs: 2, warmup_epochs: 0, batch_size: 32, base_lr: 1e-2, ema_momentum: Some(0.9), monitor_samples: 0, ..TrainConfig::default() };
    let (model, store) = Model::build(cfg, 0)?;
    let state = train_from(&model, TrainState::new(store, &tc), &data, None, &tc, |_, _| Ok(()))?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("run.ckpt");
    let ckpt = state.to_checkpoint(&model, &tc);
    save_checkpoint(&path, &ckpt)?;
    let bytes = std::fs::read(&path)?;
    println!("wrote {} bytes for step {} (epoch {})", bytes.len(), ckpt.meta.step, ckpt.meta.epoch);

    let loaded = load_checkpoint(&path)?;
    println!("reload equals the 32-bit rounded state: {}", loaded.store == quantize(&ckpt.store));
    println!("optimizer step restored: {}", loaded.optimizer.as_ref().map(|o| o.step) == Some(state.optimizer.step));

    let mut corrupt = encode(&ckpt)?;
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 1;
    match decode(&corrupt) {
        Ok(_) => println!("corruption went unnoticed"),
        Err(e) => println!("flipped bit rejected: {e}"),
    }
    Ok(())
}
