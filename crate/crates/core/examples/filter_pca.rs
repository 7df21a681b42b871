//! Writes the leading principal components of the patch-embedding filters of
//! a co-trained micro ViT with dual embedders, one image per component.
//!
//! Usage: `cargo run --example filter_pca [OUTPUT_DIR]`

use dadl::attacks::AttackConfig;
use dadl::data::synth_shapes;
use dadl::eval::{embedder_filters, filter_pca, write_filter_images};
use dadl::model::{AdapterSpec, Mode, Model, ModelConfig};
use dadl::train::{train, TrainConfig};

fn main() -> dadl::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "filter_pca_out".into());
    let cfg = ModelConfig { width: 48, depth: 1, heads: 2, patch_size: 6, patch_stride: 6, image_size: 18, num_classes: 4, ..ModelConfig::vit_micro() }
        .with_adapter(AdapterSpec::Embedder);
    let train_set = synth_shapes(256, 18, 4, 1)?;
    let tc = TrainConfig { epochs: 3, warmup_epochs: 0, batch_size: 32, base_lr: 1e-2, attack: AttackConfig::pgd2(8.0 / 255.0), monitor_samples: 0, ..TrainConfig::default() };
    let (model, store) = Model::build(cfg, 0)?;
    let (store, _) = train(&model, store, &train_set, &tc)?;

    for (name, mode) in [("clean", Mode::Clean), ("robust", Mode::Robust)] {
        let (filters, patch) = embedder_filters(&model, &store, mode)?;
        let pca = filter_pca(&filters, 28, patch)?;
        let dir = std::path::Path::new(&out).join(name);
        let files = write_filter_images(&dir, &pca)?;
        let top: Vec<String> = pca.explained_ratio.iter().take(5).map(|r| format!("{r:.3}")).collect();
        println!("{name:<6} {} components -> {}  (leading ratios {})", files.len() - 1, dir.display(), top.join(", "));
    }
    Ok(())
}
