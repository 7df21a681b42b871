//! Finite-difference check of the input gradient of the full micro ViT and
//! micro CNN losses, the same gradient every attack follows.

use dadl::model::{AdapterSpec, Mode, Model, ModelConfig, NormKind, Phase};
use dadl::numerics::{grad_check, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check(name: &str, cfg: ModelConfig) -> dadl::Result<()> {
    for seed in 0..3 {
        let (model, store) = Model::build(cfg.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.image_size;
        let x = Tensor::uniform(&[2, s, s, cfg.channels], 0.0, 1.0, &mut rng);
        let labels = [0, 1];
        let report = grad_check(
            |tape, xv| {
                let params = model.bind_constants(tape, &store, Mode::Robust);
                let out = model.forward(tape, xv, &params, &model.ctx(&store, Mode::Robust, Phase::Eval))?;
                tape.cross_entropy_sum(out.logits, &labels)
            },
            &x,
        )?;
        println!(
            "{name:<10} seed {seed}: {} coords, max rel err {:.2e}, max abs err {:.2e}, pass@1e-3 {}",
            report.coords,
            report.max_rel_error,
            report.max_abs_error,
            report.passes(1e-3)
        );
    }
    Ok(())
}

fn main() -> dadl::Result<()> {
    let vit = ModelConfig { width: 16, depth: 2, heads: 2, patch_size: 4, patch_stride: 4, image_size: 12, num_classes: 4, ..ModelConfig::vit_micro() }
        .with_adapter(AdapterSpec::ClsToken);
    let cnn = ModelConfig { width: 4, depth: 2, image_size: 12, num_classes: 4, ..ModelConfig::cnn_micro() }
        .with_norm(NormKind::GroupNorm(2))
        .with_adapter(AdapterSpec::NormParams);
    check("micro-vit", vit)?;
    check("micro-cnn", cnn)
}
