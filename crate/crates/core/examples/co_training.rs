//! Co-trains a micro ViT with a dual class token and compares both branches.
//!
//! Uses synthetic shapes by default. Set `DADL_MNIST_DIR` to a directory
//! holding `mnist-10k-images-idx3-ubyte` and `mnist-10k-labels-idx1-ubyte`
//! to train on MNIST instead.

use dadl::attacks::AttackConfig;
use dadl::data::{load_idx, synth_shapes, Dataset};
use dadl::eval::{accuracy, robust_accuracy};
use dadl::model::{AdapterSpec, Mode, Model, ModelConfig};
use dadl::train::{train_from, TrainConfig, TrainState};

fn data(cfg: &ModelConfig) -> dadl::Result<(Dataset, Dataset)> {
    match std::env::var("DADL_MNIST_DIR") {
        Ok(dir) => {
            let dir = std::path::Path::new(&dir);
            let all = load_idx(dir.join("mnist-10k-images-idx3-ubyte"), dir.join("mnist-10k-labels-idx1-ubyte"))?;
            Ok((all.take(2048)?, all.range(8000, 8500)?))
        }
        Err(_) => Ok((
            synth_shapes(768, cfg.image_size, cfg.num_classes, 1)?,
            synth_shapes(200, cfg.image_size, cfg.num_classes, 2)?,
        )),
    }
}

fn main() -> dadl::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mnist = std::env::var("DADL_MNIST_DIR").is_ok();
    let mut cfg = ModelConfig { width: 32, depth: 2, heads: 4, patch_size: 7, patch_stride: 7, ..ModelConfig::vit_micro() };
    if !mnist {
        cfg = ModelConfig { image_size: 16, num_classes: 4, patch_size: 4, patch_stride: 4, ..cfg };
    }
    let cfg = cfg.with_adapter(AdapterSpec::ClsToken);
    let (train_set, test_set) = data(&cfg)?;
    let eps = 8.0 / 255.0;
    let tc = TrainConfig {
        epochs: if mnist { 15 } else { 8 },
        warmup_epochs: 1,
        batch_size: 32,
        base_lr: if mnist { 1e-2 } else { 3e-3 },
        attack: AttackConfig::pgd2(eps),
        monitor_samples: 0,
        ..TrainConfig::default()
    };

    let (model, store) = Model::build(cfg, tc.seed)?;
    let (shared, dual) = store.count_params();
    println!("{shared} shared parameters, {dual} dual parameters");

    let state = train_from(&model, TrainState::new(store, &tc), &train_set, Some(&test_set), &tc, |_, m| {
        println!(
            "epoch {:>2}  loss clean {:.3}  adv {:.3}  clean-mode acc {:.3}  robust-mode PGD-{} acc {:.3}",
            m.epoch,
            m.loss_clean.unwrap_or(f64::NAN),
            m.loss_adv.unwrap_or(f64::NAN),
            m.acc_clean_mode.unwrap_or(f64::NAN),
            tc.monitor_pgd_steps,
            m.acc_robust_mode_pgd.unwrap_or(f64::NAN),
        );
        Ok(())
    })?;

    let pgd40 = AttackConfig::pgd40(eps);
    println!("\nmode    clean   PGD-40");
    for (name, mode) in [("clean", Mode::Clean), ("robust", Mode::Robust)] {
        let c = accuracy(&model, &state.store, &test_set, mode)?;
        let r = robust_accuracy(&model, &state.store, &test_set, mode, &pgd40)?;
        println!("{name:<7} {c:.3}   {r:.3}");
    }
    Ok(())
}
