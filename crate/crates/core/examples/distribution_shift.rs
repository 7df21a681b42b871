//! Accuracy of each inference mode under synthetic corruptions.

use dadl::attacks::AttackConfig;
use dadl::data::synth_shapes;
use dadl::eval::{default_shift_specs, shift_suite};
use dadl::model::{AdapterSpec, Mode, Model, ModelConfig};
use dadl::train::{train, TrainConfig};

fn main() -> dadl::Result<()> {
    let cfg = ModelConfig { width: 16, depth: 2, heads: 2, patch_size: 4, patch_stride: 4, image_size: 16, num_classes: 4, ..ModelConfig::vit_micro() }
        .with_adapter(AdapterSpec::NormParams);
    let train_set = synth_shapes(384, 16, 4, 1)?;
    let test_set = synth_shapes(120, 16, 4, 2)?;
    let tc = TrainConfig { epochs: 5, warmup_epochs: 1, batch_size: 32, base_lr: 1e-2, attack: AttackConfig::pgd2(8.0 / 255.0), monitor_samples: 0, ..TrainConfig::default() };
    let (model, store) = Model::build(cfg, 0)?;
    let (store, _) = train(&model, store, &train_set, &tc)?;

    let specs = default_shift_specs(7);
    let mut header = vec!["mode".to_string(), "clean".into()];
    header.extend(specs.iter().map(|s| s.label()));
    header.push("mean".into());
    println!("{}", header.join(","));
    for (name, mode) in [("clean", Mode::Clean), ("robust", Mode::Robust), ("soup_0.5", Mode::Soup(0.5))] {
        let row = shift_suite(&model, &store, &test_set, &specs, mode)?;
        let mut cells = vec![name.to_string(), format!("{:.3}", row.clean_acc)];
        cells.extend(specs.iter().map(|s| format!("{:.3}", row.shift_accs[&s.label()])));
        cells.push(format!("{:.3}", row.mean_acc));
        println!("{}", cells.join(","));
    }
    Ok(())
}
