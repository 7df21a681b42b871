//! Averages every tensor of two independently trained micro CNNs. Unlike the
//! dual-token soup, the mixed models lose accuracy as soon as β leaves an
//! endpoint.

use dadl::data::synth_shapes;
use dadl::eval::accuracy;
use dadl::model::{Mode, Model, ModelConfig};
use dadl::soup::naive_weight_soup;
use dadl::train::{train, TrainConfig};

fn main() -> dadl::Result<()> {
    let cfg = ModelConfig { width: 8, image_size: 16, num_classes: 4, ..ModelConfig::cnn_micro() };
    let train_set = synth_shapes(384, 16, 4, 1)?;
    let test_set = synth_shapes(150, 16, 4, 2)?;
    let nominal = TrainConfig { alpha: 1.0, epochs: 5, warmup_epochs: 0, batch_size: 32, base_lr: 1e-2, monitor_samples: 0, ..TrainConfig::default() };

    let mut stores = Vec::new();
    let mut model = None;
    for seed in [0, 1] {
        let (m, s) = Model::build(cfg.clone(), seed)?;
        let tc = TrainConfig { seed, ..nominal.clone() };
        let (s, _) = train(&m, s, &train_set, &tc)?;
        stores.push(s);
        model = Some(m);
    }
    let model = model.expect("two models trained");

    println!("beta  accuracy");
    for i in 0..=10 {
        let beta = i as f64 / 10.0;
        let mixed = naive_weight_soup(&stores[0], &stores[1], beta)?;
        println!("{beta:.1}   {:.3}", accuracy(&model, &mixed, &test_set, Mode::Clean)?);
    }
    Ok(())
}
