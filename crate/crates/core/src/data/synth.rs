use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{bail, Result};
use crate::numerics::Tensor;

const STRIPE_PERIOD: f64 = 4.0;
const PIXEL_NOISE: f64 = 0.1;

/// Single-channel images of oriented stripes, one orientation per class,
/// with a random phase and additive pixel noise. Labels cycle through the
/// classes so every class gets `n / num_classes` items (plus one for the
/// first `n % num_classes` classes).
pub fn synth_shapes(n: usize, image_size: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || image_size == 0 || num_classes == 0 {
        bail!(Contract, "synth_shapes needs positive sizes, got n={} size={} classes={}", n, image_size, num_classes);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid std");
    let px = image_size * image_size;
    let mut data = Vec::with_capacity(n * px);
    let mut labels = Vec::with_capacity(n);
    let centre = (image_size as f64 - 1.0) / 2.0;
    for i in 0..n {
        let label = i % num_classes;
        let angle = PI * label as f64 / num_classes as f64;
        let (s, c) = angle.sin_cos();
        let phase = rng.random_range(0.0..2.0 * PI);
        for y in 0..image_size {
            for x in 0..image_size {
                let t = (x as f64 - centre) * c + (y as f64 - centre) * s;
                let v = 0.5 + 0.4 * (2.0 * PI * t / STRIPE_PERIOD + phase).sin() + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, image_size, image_size, 1], data)?, labels, "synth_shapes", num_classes)
}
