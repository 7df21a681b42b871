use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{bail, Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Leaves images untouched; the severity is ignored.
    Identity,
    GaussianNoise,
    GaussianBlur,
    Contrast,
    Pixelate,
    Occlusion,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::Identity,
        CorruptionKind::GaussianNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::Occlusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Identity => "identity",
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Occlusion => "occlusion",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1..=5.
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Self {
        Self { kind, severity, seed }
    }

    pub fn label(&self) -> String {
        match self.kind {
            CorruptionKind::Identity => "identity".into(),
            k => format!("{k}_{}", self.severity),
        }
    }
}

/// Per-severity parameters for each corruption, indexed by `severity - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionLadders {
    /// Noise standard deviation in pixel units.
    pub gaussian_noise: [f64; 5],
    /// Blur standard deviation in pixels.
    pub gaussian_blur: [f64; 5],
    /// Factor applied to deviations from the per-image mean.
    pub contrast: [f64; 5],
    /// Downsampling factor before nearest-neighbour upsampling.
    pub pixelate: [f64; 5],
    /// Side of the grey occluding square as a fraction of the image side.
    pub occlusion: [f64; 5],
}

impl Default for CorruptionLadders {
    fn default() -> Self {
        Self {
            gaussian_noise: [0.04, 0.08, 0.12, 0.18, 0.26],
            gaussian_blur: [0.5, 0.75, 1.0, 1.5, 2.0],
            contrast: [0.4, 0.3, 0.2, 0.1, 0.05],
            pixelate: [0.6, 0.45, 0.33, 0.25, 0.15],
            occlusion: [0.15, 0.3, 0.45, 0.6, 0.75],
        }
    }
}

impl CorruptionLadders {
    pub fn ladder_mut(&mut self, kind: CorruptionKind) -> Option<&mut [f64; 5]> {
        match kind {
            CorruptionKind::Identity => None,
            CorruptionKind::GaussianNoise => Some(&mut self.gaussian_noise),
            CorruptionKind::GaussianBlur => Some(&mut self.gaussian_blur),
            CorruptionKind::Contrast => Some(&mut self.contrast),
            CorruptionKind::Pixelate => Some(&mut self.pixelate),
            CorruptionKind::Occlusion => Some(&mut self.occlusion),
        }
    }
}

/// Applies a corruption with the default severity ladders.
pub fn corrupt(ds: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    corrupt_with(ds, spec, &CorruptionLadders::default())
}

pub fn corrupt_with(ds: &Dataset, spec: &CorruptionSpec, ladders: &CorruptionLadders) -> Result<Dataset> {
    if spec.kind != CorruptionKind::Identity && !(1..=5).contains(&spec.severity) {
        bail!(Config, "severity {} outside 1..=5", spec.severity);
    }
    let level = (spec.severity.max(1) - 1) as usize;
    let [h, w, c] = ds.image_shape();
    let img_len = h * w * c;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = ds.images.data().to_vec();
    for img in out.chunks_exact_mut(img_len) {
        match spec.kind {
            CorruptionKind::Identity => {}
            CorruptionKind::GaussianNoise => {
                let normal = Normal::new(0.0, ladders.gaussian_noise[level]).map_err(|e| Error::Config(e.to_string()))?;
                for v in img.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
            CorruptionKind::GaussianBlur => blur(img, h, w, c, ladders.gaussian_blur[level]),
            CorruptionKind::Contrast => {
                let f = ladders.contrast[level];
                let mean = img.iter().sum::<f64>() / img.len() as f64;
                for v in img.iter_mut() {
                    *v = mean + (*v - mean) * f;
                }
            }
            CorruptionKind::Pixelate => pixelate(img, h, w, c, ladders.pixelate[level]),
            CorruptionKind::Occlusion => {
                let side = ((ladders.occlusion[level] * h.min(w) as f64).round() as usize).clamp(1, h.min(w));
                let y0 = rng.random_range(0..=h - side);
                let x0 = rng.random_range(0..=w - side);
                for y in y0..y0 + side {
                    for x in x0..x0 + side {
                        img[(y * w + x) * c..(y * w + x + 1) * c].fill(0.5);
                    }
                }
            }
        }
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let name = format!("{}+{}", ds.name, spec.label());
    Dataset::new(Tensor::new(ds.images.shape().to_vec(), out)?, ds.labels.clone(), name, ds.num_classes)
}

/// Separable Gaussian blur with clamped borders, written as
/// `x + Σ k_i (x_i - x)` so constant regions are reproduced exactly.
fn blur(img: &mut [f64], h: usize, w: usize, c: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let here = src[(y * w + x) * c + ch];
                    let mut acc = 0.0;
                    for (ki, k) in kernel.iter().enumerate() {
                        let o = ki as isize - radius;
                        let (yy, xx) = if horizontal {
                            (y, (x as isize + o).clamp(0, w as isize - 1) as usize)
                        } else {
                            ((y as isize + o).clamp(0, h as isize - 1) as usize, x)
                        };
                        acc += k * (src[(yy * w + xx) * c + ch] - here);
                    }
                    dst[(y * w + x) * c + ch] = here + acc;
                }
            }
        }
        dst
    };
    let tmp = pass(img, true);
    img.copy_from_slice(&pass(&tmp, false));
}

/// Box-averages down to `factor` of the resolution, then repeats each cell.
fn pixelate(img: &mut [f64], h: usize, w: usize, c: usize, factor: f64) {
    let sh = ((h as f64 * factor).round() as usize).max(1);
    let sw = ((w as f64 * factor).round() as usize).max(1);
    let cell_y = |y: usize| y * sh / h;
    let cell_x = |x: usize| x * sw / w;
    let mut sums = vec![0.0; sh * sw * c];
    let mut counts = vec![0usize; sh * sw];
    for y in 0..h {
        for x in 0..w {
            let cell = cell_y(y) * sw + cell_x(x);
            counts[cell] += 1;
            for ch in 0..c {
                sums[cell * c + ch] += img[(y * w + x) * c + ch];
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let cell = cell_y(y) * sw + cell_x(x);
            for ch in 0..c {
                img[(y * w + x) * c + ch] = sums[cell * c + ch] / counts[cell] as f64;
            }
        }
    }
}
