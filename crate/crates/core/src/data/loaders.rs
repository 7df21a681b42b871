use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::Dataset;
use crate::error::{bail, Result};
use crate::numerics::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    match bytes.get(at..at + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => bail!(Format, "{} header truncated", what),
    }
}

fn truncated(what: &str, want: usize, got: usize) -> crate::Error {
    std::io::Error::new(
        std::io::ErrorKind::UnexpectedEof,
        format!("{what}: expected {want} payload bytes, found {got}"),
    )
    .into()
}

/// Reads an IDX image/label file pair (e.g. MNIST), scaling pixels by 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path.as_ref())?;

    let magic = be_u32(&img, 0, "image")?;
    if magic != IDX_IMAGES {
        bail!(Format, "image file magic {:#010x}, expected {:#010x}", magic, IDX_IMAGES);
    }
    let magic = be_u32(&lab, 0, "label")?;
    if magic != IDX_LABELS {
        bail!(Format, "label file magic {:#010x}, expected {:#010x}", magic, IDX_LABELS);
    }
    let n = be_u32(&img, 4, "image")? as usize;
    let h = be_u32(&img, 8, "image")? as usize;
    let w = be_u32(&img, 12, "image")? as usize;
    let n_labels = be_u32(&lab, 4, "label")? as usize;
    if n != n_labels {
        bail!(Format, "{} images but {} labels", n, n_labels);
    }
    if n == 0 || h == 0 || w == 0 {
        bail!(Format, "empty IDX dataset ({}x{}x{})", n, h, w);
    }
    let pixels = &img[16..];
    if pixels.len() < n * h * w {
        return Err(truncated("image", n * h * w, pixels.len()));
    }
    let labels = &lab[8..];
    if labels.len() < n {
        return Err(truncated("label", n, labels.len()));
    }
    let data = pixels[..n * h * w].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = labels[..n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    let name = images_path.file_stem().map_or("idx".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(Tensor::new(vec![n, h, w, 1], data)?, labels, name, num_classes)
}

/// Writes a single-channel dataset as an IDX image/label pair.
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let [h, w, c] = ds.image_shape();
    if c != 1 {
        bail!(Format, "IDX images are single-channel, dataset has {} channels", c);
    }
    let n = ds.len() as u32;
    let mut img = Vec::with_capacity(16 + ds.images.numel());
    for v in [IDX_IMAGES, n, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|v| (v * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS, n] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    fs::File::create(images_path)?.write_all(&img)?;
    fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarKind {
    Cifar10,
    /// Fine (100-way) labels.
    Cifar100,
    /// Coarse (20-way) superclass labels.
    Cifar100Coarse,
}

impl CifarKind {
    fn label_bytes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 1,
            _ => 2,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 10,
            CifarKind::Cifar100 => 100,
            CifarKind::Cifar100Coarse => 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarSplit {
    Train,
    Test,
}

const CIFAR_PIXELS: usize = 32 * 32 * 3;

/// Decodes CIFAR binary records (label byte(s) then planar RGB) into
/// channels-last images.
pub fn parse_cifar(bytes: &[u8], kind: CifarKind) -> Result<Dataset> {
    let rec = kind.label_bytes() + CIFAR_PIXELS;
    if bytes.is_empty() || bytes.len() % rec != 0 {
        bail!(Format, "{} bytes is not a whole number of {}-byte records", bytes.len(), rec);
    }
    let n = bytes.len() / rec;
    let mut data = vec![0.0; n * CIFAR_PIXELS];
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        labels.push(match kind {
            CifarKind::Cifar10 => r[0],
            CifarKind::Cifar100 => r[1],
            CifarKind::Cifar100Coarse => r[0],
        } as usize);
        let px = &r[kind.label_bytes()..];
        let out = &mut data[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS];
        for ch in 0..3 {
            for p in 0..1024 {
                out[p * 3 + ch] = px[ch * 1024 + p] as f64 / 255.0;
            }
        }
    }
    let name = match kind {
        CifarKind::Cifar10 => "cifar10",
        CifarKind::Cifar100 => "cifar100",
        CifarKind::Cifar100Coarse => "cifar100-coarse",
    };
    Dataset::new(Tensor::new(vec![n, 32, 32, 3], data)?, labels, name, kind.num_classes())
}

fn cifar_files(dir: &Path, kind: CifarKind, split: CifarSplit) -> Vec<PathBuf> {
    match (kind, split) {
        (CifarKind::Cifar10, CifarSplit::Train) => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        (CifarKind::Cifar10, CifarSplit::Test) => vec![dir.join("test_batch.bin")],
        (_, CifarSplit::Train) => vec![dir.join("train.bin")],
        (_, CifarSplit::Test) => vec![dir.join("test.bin")],
    }
}

/// Loads the standard binary batch files of a CIFAR directory.
pub fn load_cifar_binary(dir: impl AsRef<Path>, kind: CifarKind, split: CifarSplit) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for f in cifar_files(dir.as_ref(), kind, split) {
        bytes.extend(fs::read(&f)?);
    }
    parse_cifar(&bytes, kind)
}
