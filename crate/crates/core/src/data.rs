//! Image containers, IDX / CIFAR-10 binary loaders, the rotation transform,
//! pixel statistics and a synthetic glyph dataset.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// One image `[C, H, W]` with values in `[0, 1]` and its class.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub images: Vec<LabeledImage>,
    pub split: Split,
    /// Where the images came from (paths or generator parameters).
    pub provenance: String,
}

impl ImageSet {
    pub fn new(images: Vec<LabeledImage>, split: Split, provenance: impl Into<String>) -> Result<Self> {
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().position(|i| i.pixels.shape() != first.pixels.shape()) {
                return Err(Error::Input(format!(
                    "image {bad} has shape {:?}, expected {:?}",
                    images[bad].pixels.shape(),
                    first.pixels.shape()
                )));
            }
        }
        Ok(ImageSet {
            images,
            split,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Shared per-image shape, `None` for an empty set.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|i| i.pixels.shape())
    }

    /// The first `n` images (all of them if `n` exceeds the length).
    pub fn head(&self, n: usize) -> ImageSet {
        ImageSet {
            images: self.images.iter().take(n).cloned().collect(),
            split: self.split,
            provenance: format!("{} [first {n}]", self.provenance),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(
        path,
        io::Error::new(io::ErrorKind::UnexpectedEof, format!("truncated {what}")),
    )
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| truncated(path, "header"))
}

/// Loads an IDX image file and its label file. Pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<ImageSet> {
    let img = read_file(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let count = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;

    let lab = read_file(labels_path)?;
    let lmagic = be_u32(&lab, 0, labels_path)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let lcount = be_u32(&lab, 4, labels_path)? as usize;
    if lcount != count {
        return Err(Error::Consistency(format!(
            "{count} images but {lcount} labels"
        )));
    }

    let per = rows * cols;
    let pixels = img
        .get(16..16 + count * per)
        .ok_or_else(|| truncated(images_path, "pixel data"))?;
    let labels = lab
        .get(8..8 + count)
        .ok_or_else(|| truncated(labels_path, "label data"))?;
    let images = pixels
        .chunks(per.max(1))
        .zip(labels)
        .map(|(px, &label)| LabeledImage {
            pixels: Tensor::new(
                vec![1, rows, cols],
                px.iter().map(|&b| f64::from(b) / 255.0).collect(),
            )
            .expect("chunk length matches shape"),
            label: label as usize,
        })
        .collect();
    ImageSet::new(
        images,
        split,
        format!("idx:{}+{}", images_path.display(), labels_path.display()),
    )
}

/// Parses concatenated CIFAR-10 binary records.
pub fn parse_cifar10_records(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 payload of {} bytes is not a multiple of {CIFAR_RECORD_BYTES}",
            bytes.len()
        )));
    }
    bytes
        .chunks(CIFAR_RECORD_BYTES)
        .map(|rec| {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(Error::Format(format!("CIFAR-10 label byte {label} > 9")));
            }
            let pixels = Tensor::new(
                vec![3, CIFAR_SIDE, CIFAR_SIDE],
                rec[1..].iter().map(|&b| f64::from(b) / 255.0).collect(),
            )?;
            Ok(LabeledImage { pixels, label })
        })
        .collect()
}

/// Loads the CIFAR-10 binary batches from `dir`: `data_batch_*.bin` for the
/// training split, `test_batch.bin` for the test split.
pub fn load_cifar10_binary(dir: &Path, split: Split) -> Result<ImageSet> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            match split {
                Split::Train => name.starts_with("data_batch_") && name.ends_with(".bin"),
                Split::Test => name == "test_batch.bin",
            }
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::io(
            dir,
            io::Error::new(io::ErrorKind::NotFound, "no CIFAR-10 batch files"),
        ));
    }
    let mut images = Vec::new();
    for f in &files {
        let bytes = read_file(f)?;
        images.extend(parse_cifar10_records(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", f.display())),
            other => other,
        })?);
    }
    ImageSet::new(images, split, format!("cifar10:{}", dir.display()))
}

/// Rotates `[C, H, W]` clockwise by `k` quarter turns. One quarter turn maps
/// `out[c][i][j] = in[c][H-1-j][i]`.
pub fn rotate90k(pixels: &Tensor, k: usize) -> Result<Tensor> {
    let shape = pixels.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::Input(format!(
            "rotation needs a square [C, H, W] image, got {shape:?}"
        )));
    }
    let (c, n) = (shape[0], shape[1]);
    let src = pixels.data();
    let k = k % 4;
    if k == 0 {
        return Ok(pixels.clone());
    }
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let base = ch * n * n;
        for i in 0..n {
            for j in 0..n {
                let (si, sj) = match k {
                    1 => (n - 1 - j, i),
                    2 => (n - 1 - i, n - 1 - j),
                    _ => (j, n - 1 - i),
                };
                out[base + i * n + j] = src[base + si * n + sj];
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Dataset-level pixel mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelStats {
    pub mean: f64,
    pub std: f64,
}

fn stats_of<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> (f64, f64, usize) {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        sum += v;
        n += 1;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt(), n)
}

/// Mean and population standard deviation over every pixel of every image.
pub fn pixel_stats(set: &ImageSet) -> Result<PixelStats> {
    if set.is_empty() {
        return Err(Error::Input("pixel statistics of an empty set".into()));
    }
    let (mean, std, _) = stats_of(set.images.iter().flat_map(|i| i.pixels.data().iter()));
    Ok(PixelStats { mean, std })
}

/// Per-channel variant of [`pixel_stats`].
pub fn pixel_stats_per_channel(set: &ImageSet) -> Result<Vec<PixelStats>> {
    let shape = set
        .image_shape()
        .ok_or_else(|| Error::Input("pixel statistics of an empty set".into()))?;
    let (channels, plane) = (shape[0], shape[1..].iter().product::<usize>());
    Ok((0..channels)
        .map(|c| {
            let (mean, std, _) = stats_of(
                set.images
                    .iter()
                    .flat_map(move |i| i.pixels.data()[c * plane..(c + 1) * plane].iter()),
            );
            PixelStats { mean, std }
        })
        .collect())
}

/// Bar segment on a coarse grid: (row, col, length, horizontal).
type Stroke = (f64, f64, f64, bool);

/// Class glyphs are fixed per class index so train and test sets generated
/// with different seeds share the same class universe.
fn class_glyph(class: usize) -> Vec<Stroke> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x61_7970_68 ^ (class as u64).wrapping_mul(0x9E37_79B9));
    (0..3)
        .map(|_| {
            let horizontal = rng.random_bool(0.5);
            let len = rng.random_range(0.35..0.6);
            let along = rng.random_range(0.1..(0.9 - len));
            let across = rng.random_range(0.12..0.88);
            if horizontal {
                (across, along, len, true)
            } else {
                (along, across, len, false)
            }
        })
        .collect()
}

/// Background level of synthetic images.
pub const SYNTH_BACKGROUND: f64 = 0.3;
/// Per-pixel Gaussian noise of synthetic images, before clipping.
pub const SYNTH_NOISE: f64 = 0.3;

/// Synthetic labelled images: each class is a fixed glyph of three bars
/// (orientation dependent, so rotation is learnable), drawn with a random
/// sub-pixel shift and stroke intensity, on a noisy background.
///
/// `separation` is the stroke contrast above the background.
pub fn synth_blobs(
    num_classes: usize,
    per_class: usize,
    shape: &[usize],
    separation: f64,
    seed: u64,
) -> Result<ImageSet> {
    if !(separation > 0.0) {
        return Err(Error::Input(format!("separation must be > 0, got {separation}")));
    }
    if shape.len() != 3 || shape[1] != shape[2] || shape[1] < 4 || shape[0] == 0 {
        return Err(Error::Input(format!(
            "synthetic shape must be [C, S, S] with S >= 4, got {shape:?}"
        )));
    }
    if num_classes == 0 {
        return Err(Error::Input("need at least one class".into()));
    }
    let (channels, side) = (shape[0], shape[1]);
    let s = side as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SYNTH_NOISE).expect("valid sigma");
    let mut images = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let glyph = class_glyph(class);
        for _ in 0..per_class {
            let dy = rng.random_range(-1.0..1.0);
            let dx = rng.random_range(-1.0..1.0);
            let strength = separation * rng.random_range(0.75..1.0);
            let half_width = rng.random_range(0.5..0.9);
            let mut data = vec![0.0; channels * side * side];
            for i in 0..side {
                for j in 0..side {
                    let (y, x) = (i as f64 + 0.5 - dy, j as f64 + 0.5 - dx);
                    let ink = glyph
                        .iter()
                        .map(|&(r, c, len, horizontal)| {
                            let (r, c, len) = (r * s, c * s, len * s);
                            let (u, v) = if horizontal { (x - c, y - r) } else { (y - r, x - c) };
                            let along = if u < 0.0 {
                                -u
                            } else if u > len {
                                u - len
                            } else {
                                0.0
                            };
                            let d = along.hypot(v.abs());
                            (1.0 - (d - half_width).max(0.0)).clamp(0.0, 1.0)
                        })
                        .fold(0.0, f64::max);
                    for ch in 0..channels {
                        let tint = 1.0 - 0.15 * ch as f64;
                        let v = SYNTH_BACKGROUND + strength * tint * ink + noise.sample(&mut rng);
                        data[(ch * side + i) * side + j] = v.clamp(0.0, 1.0);
                    }
                }
            }
            images.push(LabeledImage {
                pixels: Tensor::new(shape.to_vec(), data)?,
                label: class,
            });
        }
    }
    ImageSet::new(
        images,
        Split::Train,
        format!("synthetic:classes={num_classes},per_class={per_class},shape={shape:?},separation={separation},seed={seed}"),
    )
}
