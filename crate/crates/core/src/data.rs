//! Labeled dataset ingestion: the CIFAR-10 binary format and a procedural
//! shapes dataset that keeps the test suite hermetic.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{next_gaussian, rng_from_seed, shuffled_indices, SeededRng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_FILE_BYTES: usize = CIFAR_RECORD_BYTES * CIFAR_RECORDS_PER_FILE;

/// Images with integer labels in [0, classes).
#[derive(Debug, Clone)]
pub struct LabeledDataset<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(images: Vec<Tensor<T>>, labels: Vec<usize>, classes: usize, split: &str) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::data(format!(
                "dataset has {} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::data(format!("label {bad} out of range [0, {classes})")));
        }
        Ok(LabeledDataset { images, labels, classes, split: split.to_string() })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stack a list of image indices into one [B, 3, h, w] batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let shape = self.images[indices[0]].shape().to_vec();
        let per = self.images[indices[0]].numel();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
            labels.push(self.labels[i]);
        }
        let mut batch_shape = vec![indices.len()];
        batch_shape.extend_from_slice(&shape);
        (Tensor::from_vec(batch_shape, data).expect("consistent image shapes"), labels)
    }
}

fn parse_cifar_file<T: Scalar>(path: &Path) -> Result<(Vec<Tensor<T>>, Vec<usize>)> {
    let bytes = fs::read(path)?;
    if bytes.len() != CIFAR_FILE_BYTES {
        return Err(Error::format(format!(
            "{}: expected {CIFAR_FILE_BYTES} bytes ({CIFAR_RECORDS_PER_FILE} records of {CIFAR_RECORD_BYTES}), found {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(CIFAR_RECORDS_PER_FILE);
    let mut labels = Vec::with_capacity(CIFAR_RECORDS_PER_FILE);
    for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        let label = record[0] as usize;
        if label > 9 {
            return Err(Error::format(format!("{}: label byte {label} out of range", path.display())));
        }
        labels.push(label);
        let data: Vec<T> = record[1..].iter().map(|&b| T::from_f64(b as f64 / 255.0)).collect();
        images.push(Tensor::from_vec(vec![3, 32, 32], data)?);
    }
    Ok((images, labels))
}

/// Read the standard six-file binary CIFAR-10 layout from a directory.
/// Records are 1 label byte + 3072 channel-planar pixel bytes, scaled to
/// [0, 1].
pub fn read_cifar10_binary<T: Scalar>(dir: &Path) -> Result<(LabeledDataset<T>, LabeledDataset<T>)> {
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        let (imgs, labels) = parse_cifar_file(&dir.join(format!("data_batch_{i}.bin")))?;
        train_images.extend(imgs);
        train_labels.extend(labels);
    }
    let (test_images, test_labels) = parse_cifar_file(&dir.join("test_batch.bin"))?;
    Ok((
        LabeledDataset::new(train_images, train_labels, 10, "train")?,
        LabeledDataset::new(test_images, test_labels, 10, "test")?,
    ))
}

/// Shape classes of the procedural dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    FilledCircle,
    FilledSquare,
    TriangleOutline,
    PlusCross,
}

impl ShapeClass {
    pub fn from_label(label: usize) -> ShapeClass {
        match label % 4 {
            0 => ShapeClass::FilledCircle,
            1 => ShapeClass::FilledSquare,
            2 => ShapeClass::TriangleOutline,
            _ => ShapeClass::PlusCross,
        }
    }
}

/// Geometry of one rendered shape; integer arithmetic only so independent
/// rasterizers agree exactly.
#[derive(Debug, Clone)]
pub struct ShapeGeometry {
    pub class: ShapeClass,
    pub cx: i64,
    pub cy: i64,
    pub radius: i64,
    pub fg: [f64; 3],
    pub bg: [f64; 3],
    pub size: usize,
}

/// Integer inside-test for the isoceles triangle with apex (cx, cy - r) and
/// base corners (cx +- r, cy + r): |x - cx| * 2 <= (y - (cy - r)).
fn in_triangle(x: i64, y: i64, cx: i64, cy: i64, r: i64) -> bool {
    if r <= 0 {
        return false;
    }
    let dy = y - (cy - r);
    if dy < 0 || y > cy + r {
        return false;
    }
    (x - cx).abs() * 2 <= dy
}

impl ShapeGeometry {
    /// Foreground predicate for a pixel, exact in integer arithmetic.
    pub fn covers(&self, x: i64, y: i64) -> bool {
        let (dx, dy, r) = (x - self.cx, y - self.cy, self.radius);
        match self.class {
            ShapeClass::FilledCircle => dx * dx + dy * dy <= r * r,
            ShapeClass::FilledSquare => dx.abs() <= r && dy.abs() <= r,
            ShapeClass::TriangleOutline => {
                in_triangle(x, y, self.cx, self.cy, r) && !in_triangle(x, y, self.cx, self.cy, r - 2)
            }
            ShapeClass::PlusCross => {
                let t = (r / 3).max(1);
                (dx.abs() <= t && dy.abs() <= r) || (dy.abs() <= t && dx.abs() <= r)
            }
        }
    }

    /// Noiseless geometry layer as a [3, size, size] image.
    pub fn render<T: Scalar>(&self) -> Tensor<T> {
        let size = self.size;
        let mut data = vec![T::zero(); 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let covered = self.covers(x as i64, y as i64);
                for c in 0..3 {
                    let v = if covered { self.fg[c] } else { self.bg[c] };
                    data[(c * size + y) * size + x] = T::from_f64(v);
                }
            }
        }
        Tensor::from_vec(vec![3, size, size], data).expect("render buffer sized correctly")
    }
}

/// Sample the geometry for image `index` of a seeded dataset. Class is
/// round-robin (`index % 4`), position jitter is +-6 px around the center,
/// radius is 6..=12 px, and fg/bg colors are resampled until some channel
/// differs by at least 0.3.
pub fn sample_geometry(rng: &mut SeededRng, index: usize, size: usize) -> ShapeGeometry {
    let class = ShapeClass::from_label(index % 4);
    let half = (size / 2) as i64;
    let cx = half + rng.gen_range(-6i64..=6);
    let cy = half + rng.gen_range(-6i64..=6);
    let radius = rng.gen_range(6i64..=12);
    let (fg, bg) = loop {
        let fg = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let bg = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let contrast = fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        if contrast >= 0.3 {
            break (fg, bg);
        }
    };
    ShapeGeometry { class, cx, cy, radius, fg, bg, size }
}

pub const SHAPES_NOISE_SIGMA: f64 = 0.05;

/// Procedurally rendered dataset: geometry layer plus additive Gaussian
/// noise (sigma 0.05), clamped to [0, 1]. Deterministic per seed; labels
/// are balanced with exactly `n_per_class` per class.
pub fn generate_shapes_dataset<T: Scalar>(
    seed: u64,
    n_per_class: usize,
    classes: usize,
    size: usize,
    split: &str,
) -> Result<LabeledDataset<T>> {
    if classes == 0 || classes > 4 {
        return Err(Error::config(format!("shapes dataset supports 1..=4 classes, got {classes}")));
    }
    if size < 16 {
        return Err(Error::config("shapes dataset needs size >= 16".to_string()));
    }
    let mut rng = rng_from_seed(seed);
    let total = n_per_class * classes;
    let mut images = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for index in 0..total {
        let label = index % classes;
        let geometry = sample_geometry(&mut rng, label, size);
        let mut img = geometry.render::<T>();
        for v in img.data_mut() {
            let noisy = v.to_f64x() + SHAPES_NOISE_SIGMA * next_gaussian(&mut rng);
            *v = T::from_f64(noisy.clamp(0.0, 1.0));
        }
        images.push(img);
        labels.push(label);
    }
    LabeledDataset::new(images, labels, classes, split)
}

/// Ordered batches of dataset indices. `shuffle_seed = None` keeps storage
/// order; the last batch may be short.
pub fn batch_indices(len: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    let order = match shuffle_seed {
        Some(seed) => shuffled_indices(len, &mut rng_from_seed(seed)),
        None => (0..len).collect(),
    };
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
