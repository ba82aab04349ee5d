//! Synthetic segmentation data: rectangles and discs over a striped,
//! noisy background. Each class has its own base colour; labels are the
//! exact painted masks.

use super::{ModelError, Result};
use crate::tensor::Tensor4;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const IMAGE_CHANNELS: usize = 3;
pub const MAX_CLASSES: usize = 8;

const PALETTE: [[f64; 3]; MAX_CLASSES] = [
    [-0.6, -0.6, -0.6],
    [0.8, -0.5, -0.5],
    [-0.5, 0.8, -0.5],
    [-0.5, -0.5, 0.8],
    [0.8, 0.8, -0.5],
    [0.8, -0.5, 0.8],
    [-0.5, 0.8, 0.8],
    [0.8, 0.8, 0.8],
];
const NOISE_STD: f64 = 0.2;
const STRIPE_AMPLITUDE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub size: usize,
    pub num_classes: usize,
    /// Each `(1, 3, size, size)`.
    pub images: Vec<Tensor4>,
    /// Row-major class ids, `size * size` per image.
    pub labels: Vec<Vec<i64>>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the given images into one `(n, 3, size, size)` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4, Vec<i64>) {
        let plane = IMAGE_CHANNELS * self.size * self.size;
        let mut data = Vec::with_capacity(indices.len() * plane);
        let mut labels = Vec::with_capacity(indices.len() * self.size * self.size);
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
            labels.extend_from_slice(&self.labels[i]);
        }
        let x = Tensor4::from_vec([indices.len(), IMAGE_CHANNELS, self.size, self.size], data)
            .expect("consistent image sizes");
        (x, labels)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for l in self.labels.iter().flatten() {
            h[*l as usize] += 1;
        }
        h
    }
}

enum Shape {
    Rect { cx: i64, cy: i64, hw: i64, hh: i64 },
    Disc { cx: i64, cy: i64, r: i64 },
}

impl Shape {
    fn contains(&self, x: i64, y: i64) -> bool {
        match *self {
            Shape::Rect { cx, cy, hw, hh } => (x - cx).abs() <= hw && (y - cy).abs() <= hh,
            Shape::Disc { cx, cy, r } => (x - cx).pow(2) + (y - cy).pow(2) <= r * r,
        }
    }
}

/// Deterministic per seed. Extents span 2 to `size/2` pixels; a one-pixel
/// border always stays background, and the topmost shape's class cycles
/// through the foreground classes so every class appears.
pub fn gen_synthetic_dataset(seed: u64, n_images: usize, size: usize, num_classes: usize) -> Result<SyntheticDataset> {
    if !(2..=MAX_CLASSES).contains(&num_classes) {
        return Err(ModelError::Config(format!("num_classes must be in 2..={MAX_CLASSES}, got {num_classes}")));
    }
    if size < 5 {
        return Err(ModelError::Config(format!("image size must be at least 5, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let max_extent = (size / 2).max(2) as i64;
    let lo = 1i64;
    let hi = size as i64 - 2;
    let mut images = Vec::with_capacity(n_images);
    let mut labels = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let n_shapes = rng.random_range(1..=3usize);
        let mut label = vec![0i64; size * size];
        for j in 0..n_shapes {
            let class = if j + 1 == n_shapes {
                1 + (i % (num_classes - 1)) as i64
            } else {
                rng.random_range(1..num_classes as i64)
            };
            let cx = rng.random_range(lo..=hi);
            let cy = rng.random_range(lo..=hi);
            let shape = if rng.random_bool(0.5) {
                Shape::Rect {
                    cx,
                    cy,
                    hw: rng.random_range(2..=max_extent),
                    hh: rng.random_range(2..=max_extent),
                }
            } else {
                Shape::Disc {
                    cx,
                    cy,
                    r: rng.random_range(2..=max_extent),
                }
            };
            for y in lo..=hi {
                for x in lo..=hi {
                    if shape.contains(x, y) {
                        label[y as usize * size + x as usize] = class;
                    }
                }
            }
        }
        let freq = rng.random_range(0.2..0.8);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let (fx, fy) = (freq * angle.cos(), freq * angle.sin());
        let mut img = Tensor4::zeros([1, IMAGE_CHANNELS, size, size]);
        for c in 0..IMAGE_CHANNELS {
            for y in 0..size {
                for x in 0..size {
                    let class = label[y * size + x] as usize;
                    let mut v = PALETTE[class][c] + noise.sample(&mut rng);
                    if class == 0 {
                        v += STRIPE_AMPLITUDE * (fx * x as f64 + fy * y as f64 + phase).sin();
                    }
                    img.set(0, c, y, x, v);
                }
            }
        }
        images.push(img);
        labels.push(label);
    }
    Ok(SyntheticDataset {
        size,
        num_classes,
        images,
        labels,
    })
}
