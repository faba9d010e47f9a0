//! Seeded synthetic datasets.
//!
//! **Blob classification.** Images are `1×16×16`. Class `k` is an oriented
//! elongated Gaussian blob: polarity `+1` for even `k` and `−1` for odd `k`,
//! orientation `(k / 2)·π / ⌈K/2⌉`, axis widths 2.6 and 1.1 pixels. Each
//! sample jitters the center by up to ±3 pixels and the amplitude by
//! `U(0.7, 1.3)`, then adds i.i.d. `N(0, 0.25²)` texture noise.
//!
//! **Shape pyramid.** Images are `1×S×S` with `S = 4·2^levels`. Each image
//! holds one or two objects drawn from {filled box, hollow box, cross}. An
//! object assigned to level `l` (stride `2^(l+1)`) has sides in
//! `[1.5·stride, 2.5·stride]`. Its shape is painted from a `4×4` occupancy
//! grid stretched over its box, which doubles as the mask target. Objects
//! never share a cell on the same level. Pixel noise is `N(0, 0.2²)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Shape3, Tensor3};

pub const CLS_IMAGE: usize = 16;
pub const MASK_GRID: usize = 4;
pub const NUM_SHAPES: usize = 3;

/// Ground truth of one pyramid object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTarget {
    pub level: usize,
    pub y: usize,
    pub x: usize,
    /// Foreground class in `0..NUM_SHAPES`.
    pub class: usize,
    /// `(dy, dx, ln(h / 2s), ln(w / 2s))` relative to the cell center, `s` the stride.
    pub reg: [f64; 4],
    pub mask: [bool; MASK_GRID * MASK_GRID],
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Objects(Vec<ObjectTarget>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor3,
    pub target: Target,
}

pub fn blob_sample(rng: &mut ChaCha8Rng, class: usize, num_classes: usize) -> Sample {
    let n = CLS_IMAGE;
    let half_classes = num_classes.div_ceil(2);
    let polarity = if class % 2 == 0 { 1.0 } else { -1.0 };
    let theta = (class / 2) as f64 * std::f64::consts::PI / half_classes as f64;
    let (major, minor) = (2.6, 1.1);
    let cy = (n as f64 - 1.0) / 2.0 + rng.random_range(-3.0..=3.0);
    let cx = (n as f64 - 1.0) / 2.0 + rng.random_range(-3.0..=3.0);
    let amp = polarity * rng.random_range(0.7..1.3);
    let noise = Normal::new(0.0, 0.25).expect("valid std");
    let (s, c) = theta.sin_cos();
    let image = Tensor3::from_fn(Shape3::new(1, n, n), |_, y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let g = (-(u * u) / (2.0 * major * major) - (v * v) / (2.0 * minor * minor)).exp();
        amp * g + noise.sample(rng)
    });
    Sample {
        image,
        target: Target::Class(class),
    }
}

/// Occupancy of mask cell `(i, j)` for a shape class.
pub fn shape_cell(class: usize, i: usize, j: usize) -> bool {
    let edge = |k: usize| k == 0 || k == MASK_GRID - 1;
    let mid = |k: usize| k == 1 || k == 2;
    match class {
        0 => true,
        1 => edge(i) || edge(j),
        _ => mid(i) || mid(j),
    }
}

pub fn pyramid_image_size(levels: usize) -> usize {
    4 << levels
}

pub fn shapes_sample(rng: &mut ChaCha8Rng, levels: usize) -> Sample {
    let n = pyramid_image_size(levels);
    let mut image = Tensor3::zeros(Shape3::new(1, n, n));
    let count = rng.random_range(1..=2);
    let mut objects: Vec<ObjectTarget> = Vec::new();
    let mut attempts = 0;
    while objects.len() < count && attempts < 50 {
        attempts += 1;
        let level = rng.random_range(0..levels);
        let stride = 2usize << level;
        let lo = (1.5 * stride as f64).round() as usize;
        let hi = (2.5 * stride as f64).round() as usize;
        let h = rng.random_range(lo..=hi).min(n);
        let w = rng.random_range(lo..=hi).min(n);
        let top = rng.random_range(0..=n - h);
        let left = rng.random_range(0..=n - w);
        let cy = top as f64 + h as f64 / 2.0;
        let cx = left as f64 + w as f64 / 2.0;
        let (y, x) = ((cy / stride as f64) as usize, (cx / stride as f64) as usize);
        let cells = n / stride;
        let (y, x) = (y.min(cells - 1), x.min(cells - 1));
        if objects.iter().any(|o| o.level == level && o.y == y && o.x == x) {
            continue;
        }
        let class = rng.random_range(0..NUM_SHAPES);
        let s = stride as f64;
        let reg = [
            cy / s - (y as f64 + 0.5),
            cx / s - (x as f64 + 0.5),
            (h as f64 / (2.0 * s)).ln(),
            (w as f64 / (2.0 * s)).ln(),
        ];
        let mut mask = [false; MASK_GRID * MASK_GRID];
        for i in 0..MASK_GRID {
            for j in 0..MASK_GRID {
                mask[i * MASK_GRID + j] = shape_cell(class, i, j);
            }
        }
        for py in top..top + h {
            for px in left..left + w {
                let i = (py - top) * MASK_GRID / h;
                let j = (px - left) * MASK_GRID / w;
                if mask[i * MASK_GRID + j] {
                    let v = image.get(0, py, px);
                    image.set(0, py, px, v.max(1.0));
                }
            }
        }
        objects.push(ObjectTarget {
            level,
            y,
            x,
            class,
            reg,
            mask,
        });
    }
    let noise = Normal::new(0.0, 0.2).expect("valid std");
    for v in image.data_mut() {
        *v += noise.sample(rng);
    }
    Sample {
        image,
        target: Target::Objects(objects),
    }
}
