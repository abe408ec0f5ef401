//! Synthetic brain-like phantoms used in place of real acquisitions.
//!
//! Each image is a bright filled ellipse with a smooth intensity texture,
//! one or two dark interior ellipses, and additive Gaussian noise. Geometry
//! is rendered with 4×4 supersampling so small structures still show up as
//! partial-volume intensities at 16×16.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ImageSet;
use crate::error::{invalid, Result};
use crate::Scalar;

/// Full axis lengths of the outer ellipse, as fractions of the image size.
const BRAIN_AXIS: (f64, f64) = (0.30, 0.45);
/// Center offset from the image middle, as a fraction of the size.
const BRAIN_JITTER: f64 = 0.05;
/// Rotation range of the outer ellipse, radians.
const BRAIN_ROTATION: f64 = 0.35;
const BRAIN_INTENSITY: (f64, f64) = (0.75, 0.90);
const TEXTURE_AMPLITUDE: f64 = 0.08;
/// Spatial frequency of the texture, cycles per image.
const TEXTURE_FREQUENCY: (f64, f64) = (0.5, 1.5);
/// Full axis lengths of the inner ellipses, as fractions of the size.
const VENTRICLE_AXIS: (f64, f64) = (0.05, 0.12);
const VENTRICLE_OFFSET: f64 = 0.10;
const VENTRICLE_INTENSITY: f64 = 0.15;
const NOISE_STD: f64 = 0.02;
const SUPERSAMPLE: usize = 4;

pub const MIN_PHANTOM_SIZE: usize = 8;

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    semi_a: f64,
    semi_b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, axis_a: f64, axis_b: f64, theta: f64) -> Self {
        Self { cx, cy, semi_a: axis_a / 2.0, semi_b: axis_b / 2.0, cos: theta.cos(), sin: theta.sin() }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (self.cos * dx + self.sin * dy) / self.semi_a;
        let v = (-self.sin * dx + self.cos * dy) / self.semi_b;
        u * u + v * v <= 1.0
    }
}

/// Generates `n` phantoms of `size × size` pixels. The output is a pure
/// function of `(n, size, seed)`.
pub fn phantom_generate<T: Scalar>(n: usize, size: usize, seed: u64) -> Result<ImageSet<T>> {
    if n == 0 {
        return Err(invalid("phantom count must be at least 1"));
    }
    if size < MIN_PHANTOM_SIZE {
        return Err(invalid(format!(
            "phantom size {size} is below the minimum of {MIN_PHANTOM_SIZE}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * size * size);
    for _ in 0..n {
        pixels.extend(render_one(&mut rng, size).into_iter().map(T::of));
    }
    ImageSet::new(size, size, pixels)
}

fn render_one(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let s = size as f64;
    let brain = Ellipse::new(
        s / 2.0 + rng.random_range(-BRAIN_JITTER..=BRAIN_JITTER) * s,
        s / 2.0 + rng.random_range(-BRAIN_JITTER..=BRAIN_JITTER) * s,
        rng.random_range(BRAIN_AXIS.0..=BRAIN_AXIS.1) * s,
        rng.random_range(BRAIN_AXIS.0..=BRAIN_AXIS.1) * s,
        rng.random_range(-BRAIN_ROTATION..=BRAIN_ROTATION),
    );
    let base = rng.random_range(BRAIN_INTENSITY.0..=BRAIN_INTENSITY.1);
    let fx = rng.random_range(TEXTURE_FREQUENCY.0..=TEXTURE_FREQUENCY.1);
    let fy = rng.random_range(TEXTURE_FREQUENCY.0..=TEXTURE_FREQUENCY.1);
    let px = rng.random_range(0.0..std::f64::consts::TAU);
    let py = rng.random_range(0.0..std::f64::consts::TAU);
    let ventricles: Vec<Ellipse> = (0..rng.random_range(1..=2))
        .map(|_| {
            Ellipse::new(
                brain.cx + rng.random_range(-VENTRICLE_OFFSET..=VENTRICLE_OFFSET) * s,
                brain.cy + rng.random_range(-VENTRICLE_OFFSET..=VENTRICLE_OFFSET) * s,
                rng.random_range(VENTRICLE_AXIS.0..=VENTRICLE_AXIS.1) * s,
                rng.random_range(VENTRICLE_AXIS.0..=VENTRICLE_AXIS.1) * s,
                rng.random_range(0.0..std::f64::consts::PI),
            )
        })
        .collect();

    let tau = std::f64::consts::TAU;
    let noise = Normal::new(0.0, NOISE_STD).expect("valid noise std");
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut out = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = col as f64 + (sx as f64 + 0.5) * step;
                    let y = row as f64 + (sy as f64 + 0.5) * step;
                    if !brain.contains(x, y) {
                        continue;
                    }
                    acc += if ventricles.iter().any(|v| v.contains(x, y)) {
                        VENTRICLE_INTENSITY
                    } else {
                        base + TEXTURE_AMPLITUDE
                            * (tau * fx * x / s + px).sin()
                            * (tau * fy * y / s + py).cos()
                    };
                }
            }
            let v = acc / (SUPERSAMPLE * SUPERSAMPLE) as f64 + noise.sample(rng);
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = phantom_generate::<f64>(3, 16, 7).unwrap();
        let b = phantom_generate::<f64>(3, 16, 7).unwrap();
        assert_eq!(a.pixels(), b.pixels());
        let c = phantom_generate::<f64>(3, 16, 8).unwrap();
        assert_ne!(a.pixels(), c.pixels());
    }

    #[test]
    fn rejects_small_sizes_and_zero_count() {
        assert!(phantom_generate::<f64>(1, 7, 0).is_err());
        assert!(phantom_generate::<f64>(0, 16, 0).is_err());
        assert!(phantom_generate::<f64>(1, 8, 0).is_ok());
    }

    #[test]
    fn unit_range_and_nondegenerate_mean() {
        let set = phantom_generate::<f64>(50, 16, 3).unwrap();
        set.validate_unit_range().unwrap();
        for img in set.images() {
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            assert!(mean > 0.0 && mean < 1.0, "mean {mean}");
        }
    }

    #[test]
    fn f32_matches_f64_up_to_rounding() {
        let a = phantom_generate::<f64>(2, 16, 11).unwrap();
        let b = phantom_generate::<f32>(2, 16, 11).unwrap();
        for (x, y) in a.pixels().iter().zip(b.pixels()) {
            assert!((x - *y as f64).abs() < 1e-7);
        }
    }
}
