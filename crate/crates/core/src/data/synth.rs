//! Anti-aliased shapes on a black background: disk, square, cross, triangle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SUPERSAMPLE: usize = 4;
const SHAPES: usize = 4;

/// Inside test for shape `class` with circumradius `r`, at offset `(y, x)`
/// from the shape centre (rows grow downwards).
fn inside(class: usize, y: f64, x: f64, r: f64) -> bool {
    match class {
        0 => y * y + x * x <= r * r,
        1 => y.abs().max(x.abs()) <= 0.75 * r,
        2 => {
            let arm = 0.3 * r;
            (y.abs() <= arm && x.abs() <= r) || (x.abs() <= arm && y.abs() <= r)
        }
        _ => {
            // Upward triangle: apex at -r, base at r/2.
            let half = r * 3f64.sqrt() / 2.0;
            y <= r / 2.0 && y >= -r + (x.abs() / half) * 1.5 * r
        }
    }
}

/// `n_per_class` images per class, interleaved by class, deterministic per
/// `seed`. Shapes get a random radius, sub-pixel position jitter of up to one
/// pixel and a random intensity.
pub fn gen_synthetic(classes: usize, n_per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || classes > SHAPES {
        return Err(Error::Config(format!(
            "synthetic data has 1..={SHAPES} classes, got {classes}"
        )));
    }
    if size < 4 {
        return Err(Error::Config(format!("image size {size} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * n_per_class;
    let mut data = vec![0.0; n * size * size];
    let mut labels = Vec::with_capacity(n);
    let centre = (size as f64 - 1.0) / 2.0;
    let step = 1.0 / SUPERSAMPLE as f64;
    let norm = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for (s, img) in data.chunks_exact_mut(size * size).enumerate() {
        let class = s % classes;
        labels.push(class);
        let r = rng.gen_range(0.25..0.33) * size as f64;
        let cy = centre + rng.gen_range(-1.0..1.0);
        let cx = centre + rng.gen_range(-1.0..1.0);
        let intensity = rng.gen_range(0.7..1.0);
        for row in 0..size {
            for col in 0..size {
                let mut hits = 0usize;
                for a in 0..SUPERSAMPLE {
                    for b in 0..SUPERSAMPLE {
                        let y = row as f64 - 0.5 + (a as f64 + 0.5) * step - cy;
                        let x = col as f64 - 0.5 + (b as f64 + 0.5) * step - cx;
                        hits += inside(class, y, x, r) as usize;
                    }
                }
                img[row * size + col] = intensity * hits as f64 * norm;
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, size, size], data)?, labels, "synth", classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = gen_synthetic(4, 5, 16, 3).unwrap();
        let b = gen_synthetic(4, 5, 16, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_synthetic(4, 5, 16, 4).unwrap());
        assert_eq!(a.class_counts(), vec![5; 4]);
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(gen_synthetic(5, 1, 16, 0).is_err());
    }

    #[test]
    fn shapes_differ_in_mass() {
        let d = gen_synthetic(4, 1, 32, 0).unwrap();
        let masses: Vec<f64> = (0..4).map(|i| d.image(i).sum()).collect();
        assert!(masses.iter().all(|&m| m > 20.0));
    }
}
