//! Deterministic synthetic imagery for tests and the planar experiment.
//!
//! The planar alignment experiment needs a textured photograph; shipping a
//! binary asset is avoided by generating one procedurally. The texture mixes
//! smooth sinusoidal gratings with Gaussian bumps, giving dense gradients at
//! wavelengths a local alignment method can lock onto (dominant wavelengths
//! are kept well above the pixel scale so small misalignments stay inside
//! the attraction basin).

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Single-channel Gaussian blob, intensities in (0, 1].
pub fn gaussian_blob(h: usize, w: usize, cx: f64, cy: f64, sigma: f64) -> Tensor {
    let mut t = Tensor::zeros(&[1, h, w]);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in 0..h {
        for x in 0..w {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            t.data_mut()[y * w + x] = (-d2 * inv).exp();
        }
    }
    t
}

/// Smooth textured "photograph", single channel, intensities in [0.05, 0.95].
pub fn procedural_photo(w: usize, h: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = vec![0.0f64; w * h];

    // Oriented gratings across a band of wavelengths.
    for _ in 0..12 {
        let wavelength = rng.gen_range(12.0..48.0);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.gen_range(0.4..1.0);
        let (kx, ky) = (
            theta.cos() * std::f64::consts::TAU / wavelength,
            theta.sin() * std::f64::consts::TAU / wavelength,
        );
        for y in 0..h {
            for x in 0..w {
                field[y * w + x] += amp * (kx * x as f64 + ky * y as f64 + phase).sin();
            }
        }
    }

    // A few bumps to break the gratings' translational symmetry.
    for _ in 0..10 {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let sigma = rng.gen_range(6.0..20.0);
        let amp = rng.gen_range(-2.0..2.0);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                field[y * w + x] += amp * (-d2 * inv).exp();
            }
        }
    }

    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = 0.9 / (hi - lo).max(1e-12);
    for v in field.iter_mut() {
        *v = (0.05 + (*v - lo) * scale).clamp(0.05, 0.95);
    }
    Tensor::from_vec(&[1, h, w], field).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn photo_is_deterministic_and_in_range() {
        let a = procedural_photo(64, 48, 7);
        let b = procedural_photo(64, 48, 7);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (0.05..=0.95).contains(&v)));
        let c = procedural_photo(64, 48, 8);
        assert!(a.max_abs_diff(&c) > 0.1);
    }

    #[test]
    fn photo_has_usable_contrast_everywhere() {
        // Every 16x16 tile should contain real texture, not a flat patch;
        // alignment needs gradients in all regions the box can land on.
        let img = procedural_photo(160, 160, 42);
        for ty in 0..10 {
            for tx in 0..10 {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for y in 0..16 {
                    for x in 0..16 {
                        let v = img.data()[(ty * 16 + y) * 160 + tx * 16 + x];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                assert!(hi - lo > 0.05, "flat tile at ({tx},{ty}): range {}", hi - lo);
            }
        }
    }

    #[test]
    fn blob_peaks_at_center() {
        let b = gaussian_blob(9, 9, 4.0, 4.0, 2.0);
        let peak = b.data()[4 * 9 + 4];
        assert_eq!(peak, 1.0);
        assert!(b.data().iter().all(|&v| v <= peak));
    }
}
