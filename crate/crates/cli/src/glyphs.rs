//! Procedural 10-class glyph dataset in IDX format. A stand-in for the
//! digit experiment's machinery when the real dataset is not on disk:
//! ten visually distinct stroke shapes, jittered per sample.

use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::Path;

pub const SIDE: usize = 28;

/// Line segment with round caps, coordinates in glyph units (roughly
/// [-1, 1] before placement).
#[derive(Clone, Copy)]
struct Stroke {
    a: (f64, f64),
    b: (f64, f64),
}

fn seg(ax: f64, ay: f64, bx: f64, by: f64) -> Stroke {
    Stroke {
        a: (ax, ay),
        b: (bx, by),
    }
}

fn dist_to_segment(p: (f64, f64), s: &Stroke) -> f64 {
    let (px, py) = p;
    let (ax, ay) = s.a;
    let (bx, by) = s.b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Ten classes, distinct enough to survive moderate warp noise: ring, bar,
/// two bars, cross, X, L, T, V, box, filled dot.
fn class_strokes(class: usize) -> (Vec<Stroke>, Option<(f64, bool)>) {
    match class {
        0 => (vec![], Some((0.75, false))),
        1 => (vec![seg(0.0, -0.85, 0.0, 0.85)], None),
        2 => (
            vec![seg(-0.7, -0.45, 0.7, -0.45), seg(-0.7, 0.45, 0.7, 0.45)],
            None,
        ),
        3 => (
            vec![seg(0.0, -0.8, 0.0, 0.8), seg(-0.8, 0.0, 0.8, 0.0)],
            None,
        ),
        4 => (
            vec![seg(-0.7, -0.7, 0.7, 0.7), seg(-0.7, 0.7, 0.7, -0.7)],
            None,
        ),
        5 => (
            vec![seg(-0.6, -0.8, -0.6, 0.7), seg(-0.6, 0.7, 0.7, 0.7)],
            None,
        ),
        6 => (
            vec![seg(-0.75, -0.75, 0.75, -0.75), seg(0.0, -0.75, 0.0, 0.8)],
            None,
        ),
        7 => (
            vec![seg(-0.7, -0.8, 0.0, 0.75), seg(0.0, 0.75, 0.7, -0.8)],
            None,
        ),
        8 => (
            vec![
                seg(-0.65, -0.65, 0.65, -0.65),
                seg(0.65, -0.65, 0.65, 0.65),
                seg(0.65, 0.65, -0.65, 0.65),
                seg(-0.65, 0.65, -0.65, -0.65),
            ],
            None,
        ),
        _ => (vec![], Some((0.45, true))),
    }
}

/// Rasterize one jittered glyph to `SIDE * SIDE` bytes.
fn render(class: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (strokes, circle) = class_strokes(class);
    let cx = 13.5 + rng.gen_range(-1.5..1.5);
    let cy = 13.5 + rng.gen_range(-1.5..1.5);
    let scale = 9.0 * rng.gen_range(0.85..1.15);
    let rot = rng.gen_range(-0.15..0.15f64);
    let thick = rng.gen_range(1.1..1.6);
    let (sin, cos) = rot.sin_cos();

    let mut out = vec![0u8; SIDE * SIDE];
    for y in 0..SIDE {
        for x in 0..SIDE {
            // Invert placement: pixel -> glyph units.
            let gx = (x as f64 - cx) / scale;
            let gy = (y as f64 - cy) / scale;
            let p = (cos * gx + sin * gy, -sin * gx + cos * gy);
            let mut d = f64::INFINITY;
            for s in &strokes {
                d = d.min(dist_to_segment(p, s));
            }
            if let Some((radius, filled)) = circle {
                let r = (p.0 * p.0 + p.1 * p.1).sqrt();
                d = d.min(if filled { (r - radius).max(0.0) } else { (r - radius).abs() });
            }
            // Antialias over one pixel of source distance.
            let v = (thick / scale - d + 0.5 / scale) * scale;
            out[y * SIDE + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

fn write_idx_pair(
    images_path: &Path,
    labels_path: &Path,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut imgs = File::create(images_path)
        .with_context(|| format!("creating {}", images_path.display()))?;
    imgs.write_all(&0x0000_0803u32.to_be_bytes())?;
    imgs.write_all(&(n as u32).to_be_bytes())?;
    imgs.write_all(&(SIDE as u32).to_be_bytes())?;
    imgs.write_all(&(SIDE as u32).to_be_bytes())?;
    let mut labels = File::create(labels_path)
        .with_context(|| format!("creating {}", labels_path.display()))?;
    labels.write_all(&0x0000_0801u32.to_be_bytes())?;
    labels.write_all(&(n as u32).to_be_bytes())?;
    for i in 0..n {
        let class = i % 10;
        imgs.write_all(&render(class, rng))?;
        labels.write_all(&[class as u8])?;
    }
    Ok(())
}

/// Write train/test IDX pairs with the standard dataset file names, so the
/// directory can serve as `WARPALIGN_DATA_DIR`.
pub fn write_glyph_dataset(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    write_idx_pair(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        n_train,
        &mut rng,
    )?;
    write_idx_pair(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        n_test,
        &mut rng,
    )?;
    Ok(())
}
