//! Dataset ingestion and the corner-noise perturbation model.
//!
//! Every experiment trains on perturbed views generated on the fly: a warp
//! is drawn by jittering the corners of a ground-truth box with Gaussian
//! noise (independent per corner) plus one shared translation, then fitting
//! the warp family to the moved corners. Streams are deterministic given
//! their seed.

use crate::error::{Error, Result};
use crate::sampler::{bilinear_sample, make_grid, FrameSpec};
use crate::tensor::Tensor;
use crate::warp::{canonical_corners, fit_warp_to_points, WarpFamily, WarpParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

/// MNIST-style dataset: raw bytes, images materialized on demand.
#[derive(Debug, Clone)]
pub struct IdxDataset {
    pub rows: usize,
    pub cols: usize,
    images: Vec<u8>,
    labels: Vec<u8>,
}

impl IdxDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Image `i` as a `[1, rows, cols]` tensor scaled to [0, 1].
    pub fn image(&self, i: usize) -> Tensor {
        let n = self.rows * self.cols;
        let data: Vec<f64> = self.images[i * n..(i + 1) * n]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        Tensor::from_vec(&[1, self.rows, self.cols], data).unwrap()
    }
}

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("reading {what}: {e}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Load the IDX image/label file pair (big-endian magics 0x803 / 0x801).
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<IdxDataset> {
    let mut ir = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut ir, "image magic")?;
    if magic != 0x0000_0803 {
        return Err(Error::Format(format!(
            "bad image magic {magic:#010x} in {}",
            images_path.display()
        )));
    }
    let count = read_u32_be(&mut ir, "image count")? as usize;
    let rows = read_u32_be(&mut ir, "row count")? as usize;
    let cols = read_u32_be(&mut ir, "column count")? as usize;
    let mut images = vec![0u8; count * rows * cols];
    ir.read_exact(&mut images)
        .map_err(|e| Error::Format(format!("image payload truncated: {e}")))?;

    let mut lr = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut lr, "label magic")?;
    if magic != 0x0000_0801 {
        return Err(Error::Format(format!(
            "bad label magic {magic:#010x} in {}",
            labels_path.display()
        )));
    }
    let lcount = read_u32_be(&mut lr, "label count")? as usize;
    if lcount != count {
        return Err(Error::Format(format!(
            "{count} images but {lcount} labels"
        )));
    }
    let mut labels = vec![0u8; lcount];
    lr.read_exact(&mut labels)
        .map_err(|e| Error::Format(format!("label payload truncated: {e}")))?;

    Ok(IdxDataset {
        rows,
        cols,
        images,
        labels,
    })
}

/// Corner-noise model: i.i.d. Gaussian per corner coordinate plus one
/// shared translation per axis, both in pixels.
#[derive(Debug, Clone, Copy)]
pub struct PerturbConfig {
    pub family: WarpFamily,
    pub sigma_corner: f64,
    pub sigma_translation: f64,
}

impl PerturbConfig {
    pub fn new(family: WarpFamily, sigma_corner: f64, sigma_translation: f64) -> Result<Self> {
        if sigma_corner < 0.0 || sigma_translation < 0.0 {
            return Err(Error::Config("perturbation sigmas must be >= 0".into()));
        }
        Ok(PerturbConfig {
            family,
            sigma_corner,
            sigma_translation,
        })
    }
}

/// Draw a perturbation warp by jittering the corners of `box_frame`.
///
/// The returned warp maps the canonical square onto the jittered box in the
/// box frame's canonical coordinates, so sampling with it produces the
/// perturbed view. Degenerate corner draws (for the homography fit) are
/// resampled up to 10 times.
pub fn perturb_corners(
    box_frame: &FrameSpec,
    cfg: &PerturbConfig,
    rng: &mut ChaCha8Rng,
) -> Result<WarpParams> {
    let corner_noise = Normal::new(0.0, cfg.sigma_corner).expect("sigma >= 0");
    let trans_noise = Normal::new(0.0, cfg.sigma_translation).expect("sigma >= 0");
    for _ in 0..10 {
        let tx = trans_noise.sample(rng);
        let ty = trans_noise.sample(rng);
        let mut dst = [(0.0, 0.0); 4];
        for (d, &(cx, cy)) in dst.iter_mut().zip(canonical_corners().iter()) {
            let (px, py) = box_frame.to_pixels(cx, cy);
            let jx = px + corner_noise.sample(rng) + tx;
            let jy = py + corner_noise.sample(rng) + ty;
            // Back to the box frame's canonical coordinates.
            *d = (
                (jx - box_frame.center_x) / box_frame.half_x,
                (jy - box_frame.center_y) / box_frame.half_y,
            );
        }
        match fit_warp_to_points(cfg.family, &canonical_corners(), &dst) {
            Ok(p) => return Ok(p),
            Err(Error::DegenerateWarp(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::DegenerateWarp(
        "corner noise kept producing degenerate quads".into(),
    ))
}

/// One perturbed training/evaluation view.
#[derive(Debug, Clone)]
pub struct Sample {
    /// The perturbed view (crop for planar, full canvas for digits).
    pub image: Tensor,
    /// The perturbation warp that generated the view.
    pub perturbation: WarpParams,
    /// Warp that undoes the perturbation: compose(perturbation, gt_warp) = 0.
    pub gt_warp: WarpParams,
    pub label: Option<usize>,
}

/// Endless batches of perturbed crops of one source image.
pub struct PlanarStream {
    source: Tensor,
    box_frame: FrameSpec,
    out_size: (usize, usize),
    cfg: PerturbConfig,
    rng: ChaCha8Rng,
}

impl PlanarStream {
    /// `box_frame` places the ground-truth box inside `source`; crops are
    /// `out_size` pixels and always sampled from the full source.
    pub fn new(
        source: Tensor,
        box_frame: FrameSpec,
        out_size: (usize, usize),
        cfg: PerturbConfig,
        seed: u64,
    ) -> Result<Self> {
        let s = source.shape();
        if s.len() != 3 || s[1] != box_frame.src_h || s[2] != box_frame.src_w {
            return Err(Error::Config(
                "box frame does not match the source image".into(),
            ));
        }
        Ok(PlanarStream {
            source,
            box_frame,
            out_size,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn source(&self) -> &Tensor {
        &self.source
    }

    pub fn box_frame(&self) -> &FrameSpec {
        &self.box_frame
    }

    pub fn next_sample(&mut self) -> Result<Sample> {
        let perturbation = perturb_corners(&self.box_frame, &self.cfg, &mut self.rng)?;
        let grid = make_grid(&perturbation, self.out_size, &self.box_frame)?;
        let image = bilinear_sample(&self.source, &grid)?;
        let gt_warp = perturbation.invert()?;
        Ok(Sample {
            image,
            perturbation,
            gt_warp,
            label: None,
        })
    }

    pub fn next_batch(&mut self, n: usize) -> Result<Vec<Sample>> {
        (0..n).map(|_| self.next_sample()).collect()
    }
}

/// Endless batches of perturbed digits; the canvas border is the box.
pub struct MnistStream<'a> {
    dataset: &'a IdxDataset,
    frame: FrameSpec,
    cfg: PerturbConfig,
    rng: ChaCha8Rng,
}

impl<'a> MnistStream<'a> {
    pub fn new(dataset: &'a IdxDataset, cfg: PerturbConfig, seed: u64) -> Result<Self> {
        let frame = FrameSpec::full(dataset.cols, dataset.rows)?;
        Ok(MnistStream {
            dataset,
            frame,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn frame(&self) -> &FrameSpec {
        &self.frame
    }

    /// Perturbed view of dataset item `index`.
    pub fn sample_of(&mut self, index: usize) -> Result<Sample> {
        let digit = self.dataset.image(index);
        let perturbation = perturb_corners(&self.frame, &self.cfg, &mut self.rng)?;
        let grid = make_grid(&perturbation, (self.dataset.rows, self.dataset.cols), &self.frame)?;
        let image = bilinear_sample(&digit, &grid)?;
        let gt_warp = perturbation.invert()?;
        Ok(Sample {
            image,
            perturbation,
            gt_warp,
            label: Some(self.dataset.label(index)),
        })
    }

    /// Random batch drawn uniformly with replacement.
    pub fn next_batch(&mut self, n: usize) -> Result<Vec<Sample>> {
        (0..n)
            .map(|_| {
                let idx = self.rng.gen_range(0..self.dataset.len());
                self.sample_of(idx)
            })
            .collect()
    }

    /// Deterministic pass over `indices` (evaluation order).
    pub fn batch_of(&mut self, indices: &[usize]) -> Result<Vec<Sample>> {
        indices.iter().map(|&i| self.sample_of(i)).collect()
    }
}
