//! PNG artifacts: per-sample alignment strips, per-class mean/variance
//! panels, and the boundary-effect comparison between parameter passing and
//! image chaining.

use anyhow::{anyhow, Context, Result};
use std::path::Path;

use warpalign::arch::Variant;
use warpalign::checkpoint::load_pipeline;
use warpalign::data::{MnistStream, PerturbConfig, PlanarStream};
use warpalign::pipeline::AlignmentPipeline;
use warpalign::sampler::{bilinear_sample, make_grid, FrameSpec};
use warpalign::synth::procedural_photo;
use warpalign::tensor::Tensor;
use warpalign::warp::{WarpFamily, WarpParams};

use crate::config::{Experiment, PLANAR_SIDE};
use crate::eval::appearance_stats;
use crate::train::{assemble_batch, load_digit_data, planar_scene, EVAL_SEED};

const STRIP_SAMPLES: usize = 8;
const PANEL_SAMPLES: usize = 1000;

/// Clamp [0,1] intensities to 8-bit grayscale and write a PNG.
pub fn save_gray(path: &Path, w: usize, h: usize, data: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| anyhow!("buffer does not match {w}x{h}"))?;
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Montage of equally sized single-channel cells, row-major, with a light
/// gray separator.
pub fn tile(cells: &[Tensor], cols: usize) -> Result<(usize, usize, Vec<f64>)> {
    let first = cells
        .first()
        .ok_or_else(|| anyhow!("no cells to tile"))?
        .shape()
        .to_vec();
    if first.len() != 3 || first[0] != 1 {
        anyhow::bail!("cells must be [1, H, W], got {first:?}");
    }
    let (ch, cw) = (first[1], first[2]);
    let rows = cells.len().div_ceil(cols);
    const PAD: usize = 2;
    let out_w = cols * cw + (cols + 1) * PAD;
    let out_h = rows * ch + (rows + 1) * PAD;
    let mut out = vec![0.35f64; out_w * out_h];
    for (idx, cell) in cells.iter().enumerate() {
        if cell.shape() != first.as_slice() {
            anyhow::bail!("ragged cell {:?} vs {:?}", cell.shape(), first);
        }
        let (r, c) = (idx / cols, idx % cols);
        let oy = PAD + r * (ch + PAD);
        let ox = PAD + c * (cw + PAD);
        for y in 0..ch {
            let src = &cell.data()[y * cw..(y + 1) * cw];
            let dst = &mut out[(oy + y) * out_w + ox..(oy + y) * out_w + ox + cw];
            dst.copy_from_slice(src);
        }
    }
    Ok((out_w, out_h, out))
}

fn cell_of(batch: &Tensor, i: usize) -> Result<Tensor> {
    let s = batch.shape();
    let plane: usize = s[1..].iter().product();
    let data = batch.data()[i * plane..(i + 1) * plane].to_vec();
    Ok(Tensor::from_vec(&[s[1], s[2], s[3]], data)?)
}

fn zoom(scale: f64) -> WarpParams {
    WarpParams::new(
        WarpFamily::Affine,
        vec![scale - 1.0, 0.0, 0.0, 0.0, scale - 1.0, 0.0],
    )
    .expect("diagonal affine")
}

/// Zoom-out comparison on a crop of a textured scene: resampling the source
/// through composed parameters keeps the content that chaining through the
/// cropped image has already discarded.
pub fn boundary_effect_figure(out: &Path) -> Result<()> {
    let photo = procedural_photo(100, 100, 99);
    let window = FrameSpec::window(100, 100, 49.5, 49.5, 24.5, 24.5)?;
    let side = PLANAR_SIDE;
    let crop_frame = FrameSpec::full(side, side)?;
    let id = WarpParams::identity(WarpFamily::Affine);
    let half = 1.5f64.sqrt();

    let crop = bilinear_sample(&photo, &make_grid(&id, (side, side), &window)?)?;
    let composed = zoom(half).compose(&zoom(half))?;
    let direct = bilinear_sample(&photo, &make_grid(&composed, (side, side), &window)?)?;
    let step1 = bilinear_sample(&crop, &make_grid(&zoom(half), (side, side), &crop_frame)?)?;
    let chained = bilinear_sample(&step1, &make_grid(&zoom(half), (side, side), &crop_frame)?)?;

    let cells = [crop, direct, chained];
    let (w, h, data) = tile(&cells, 3)?;
    save_gray(out, w, h, &data)
}

/// Columns are samples, rows are warp steps from the initial view to the
/// final alignment.
fn strip_from_trajectory(
    pipe: &AlignmentPipeline,
    sources: &[&Tensor],
    frame: &FrameSpec,
    initial: &[WarpParams],
    out: &Path,
) -> Result<()> {
    let k = pipe.spec().warp_ops;
    let trajectory = pipe.warp_trajectory(sources, frame, initial, k)?;
    let mut cells = Vec::with_capacity(trajectory.len() * sources.len());
    for ps in &trajectory {
        let (aligned, _) = pipe.classify_at(sources, frame, ps)?;
        for i in 0..sources.len() {
            cells.push(cell_of(&aligned, i)?);
        }
    }
    let (w, h, data) = tile(&cells, sources.len())?;
    save_gray(out, w, h, &data)
}

fn planar_figures(pipe: &AlignmentPipeline, sigma: f64, sigma_t: f64, out_dir: &Path) -> Result<()> {
    let (photo, frame) = planar_scene();
    let perturb = PerturbConfig::new(pipe.spec().family, sigma, sigma_t)?;
    let mut stream = PlanarStream::new(
        photo.clone(),
        frame.clone(),
        (PLANAR_SIDE, PLANAR_SIDE),
        perturb,
        EVAL_SEED,
    )?;
    let batch = stream.next_batch(STRIP_SAMPLES)?;
    let sources: Vec<&Tensor> = vec![&photo; STRIP_SAMPLES];
    let initial: Vec<WarpParams> = batch.iter().map(|s| s.perturbation.clone()).collect();
    strip_from_trajectory(pipe, &sources, &frame, &initial, &out_dir.join("alignment_strip.png"))
}

fn digit_figures(pipe: &AlignmentPipeline, sigma: f64, sigma_t: f64, out_dir: &Path) -> Result<()> {
    let (_, test_ds) = load_digit_data()?;
    let spec = pipe.spec();
    let perturb = PerturbConfig::new(spec.family, sigma, sigma_t)?;
    let mut stream = MnistStream::new(&test_ds, perturb, EVAL_SEED)?;
    let frame = stream.frame().clone();
    let indices: Vec<usize> = (0..STRIP_SAMPLES).collect();
    let batch = stream.batch_of(&indices)?;

    match spec.variant {
        Variant::Cstn | Variant::Icstn => {
            let sources: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
            let ids = vec![WarpParams::identity(spec.family); batch.len()];
            strip_from_trajectory(pipe, &sources, &frame, &ids, &out_dir.join("alignment_strip.png"))?;
        }
        Variant::Stn => {
            // The chained path exposes no parameter trajectory; show
            // input and final image.
            let images = assemble_batch(&batch)?;
            let (out, _) = pipe.stn_forward(&images)?;
            let mut cells = Vec::new();
            for i in 0..batch.len() {
                cells.push(cell_of(&images, i)?);
            }
            for i in 0..batch.len() {
                cells.push(cell_of(&out.image, i)?);
            }
            let (w, h, data) = tile(&cells, batch.len())?;
            save_gray(&out_dir.join("alignment_strip.png"), w, h, &data)?;
        }
        Variant::CnnOnly => {}
    }

    let stats = appearance_stats(pipe, &test_ds, sigma, sigma_t, Some(PANEL_SAMPLES))?;
    let (w, h, data) = tile(&stats.class_means, stats.class_means.len())?;
    save_gray(&out_dir.join("class_means.png"), w, h, &data)?;
    let peak = stats
        .class_vars
        .iter()
        .flat_map(|t| t.data().iter().cloned())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let scaled: Vec<Tensor> = stats
        .class_vars
        .iter()
        .map(|t| {
            let data: Vec<f64> = t.data().iter().map(|v| v / peak).collect();
            Tensor::from_vec(t.shape(), data).expect("same shape")
        })
        .collect();
    let (w, h, data) = tile(&scaled, scaled.len())?;
    save_gray(&out_dir.join("class_variances.png"), w, h, &data)?;
    println!(
        "mean pixelwise variance of aligned appearances: {:.6}",
        stats.mean_pixel_variance
    );
    Ok(())
}

/// Emit every figure a checkpoint supports into `out_dir`.
pub fn export_figures(checkpoint: &Path, out_dir: &Path) -> Result<()> {
    let (pipe, meta) = load_pipeline(checkpoint)?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let experiment = Experiment::parse(
        meta.get("experiment")
            .ok_or_else(|| anyhow!("checkpoint metadata lacks 'experiment'"))?,
    )?;
    let sigma: f64 = meta
        .get("sigma")
        .ok_or_else(|| anyhow!("checkpoint metadata lacks 'sigma'"))?
        .parse()?;
    let sigma_t: f64 = meta
        .get("sigma_t")
        .ok_or_else(|| anyhow!("checkpoint metadata lacks 'sigma_t'"))?
        .parse()?;
    match experiment {
        Experiment::Planar => planar_figures(&pipe, sigma, sigma_t, out_dir)?,
        Experiment::Mnist => digit_figures(&pipe, sigma, sigma_t, out_dir)?,
    }
    boundary_effect_figure(&out_dir.join("boundary_effect.png"))?;
    Ok(())
}
