//! Evaluation of live pipelines and saved checkpoints, including unrolling
//! the shared predictor past its trained depth.

use anyhow::{anyhow, bail, Context, Result};
use std::collections::BTreeMap;
use std::path::Path;

use warpalign::arch::Variant;
use warpalign::checkpoint::load_pipeline;
use warpalign::data::{IdxDataset, MnistStream, PerturbConfig, PlanarStream};
use warpalign::pipeline::AlignmentPipeline;
use warpalign::sampler::{corner_error_px, FrameSpec};
use warpalign::tensor::Tensor;
use warpalign::warp::{WarpFamily, WarpParams};

use crate::config::{Experiment, PLANAR_SIDE};
use crate::train::{assemble_batch, load_digit_data, planar_scene, EVAL_SAMPLES, EVAL_SEED};

/// Mean residual-parameter L2 and mean corner error (px) on the fixed
/// evaluation draw, with the predictor unrolled `k_steps` times.
pub fn eval_planar_unrolled(
    pipe: &AlignmentPipeline,
    photo: &Tensor,
    frame: &FrameSpec,
    family: WarpFamily,
    sigma: f64,
    sigma_t: f64,
    k_steps: usize,
    n_samples: usize,
) -> Result<(f64, f64)> {
    let perturb = PerturbConfig::new(family, sigma, sigma_t)?;
    let mut stream = PlanarStream::new(
        photo.clone(),
        frame.clone(),
        (PLANAR_SIDE, PLANAR_SIDE),
        perturb,
        EVAL_SEED,
    )?;
    let id = WarpParams::identity(family);
    let mut l2 = 0.0;
    let mut px = 0.0;
    let mut done = 0;
    while done < n_samples {
        let take = (n_samples - done).min(100);
        let batch = stream.next_batch(take)?;
        let sources: Vec<&Tensor> = vec![photo; take];
        let initial: Vec<WarpParams> = batch.iter().map(|s| s.perturbation.clone()).collect();
        let trajectory = pipe.warp_trajectory(&sources, frame, &initial, k_steps)?;
        for p in trajectory.last().expect("trajectory never empty") {
            l2 += p.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            px += corner_error_px(frame, p, &id)?;
        }
        done += take;
    }
    Ok((l2 / n_samples as f64, px / n_samples as f64))
}

fn argmax_row(logits: &Tensor, i: usize) -> usize {
    let k = logits.shape()[1];
    let row = &logits.data()[i * k..(i + 1) * k];
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// % classification error on the perturbed test set (first `limit` items
/// when given), using the fixed evaluation seed.
pub fn eval_digits(
    pipe: &AlignmentPipeline,
    ds: &IdxDataset,
    sigma: f64,
    sigma_t: f64,
    limit: Option<usize>,
) -> Result<f64> {
    let spec = pipe.spec();
    let perturb = PerturbConfig::new(spec.family, sigma, sigma_t)?;
    let mut stream = MnistStream::new(ds, perturb, EVAL_SEED)?;
    let frame = stream.frame().clone();
    let n = limit.unwrap_or(ds.len()).min(ds.len());
    let mut wrong = 0usize;
    let mut done = 0usize;
    while done < n {
        let take = (n - done).min(100);
        let indices: Vec<usize> = (done..done + take).collect();
        let batch = stream.batch_of(&indices)?;
        let logits = match spec.variant {
            Variant::CnnOnly => pipe.cnn_forward(&assemble_batch(&batch)?)?.0,
            Variant::Stn => pipe
                .stn_forward(&assemble_batch(&batch)?)?
                .0
                .logits
                .ok_or_else(|| anyhow!("classifier missing"))?,
            Variant::Cstn | Variant::Icstn => {
                let sources: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
                let ids = vec![WarpParams::identity(spec.family); take];
                pipe.cstn_forward(&sources, &frame, &ids)?
                    .0
                    .logits
                    .ok_or_else(|| anyhow!("classifier missing"))?
            }
        };
        for (i, s) in batch.iter().enumerate() {
            if argmax_row(&logits, i) != s.label.expect("labeled dataset") {
                wrong += 1;
            }
        }
        done += take;
    }
    Ok(100.0 * wrong as f64 / n as f64)
}

/// Digit error with the compositional predictor unrolled `k_steps` times.
pub fn eval_digits_unrolled(
    pipe: &AlignmentPipeline,
    ds: &IdxDataset,
    sigma: f64,
    sigma_t: f64,
    k_steps: usize,
    limit: Option<usize>,
) -> Result<f64> {
    let spec = pipe.spec();
    if !matches!(spec.variant, Variant::Cstn | Variant::Icstn) {
        bail!("unrolled evaluation needs a compositional variant");
    }
    let perturb = PerturbConfig::new(spec.family, sigma, sigma_t)?;
    let mut stream = MnistStream::new(ds, perturb, EVAL_SEED)?;
    let frame = stream.frame().clone();
    let n = limit.unwrap_or(ds.len()).min(ds.len());
    let mut wrong = 0usize;
    let mut done = 0usize;
    while done < n {
        let take = (n - done).min(100);
        let indices: Vec<usize> = (done..done + take).collect();
        let batch = stream.batch_of(&indices)?;
        let sources: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
        let ids = vec![WarpParams::identity(spec.family); take];
        let trajectory = pipe.warp_trajectory(&sources, &frame, &ids, k_steps)?;
        let final_p = trajectory.last().expect("trajectory never empty");
        let (_, logits) = pipe.classify_at(&sources, &frame, final_p)?;
        let logits = logits.ok_or_else(|| anyhow!("classifier missing"))?;
        for (i, s) in batch.iter().enumerate() {
            if argmax_row(&logits, i) != s.label.expect("labeled dataset") {
                wrong += 1;
            }
        }
        done += take;
    }
    Ok(100.0 * wrong as f64 / n as f64)
}

/// Per-class mean and pixelwise variance of the aligned test appearances,
/// plus the variance averaged over pixels and classes.
pub struct AppearanceStats {
    pub class_means: Vec<Tensor>,
    pub class_vars: Vec<Tensor>,
    pub mean_pixel_variance: f64,
}

pub fn appearance_stats(
    pipe: &AlignmentPipeline,
    ds: &IdxDataset,
    sigma: f64,
    sigma_t: f64,
    limit: Option<usize>,
) -> Result<AppearanceStats> {
    let spec = pipe.spec();
    let n_classes = spec
        .n_classes()
        .ok_or_else(|| anyhow!("appearance statistics need a classifier head"))?;
    let (c, h, w) = spec.input;
    let plane = c * h * w;
    let perturb = PerturbConfig::new(spec.family, sigma, sigma_t)?;
    let mut stream = MnistStream::new(ds, perturb, EVAL_SEED)?;
    let frame = stream.frame().clone();
    let n = limit.unwrap_or(ds.len()).min(ds.len());

    let mut sums = vec![vec![0.0f64; plane]; n_classes];
    let mut sq_sums = vec![vec![0.0f64; plane]; n_classes];
    let mut counts = vec![0usize; n_classes];
    let mut done = 0usize;
    while done < n {
        let take = (n - done).min(100);
        let indices: Vec<usize> = (done..done + take).collect();
        let batch = stream.batch_of(&indices)?;
        let aligned: Tensor = match spec.variant {
            Variant::CnnOnly => assemble_batch(&batch)?,
            Variant::Stn => pipe.stn_forward(&assemble_batch(&batch)?)?.0.image,
            Variant::Cstn | Variant::Icstn => {
                let sources: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
                let ids = vec![WarpParams::identity(spec.family); take];
                pipe.cstn_forward(&sources, &frame, &ids)?.0.aligned
            }
        };
        for (i, s) in batch.iter().enumerate() {
            let class = s.label.expect("labeled dataset");
            let view = &aligned.data()[i * plane..(i + 1) * plane];
            counts[class] += 1;
            for (j, &v) in view.iter().enumerate() {
                sums[class][j] += v;
                sq_sums[class][j] += v * v;
            }
        }
        done += take;
    }

    let mut class_means = Vec::with_capacity(n_classes);
    let mut class_vars = Vec::with_capacity(n_classes);
    let mut var_acc = 0.0;
    let mut var_n = 0usize;
    for class in 0..n_classes {
        let m = counts[class].max(1) as f64;
        let mean: Vec<f64> = sums[class].iter().map(|s| s / m).collect();
        let var: Vec<f64> = sq_sums[class]
            .iter()
            .zip(&mean)
            .map(|(sq, mu)| (sq / m - mu * mu).max(0.0))
            .collect();
        if counts[class] > 0 {
            var_acc += var.iter().sum::<f64>();
            var_n += plane;
        }
        class_means.push(Tensor::from_vec(&[c, h, w], mean)?);
        class_vars.push(Tensor::from_vec(&[c, h, w], var)?);
    }
    Ok(AppearanceStats {
        class_means,
        class_vars,
        mean_pixel_variance: var_acc / var_n.max(1) as f64,
    })
}

fn meta_f64(meta: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    meta.get(key)
        .ok_or_else(|| anyhow!("checkpoint metadata lacks '{key}'"))?
        .parse::<f64>()
        .with_context(|| format!("metadata key '{key}'"))
}

/// What `eval --checkpoint` prints.
pub struct CheckpointReport {
    pub experiment: Experiment,
    pub label: String,
    pub k_steps: usize,
    /// Planar: mean residual-parameter L2. Digits: % test error.
    pub metric: f64,
    pub corner_px: Option<f64>,
}

/// Score a saved checkpoint on its experiment's fixed evaluation draw with
/// the predictor unrolled `k_steps` times.
pub fn eval_checkpoint(path: &Path, k_steps: usize) -> Result<CheckpointReport> {
    let (pipe, meta) = load_pipeline(path)?;
    let experiment = Experiment::parse(
        meta.get("experiment")
            .ok_or_else(|| anyhow!("checkpoint metadata lacks 'experiment'"))?,
    )?;
    let label = meta.get("label").cloned().unwrap_or_else(|| "?".into());
    let sigma = meta_f64(&meta, "sigma")?;
    let sigma_t = meta_f64(&meta, "sigma_t")?;
    match experiment {
        Experiment::Planar => {
            let (photo, frame) = planar_scene();
            let (l2, px) = eval_planar_unrolled(
                &pipe,
                &photo,
                &frame,
                pipe.spec().family,
                sigma,
                sigma_t,
                k_steps,
                EVAL_SAMPLES,
            )?;
            Ok(CheckpointReport {
                experiment,
                label,
                k_steps,
                metric: l2,
                corner_px: Some(px),
            })
        }
        Experiment::Mnist => {
            let (_, test_ds) = load_digit_data()?;
            let err = match pipe.spec().variant {
                Variant::Cstn | Variant::Icstn => {
                    eval_digits_unrolled(&pipe, &test_ds, sigma, sigma_t, k_steps, None)?
                }
                _ => eval_digits(&pipe, &test_ds, sigma, sigma_t, None)?,
            };
            Ok(CheckpointReport {
                experiment,
                label,
                k_steps,
                metric: err,
                corner_px: None,
            })
        }
    }
}
