//! Training loops: L2 warp-parameter regression for the planar experiment,
//! cross-entropy for the digit experiment, both on perturbed samples
//! generated on the fly.

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use warpalign::arch::Variant;
use warpalign::checkpoint::save_pipeline;
use warpalign::data::{load_mnist_idx, IdxDataset, MnistStream, PerturbConfig, PlanarStream, Sample};
use warpalign::layers::softmax_cross_entropy;
use warpalign::optim::sgd_step_group;
use warpalign::pipeline::AlignmentPipeline;
use warpalign::sampler::FrameSpec;
use warpalign::synth::procedural_photo;
use warpalign::tensor::Tensor;
use warpalign::warp::WarpParams;

use crate::config::{Experiment, ExperimentConfig, DIGIT_SIDE, PLANAR_SIDE};
use crate::eval::{eval_digits, eval_planar_unrolled};
use crate::DATA_DIR_ENV;

/// Every planar run aligns crops of this one procedural scene; the
/// ground-truth box sits at its center.
pub const PHOTO_SEED: u64 = 7;
pub const PHOTO_SIDE: usize = 160;

const INIT_SALT: u64 = 0x5745_4947;
const TRAIN_SALT: u64 = 0x5452_4149;
/// Evaluation perturbations are drawn from this fixed seed regardless of
/// model or training seed, so errors are paired across runs.
pub const EVAL_SEED: u64 = 0x4556_414c;
pub const EVAL_EVERY: usize = 1000;
pub const EVAL_SAMPLES: usize = 1000;

pub fn planar_scene() -> (Tensor, FrameSpec) {
    let photo = procedural_photo(PHOTO_SIDE, PHOTO_SIDE, PHOTO_SEED);
    let c = (PHOTO_SIDE - 1) as f64 / 2.0;
    let half = (PLANAR_SIDE - 1) as f64 / 2.0;
    let frame = FrameSpec::window(PHOTO_SIDE, PHOTO_SIDE, c, c, half, half)
        .expect("fixed scene geometry");
    (photo, frame)
}

/// One row per evaluation checkpoint of a run.
#[derive(Debug, Clone)]
pub struct EvalPoint {
    pub iteration: usize,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
    /// Planar: mean L2 norm of the residual warp parameters.
    /// Digits: % classification error on the perturbed test draw.
    pub metric: f64,
    /// Planar only: mean corner error in pixels.
    pub corner_px: Option<f64>,
    pub wall_s: f64,
}

#[derive(Debug)]
pub struct RunSummary {
    pub label: String,
    pub params: usize,
    pub points: Vec<EvalPoint>,
    pub final_metric: f64,
    pub final_corner_px: Option<f64>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn write_preamble(f: &mut File, cfg: &ExperimentConfig, label: &str, params: usize) -> Result<()> {
    writeln!(f, "# experiment={}", cfg.experiment.name())?;
    writeln!(f, "# label={label}")?;
    writeln!(f, "# arch={}", cfg.arch)?;
    writeln!(f, "# variant={}", cfg.variant.name())?;
    writeln!(f, "# family={}", cfg.family.name())?;
    writeln!(f, "# sigma={}", cfg.sigma)?;
    writeln!(f, "# sigma_t={}", cfg.sigma_t)?;
    writeln!(f, "# iters={}", cfg.iters)?;
    writeln!(f, "# batch={}", cfg.batch)?;
    writeln!(f, "# lr_class={}", cfg.lr_class)?;
    writeln!(f, "# lr_geo={}", cfg.lr_geo)?;
    writeln!(f, "# seed={}", cfg.seed)?;
    writeln!(f, "# params={params}")?;
    Ok(())
}

fn checkpoint_extras(cfg: &ExperimentConfig, label: &str, final_metric: f64) -> Vec<(String, String)> {
    vec![
        ("experiment".into(), cfg.experiment.name().to_string()),
        ("label".into(), label.to_string()),
        ("sigma".into(), format!("{}", cfg.sigma)),
        ("sigma_t".into(), format!("{}", cfg.sigma_t)),
        ("iters".into(), format!("{}", cfg.iters)),
        ("batch".into(), format!("{}", cfg.batch)),
        ("lr_class".into(), format!("{}", cfg.lr_class)),
        ("lr_geo".into(), format!("{}", cfg.lr_geo)),
        ("seed".into(), format!("{}", cfg.seed)),
        ("final_metric".into(), format!("{final_metric:.6e}")),
    ]
}

/// Stack `[1, H, W]` sample images into one `[N, 1, H, W]` batch.
pub fn assemble_batch(samples: &[Sample]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| anyhow!("empty batch"))?
        .image
        .shape()
        .to_vec();
    let n = samples.len();
    let per: usize = first.iter().product();
    let mut data = Vec::with_capacity(n * per);
    for s in samples {
        if s.image.shape() != first.as_slice() {
            bail!("ragged batch: {:?} vs {:?}", s.image.shape(), first);
        }
        data.extend_from_slice(s.image.data());
    }
    let shape = [n, first[0], first[1], first[2]];
    Ok(Tensor::from_vec(&shape, data)?)
}

fn l2_loss_and_grads(final_p: &[WarpParams]) -> (f64, Vec<Vec<f64>>) {
    let n = final_p.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(final_p.len());
    for p in final_p {
        let v = p.as_slice();
        loss += 0.5 * v.iter().map(|x| x * x).sum::<f64>();
        grads.push(v.iter().map(|x| x / n).collect());
    }
    (loss / n, grads)
}

fn planar_step(
    pipe: &mut AlignmentPipeline,
    photo: &Tensor,
    frame: &FrameSpec,
    batch: &[Sample],
    lr_geo: f64,
) -> Result<f64> {
    let sources: Vec<&Tensor> = vec![photo; batch.len()];
    let initial: Vec<WarpParams> = batch.iter().map(|s| s.perturbation.clone()).collect();
    let (final_p, cache) = pipe.cstn_align(&sources, frame, &initial)?;
    let (loss, grads) = l2_loss_and_grads(&final_p);
    pipe.cstn_backward(&cache, &sources, None, Some(&grads))?;
    for stack in pipe.predictors_mut() {
        sgd_step_group(stack, lr_geo);
    }
    Ok(loss)
}

pub fn run_planar(cfg: &ExperimentConfig) -> Result<RunSummary> {
    if cfg.experiment != Experiment::Planar {
        bail!("run_planar got a {} config", cfg.experiment.name());
    }
    let spec = cfg.network_spec()?;
    let label = crate::config::model_label(cfg.variant, spec.warp_ops);
    let params = spec.count_params();
    let (photo, frame) = planar_scene();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_SALT);
    let mut pipe = AlignmentPipeline::new(spec, &mut init_rng);
    let perturb = PerturbConfig::new(cfg.family, cfg.sigma, cfg.sigma_t)?;
    let mut stream = PlanarStream::new(
        photo.clone(),
        frame.clone(),
        (PLANAR_SIDE, PLANAR_SIDE),
        perturb,
        cfg.seed ^ TRAIN_SALT,
    )?;

    fs::create_dir_all(&cfg.out)
        .with_context(|| format!("creating {}", cfg.out.display()))?;
    let metrics_path = cfg.out.join("metrics.csv");
    let mut csv = File::create(&metrics_path)?;
    write_preamble(&mut csv, cfg, &label, params)?;
    writeln!(csv, "iteration,train_loss,param_l2,corner_px,wall_s")?;

    println!("{label} ({params} params) on planar alignment, sigma {}", cfg.sigma);
    let started = Instant::now();
    let mut points = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;
    for it in 1..=cfg.iters {
        let batch = stream.next_batch(cfg.batch)?;
        loss_acc += planar_step(&mut pipe, &photo, &frame, &batch, cfg.lr_geo)?;
        loss_n += 1;
        if it % EVAL_EVERY == 0 || it == cfg.iters {
            let k = pipe.spec().warp_ops;
            let (l2, px) =
                eval_planar_unrolled(&pipe, &photo, &frame, cfg.family, cfg.sigma, cfg.sigma_t, k, EVAL_SAMPLES)?;
            let point = EvalPoint {
                iteration: it,
                train_loss: loss_acc / loss_n as f64,
                metric: l2,
                corner_px: Some(px),
                wall_s: started.elapsed().as_secs_f64(),
            };
            writeln!(
                csv,
                "{},{:.6e},{:.6e},{:.6e},{:.1}",
                point.iteration, point.train_loss, l2, px, point.wall_s
            )?;
            println!(
                "  iter {:>6}/{} loss {:.4e} param_l2 {:.4e} corner {:.3} px",
                it, cfg.iters, point.train_loss, l2, px
            );
            points.push(point);
            loss_acc = 0.0;
            loss_n = 0;
        }
    }

    let last = points.last().expect("at least one evaluation");
    let (final_metric, final_corner_px) = (last.metric, last.corner_px);
    let checkpoint = cfg.out.join("model.ckpt");
    let extras = checkpoint_extras(cfg, &label, final_metric);
    let extra_refs: Vec<(&str, &str)> = extras.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    save_pipeline(&checkpoint, &pipe, &extra_refs)?;

    Ok(RunSummary {
        label,
        params,
        points,
        final_metric,
        final_corner_px,
        checkpoint,
        metrics: metrics_path,
    })
}

/// Load the IDX train/test pairs from the directory named by
/// `WARPALIGN_DATA_DIR`.
pub fn load_digit_data() -> Result<(IdxDataset, IdxDataset)> {
    let root = std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| anyhow!("set {DATA_DIR_ENV} to the IDX dataset directory"))?;
    let train = load_mnist_idx(
        &root.join("train-images-idx3-ubyte"),
        &root.join("train-labels-idx1-ubyte"),
    )
    .with_context(|| format!("training set under {}", root.display()))?;
    let test = load_mnist_idx(
        &root.join("t10k-images-idx3-ubyte"),
        &root.join("t10k-labels-idx1-ubyte"),
    )
    .with_context(|| format!("test set under {}", root.display()))?;
    Ok((train, test))
}

fn digit_step(
    pipe: &mut AlignmentPipeline,
    frame: &FrameSpec,
    batch: &[Sample],
    lr_class: f64,
    lr_geo: f64,
) -> Result<f64> {
    let labels: Vec<usize> = batch
        .iter()
        .map(|s| s.label.ok_or_else(|| anyhow!("unlabeled sample")))
        .collect::<Result<_>>()?;
    let loss = match pipe.spec().variant {
        Variant::CnnOnly => {
            let images = assemble_batch(batch)?;
            let (logits, cache) = pipe.cnn_forward(&images)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            pipe.cnn_backward(&cache, &grad)?;
            loss
        }
        Variant::Stn => {
            let images = assemble_batch(batch)?;
            let (out, cache) = pipe.stn_forward(&images)?;
            let logits = out.logits.ok_or_else(|| anyhow!("classifier missing"))?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            pipe.stn_backward(&cache, Some(&grad), None)?;
            loss
        }
        Variant::Cstn | Variant::Icstn => {
            let sources: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
            let ids = vec![WarpParams::identity(pipe.spec().family); batch.len()];
            let (out, cache) = pipe.cstn_forward(&sources, frame, &ids)?;
            let logits = out.logits.ok_or_else(|| anyhow!("classifier missing"))?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            pipe.cstn_backward(&cache, &sources, Some(&grad), None)?;
            loss
        }
    };
    for stack in pipe.predictors_mut() {
        sgd_step_group(stack, lr_geo);
    }
    sgd_step_group(pipe.classifier_mut(), lr_class);
    Ok(loss)
}

pub fn run_mnist(cfg: &ExperimentConfig) -> Result<RunSummary> {
    if cfg.experiment != Experiment::Mnist {
        bail!("run_mnist got a {} config", cfg.experiment.name());
    }
    let spec = cfg.network_spec()?;
    let label = crate::config::model_label(cfg.variant, spec.warp_ops);
    let params = spec.count_params();
    let (train_ds, test_ds) = load_digit_data()?;
    if train_ds.rows != DIGIT_SIDE || train_ds.cols != DIGIT_SIDE {
        bail!(
            "expected {DIGIT_SIDE}x{DIGIT_SIDE} images, dataset has {}x{}",
            train_ds.rows,
            train_ds.cols
        );
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_SALT);
    let mut pipe = AlignmentPipeline::new(spec, &mut init_rng);
    let perturb = PerturbConfig::new(cfg.family, cfg.sigma, cfg.sigma_t)?;
    let mut stream = MnistStream::new(&train_ds, perturb, cfg.seed ^ TRAIN_SALT)?;
    let frame = stream.frame().clone();

    fs::create_dir_all(&cfg.out)
        .with_context(|| format!("creating {}", cfg.out.display()))?;
    let metrics_path = cfg.out.join("metrics.csv");
    let mut csv = File::create(&metrics_path)?;
    write_preamble(&mut csv, cfg, &label, params)?;
    writeln!(csv, "iteration,train_loss,test_error_pct,wall_s")?;

    println!("{label} ({params} params) on perturbed digits, sigma {}", cfg.sigma);
    let started = Instant::now();
    let mut points = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;
    for it in 1..=cfg.iters {
        let batch = stream.next_batch(cfg.batch)?;
        loss_acc += digit_step(&mut pipe, &frame, &batch, cfg.lr_class, cfg.lr_geo)?;
        loss_n += 1;
        if it % EVAL_EVERY == 0 || it == cfg.iters {
            // The final checkpoint is scored on the whole test set, the
            // periodic ones on a fixed subset.
            let limit = if it == cfg.iters { None } else { Some(EVAL_SAMPLES) };
            let err = eval_digits(&pipe, &test_ds, cfg.sigma, cfg.sigma_t, limit)?;
            let point = EvalPoint {
                iteration: it,
                train_loss: loss_acc / loss_n as f64,
                metric: err,
                corner_px: None,
                wall_s: started.elapsed().as_secs_f64(),
            };
            writeln!(
                csv,
                "{},{:.6e},{:.4},{:.1}",
                point.iteration, point.train_loss, err, point.wall_s
            )?;
            println!(
                "  iter {:>6}/{} loss {:.4e} test error {:.2}%",
                it, cfg.iters, point.train_loss, err
            );
            points.push(point);
            loss_acc = 0.0;
            loss_n = 0;
        }
    }

    let last = points.last().expect("at least one evaluation");
    let final_metric = last.metric;
    let checkpoint = cfg.out.join("model.ckpt");
    let extras = checkpoint_extras(cfg, &label, final_metric);
    let extra_refs: Vec<(&str, &str)> = extras.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    save_pipeline(&checkpoint, &pipe, &extra_refs)?;

    Ok(RunSummary {
        label,
        params,
        points,
        final_metric,
        final_corner_px: None,
        checkpoint,
        metrics: metrics_path,
    })
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    match cfg.experiment {
        Experiment::Planar => run_planar(cfg),
        Experiment::Mnist => run_mnist(cfg),
    }
}
