//! Validated experiment configuration shared by every subcommand.

use anyhow::{bail, Context, Result};
use std::path::PathBuf;

use warpalign::arch::{NetworkSpec, Variant};
use warpalign::warp::WarpFamily;

/// Planar crops are square samples of this side length.
pub const PLANAR_SIDE: usize = 50;
/// Canvas of the digit experiment; the loaded dataset must agree.
pub const DIGIT_SIDE: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Planar,
    Mnist,
}

impl Experiment {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "planar" => Ok(Experiment::Planar),
            "mnist" => Ok(Experiment::Mnist),
            other => bail!("unknown experiment '{other}' (planar|mnist)"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Planar => "planar",
            Experiment::Mnist => "mnist",
        }
    }
}

pub fn parse_family(s: &str) -> Result<WarpFamily> {
    match s.to_ascii_lowercase().as_str() {
        "affine" => Ok(WarpFamily::Affine),
        "homography" => Ok(WarpFamily::Homography),
        other => bail!("unknown warp family '{other}' (affine|homography)"),
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub arch: String,
    pub variant: Variant,
    pub family: WarpFamily,
    /// Corner noise, pixels.
    pub sigma: f64,
    /// Translation noise, pixels; the experiments use the same value as
    /// `sigma` unless overridden.
    pub sigma_t: f64,
    pub iters: usize,
    pub batch: usize,
    pub lr_class: f64,
    pub lr_geo: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub full: bool,
}

impl ExperimentConfig {
    /// Input view the networks see for this experiment.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        match self.experiment {
            Experiment::Planar => (1, PLANAR_SIDE, PLANAR_SIDE),
            Experiment::Mnist => (1, DIGIT_SIDE, DIGIT_SIDE),
        }
    }

    /// Build and cross-check the network against this configuration.
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let spec = NetworkSpec::build(&self.arch, self.variant, self.family, self.input_shape())
            .with_context(|| format!("architecture '{}'", self.arch))?;
        match self.experiment {
            Experiment::Planar => {
                if !matches!(self.variant, Variant::Cstn | Variant::Icstn) {
                    bail!("the planar experiment trains compositional variants (cstn|icstn)");
                }
                if spec.n_classes().is_some() {
                    bail!("the planar experiment is alignment-only; drop the classifier tail");
                }
            }
            Experiment::Mnist => {
                if spec.n_classes() != Some(10) {
                    bail!("the digit experiment needs a classifier ending in FC(10)");
                }
            }
        }
        if self.iters == 0 || self.batch == 0 {
            bail!("iters and batch must be positive");
        }
        if self.sigma < 0.0 || self.sigma_t < 0.0 {
            bail!("perturbation sigmas must be non-negative");
        }
        Ok(spec)
    }

    /// Table-style row label, e.g. `CNN`, `c-STN-1`, `IC-STN-4`.
    pub fn model_label(&self) -> String {
        model_label(self.variant, self.network_warp_ops())
    }

    fn network_warp_ops(&self) -> usize {
        self.network_spec().map(|s| s.warp_ops).unwrap_or(0)
    }
}

pub fn model_label(variant: Variant, warp_ops: usize) -> String {
    match variant {
        Variant::CnnOnly => "CNN".into(),
        Variant::Stn => {
            if warp_ops == 1 {
                "STN".into()
            } else {
                format!("STN-{warp_ops}")
            }
        }
        Variant::Cstn => format!("c-STN-{warp_ops}"),
        Variant::Icstn => format!("IC-STN-{warp_ops}"),
    }
}

/// Sort key giving the declared table order: CNN, STN, c-STN, IC-STN, then
/// by unfold depth.
pub fn model_order(variant: Variant, warp_ops: usize) -> (usize, usize) {
    let rank = match variant {
        Variant::CnnOnly => 0,
        Variant::Stn => 1,
        Variant::Cstn => 2,
        Variant::Icstn => 3,
    };
    (rank, warp_ops)
}
