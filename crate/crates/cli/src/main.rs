//! `warpalign`: train, evaluate, and report on image-alignment networks.

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use warpalign::arch::Variant;
use warpalign_cli::config::{parse_family, Experiment, ExperimentConfig};
use warpalign_cli::{eval, figures, glyphs, report, train};

#[derive(Parser)]
#[command(name = "warpalign", version, about = "Image alignment experiment driver")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model and write metrics.csv + model.ckpt into --out.
    Train(TrainArgs),
    /// Score a checkpoint on its experiment's fixed evaluation draw.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Warp operations to unroll at test time (shared predictors may
        /// exceed their trained depth).
        #[arg(long, default_value_t = 1)]
        warp_ops: usize,
    },
    /// Merge metrics files into one comparison table.
    Report {
        /// metrics.csv files from train runs.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Also write the merged table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Export alignment strips and appearance panels for a checkpoint.
    Figures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a procedural glyph dataset in IDX format (a stand-in digit
    /// set for machines without the real one).
    Glyphs {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// planar | mnist
    #[arg(long)]
    experiment: String,
    /// Architecture string, e.g. "[conv(9x9,4)-FC(8)]x2 -> conv(9x9,3)-FC(10)".
    #[arg(long)]
    arch: String,
    /// cnn | stn | cstn | icstn
    #[arg(long)]
    variant: String,
    /// affine | homography
    #[arg(long)]
    family: String,
    /// Corner noise in pixels.
    #[arg(long)]
    sigma: f64,
    /// Translation noise in pixels; defaults to --sigma.
    #[arg(long)]
    sigma_t: Option<f64>,
    #[arg(long, default_value_t = 20_000)]
    iters: usize,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr_class: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr_geo: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Paper-scale run: 200K iterations.
    #[arg(long)]
    full: bool,
}

impl TrainArgs {
    fn into_config(self) -> Result<ExperimentConfig> {
        let iters = if self.full { 200_000 } else { self.iters };
        Ok(ExperimentConfig {
            experiment: Experiment::parse(&self.experiment)?,
            arch: self.arch,
            variant: Variant::parse(&self.variant)?,
            family: parse_family(&self.family)?,
            sigma: self.sigma,
            sigma_t: self.sigma_t.unwrap_or(self.sigma),
            iters,
            batch: self.batch,
            lr_class: self.lr_class,
            lr_geo: self.lr_geo,
            seed: self.seed,
            out: self.out,
            full: self.full,
        })
    }
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train(args) => {
            let cfg = args.into_config()?;
            let summary = train::run(&cfg)?;
            match summary.final_corner_px {
                Some(px) => println!(
                    "{}: final param_l2 {:.4e}, corner {:.3} px ({} params)",
                    summary.label, summary.final_metric, px, summary.params
                ),
                None => println!(
                    "{}: final test error {:.2}% ({} params)",
                    summary.label, summary.final_metric, summary.params
                ),
            }
            println!("wrote {}", summary.metrics.display());
            println!("wrote {}", summary.checkpoint.display());
        }
        Cmd::Eval { checkpoint, warp_ops } => {
            let r = eval::eval_checkpoint(&checkpoint, warp_ops)?;
            match r.corner_px {
                Some(px) => println!(
                    "{} K={}: param_l2 {:.4e}, corner {:.3} px",
                    r.label, r.k_steps, r.metric, px
                ),
                None => println!("{} K={}: test error {:.2}%", r.label, r.k_steps, r.metric),
            }
        }
        Cmd::Report { files, csv } => {
            let rows = report::consolidate(&files)?;
            print!("{}", report::render_table(&rows));
            if let Some(path) = csv {
                std::fs::write(&path, report::render_csv(&rows))?;
                println!("wrote {}", path.display());
            }
        }
        Cmd::Figures { checkpoint, out } => {
            figures::export_figures(&checkpoint, &out)?;
            println!("wrote figures to {}", out.display());
        }
        Cmd::Glyphs { out, train, test, seed } => {
            glyphs::write_glyph_dataset(&out, train, test, seed)?;
            println!("wrote {train}+{test} glyphs to {}", out.display());
        }
    }
    Ok(())
}
