//! Consolidation of per-run metrics files into one comparison table.

use anyhow::{anyhow, bail, Context, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use warpalign::arch::{NetworkSpec, Variant};

use crate::config::{model_order, parse_family, Experiment};

/// Final state of one run, parsed back from its metrics file.
#[derive(Debug, Clone)]
pub struct RunRow {
    pub experiment: Experiment,
    pub label: String,
    pub arch: String,
    pub sigma: f64,
    pub params: usize,
    pub iterations: usize,
    /// Planar: mean residual-parameter L2. Digits: % test error.
    pub final_metric: f64,
    pub final_corner_px: Option<f64>,
    order: (usize, usize),
}

fn parse_preamble(text: &str) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    for line in text.lines() {
        let Some(rest) = line.strip_prefix("# ") else { break };
        if let Some((k, v)) = rest.split_once('=') {
            meta.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    meta
}

fn required<'m>(meta: &'m BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'m str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| anyhow!("{} lacks '# {key}=...'", path.display()))
}

pub fn read_metrics(path: &Path) -> Result<RunRow> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let meta = parse_preamble(&text);
    let experiment = Experiment::parse(required(&meta, "experiment", path)?)?;
    let label = required(&meta, "label", path)?.to_string();
    let arch = required(&meta, "arch", path)?.to_string();
    let variant = Variant::parse(required(&meta, "variant", path)?)?;
    let family = parse_family(required(&meta, "family", path)?)?;
    let sigma: f64 = required(&meta, "sigma", path)?.parse()?;
    let params: usize = required(&meta, "params", path)?.parse()?;

    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| anyhow!("{} has no header row", path.display()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let col = |name: &str| {
        cols.iter()
            .position(|&c| c == name)
            .ok_or_else(|| anyhow!("{} lacks column '{name}'", path.display()))
    };
    let it_col = col("iteration")?;
    let (metric_col, corner_col) = match experiment {
        Experiment::Planar => (col("param_l2")?, Some(col("corner_px")?)),
        Experiment::Mnist => (col("test_error_pct")?, None),
    };
    let last = lines
        .filter(|l| !l.trim().is_empty())
        .last()
        .ok_or_else(|| anyhow!("{} has no data rows", path.display()))?;
    let fields: Vec<&str> = last.split(',').collect();
    if fields.len() != cols.len() {
        bail!("{} last row is ragged", path.display());
    }

    // The stored capacity must agree with the architecture it claims.
    let input = match experiment {
        Experiment::Planar => (1, crate::config::PLANAR_SIDE, crate::config::PLANAR_SIDE),
        Experiment::Mnist => (1, crate::config::DIGIT_SIDE, crate::config::DIGIT_SIDE),
    };
    let spec = NetworkSpec::build(&arch, variant, family, input)?;
    if spec.count_params() != params {
        bail!(
            "{} declares {params} params but '{arch}' has {}",
            path.display(),
            spec.count_params()
        );
    }

    Ok(RunRow {
        experiment,
        label,
        arch,
        sigma,
        params,
        iterations: fields[it_col].parse()?,
        final_metric: fields[metric_col].parse()?,
        final_corner_px: match corner_col {
            Some(c) => Some(fields[c].parse()?),
            None => None,
        },
        order: model_order(variant, spec.warp_ops),
    })
}

pub fn sort_rows(rows: &mut [RunRow]) {
    rows.sort_by(|a, b| {
        a.order
            .cmp(&b.order)
            .then(a.sigma.partial_cmp(&b.sigma).unwrap_or(std::cmp::Ordering::Equal))
    });
}

pub fn render_table(rows: &[RunRow]) -> String {
    let mut out = String::new();
    let metric_head = match rows.first().map(|r| r.experiment) {
        Some(Experiment::Mnist) => "test error %",
        _ => "param L2",
    };
    let _ = writeln!(
        out,
        "{:<10} {:>7} {:>9} {:>8} {:>12} {:>10}  {}",
        "model", "sigma", "params", "iters", metric_head, "corner px", "architecture"
    );
    for r in rows {
        let corner = r
            .final_corner_px
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>9} {:>8} {:>12.4} {:>10}  {}",
            r.label, r.sigma, r.params, r.iterations, r.final_metric, corner, r.arch
        );
    }
    out
}

pub fn render_csv(rows: &[RunRow]) -> String {
    let mut out = String::from("model,experiment,sigma,params,iterations,final_metric,corner_px,arch\n");
    for r in rows {
        let corner = r
            .final_corner_px
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{},\"{}\"",
            r.label, r.experiment.name(), r.sigma, r.params, r.iterations, r.final_metric, corner, r.arch
        );
    }
    out
}

/// Read, validate, and order a set of metrics files.
pub fn consolidate(paths: &[impl AsRef<Path>]) -> Result<Vec<RunRow>> {
    if paths.is_empty() {
        bail!("no metrics files given");
    }
    let mut rows = paths
        .iter()
        .map(|p| read_metrics(p.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    sort_rows(&mut rows);
    Ok(rows)
}
