//! One-parameter sweeps over the full stage chain.
//!
//! Each value runs the chain up to `evaluate` in the shared output root, so
//! stages upstream of the swept parameter are reused. A failing value is
//! recorded and the sweep moves on.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{hash_value, PipelineConfig};
use crate::plot::{line_chart, Series};
use crate::results::{read_results, Summary, RESULTS_CSV};
use crate::{CliError, Result, Stage, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    Beta,
    Lambda,
    Layer,
    ProxyTask,
}

impl SweepParam {
    pub const ALL: [SweepParam; 4] = [Self::Beta, Self::Lambda, Self::Layer, Self::ProxyTask];

    pub fn name(self) -> &'static str {
        match self {
            Self::Beta => "beta",
            Self::Lambda => "lambda",
            Self::Layer => "layer",
            Self::ProxyTask => "proxy-task",
        }
    }

    /// Configuration key the parameter overrides.
    pub fn key(self) -> &'static str {
        match self {
            Self::Beta => "pseudo.beta",
            Self::Lambda => "segment.loss.lambda",
            Self::Layer => "saliency.layer",
            Self::ProxyTask => "ssl.task.kind",
        }
    }

    fn numeric(self) -> bool {
        self != Self::ProxyTask
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                CliError::Config(format!(
                    "unknown sweep parameter `{s}` (beta, lambda, layer, proxy-task)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: String,
    pub config_hash: String,
    pub error: Option<String>,
    pub iou: Option<f64>,
    pub f1: Option<f64>,
    pub dice_obj: Option<f64>,
    pub aji: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub det_f1: Option<f64>,
    pub mp: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub parameter: SweepParam,
    pub rows: Vec<SweepRow>,
    pub csv: PathBuf,
    pub chart: PathBuf,
}

impl SweepReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }
}

const CHART_METRICS: [&str; 4] = ["iou", "dice_obj", "aji", "det_f1"];

/// Runs the chain for every value, writing `sweep.csv` after each one and
/// the chart at the end, into `<root>/sweeps/<param>-<hash>/`.
pub fn run_sweep(
    root: &Path,
    base: &PipelineConfig,
    param: SweepParam,
    values: &[String],
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(CliError::Config("a sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| base.with_override(&format!("{}={}", param.key(), v.trim())))
        .collect::<Result<Vec<_>>>()?;
    let id = hash_value(&(param, values, base));
    let out = root
        .join("sweeps")
        .join(format!("{}-{}", param.name(), &id[..12]));
    std::fs::create_dir_all(&out)?;
    let csv = out.join("sweep.csv");
    let chart = out.join("sweep.svg");

    let mut rows = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(configs) {
        log::info!("sweep {param}={value}");
        let ws = Workspace::new(root, cfg)?;
        let outcome = ws
            .run_to(Stage::Evaluate)
            .and_then(|_| read_results(&ws.dir(Stage::Evaluate).join(RESULTS_CSV)))
            .and_then(|r| {
                Summary::from_rows(&r)
                    .ok_or_else(|| CliError::Runtime("results lack summary rows".into()))
            });
        let mut row = SweepRow {
            parameter: param.name().into(),
            value: value.trim().into(),
            config_hash: ws.config_hash().into(),
            error: None,
            iou: None,
            f1: None,
            dice_obj: None,
            aji: None,
            precision: None,
            recall: None,
            det_f1: None,
            mp: None,
        };
        match outcome {
            Ok(s) => {
                row.iou = s.iou;
                row.f1 = s.f1;
                row.dice_obj = s.dice_obj;
                row.aji = s.aji;
                row.precision = s.precision;
                row.recall = s.recall;
                row.det_f1 = s.det_f1;
                row.mp = s.mp;
            }
            Err(e) => {
                log::error!("sweep {param}={value} failed: {e}");
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
        write_rows(&csv, &rows)?;
    }
    plot_rows(&chart, param, &rows)?;
    Ok(SweepReport {
        parameter: param,
        rows,
        csv,
        chart,
    })
}

fn write_rows(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

fn metric(row: &SweepRow, name: &str) -> Option<f64> {
    match name {
        "iou" => row.iou,
        "dice_obj" => row.dice_obj,
        "aji" => row.aji,
        "det_f1" => row.det_f1,
        _ => None,
    }
}

/// Numeric parameters are plotted at their value, proxy tasks at their
/// position in the sweep.
fn plot_rows(path: &Path, param: SweepParam, rows: &[SweepRow]) -> Result<()> {
    let xs: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if param.numeric() {
                r.value.parse().unwrap_or(f64::NAN)
            } else {
                i as f64
            }
        })
        .collect();
    let series: Vec<Series> = CHART_METRICS
        .iter()
        .map(|m| Series {
            name: (*m).into(),
            points: rows
                .iter()
                .zip(&xs)
                .filter_map(|(r, &x)| metric(r, m).map(|y| (x, y)))
                .collect(),
        })
        .collect();
    let x_label = if param.numeric() {
        param.name().to_string()
    } else {
        let names: Vec<&str> = rows.iter().map(|r| r.value.as_str()).collect();
        format!("{} ({})", param.name(), names.join(", "))
    };
    line_chart(
        path,
        &format!("{} sweep", param.name()),
        &x_label,
        "score",
        &series,
    )
}
