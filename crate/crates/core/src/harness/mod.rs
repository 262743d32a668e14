//! Config-driven sweeps over the regularization strength, with CSV traces,
//! a per-cell summary and SVG plots.

mod config;
mod plot;
mod trace_csv;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use config::{ExperimentConfig, InitDistribution, InitSpec, LossSpec, ModelSpec};
pub use plot::{render_plot, render_plot_svg, Axes, Series, LOG_FLOOR};
pub use trace_csv::{
    emit_trace, fmt_f64, parse_matrix_csv, parse_matrix_csv_str, parse_table, parse_table_str, parse_trace, parse_trace_str, trace_to_csv, Table,
    TRACE_COLUMNS,
};

use crate::error::{Error, Result};
use crate::optim::{run_training_with_threshold, Model, Trace};
use crate::oracles::{fit_exponential_rate_xy, svt_minimizer};
use crate::spectra::singular_values;

/// Outcome of one λ cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub index: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Full trace, or the part recorded before divergence.
    pub trace: Trace,
    pub diverged_at: Option<usize>,
    pub final_model: Option<Model<f64>>,
    pub fitted_rate: Option<f64>,
    pub expected_rate: f64,
    /// Singular values of the closed-form minimizer, for factorized models
    /// trained on regression onto a diagonal target.
    pub oracle_spectrum: Option<Vec<f64>>,
    pub trace_path: PathBuf,
}

impl CellResult {
    pub fn oracle_max_abs_err(&self) -> Option<f64> {
        let oracle = self.oracle_spectrum.as_ref()?;
        let last = self.trace.last()?;
        Some(
            oracle
                .iter()
                .zip(&last.singular_values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub cells: Vec<CellResult>,
    pub summary_path: PathBuf,
}

impl ExperimentReport {
    pub fn any_diverged(&self) -> bool {
        self.cells.iter().any(|c| c.diverged_at.is_some())
    }
}

/// Least-squares decay rate of `balance_gap_fro` over the records whose step
/// lies in `window` (inclusive). `None` when fewer than three usable points.
pub fn fit_balance_rate(trace: &Trace, window: [usize; 2]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = trace
        .records
        .iter()
        .filter(|r| r.step >= window[0] && r.step <= window[1])
        .map(|r| (r.step as f64, r.balance_gap_fro))
        .collect();
    fit_exponential_rate_xy(&pts).ok()
}

fn run_cell(config: &ExperimentConfig, index: usize) -> Result<CellResult> {
    let lambda = config.lambda_grid[index];
    let loss = config.loss.build()?;
    let mut model = config.initial_model(index)?;
    let opt = config.cell_optimizer(index);
    let outcome = run_training_with_threshold(
        &mut model,
        loss.as_ref(),
        lambda,
        &opt,
        config.steps,
        config.record_every,
        config.threshold,
    );
    let (trace, diverged_at, final_model) = match outcome {
        Ok(t) => (t, None, Some(model)),
        Err(Error::Diverged { step, partial }) => (*partial, Some(step), None),
        Err(e) => return Err(e),
    };
    let oracle_spectrum = match (&config.model, config.loss.diagonal_regression()) {
        (ModelSpec::Factorized { .. }, Some((d, scale))) => {
            Some(singular_values(&svt_minimizer(&d, lambda, scale)?)?)
        }
        _ => None,
    };
    let trace_path = config
        .output_dir
        .join(format!("{}_cell{index:03}.csv", config.name));
    emit_trace(&trace, &trace_path)?;
    Ok(CellResult {
        index,
        lambda,
        seed: config.cell_seed(index),
        fitted_rate: fit_balance_rate(&trace, config.rate_window),
        expected_rate: (1.0 - 2.0 * config.optimizer.step_size * lambda).recip().ln(),
        trace,
        diverged_at,
        final_model,
        oracle_spectrum,
        trace_path,
    })
}

fn opt_field(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// CSV text of the per-cell summary.
pub fn summary_csv(config: &ExperimentConfig, cells: &[CellResult]) -> String {
    let width = cells
        .iter()
        .filter_map(|c| c.trace.records.first().map(|r| r.singular_values.len()))
        .max()
        .unwrap_or(0);
    let with_oracle = cells.iter().any(|c| c.oracle_spectrum.is_some());
    let mut out = String::from(
        "cell,lambda,seed,status,diverged_step,final_step,final_loss,final_l2_loss,final_nuclear_loss,\
         final_reg_gap,final_balance_gap_fro,final_pseudo_rank,fitted_rate,expected_rate,\
         rate_window_start,rate_window_end,init_distribution,init_scale,oracle_max_abs_err",
    );
    for k in 1..=width {
        write!(out, ",s{k}").unwrap();
    }
    if with_oracle {
        for k in 1..=width {
            write!(out, ",oracle_s{k}").unwrap();
        }
    }
    out.push('\n');
    let dist = serde_json::to_value(config.init.distribution)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default();
    for c in cells {
        let last = c.trace.last();
        let status = if c.diverged_at.is_some() { "diverged" } else { "ok" };
        write!(
            out,
            "{},{},{},{status},{},{},",
            c.index,
            fmt_f64(c.lambda),
            c.seed,
            c.diverged_at.map(|s| s.to_string()).unwrap_or_default(),
            last.map(|r| r.step.to_string()).unwrap_or_default(),
        )
        .unwrap();
        let finals = [
            last.map(|r| r.loss),
            last.map(|r| r.l2_loss),
            last.map(|r| r.nuclear_loss),
            last.map(|r| r.reg_gap),
            last.map(|r| r.balance_gap_fro),
            last.map(|r| r.pseudo_rank),
            c.fitted_rate,
            Some(c.expected_rate),
        ];
        let joined: Vec<String> = finals.into_iter().map(opt_field).collect();
        out.push_str(&joined.join(","));
        write!(
            out,
            ",{},{},{dist},{},{}",
            config.rate_window[0],
            config.rate_window[1],
            fmt_f64(config.init.scale),
            opt_field(c.oracle_max_abs_err()),
        )
        .unwrap();
        for k in 0..width {
            out.push(',');
            out.push_str(&opt_field(last.and_then(|r| r.singular_values.get(k).copied())));
        }
        if with_oracle {
            for k in 0..width {
                out.push(',');
                out.push_str(&opt_field(c.oracle_spectrum.as_ref().and_then(|s| s.get(k).copied())));
            }
        }
        out.push('\n');
    }
    out
}

/// Runs every cell of the sweep and writes `<name>_cellNNN.csv` traces,
/// `<name>_summary.csv` and an echo of the config into `output_dir`.
///
/// A diverged cell is reported in the summary and does not stop the others.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_path = dir.join(format!("{}_config.json", config.name));
    std::fs::write(&config_path, config.to_json() + "\n").map_err(|e| Error::io(&config_path, e))?;

    let indices: Vec<usize> = (0..config.lambda_grid.len()).collect();
    let cells: Vec<CellResult> = if config.parallel {
        indices.par_iter().map(|&i| run_cell(config, i)).collect::<Result<_>>()?
    } else {
        indices.iter().map(|&i| run_cell(config, i)).collect::<Result<_>>()?
    };

    let summary_path = dir.join(format!("{}_summary.csv", config.name));
    std::fs::write(&summary_path, summary_csv(config, &cells)).map_err(|e| Error::io(&summary_path, e))?;
    Ok(ExperimentReport { cells, summary_path })
}

/// Plots one trace column of each file against `step`.
pub fn plot_traces(paths: &[impl AsRef<Path>], column: &str, log_y: bool, out: impl AsRef<Path>) -> Result<()> {
    let mut series = Vec::with_capacity(paths.len());
    for p in paths {
        let p = p.as_ref();
        let table = parse_table(p)?;
        let ys = table.column(column).map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))?;
        let xs = table.column("step").map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))?;
        let label = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        series.push(Series {
            label,
            points: xs.into_iter().zip(ys).collect(),
        });
    }
    let axes = Axes {
        title: column.to_owned(),
        x_label: "step".into(),
        y_label: column.to_owned(),
        log_y,
    };
    render_plot(&series, &axes, out)
}
