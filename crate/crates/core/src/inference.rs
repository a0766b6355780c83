//! Autoregressive rolling forecasts and multi-horizon evaluation.

use std::fmt;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{format_exact, MultivariateSeries, PatchTokenGrid};
use crate::error::{Error, Result};
use crate::masking::VariableDependencyGraph;
use crate::metrics::{mean_metrics, metrics, Metrics};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};
use crate::training::{apply_norm, denormalize, NormStats, NORM_EPS};

/// Anything that maps a lookback window to a multi-step forecast.
pub trait Forecaster: Sync {
    /// `lookback` and the result are `N` rows; each result row has
    /// `horizon` points.
    fn forecast(&self, lookback: &[Vec<f64>], horizon: usize) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug)]
pub struct ForecastRequest {
    pub lookback: Vec<Vec<f64>>,
    pub horizon_points: usize,
    pub graph: VariableDependencyGraph,
    pub normalize: bool,
}

/// Output of [`rolling_forecast_traced`].
#[derive(Clone, Debug, PartialEq)]
pub struct RollingForecast {
    /// `N × horizon` values in the original scale.
    pub values: Vec<Vec<f64>>,
    pub model_calls: usize,
}

/// Forecasts `horizon_points` by repeatedly predicting the patch after the
/// last position, appending it and dropping the oldest patch so the context
/// length stays fixed. Normalization statistics come from the initial
/// lookback and stay frozen for the whole episode. Horizons that are not a
/// multiple of `P` are computed to the next multiple and truncated.
pub fn rolling_forecast<F: Scalar>(model: &Model<F>, request: &ForecastRequest) -> Result<Vec<Vec<f64>>> {
    Ok(rolling_forecast_traced(model, request)?.values)
}

pub fn rolling_forecast_traced<F: Scalar>(model: &Model<F>, request: &ForecastRequest) -> Result<RollingForecast> {
    let p = model.config.patch_len;
    let n = request.lookback.len();
    if n == 0 || n != request.graph.n() {
        return Err(Error::dim("rolling_forecast", &[n], &[request.graph.n()]));
    }
    let lb = request.lookback[0].len();
    if request.lookback.iter().any(|r| r.len() != lb) {
        return Err(Error::data("lookback rows have different lengths"));
    }
    if lb == 0 || !lb.is_multiple_of(p) {
        return Err(Error::config(format!("lookback length {lb} is not a positive multiple of the patch length {p}")));
    }
    let stats = if request.normalize {
        NormStats::from_window(&request.lookback, NORM_EPS)?
    } else {
        NormStats::identity(n)
    };
    let mut context = apply_norm(&request.lookback, &stats);
    let steps = request.horizon_points.div_ceil(p);
    let mut out = vec![Vec::with_capacity(steps * p); n];
    let mask = model.prepare_mask(&request.graph, lb / p)?;
    for _ in 0..steps {
        let grid = PatchTokenGrid::new(n, lb / p, p, context.iter().flatten().copied().collect())?;
        let pred = model.forward_prepared(&grid, &mask)?;
        let last = pred.shape()[1] - 1;
        for (m, row) in context.iter_mut().enumerate() {
            let next: Vec<f64> = (0..p).map(|j| pred.at(&[m, last, j]).as_f64()).collect();
            out[m].extend_from_slice(&next);
            row.drain(..p);
            row.extend(next);
        }
    }
    for row in &mut out {
        row.truncate(request.horizon_points);
    }
    Ok(RollingForecast {
        values: denormalize(&out, &stats),
        model_calls: steps,
    })
}

/// A trained model bound to a dependency graph and normalization choice.
pub struct ModelForecaster<'a, F> {
    pub model: &'a Model<F>,
    pub graph: VariableDependencyGraph,
    pub normalize: bool,
}

impl<F: Scalar> Forecaster for ModelForecaster<'_, F> {
    fn forecast(&self, lookback: &[Vec<f64>], horizon: usize) -> Result<Vec<Vec<f64>>> {
        rolling_forecast(
            self.model,
            &ForecastRequest {
                lookback: lookback.to_vec(),
                horizon_points: horizon,
                graph: self.graph.clone(),
                normalize: self.normalize,
            },
        )
    }
}

/// Repeats the last observed patch.
pub struct Persistence {
    pub patch_len: usize,
}

impl Forecaster for Persistence {
    fn forecast(&self, lookback: &[Vec<f64>], horizon: usize) -> Result<Vec<Vec<f64>>> {
        let p = self.patch_len;
        lookback
            .iter()
            .map(|row| {
                if row.len() < p {
                    return Err(Error::data("lookback shorter than one patch"));
                }
                let last = &row[row.len() - p..];
                Ok((0..horizon).map(|k| last[k % p]).collect())
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub lookback_points: usize,
    pub horizons: Vec<usize>,
    /// Distance between consecutive forecast origins.
    pub stride: usize,
    pub dataset: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HorizonResult {
    pub horizon: usize,
    pub metrics: Metrics,
    pub n_windows: usize,
    /// Per supervised variable, averaged over windows.
    pub per_variable: Vec<(String, Metrics)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub rows: Vec<HorizonResult>,
    /// Horizons skipped for lack of test data.
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn row(&self, horizon: usize) -> Option<&HorizonResult> {
        self.rows.iter().find(|r| r.horizon == horizon)
    }

    /// `dataset,horizon,mse,mae,smape,n_windows`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "dataset,horizon,mse,mae,smape,n_windows")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                self.dataset,
                r.horizon,
                format_exact(r.metrics.mse),
                format_exact(r.metrics.mae),
                format_exact(r.metrics.smape),
                r.n_windows
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.dataset.len().max(7);
        writeln!(f, "{:<width$}  {:>7}  {:>10}  {:>10}  {:>10}  {:>9}", "dataset", "horizon", "MSE", "MAE", "SMAPE", "n_windows")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<width$}  {:>7}  {:>10.4}  {:>10.4}  {:>10.4}  {:>9}",
                self.dataset, r.horizon, r.metrics.mse, r.metrics.mae, r.metrics.smape, r.n_windows
            )?;
        }
        for note in &self.notes {
            writeln!(f, "note: {note}")?;
        }
        Ok(())
    }
}

/// Forecast origins inside `test`: every `stride` points from the first
/// position with a full lookback behind it. The lookback may reach back
/// before the test range.
pub fn forecast_origins(test: &Range<usize>, lookback: usize, stride: usize) -> Vec<usize> {
    let first = test.start.max(lookback);
    if stride == 0 || first >= test.end {
        return Vec::new();
    }
    (first..test.end).step_by(stride).collect()
}

/// Per-horizon metrics over every origin in `test` whose horizon fits.
/// Each origin gets one forecast to the longest fitting horizon, which is
/// then cut for the shorter ones.
pub fn evaluate(
    forecaster: &dyn Forecaster,
    series: &MultivariateSeries,
    test: Range<usize>,
    target_flags: &[bool],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if test.end > series.len() || test.start > test.end {
        return Err(Error::data(format!("test range {test:?} outside a series of {} points", series.len())));
    }
    if target_flags.len() != series.n() || !target_flags.iter().any(|&f| f) {
        return Err(Error::config("target flags must cover every variable and select at least one"));
    }
    let mut horizons = settings.horizons.clone();
    horizons.sort_unstable();
    horizons.dedup();
    let origins = forecast_origins(&test, settings.lookback_points, settings.stride);
    let lb = settings.lookback_points;
    let forecasts: Vec<Option<Vec<Vec<f64>>>> = origins
        .par_iter()
        .map(|&o| {
            let reach = horizons.iter().copied().filter(|&h| o + h <= test.end).max();
            match reach {
                Some(h) if h > 0 => {
                    let lookback: Vec<Vec<f64>> = series.values().iter().map(|v| v[o - lb..o].to_vec()).collect();
                    forecaster.forecast(&lookback, h).map(Some)
                }
                _ => Ok(None),
            }
        })
        .collect::<Result<_>>()?;
    let supervised: Vec<usize> = (0..series.n()).filter(|&m| target_flags[m]).collect();
    let mut report = EvalReport {
        dataset: settings.dataset.clone(),
        rows: Vec::new(),
        notes: Vec::new(),
    };
    for &h in &horizons {
        if h == 0 {
            report.notes.push("horizon 0 skipped".into());
            continue;
        }
        let mut per_var: Vec<Vec<Metrics>> = vec![Vec::new(); supervised.len()];
        let mut windows = 0;
        for (&o, fc) in origins.iter().zip(&forecasts) {
            let Some(fc) = fc else { continue };
            if o + h > test.end {
                continue;
            }
            windows += 1;
            for (slot, &m) in supervised.iter().enumerate() {
                per_var[slot].push(metrics(&fc[m][..h], &series.variable(m)[o..o + h])?);
            }
        }
        if windows == 0 {
            report.notes.push(format!(
                "horizon {h} skipped: test range {test:?} with lookback {lb} has no complete window"
            ));
            continue;
        }
        let per_variable: Vec<(String, Metrics)> = supervised
            .iter()
            .zip(&per_var)
            .map(|(&m, ms)| (series.names()[m].clone(), mean_metrics(ms)))
            .collect();
        let all: Vec<Metrics> = per_var.into_iter().flatten().collect();
        report.rows.push(HorizonResult {
            horizon: h,
            metrics: mean_metrics(&all),
            n_windows: windows,
            per_variable,
        });
    }
    Ok(report)
}

/// Writes one `layer{l}_head{h}.csv` per attention map (`[H, NT, NT]` per
/// layer) and returns the paths.
pub fn write_attention_maps<F: Scalar>(maps: &[Tensor<F>], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (l, map) in maps.iter().enumerate() {
        let shape = map.shape();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(Error::dim("attention map", shape, &[0, 0, 0]));
        }
        let size = shape[1];
        for (h, block) in map.data().chunks(size * size).enumerate() {
            let path = dir.join(format!("layer{l}_head{h}.csv"));
            let mut out = String::new();
            for row in block.chunks(size) {
                let cells: Vec<String> = row.iter().map(|x| format_exact(x.as_f64())).collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
            fs::write(&path, out)?;
            paths.push(path);
        }
    }
    Ok(paths)
}
