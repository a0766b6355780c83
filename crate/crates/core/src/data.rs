//! Multivariate series, CSV I/O, patch tokenization and synthetic datasets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `N` aligned series of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateSeries {
    names: Vec<String>,
    values: Vec<Vec<f64>>,
    timestamps: Option<Vec<String>>,
}

impl MultivariateSeries {
    /// Rejects ragged or non-finite input.
    pub fn new(names: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != values.len() {
            return Err(Error::data(format!("{} names for {} variables", names.len(), values.len())));
        }
        if values.is_empty() {
            return Err(Error::data("series has no variables"));
        }
        let len = values[0].len();
        for (m, v) in values.iter().enumerate() {
            if v.len() != len {
                return Err(Error::data(format!("variable {m} has {} points, expected {len}", v.len())));
            }
            if let Some(k) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::data(format!("variable {m} has a non-finite value at index {k}")));
            }
        }
        Ok(MultivariateSeries {
            names,
            values,
            timestamps: None,
        })
    }

    pub fn with_timestamps(mut self, timestamps: Vec<String>) -> Result<Self> {
        if timestamps.len() != self.len() {
            return Err(Error::data("timestamp count differs from series length"));
        }
        self.timestamps = Some(timestamps);
        Ok(self)
    }

    /// Default names `x0, x1, …`.
    pub fn unnamed(values: Vec<Vec<f64>>) -> Result<Self> {
        let names = (0..values.len()).map(|m| format!("x{m}")).collect();
        Self::new(names, values)
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn variable(&self, m: usize) -> &[f64] {
        &self.values[m]
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    /// Time slice `[start, end)` of every variable.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(Error::data(format!("slice {start}..{end} outside series of length {}", self.len())));
        }
        Ok(MultivariateSeries {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v[start..end].to_vec()).collect(),
            timestamps: self.timestamps.as_ref().map(|t| t[start..end].to_vec()),
        })
    }

    /// Keeps the listed variables in the listed order.
    pub fn select(&self, vars: &[usize]) -> Result<Self> {
        if let Some(&bad) = vars.iter().find(|&&m| m >= self.n()) {
            return Err(Error::data(format!("variable index {bad} out of range")));
        }
        Ok(MultivariateSeries {
            names: vars.iter().map(|&m| self.names[m].clone()).collect(),
            values: vars.iter().map(|&m| self.values[m].clone()).collect(),
            timestamps: self.timestamps.clone(),
        })
    }
}

fn is_time_column(name: &str) -> bool {
    matches!(name.trim().to_ascii_lowercase().as_str(), "date" | "timestamp")
}

/// Loads a headered CSV. A leading `date`/`timestamp` column is kept as
/// timestamps; every other column becomes a variable, in file order.
pub fn load_csv(path: impl AsRef<Path>) -> Result<MultivariateSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_csv(file)
}

/// [`load_csv`] over any reader. Rows are reported 1-based with the header
/// as row 1; columns are 1-based.
pub fn read_csv(reader: impl std::io::Read) -> Result<MultivariateSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| csv_error(&e, 1))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(Error::Parse {
            row: 1,
            column: 1,
            message: "empty file or missing header".into(),
        });
    }
    let has_time = is_time_column(&headers[0]);
    let first = usize::from(has_time);
    let names: Vec<String> = headers[first..].to_vec();
    if names.is_empty() {
        return Err(Error::Parse {
            row: 1,
            column: 1,
            message: "no numeric columns".into(),
        });
    }
    let mut values = vec![Vec::new(); names.len()];
    let mut stamps = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let row = r + 2;
        let record = record.map_err(|e| csv_error(&e, row))?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: record.len().min(headers.len()) + 1,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        if has_time {
            stamps.push(record[0].to_string());
        }
        for (k, cell) in record.iter().enumerate().skip(first) {
            let x: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: k + 1,
                message: format!("non-numeric cell {cell:?}"),
            })?;
            if !x.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: k + 1,
                    message: format!("non-finite value {cell:?}"),
                });
            }
            values[k - first].push(x);
        }
    }
    if values[0].is_empty() {
        return Err(Error::Parse {
            row: 2,
            column: 1,
            message: "no data rows".into(),
        });
    }
    let series = MultivariateSeries::new(names, values)?;
    if has_time {
        series.with_timestamps(stamps)
    } else {
        Ok(series)
    }
}

fn csv_error(e: &csv::Error, fallback_row: usize) -> Error {
    match e.kind() {
        csv::ErrorKind::UnequalLengths { pos, expected_len, len } => Error::Parse {
            row: pos.as_ref().map_or(fallback_row, |p| p.line() as usize),
            column: (*len).min(*expected_len) as usize + 1,
            message: format!("expected {expected_len} fields, found {len}"),
        },
        _ => Error::Parse {
            row: e.position().map_or(fallback_row, |p| p.line() as usize),
            column: 1,
            message: e.to_string(),
        },
    }
}

/// Writes values with 17 significant digits, enough to read back bit-exact.
pub fn write_csv(series: &MultivariateSeries, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv_to(series, file)
}

pub fn write_csv_to(series: &MultivariateSeries, writer: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = Vec::new();
    if series.timestamps.is_some() {
        header.push("date");
    }
    header.extend(series.names.iter().map(String::as_str));
    w.write_record(&header).map_err(std::io::Error::from)?;
    for t in 0..series.len() {
        let mut row = Vec::with_capacity(header.len());
        if let Some(ts) = &series.timestamps {
            row.push(ts[t].clone());
        }
        row.extend(series.values.iter().map(|v| format_exact(v[t])));
        w.write_record(&row).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

/// 17 significant digits in scientific notation.
pub fn format_exact(x: f64) -> String {
    format!("{x:.16e}")
}

/// `N × T` patch tokens of `P` points each, stored variable-major then time.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTokenGrid {
    n: usize,
    t: usize,
    p: usize,
    values: Vec<f64>,
    names: Vec<String>,
}

impl PatchTokenGrid {
    pub fn new(n: usize, t: usize, p: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || t == 0 || p == 0 {
            return Err(Error::config("patch grid dimensions must be positive"));
        }
        if values.len() != n * t * p {
            return Err(Error::dim("PatchTokenGrid", &[n, t, p], &[values.len()]));
        }
        Ok(PatchTokenGrid {
            n,
            t,
            p,
            values,
            names: (0..n).map(|m| format!("x{m}")).collect(),
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n {
            return Err(Error::data("name count differs from variable count"));
        }
        self.names = names;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Patch `i` (0-based) of variable `m` (0-based).
    pub fn token(&self, m: usize, i: usize) -> &[f64] {
        let start = (m * self.t + i) * self.p;
        &self.values[start..start + self.p]
    }

    pub fn token_mut(&mut self, m: usize, i: usize) -> &mut [f64] {
        let start = (m * self.t + i) * self.p;
        &mut self.values[start..start + self.p]
    }

    /// `[N·T, P]` rows in temporal-first order: row `m·T + i` is token `(m, i)`.
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::from_f64(&[self.n * self.t, self.p], &self.values).expect("grid shape")
    }

    /// Concatenated patches per variable.
    pub fn unpatchify(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.t * self.p).map(<[f64]>::to_vec).collect()
    }

    /// Tokens `[start, end)` of every variable.
    pub fn tokens(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.t {
            return Err(Error::data(format!("token range {start}..{end} outside 0..{}", self.t)));
        }
        let values = (0..self.n)
            .flat_map(|m| (start..end).flat_map(move |i| self.token(m, i).iter().copied()))
            .collect();
        Ok(PatchTokenGrid {
            n: self.n,
            t: end - start,
            p: self.p,
            values,
            names: self.names.clone(),
        })
    }

    /// Variables in the listed order.
    pub fn select(&self, vars: &[usize]) -> Self {
        let values = vars
            .iter()
            .flat_map(|&m| self.values[m * self.t * self.p..(m + 1) * self.t * self.p].iter().copied())
            .collect();
        PatchTokenGrid {
            n: vars.len(),
            t: self.t,
            p: self.p,
            values,
            names: vars.iter().map(|&m| self.names[m].clone()).collect(),
        }
    }
}

/// Tokenizes the most recent `lookback_points` of `series` into patches of
/// `p` points. Older points beyond the lookback are dropped.
pub fn patchify(series: &MultivariateSeries, p: usize, lookback_points: usize) -> Result<PatchTokenGrid> {
    if p == 0 || lookback_points == 0 || !lookback_points.is_multiple_of(p) {
        return Err(Error::config(format!(
            "lookback {lookback_points} must be a positive multiple of the patch length {p}"
        )));
    }
    if lookback_points > series.len() {
        return Err(Error::data(format!(
            "lookback {lookback_points} exceeds the {} available points",
            series.len()
        )));
    }
    let start = series.len() - lookback_points;
    let values = series.values().iter().flat_map(|v| v[start..].iter().copied()).collect();
    PatchTokenGrid::new(series.n(), lookback_points / p, p, values)?.with_names(series.names().to_vec())
}

/// Tokenizes as many whole patches as fit, dropping the oldest remainder.
pub fn patchify_all(series: &MultivariateSeries, p: usize) -> Result<PatchTokenGrid> {
    if p == 0 {
        return Err(Error::config("patch length must be positive"));
    }
    patchify(series, p, series.len() / p * p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    LaggedCopy,
    SineMix,
    Trend,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lagged_copy" => Ok(SyntheticKind::LaggedCopy),
            "sine_mix" => Ok(SyntheticKind::SineMix),
            "trend" => Ok(SyntheticKind::Trend),
            other => Err(Error::config(format!(
                "unknown synthetic kind {other:?} (expected lagged_copy, sine_mix or trend)"
            ))),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::LaggedCopy => "lagged_copy",
            SyntheticKind::SineMix => "sine_mix",
            SyntheticKind::Trend => "trend",
        })
    }
}

/// Knobs of [`make_synthetic`]. Fields irrelevant to a kind are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    /// Delay of the copied series (`lagged_copy`), normally one patch.
    pub lag: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// AR(1) coefficient of the driving series (`lagged_copy`).
    pub ar_coef: f64,
    /// Sinusoid periods (`sine_mix`).
    pub periods: Vec<f64>,
    /// Sinusoid amplitudes, one per period (`sine_mix`).
    pub amplitudes: Vec<f64>,
    /// Per-step slope of variable 0; variable `m` uses `(m + 1) · slope` (`trend`).
    pub slope: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            lag: 4,
            noise: 0.05,
            ar_coef: 0.9,
            periods: vec![24.0, 7.5],
            amplitudes: vec![1.0, 0.5],
            slope: 0.01,
        }
    }
}

/// Deterministic synthetic series.
///
/// * `lagged_copy`: variable 0 is an AR(1) process `a[t] = φ·a[t−1] + ε`;
///   every other variable is `a[t − lag]` plus independent noise.
/// * `sine_mix`: `x_m[t] = Σ_k A_k · sin(2π·t / period_k + 2π·(m+1)(k+1)/(n+1))` plus noise.
/// * `trend`: `x_m[t] = (m + 1) · slope · t` plus noise.
pub fn make_synthetic(kind: SyntheticKind, n: usize, len: usize, seed: u64, params: &SyntheticParams) -> Result<MultivariateSeries> {
    if n == 0 || len == 0 {
        return Err(Error::config("synthetic series needs n ≥ 1 and len ≥ 1"));
    }
    if params.noise < 0.0 || !params.noise.is_finite() {
        return Err(Error::config("noise must be a finite non-negative number"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = move || -> f64 { StandardNormal.sample(&mut rng) };
    let values: Vec<Vec<f64>> = match kind {
        SyntheticKind::LaggedCopy => {
            if params.lag == 0 {
                return Err(Error::config("lagged_copy needs lag ≥ 1"));
            }
            let total = len + params.lag;
            let mut driver = Vec::with_capacity(total);
            let mut prev = 0.0;
            for _ in 0..total {
                prev = params.ar_coef * prev + gauss();
                driver.push(prev);
            }
            let mut vals = vec![driver[params.lag..].to_vec()];
            for _ in 1..n {
                vals.push((0..len).map(|t| driver[t] + params.noise * gauss()).collect());
            }
            vals
        }
        SyntheticKind::SineMix => {
            if params.periods.len() != params.amplitudes.len() || params.periods.is_empty() {
                return Err(Error::config("sine_mix needs one amplitude per period"));
            }
            let tau = std::f64::consts::TAU;
            (0..n)
                .map(|m| {
                    (0..len)
                        .map(|t| {
                            let clean: f64 = params
                                .periods
                                .iter()
                                .zip(&params.amplitudes)
                                .enumerate()
                                .map(|(k, (&per, &amp))| {
                                    let phase = tau * ((m + 1) * (k + 1)) as f64 / (n + 1) as f64;
                                    amp * (tau * t as f64 / per + phase).sin()
                                })
                                .sum();
                            clean + params.noise * gauss()
                        })
                        .collect()
                })
                .collect()
        }
        SyntheticKind::Trend => (0..n)
            .map(|m| {
                (0..len)
                    .map(|t| (m + 1) as f64 * params.slope * t as f64 + params.noise * gauss())
                    .collect()
            })
            .collect(),
    };
    let names = match (kind, n) {
        (SyntheticKind::LaggedCopy, _) => std::iter::once("A".to_string())
            .chain((1..n).map(|m| if n == 2 { "B".to_string() } else { format!("B{m}") }))
            .collect(),
        _ => (0..n).map(|m| format!("x{m}")).collect(),
    };
    MultivariateSeries::new(names, values)
}
