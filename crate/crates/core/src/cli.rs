//! Command-line front end.
//!
//! Runs are described by a TOML file:
//!
//! ```toml
//! output_dir = "runs/lagged"
//!
//! [model]            # any ModelConfig field
//! layers = 1
//! d_model = 16
//! heads = 2
//! patch_len = 4
//!
//! [train]            # any TrainConfig field
//! lookback_points = 16
//! epochs = 20
//!
//! [data]
//! split = { ratios = [0.6, 0.2, 0.2] }
//! horizons = [4, 8]
//! [data.synthetic]   # or: csv = "path/to/file.csv"
//! kind = "lagged_copy"
//! n = 2
//! len = 4000
//!
//! [mask]
//! kind = "full"      # full | independent | custom (with rows = [[1, 0], [1, 1]])
//! targets = [true, true]
//! ```
//!
//! `--set section.key=value` overrides any entry; the value is parsed as a
//! TOML literal and falls back to a bare string.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::complexity::{complexity_table, write_table_csv};
use crate::data::{load_csv, make_synthetic, write_csv, MultivariateSeries, SyntheticKind, SyntheticParams};
use crate::error::{Error, Result};
use crate::inference::{evaluate, forecast_origins, rolling_forecast, write_attention_maps, EvalSettings, ForecastRequest, ModelForecaster};
use crate::masking::{MaskKind, VariableDependencyGraph};
use crate::model::{Model, ModelConfig};
use crate::training::{chronological_split, train, SplitRanges, SplitSpec, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "timer-xl", version, about = "Decoder-only multivariate time-series forecaster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint and loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dotted override, e.g. `train.epochs=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on the test split for every configured horizon.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write per-layer, per-head attention maps of the first test window.
        #[arg(long)]
        dump_attention: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Forecast past the end of the series.
    Forecast {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        horizon: i64,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Closed-form FLOPs, parameter and memory estimates.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: usize,
        /// Comma-separated token counts.
        #[arg(long, value_delimiter = ',', required = true)]
        t: Vec<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write a synthetic dataset as CSV.
    Synth {
        #[arg(long)]
        kind: SyntheticKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 4000)]
        len: usize,
        #[arg(long)]
        lag: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub len: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: SyntheticParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default = "default_split")]
    pub split: SplitSpec,
    #[serde(default)]
    pub horizons: Vec<usize>,
    #[serde(default)]
    pub name: Option<String>,
}

fn default_split() -> SplitSpec {
    SplitSpec::Ratios([0.7, 0.1, 0.2])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    #[serde(default = "default_mask_kind")]
    pub kind: MaskKind,
    #[serde(default)]
    pub rows: Option<Vec<Vec<u8>>>,
    #[serde(default)]
    pub targets: Option<Vec<bool>>,
    /// Overrides `model.causal` when present.
    #[serde(default)]
    pub causal: Option<bool>,
}

fn default_mask_kind() -> MaskKind {
    MaskKind::Full
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            kind: MaskKind::Full,
            rows: None,
            targets: None,
            causal: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub mask: MaskConfig,
}

impl RunConfig {
    /// Parses `text`, applies `overrides` and validates every section.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        if let Some(causal) = cfg.mask.causal {
            cfg.model.causal = causal;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        if let Some(csv) = &cfg.data.csv {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.data.csv = Some(dir.join(csv));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.patch_len)?;
        match (&self.data.csv, &self.data.synthetic) {
            (Some(_), Some(_)) => return Err(Error::config("data.csv and data.synthetic are mutually exclusive")),
            (None, None) => return Err(Error::config("one of data.csv or data.synthetic is required")),
            _ => {}
        }
        if self.data.horizons.contains(&0) {
            return Err(Error::config("data.horizons entries must be positive"));
        }
        if self.model.head_type == crate::model::HeadType::Flatten
            && self.model.context_tokens * self.model.patch_len != self.train.lookback_points
        {
            return Err(Error::config("model.context_tokens must equal train.lookback_points / model.patch_len"));
        }
        Ok(())
    }

    pub fn dataset_name(&self) -> String {
        if let Some(name) = &self.data.name {
            return name.clone();
        }
        match (&self.data.csv, &self.data.synthetic) {
            (Some(p), _) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            (_, Some(s)) => s.kind.to_string(),
            _ => String::new(),
        }
    }

    pub fn load_series(&self) -> Result<MultivariateSeries> {
        match (&self.data.csv, &self.data.synthetic) {
            (Some(path), _) => load_csv(path),
            (_, Some(s)) => make_synthetic(s.kind, s.n, s.len, s.seed, &s.params),
            _ => Err(Error::config("no data source")),
        }
    }

    pub fn graph(&self, n: usize) -> Result<VariableDependencyGraph> {
        self.mask.kind.build(n, self.mask.rows.as_deref(), self.mask.targets.clone())
    }

    pub fn splits(&self, series: &MultivariateSeries) -> Result<SplitRanges> {
        chronological_split(series.len(), &self.data.split)
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not KEY=VALUE")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    crate_version: &'a str,
    checkpoint_format: u32,
    created_unix_secs: u64,
    seed: Option<u64>,
    config: &'a C,
    artifacts: Vec<String>,
}

fn write_manifest<C: Serialize>(path: &Path, command: &str, seed: Option<u64>, config: &C, artifacts: &[PathBuf]) -> Result<()> {
    let manifest = Manifest {
        command,
        crate_version: env!("CARGO_PKG_VERSION"),
        checkpoint_format: checkpoint::VERSION,
        created_unix_secs: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        seed,
        config,
        artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::contract(e.to_string()))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

/// Exit status for an error: 2 configuration, 3 data, 4 anything else.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Parse { .. } => 3,
        _ => 4,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides } => cmd_train(&RunConfig::load(&config, &overrides)?),
        Command::Evaluate {
            config,
            checkpoint,
            dump_attention,
            overrides,
        } => cmd_evaluate(&RunConfig::load(&config, &overrides)?, &checkpoint, dump_attention.as_deref()),
        Command::Forecast {
            config,
            checkpoint,
            horizon,
            overrides,
        } => cmd_forecast(&RunConfig::load(&config, &overrides)?, &checkpoint, horizon),
        Command::Analyze { config, n, t, overrides } => cmd_analyze(&RunConfig::load(&config, &overrides)?, n, &t),
        Command::Synth {
            kind,
            out,
            seed,
            n,
            len,
            lag,
            noise,
        } => {
            let mut params = SyntheticParams::default();
            if let Some(lag) = lag {
                params.lag = lag;
            }
            if let Some(noise) = noise {
                params.noise = noise;
            }
            cmd_synth(
                &SyntheticSpec {
                    kind,
                    n,
                    len,
                    seed,
                    params,
                },
                &out,
            )
        }
    }
}

/// Parses `args` (including the program name), runs the command and maps
/// the outcome to an exit status.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn prepare_output(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(&cfg.output_dir)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let series = cfg.load_series()?;
    let graph = cfg.graph(series.n())?;
    let split = cfg.splits(&series)?;
    let train_part = series.slice(split.train.start, split.train.end)?;
    let val_part = if split.val.len() >= cfg.train.lookback_points + cfg.model.patch_len {
        Some(series.slice(split.val.start, split.val.end)?)
    } else {
        None
    };
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let log = train(&mut model, &train_part, val_part.as_ref(), &graph, &cfg.train)?;
    let dir = prepare_output(cfg)?;
    let ckpt = dir.join("model.ckpt");
    let loss = dir.join("loss.csv");
    checkpoint::save(&model, &ckpt)?;
    fs::write(&loss, log.to_csv_string())?;
    write_manifest(&dir.join("manifest.json"), "train", Some(cfg.train.seed), cfg, &[ckpt.clone(), loss.clone()])?;
    if let Some(last) = log.train_losses().last() {
        println!("trained {} epochs over {} windows; final train loss {last:.6}", cfg.train.epochs, log.train_windows);
    }
    println!("wrote {} and {}", ckpt.display(), loss.display());
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig, ckpt: &Path, dump_attention: Option<&Path>) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let series = cfg.load_series()?;
    let graph = cfg.graph(series.n())?;
    let split = cfg.splits(&series)?;
    let horizons = if cfg.data.horizons.is_empty() {
        vec![model.config.patch_len]
    } else {
        cfg.data.horizons.clone()
    };
    let settings = EvalSettings {
        lookback_points: cfg.train.lookback_points,
        horizons,
        stride: model.config.patch_len,
        dataset: cfg.dataset_name(),
    };
    let forecaster = ModelForecaster {
        model: &model,
        graph: graph.clone(),
        normalize: cfg.train.normalize,
    };
    let report = evaluate(&forecaster, &series, split.test.clone(), graph.target_flags(), &settings)?;
    let dir = prepare_output(cfg)?;
    let out = dir.join("eval.csv");
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    fs::write(&out, buf)?;
    let mut artifacts = vec![out.clone()];
    if let Some(att_dir) = dump_attention {
        let origin = forecast_origins(&split.test, cfg.train.lookback_points, model.config.patch_len)
            .first()
            .copied()
            .ok_or_else(|| Error::data("test split has no complete lookback window"))?;
        let window = series.slice(origin - cfg.train.lookback_points, origin)?;
        let grid = crate::data::patchify(&window, model.config.patch_len, cfg.train.lookback_points)?;
        let (_, maps) = model.forward_with_attention(&grid, &graph)?;
        artifacts.extend(write_attention_maps(&maps, att_dir)?);
    }
    write_manifest(&dir.join("manifest.json"), "evaluate", None, cfg, &artifacts)?;
    print!("{report}");
    Ok(())
}

pub fn cmd_forecast(cfg: &RunConfig, ckpt: &Path, horizon: i64) -> Result<()> {
    if horizon < 0 {
        return Err(Error::contract(format!("horizon must be non-negative, got {horizon}")));
    }
    let model = checkpoint::load(ckpt)?;
    let series = cfg.load_series()?;
    let graph = cfg.graph(series.n())?;
    let lb = cfg.train.lookback_points;
    if series.len() < lb {
        return Err(Error::data(format!("series of {} points is shorter than the lookback {lb}", series.len())));
    }
    let request = ForecastRequest {
        lookback: series.values().iter().map(|v| v[v.len() - lb..].to_vec()).collect(),
        horizon_points: horizon as usize,
        graph,
        normalize: cfg.train.normalize,
    };
    let values = rolling_forecast(&model, &request)?;
    let dir = prepare_output(cfg)?;
    let out = dir.join("forecast.csv");
    write_csv(&MultivariateSeries::new(series.names().to_vec(), values)?, &out)?;
    write_manifest(&dir.join("manifest.json"), "forecast", None, cfg, std::slice::from_ref(&out))?;
    println!("wrote {horizon}-point forecast to {}", out.display());
    Ok(())
}

pub fn cmd_analyze(cfg: &RunConfig, n: usize, ts: &[usize]) -> Result<()> {
    if n == 0 || ts.contains(&0) {
        return Err(Error::config("--n and every --t value must be positive"));
    }
    let rows = complexity_table(&cfg.model, n, ts);
    let mut buf = Vec::new();
    write_table_csv(&rows, &mut buf)?;
    let dir = prepare_output(cfg)?;
    let out = dir.join("complexity.csv");
    fs::write(&out, &buf)?;
    write_manifest(&dir.join("manifest.json"), "analyze", None, cfg, &[out])?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}

pub fn cmd_synth(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    let series = make_synthetic(spec.kind, spec.n, spec.len, spec.seed, &spec.params)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_csv(&series, out)?;
    let mut manifest = out.as_os_str().to_owned();
    manifest.push(".manifest.json");
    write_manifest(Path::new(&manifest), "synth", Some(spec.seed), spec, &[out.to_path_buf()])?;
    println!("wrote {} ({} variables × {} points)", out.display(), series.n(), series.len());
    Ok(())
}
