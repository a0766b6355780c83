//! Multivariate next-token training: windowing, instance normalization, the
//! masked MSE objective and Adam.

use std::io::Write;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{format_exact, MultivariateSeries, PatchTokenGrid};
use crate::error::{Error, Result};
use crate::masking::VariableDependencyGraph;
use crate::model::{HeadType, Model};
use crate::tensor::{pairwise_sum, Scalar, Tensor};

/// Floor applied to per-variable standard deviations.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lookback_points: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub normalize: bool,
    /// Compute per-sample gradients on the rayon pool. The reduction order
    /// is fixed either way, so results do not depend on this flag.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lookback_points: 96,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 10,
            seed: 0,
            normalize: true,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, patch_len: usize) -> Result<()> {
        if self.lookback_points == 0 || !self.lookback_points.is_multiple_of(patch_len) {
            return Err(Error::config(format!(
                "train.lookback_points = {} must be a positive multiple of the patch length {patch_len}",
                self.lookback_points
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("train.learning_rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps must be positive"));
        }
        Ok(())
    }
}

/// Per-variable statistics of a lookback window.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// `max(population std, eps)`.
    pub std: Vec<f64>,
    pub eps: f64,
}

impl NormStats {
    /// Statistics that leave values unchanged.
    pub fn identity(n: usize) -> Self {
        NormStats {
            mean: vec![0.0; n],
            std: vec![1.0; n],
            eps: NORM_EPS,
        }
    }

    pub fn from_window(window: &[Vec<f64>], eps: f64) -> Result<Self> {
        let mut mean = Vec::with_capacity(window.len());
        let mut std = Vec::with_capacity(window.len());
        for row in window {
            if row.len() < 2 {
                return Err(Error::data("instance normalization needs at least 2 points per variable"));
            }
            let n = row.len() as f64;
            let mu = pairwise_sum(row) / n;
            let var = pairwise_sum(&row.iter().map(|x| (x - mu) * (x - mu)).collect::<Vec<_>>()) / n;
            mean.push(mu);
            std.push(var.sqrt().max(eps));
        }
        Ok(NormStats { mean, std, eps })
    }

    pub fn normalize_value(&self, m: usize, x: f64) -> f64 {
        (x - self.mean[m]) / self.std[m]
    }

    pub fn denormalize_value(&self, m: usize, x: f64) -> f64 {
        x * self.std[m] + self.mean[m]
    }
}

/// Standardizes every variable of `window` with its own statistics.
pub fn instance_normalize(window: &[Vec<f64>], eps: f64) -> Result<(Vec<Vec<f64>>, NormStats)> {
    let stats = NormStats::from_window(window, eps)?;
    Ok((apply_norm(window, &stats), stats))
}

pub fn apply_norm(values: &[Vec<f64>], stats: &NormStats) -> Vec<Vec<f64>> {
    values
        .iter()
        .enumerate()
        .map(|(m, row)| row.iter().map(|&x| stats.normalize_value(m, x)).collect())
        .collect()
}

pub fn denormalize(values: &[Vec<f64>], stats: &NormStats) -> Vec<Vec<f64>> {
    values
        .iter()
        .enumerate()
        .map(|(m, row)| row.iter().map(|&x| stats.denormalize_value(m, x)).collect())
        .collect()
}

/// How to cut a series into train/validation/test segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Fractions of the series length; the test segment takes the remainder
    /// when the ratios sum to one.
    Ratios([f64; 3]),
    Lengths([usize; 3]),
}

/// Index ranges of the three contiguous segments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn chronological_split(len: usize, spec: &SplitSpec) -> Result<SplitRanges> {
    let [a, b, c] = match spec {
        SplitSpec::Lengths(l) => *l,
        SplitSpec::Ratios(r) => {
            if r.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::config("split ratios must be finite and non-negative"));
            }
            let total: f64 = r.iter().sum();
            if total > 1.0 + 1e-12 {
                return Err(Error::config(format!("split ratios sum to {total} > 1")));
            }
            let a = (r[0] * len as f64).floor() as usize;
            let b = (r[1] * len as f64).floor() as usize;
            let c = if (total - 1.0).abs() <= 1e-12 {
                len - a - b
            } else {
                (r[2] * len as f64).floor() as usize
            };
            [a, b, c]
        }
    };
    if a + b + c > len {
        return Err(Error::data(format!(
            "split lengths {a} + {b} + {c} exceed the series length {len}"
        )));
    }
    Ok(SplitRanges {
        train: 0..a,
        val: a..a + b,
        test: a + b..a + b + c,
    })
}

/// Start offsets of every `window`-point slice of a `len`-point range,
/// stepping by `stride`.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if window > len || stride == 0 {
        return Vec::new();
    }
    (0..=len - window).step_by(stride).collect()
}

/// One training example: `T` input tokens and their next-patch targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingWindow {
    pub input: PatchTokenGrid,
    /// `[N, T_out, P]`: the input shifted by one patch (token-wise head) or
    /// only the patch after the context (flatten head).
    pub target: Vec<f64>,
    pub target_tokens: usize,
}

/// Builds the window starting at `start`: `lookback + P` points, optionally
/// standardized with lookback statistics.
pub fn make_window(series: &MultivariateSeries, start: usize, lookback: usize, p: usize, head: HeadType, normalize: bool) -> Result<TrainingWindow> {
    let end = start + lookback + p;
    if end > series.len() {
        return Err(Error::data(format!("window [{start}, {end}) exceeds the series")));
    }
    let raw: Vec<Vec<f64>> = series.values().iter().map(|v| v[start..end].to_vec()).collect();
    let vals = if normalize {
        let lookback_only: Vec<Vec<f64>> = raw.iter().map(|r| r[..lookback].to_vec()).collect();
        let stats = NormStats::from_window(&lookback_only, NORM_EPS)?;
        apply_norm(&raw, &stats)
    } else {
        raw
    };
    let n = series.n();
    let t = lookback / p;
    let input = PatchTokenGrid::new(n, t, p, vals.iter().flat_map(|r| r[..lookback].iter().copied()).collect())?;
    let (target, target_tokens) = match head {
        HeadType::TokenWise => (vals.iter().flat_map(|r| r[p..].iter().copied()).collect(), t),
        HeadType::Flatten => (vals.iter().flat_map(|r| r[lookback..].iter().copied()).collect(), 1),
    };
    Ok(TrainingWindow {
        input,
        target,
        target_tokens,
    })
}

/// Mean squared error over the flagged variables of `[N, T, P]` tensors.
pub fn mntp_loss<F: Scalar>(tape: &mut Tape<F>, prediction: Var, target: &Tensor<F>, target_flags: &[bool]) -> Result<Var> {
    let shape = tape.shape(prediction).to_vec();
    if shape != target.shape() {
        return Err(Error::dim("mntp_loss", &shape, target.shape()));
    }
    if shape.len() != 3 || shape[0] != target_flags.len() {
        return Err(Error::dim("mntp_loss flags", &shape, &[target_flags.len()]));
    }
    let per_var = shape[1] * shape[2];
    let supervised = target_flags.iter().filter(|&&f| f).count();
    if supervised == 0 {
        return Err(Error::contract("no supervised variable"));
    }
    let gate = Tensor::from_fn(&shape, |k| if target_flags[k / per_var] { F::one() } else { F::zero() });
    let t = tape.constant(target.clone());
    let diff = tape.sub(prediction, t)?;
    let diff = tape.mul_const(diff, &gate)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, F::from_f64(1.0 / (supervised * per_var) as f64)))
}

/// Bias-corrected Adam over a flat list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[Tensor<F>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("adam", &[params.len()], &[grads.len()]));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![F::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let c1 = F::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let c2 = F::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(self.eps);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim("adam", p.shape(), g.shape()));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSplit {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub split: LossSplit,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub records: Vec<LossRecord>,
    pub train_windows: usize,
    pub val_windows: usize,
}

impl TrainingLog {
    pub fn train_losses(&self) -> Vec<f64> {
        self.split_losses(LossSplit::Train)
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.split_losses(LossSplit::Val)
    }

    fn split_losses(&self, split: LossSplit) -> Vec<f64> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.loss).collect()
    }

    /// `epoch,split,loss` rows with round-trippable floats.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "epoch,split,loss")?;
        for r in &self.records {
            let split = match r.split {
                LossSplit::Train => "train",
                LossSplit::Val => "val",
            };
            writeln!(w, "{},{},{}", r.epoch, split, format_exact(r.loss))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii")
    }
}

fn windows_for<F: Scalar>(model: &Model<F>, series: &MultivariateSeries, cfg: &TrainConfig) -> Result<Vec<TrainingWindow>> {
    let p = model.config.patch_len;
    window_starts(series.len(), cfg.lookback_points + p, p)
        .into_iter()
        .map(|s| make_window(series, s, cfg.lookback_points, p, model.config.head_type, cfg.normalize))
        .collect()
}

fn target_tensor<F: Scalar>(w: &TrainingWindow) -> Tensor<F> {
    let n = w.input.n();
    let p = w.input.p();
    Tensor::from_fn(&[n, w.target_tokens, p], |k| F::from_f64(w.target[k]))
}

/// Loss and gradients (in [`ParamSet::named`](crate::model::ParamSet::named)
/// order) of one window.
pub fn window_gradients<F: Scalar>(model: &Model<F>, window: &TrainingWindow, c: &VariableDependencyGraph) -> Result<(f64, Vec<Tensor<F>>)> {
    let mut tape = Tape::new();
    let trace = model.forward_on_tape(&mut tape, &window.input, c)?;
    let loss = mntp_loss(&mut tape, trace.prediction, &target_tensor(window), c.target_flags())?;
    tape.backward(loss)?;
    let value = tape.value(loss).item()?.as_f64();
    let grads = trace
        .params
        .named()
        .into_iter()
        .map(|(_, &v)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();
    Ok((value, grads))
}

/// Mean loss over `windows` with no gradient.
pub fn mean_loss<F: Scalar>(model: &Model<F>, windows: &[TrainingWindow], c: &VariableDependencyGraph) -> Result<f64> {
    let losses = windows
        .par_iter()
        .map(|w| {
            let pred = model.forward(&w.input, c)?;
            let mut tape = Tape::new();
            let pv = tape.constant(pred);
            let loss = mntp_loss(&mut tape, pv, &target_tensor(w), c.target_flags())?;
            Ok(tape.value(loss).item()?.as_f64())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&losses) / losses.len() as f64)
}

/// Trains `model` in place. Windows of `lookback + P` points are taken at
/// stride `P`, shuffled per epoch from `cfg.seed`, and grouped into
/// mini-batches whose gradients are averaged in a fixed order.
pub fn train<F: Scalar>(
    model: &mut Model<F>,
    train_series: &MultivariateSeries,
    val_series: Option<&MultivariateSeries>,
    c: &VariableDependencyGraph,
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    cfg.validate(model.config.patch_len)?;
    if model.config.head_type == HeadType::Flatten && model.config.context_tokens * model.config.patch_len != cfg.lookback_points {
        return Err(Error::config("flatten head context_tokens must equal lookback_points / patch_len"));
    }
    let windows = windows_for(model, train_series, cfg)?;
    if windows.is_empty() {
        return Err(Error::data(format!(
            "training split of {} points is shorter than one window of {} points",
            train_series.len(),
            cfg.lookback_points + model.config.patch_len
        )));
    }
    let val_windows = match val_series {
        Some(s) => windows_for(model, s, cfg)?,
        None => Vec::new(),
    };
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut log = TrainingLog {
        records: Vec::new(),
        train_windows: windows.len(),
        val_windows: val_windows.len(),
    };
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let model_ref: &Model<F> = model;
            let results: Vec<(f64, Vec<Tensor<F>>)> = if cfg.parallel {
                batch
                    .par_iter()
                    .map(|&i| window_gradients(model_ref, &windows[i], c))
                    .collect::<Result<_>>()?
            } else {
                batch
                    .iter()
                    .map(|&i| window_gradients(model_ref, &windows[i], c))
                    .collect::<Result<_>>()?
            };
            let scale = F::from_f64(1.0 / batch.len() as f64);
            let mut grads: Vec<Tensor<F>> = results[0].1.iter().map(|g| Tensor::zeros(g.shape())).collect();
            for (_, g) in &results {
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, &x) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a = *a + x * scale;
                    }
                }
            }
            batch_losses.extend(results.iter().map(|(l, _)| *l));
            let mut params = model.params.values_mut();
            adam.step(&mut params, &grads)?;
        }
        log.records.push(LossRecord {
            epoch,
            split: LossSplit::Train,
            loss: pairwise_sum(&batch_losses) / batch_losses.len() as f64,
        });
        if !val_windows.is_empty() {
            log.records.push(LossRecord {
                epoch,
                split: LossSplit::Val,
                loss: mean_loss(model, &val_windows, c)?,
            });
        }
    }
    Ok(log)
}
