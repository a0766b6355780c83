//! Closed-form FLOPs, parameter and activation-memory estimates.
//!
//! All counts are exact integers. With `X = N·T²` under channel
//! independence and `X = N²·T²` under channel dependence:
//!
//! * FLOPs: `12(P·D·N·T + L(D + H)·X + (2 + α)L·D²·N·T)`
//! * parameters: `(4 + 2α)L·D² + 4L·D + 2P·D` (token-wise head) or
//!   `… + (1 + T)P·D` (flatten head)
//! * activation bytes: `4(D + P)N·T + (32 + 8α)L·D·N·T + 4L·H·X`, the last
//!   term dropped when attention is computed in streaming (flash) form.

use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::model::{ChannelMode, HeadType, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ComplexityQuery {
    pub d_model: u128,
    pub heads: u128,
    pub layers: u128,
    pub ffn_ratio: u128,
    pub patch_len: u128,
    pub n: u128,
    pub t: u128,
    pub channel_mode: ChannelMode,
    pub head_type: HeadType,
    pub flash: bool,
}

impl ComplexityQuery {
    /// Query for `config` on `n` variables of `t` tokens.
    pub fn new(config: &ModelConfig, n: usize, t: usize) -> Self {
        ComplexityQuery {
            d_model: config.d_model as u128,
            heads: config.heads as u128,
            layers: config.layers as u128,
            ffn_ratio: config.ffn_ratio as u128,
            patch_len: config.patch_len as u128,
            n: n as u128,
            t: t as u128,
            channel_mode: config.channel_mode,
            head_type: config.head_type,
            flash: false,
        }
    }

    pub fn with_mode(mut self, mode: ChannelMode) -> Self {
        self.channel_mode = mode;
        self
    }

    pub fn with_head(mut self, head: HeadType) -> Self {
        self.head_type = head;
        self
    }

    pub fn with_flash(mut self, flash: bool) -> Self {
        self.flash = flash;
        self
    }

    /// Size of the attention score tensor per head and layer.
    fn attended_pairs(&self) -> u128 {
        match self.channel_mode {
            ChannelMode::Independent => self.n * self.t * self.t,
            ChannelMode::Dependent => self.n * self.n * self.t * self.t,
        }
    }
}

pub fn flops_estimate(q: &ComplexityQuery) -> u128 {
    let (d, h, l, a, p) = (q.d_model, q.heads, q.layers, q.ffn_ratio, q.patch_len);
    let nt = q.n * q.t;
    12 * (p * d * nt + l * (d + h) * q.attended_pairs() + (2 + a) * l * d * d * nt)
}

pub fn param_count_formula(q: &ComplexityQuery) -> u128 {
    let (d, l, a, p) = (q.d_model, q.layers, q.ffn_ratio, q.patch_len);
    let body = (4 + 2 * a) * l * d * d + 4 * l * d;
    match q.head_type {
        HeadType::TokenWise => body + 2 * p * d,
        HeadType::Flatten => body + (1 + q.t) * p * d,
    }
}

/// Activation bytes.
pub fn memory_estimate(q: &ComplexityQuery) -> u128 {
    let (d, h, l, a, p) = (q.d_model, q.heads, q.layers, q.ffn_ratio, q.patch_len);
    let nt = q.n * q.t;
    let linear = 4 * (d + p) * nt + (32 + 8 * a) * l * d * nt;
    if q.flash {
        linear
    } else {
        linear + 4 * l * h * q.attended_pairs()
    }
}

/// Single-precision parameter bytes, `4 ×` [`param_count_formula`].
pub fn parameter_bytes(q: &ComplexityQuery) -> u128 {
    4 * param_count_formula(q)
}

/// One row of the analysis table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ComplexityRow {
    pub mode: ChannelMode,
    pub n: u128,
    pub t: u128,
    pub flops: u128,
    pub params: u128,
    pub activation_bytes: u128,
    pub activation_bytes_flash: u128,
    pub parameter_bytes: u128,
}

/// Both channel modes for every `t` in `ts`.
pub fn complexity_table(config: &ModelConfig, n: usize, ts: &[usize]) -> Vec<ComplexityRow> {
    let mut rows = Vec::new();
    for mode in [ChannelMode::Independent, ChannelMode::Dependent] {
        for &t in ts {
            let q = ComplexityQuery::new(config, n, t).with_mode(mode);
            rows.push(ComplexityRow {
                mode,
                n: q.n,
                t: q.t,
                flops: flops_estimate(&q),
                params: param_count_formula(&q),
                activation_bytes: memory_estimate(&q),
                activation_bytes_flash: memory_estimate(&q.with_flash(true)),
                parameter_bytes: parameter_bytes(&q),
            });
        }
    }
    rows
}

pub fn write_table_csv(rows: &[ComplexityRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "mode,n,t,flops,params,activation_bytes,activation_bytes_flash,parameter_bytes")?;
    for r in rows {
        let mode = match r.mode {
            ChannelMode::Independent => "independent",
            ChannelMode::Dependent => "dependent",
        };
        writeln!(
            w,
            "{mode},{},{},{},{},{},{},{}",
            r.n, r.t, r.flops, r.params, r.activation_bytes, r.activation_bytes_flash, r.parameter_bytes
        )?;
    }
    Ok(())
}
