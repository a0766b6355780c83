//! The decoder-only forecaster: patch embedding, a stack of pre-norm
//! TimeAttention/FFN blocks, and a projection back to patch space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{time_attention, AttentionParams, AttentionSettings, PreparedMask, DEFAULT_THETA_BASE};
use crate::autodiff::{Tape, Var};
use crate::data::PatchTokenGrid;
use crate::error::{Error, Result};
use crate::masking::{build_temporal_mask, kronecker_mask, VariableDependencyGraph};
use crate::tensor::{Scalar, Tensor};

/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// Each variable sees only itself (`C` forced to identity).
    Independent,
    /// Variables attend to each other as the dependency graph allows.
    Dependent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    /// `D × P` projection applied to every token.
    TokenWise,
    /// `T·D × P` projection of all tokens of a variable at once (encoder-style).
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub patch_len: usize,
    /// FFN hidden width is `ffn_ratio · d_model`.
    pub ffn_ratio: usize,
    pub causal: bool,
    pub channel_mode: ChannelMode,
    pub use_rope: bool,
    pub use_variable_scalars: bool,
    pub head_type: HeadType,
    /// Token count `T`; only the flatten head depends on it.
    pub context_tokens: usize,
    pub theta_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::timer_xl(2, 32, 4, 8)
    }
}

impl ModelConfig {
    /// Causal, channel-dependent, RoPE + variable scalars, token-wise head.
    pub fn timer_xl(layers: usize, d_model: usize, heads: usize, patch_len: usize) -> Self {
        ModelConfig {
            layers,
            d_model,
            heads,
            patch_len,
            ffn_ratio: 4,
            causal: true,
            channel_mode: ChannelMode::Dependent,
            use_rope: true,
            use_variable_scalars: true,
            head_type: HeadType::TokenWise,
            context_tokens: 0,
            theta_base: DEFAULT_THETA_BASE,
        }
    }

    pub fn channel_independent(mut self) -> Self {
        self.channel_mode = ChannelMode::Independent;
        self
    }

    /// Temporal mask replaced by an all-ones matrix.
    pub fn noncausal(mut self) -> Self {
        self.causal = false;
        self
    }

    pub fn without_rope(mut self) -> Self {
        self.use_rope = false;
        self
    }

    pub fn without_variable_scalars(mut self) -> Self {
        self.use_variable_scalars = false;
        self
    }

    pub fn flatten_head(mut self, context_tokens: usize) -> Self {
        self.head_type = HeadType::Flatten;
        self.context_tokens = context_tokens;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_ratio * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("patch_len", self.patch_len),
            ("ffn_ratio", self.ffn_ratio),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model.d_model = {} is not divisible by model.heads = {}",
                self.d_model, self.heads
            )));
        }
        if self.use_rope && !self.head_dim().is_multiple_of(2) {
            return Err(Error::config(format!(
                "rotary embedding needs an even head dimension, got {}",
                self.head_dim()
            )));
        }
        if self.head_type == HeadType::Flatten && self.context_tokens == 0 {
            return Err(Error::config("the flatten head needs model.context_tokens ≥ 1"));
        }
        if !(self.theta_base > 1.0) {
            return Err(Error::config("model.theta_base must be greater than 1"));
        }
        Ok(())
    }
}

/// One Transformer block's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub norm1_gain: T,
    pub norm1_bias: T,
    pub attention: AttentionParams<T>,
    pub norm2_gain: T,
    pub norm2_bias: T,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
}

/// Every learnable array of the model. `T` is [`Tensor`] for storage and
/// [`Var`] when bound to a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    /// `P × D` patch embedding (`h = x · W_e`).
    pub embed: T,
    pub blocks: Vec<BlockParams<T>>,
    /// `D × P` (token-wise) or `T·D × P` (flatten) projection.
    pub head: T,
}

/// How a parameter counts towards the closed-form census.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Norm,
    FfnBias,
    VariableScalar,
}

impl<T> ParamSet<T> {
    /// Parameters with stable names, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("embed.weight".to_string(), &self.embed)];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{l}.{s}");
            out.push((p("norm1.gain"), &b.norm1_gain));
            out.push((p("norm1.bias"), &b.norm1_bias));
            out.push((p("attn.w_q"), &b.attention.w_q));
            out.push((p("attn.w_k"), &b.attention.w_k));
            out.push((p("attn.w_v"), &b.attention.w_v));
            out.push((p("attn.w_o"), &b.attention.w_o));
            if let Some(u) = &b.attention.u {
                out.push((p("attn.u"), u));
            }
            if let Some(v) = &b.attention.v {
                out.push((p("attn.v"), v));
            }
            out.push((p("norm2.gain"), &b.norm2_gain));
            out.push((p("norm2.bias"), &b.norm2_bias));
            out.push((p("ffn.w1"), &b.ffn_w1));
            out.push((p("ffn.b1"), &b.ffn_b1));
            out.push((p("ffn.w2"), &b.ffn_w2));
            out.push((p("ffn.b2"), &b.ffn_b2));
        }
        out.push(("head.weight".to_string(), &self.head));
        out
    }

    /// Same order as [`ParamSet::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.embed];
        for b in &mut self.blocks {
            out.push(&mut b.norm1_gain);
            out.push(&mut b.norm1_bias);
            out.push(&mut b.attention.w_q);
            out.push(&mut b.attention.w_k);
            out.push(&mut b.attention.w_v);
            out.push(&mut b.attention.w_o);
            if let Some(u) = &mut b.attention.u {
                out.push(u);
            }
            if let Some(v) = &mut b.attention.v {
                out.push(v);
            }
            out.push(&mut b.norm2_gain);
            out.push(&mut b.norm2_bias);
            out.push(&mut b.ffn_w1);
            out.push(&mut b.ffn_b1);
            out.push(&mut b.ffn_w2);
            out.push(&mut b.ffn_b2);
        }
        out.push(&mut self.head);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ParamSet<U> {
        ParamSet {
            embed: f(&self.embed),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    norm1_gain: f(&b.norm1_gain),
                    norm1_bias: f(&b.norm1_bias),
                    attention: AttentionParams {
                        w_q: f(&b.attention.w_q),
                        w_k: f(&b.attention.w_k),
                        w_v: f(&b.attention.w_v),
                        w_o: f(&b.attention.w_o),
                        u: b.attention.u.as_ref().map(&mut f),
                        v: b.attention.v.as_ref().map(&mut f),
                    },
                    norm2_gain: f(&b.norm2_gain),
                    norm2_bias: f(&b.norm2_bias),
                    ffn_w1: f(&b.ffn_w1),
                    ffn_b1: f(&b.ffn_b1),
                    ffn_w2: f(&b.ffn_w2),
                    ffn_b2: f(&b.ffn_b2),
                })
                .collect(),
            head: f(&self.head),
        }
    }
}

/// Census role from a parameter name produced by [`ParamSet::named`].
pub fn param_role(name: &str) -> ParamRole {
    if name.ends_with("attn.u") || name.ends_with("attn.v") {
        ParamRole::VariableScalar
    } else if name.ends_with("ffn.b1") || name.ends_with("ffn.b2") {
        ParamRole::FfnBias
    } else if name.contains(".norm") {
        ParamRole::Norm
    } else {
        ParamRole::Weight
    }
}

/// Which parameters [`Model::count_parameters`] includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Census {
    /// Every learnable scalar.
    Full,
    /// Weights and layer norms only: the inventory the closed-form count
    /// covers (no FFN biases, no variable scalars).
    ClosedForm,
}

/// Expected shape of every named parameter for `config`.
pub fn param_shapes(config: &ModelConfig) -> ParamSet<Vec<usize>> {
    let (d, p, h, dff) = (config.d_model, config.patch_len, config.heads, config.ffn_dim());
    let block = BlockParams {
        norm1_gain: vec![d],
        norm1_bias: vec![d],
        attention: AttentionParams {
            w_q: vec![d, d],
            w_k: vec![d, d],
            w_v: vec![d, d],
            w_o: vec![d, d],
            u: config.use_variable_scalars.then(|| vec![h]),
            v: config.use_variable_scalars.then(|| vec![h]),
        },
        norm2_gain: vec![d],
        norm2_bias: vec![d],
        ffn_w1: vec![d, dff],
        ffn_b1: vec![dff],
        ffn_w2: vec![dff, d],
        ffn_b2: vec![d],
    };
    ParamSet {
        embed: vec![p, d],
        blocks: vec![block; config.layers],
        head: match config.head_type {
            HeadType::TokenWise => vec![d, p],
            HeadType::Flatten => vec![config.context_tokens * d, p],
        },
    }
}

/// Result of [`Model::forward_on_tape`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `[N, T_out, P]` predictions: `T_out = T` for the token-wise head
    /// (position `i` predicts patch `i + 1`), `1` for the flatten head.
    pub prediction: Var,
    /// The parameters as bound on the tape.
    pub params: ParamSet<Var>,
    /// Post-softmax attention `[H, NT, NT]` per layer.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamSet<Tensor<F>>,
}

impl<F: Scalar> Model<F> {
    /// Seeded initialization: matrices uniform in `±1/√fan_in`, gains one,
    /// biases and variable scalars zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = param_shapes(&config);
        let names: Vec<String> = shapes.named().into_iter().map(|(n, _)| n).collect();
        let mut k = 0;
        let params = shapes.map(|shape| {
            let role = param_role(&names[k]);
            let is_gain = names[k].ends_with(".gain");
            k += 1;
            match role {
                ParamRole::Weight => {
                    let bound = 1.0 / (shape[0] as f64).sqrt();
                    Tensor::from_fn(shape, |_| F::from_f64(rng.random_range(-bound..bound)))
                }
                ParamRole::Norm if is_gain => Tensor::ones(shape),
                _ => Tensor::zeros(shape),
            }
        });
        Ok(Model { config, params })
    }

    /// Builds a model from explicit parameters, checking every shape.
    pub fn from_params(config: ModelConfig, params: ParamSet<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        let expected = shapes.named();
        let got = params.named();
        if expected.len() != got.len() {
            return Err(Error::config(format!(
                "expected {} parameter arrays, got {}",
                expected.len(),
                got.len()
            )));
        }
        for ((name, shape), (_, t)) in expected.iter().zip(&got) {
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("parameter shape", t.shape(), shape));
            }
            let _ = name;
        }
        Ok(Model { config, params })
    }

    pub fn count_parameters(&self, census: Census) -> usize {
        self.params
            .named()
            .into_iter()
            .filter(|(name, _)| {
                census == Census::Full
                    || !matches!(param_role(name), ParamRole::FfnBias | ParamRole::VariableScalar)
            })
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.map(|t| t.cast()),
        }
    }

    /// The dependency graph actually applied: identity under channel
    /// independence, `c` otherwise.
    pub fn effective_graph(&self, c: &VariableDependencyGraph) -> Result<VariableDependencyGraph> {
        match self.config.channel_mode {
            ChannelMode::Dependent => Ok(c.clone()),
            ChannelMode::Independent => VariableDependencyGraph::independent(c.n())?.with_targets(c.target_flags().to_vec()),
        }
    }

    /// Flat mask for an `n`-variable, `t`-token context.
    pub fn prepare_mask(&self, c: &VariableDependencyGraph, t: usize) -> Result<PreparedMask<F>> {
        let graph = self.effective_graph(c)?;
        Ok(PreparedMask::new(kronecker_mask(&graph, &build_temporal_mask(t, self.config.causal)?)))
    }

    /// Records the forward pass on `tape` with every parameter as a
    /// trainable leaf.
    pub fn forward_on_tape(&self, tape: &mut Tape<F>, grid: &PatchTokenGrid, c: &VariableDependencyGraph) -> Result<ForwardTrace> {
        let mask = self.check_and_mask(grid, c)?;
        let params = self.params.map(|t| tape.param(t.clone()));
        self.forward_bound(tape, grid, &mask, params)
    }

    fn check_and_mask(&self, grid: &PatchTokenGrid, c: &VariableDependencyGraph) -> Result<PreparedMask<F>> {
        if grid.p() != self.config.patch_len {
            return Err(Error::config(format!(
                "grid patch length {} differs from the model's {}",
                grid.p(),
                self.config.patch_len
            )));
        }
        if grid.n() != c.n() {
            return Err(Error::config(format!(
                "grid has {} variables but the dependency graph has {}",
                grid.n(),
                c.n()
            )));
        }
        if self.config.head_type == HeadType::Flatten && grid.t() != self.config.context_tokens {
            return Err(Error::config(format!(
                "flatten head expects {} tokens, grid has {}",
                self.config.context_tokens,
                grid.t()
            )));
        }
        self.prepare_mask(c, grid.t())
    }

    /// Forward pass with caller-provided bound parameters.
    pub fn forward_bound(&self, tape: &mut Tape<F>, grid: &PatchTokenGrid, mask: &PreparedMask<F>, params: ParamSet<Var>) -> Result<ForwardTrace> {
        let x = tape.constant(grid.to_tensor());
        self.forward_tokens(tape, x, grid.n(), mask, params)
    }

    /// Forward pass from a `[NT, P]` token variable, e.g. a trainable leaf
    /// when gradients with respect to the inputs are wanted.
    pub fn forward_tokens(&self, tape: &mut Tape<F>, x: Var, n: usize, mask: &PreparedMask<F>, params: ParamSet<Var>) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != cfg.patch_len || n == 0 || shape[0] != mask.size() || mask.mask.n() != n {
            return Err(Error::dim("forward_tokens", &shape, &[mask.size(), cfg.patch_len]));
        }
        let (t, p) = (shape[0] / n, cfg.patch_len);
        if cfg.head_type == HeadType::Flatten && t != cfg.context_tokens {
            return Err(Error::config("flatten head token count mismatch"));
        }
        let settings = AttentionSettings {
            heads: cfg.heads,
            theta_base: cfg.theta_base,
            use_rope: cfg.use_rope,
        };
        let mut h = tape.matmul(x, params.embed)?;
        let mut attention = Vec::with_capacity(params.blocks.len());
        for block in &params.blocks {
            let (out, probs) = transformer_block(tape, h, block, mask, &settings)?;
            h = out;
            attention.push(probs);
        }
        let prediction = match cfg.head_type {
            HeadType::TokenWise => {
                let y = tape.matmul(h, params.head)?;
                tape.reshape(y, &[n, t, p])?
            }
            HeadType::Flatten => {
                let flat = tape.reshape(h, &[n, t * cfg.d_model])?;
                let y = tape.matmul(flat, params.head)?;
                tape.reshape(y, &[n, 1, p])?
            }
        };
        Ok(ForwardTrace {
            prediction,
            params,
            attention,
        })
    }

    /// Next-patch predictions `[N, T_out, P]` without keeping gradients.
    pub fn forward(&self, grid: &PatchTokenGrid, c: &VariableDependencyGraph) -> Result<Tensor<F>> {
        let mask = self.check_and_mask(grid, c)?;
        self.forward_prepared(grid, &mask)
    }

    /// [`Model::forward`] with a mask from [`Model::prepare_mask`], reusable
    /// across calls with the same `N` and `T`.
    pub fn forward_prepared(&self, grid: &PatchTokenGrid, mask: &PreparedMask<F>) -> Result<Tensor<F>> {
        if grid.p() != self.config.patch_len || grid.n() * grid.t() != mask.size() {
            return Err(Error::dim("forward_prepared", &[grid.n() * grid.t(), grid.p()], &[mask.size(), self.config.patch_len]));
        }
        if self.config.head_type == HeadType::Flatten && grid.t() != self.config.context_tokens {
            return Err(Error::config("flatten head token count mismatch"));
        }
        let mut tape = Tape::new();
        let params = self.params.map(|t| tape.constant(t.clone()));
        let trace = self.forward_bound(&mut tape, grid, mask, params)?;
        Ok(tape.value(trace.prediction).clone())
    }

    /// Predictions plus per-layer attention maps `[H, NT, NT]`.
    pub fn forward_with_attention(&self, grid: &PatchTokenGrid, c: &VariableDependencyGraph) -> Result<(Tensor<F>, Vec<Tensor<F>>)> {
        let mask = self.check_and_mask(grid, c)?;
        let mut tape = Tape::new();
        let params = self.params.map(|t| tape.constant(t.clone()));
        let trace = self.forward_bound(&mut tape, grid, &mask, params)?;
        let maps = trace.attention.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((tape.value(trace.prediction).clone(), maps))
    }
}

/// `h + TimeAttention(LN(h))`, then `+ FFN(LN(·))` with ReLU. Returns the
/// block output and the attention probabilities.
pub fn transformer_block<F: Scalar>(
    tape: &mut Tape<F>,
    h: Var,
    block: &BlockParams<Var>,
    mask: &PreparedMask<F>,
    settings: &AttentionSettings,
) -> Result<(Var, Var)> {
    let a = tape.layer_norm(h, block.norm1_gain, block.norm1_bias, LAYER_NORM_EPS)?;
    let att = time_attention(tape, a, mask, &block.attention, settings)?;
    let h = tape.add(h, att.output)?;
    let f = tape.layer_norm(h, block.norm2_gain, block.norm2_bias, LAYER_NORM_EPS)?;
    let f = tape.matmul(f, block.ffn_w1)?;
    let f = tape.add_bias(f, block.ffn_b1)?;
    let f = tape.relu(f);
    let f = tape.matmul(f, block.ffn_w2)?;
    let f = tape.add_bias(f, block.ffn_b2)?;
    Ok((tape.add(h, f)?, att.probs))
}
