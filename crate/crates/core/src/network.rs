//! Forward pass: patching, transformer series encoder, two-way state decoder
//! and the softmax state head.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows_inplace, Float, Tape, Var};
use crate::data::{ChannelStats, GranularitySpec, Level};
use crate::error::{Error, Result};
use crate::prompt::{embed_prompts, PromptEncoderParams, PromptRows, PromptSet};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Window length `T`.
    pub window: usize,
    pub channels: usize,
    pub k_total: usize,
    pub d_model: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub mlp_hidden: usize,
    /// Granularity levels behind the global label space, when known.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<Level>,
    /// Input statistics applied to raw series before inference.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalization: Option<ChannelStats>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 256,
            channels: 1,
            k_total: 2,
            d_model: 128,
            patch_len: 16,
            patch_stride: 8,
            encoder_layers: 3,
            decoder_layers: 6,
            heads: 8,
            dropout: 0.1,
            mlp_hidden: 256,
            levels: Vec::new(),
            normalization: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patch_len > self.window {
            return Err(Error::PatchTooLong {
                patch: self.patch_len,
                window: self.window,
            });
        }
        if self.window == 0 || self.channels == 0 || self.k_total == 0 || self.d_model == 0 {
            return bad("window, channels, k_total and d_model must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.patch_len == 0 || self.patch_stride == 0 || self.patch_stride > self.patch_len {
            return bad(format!(
                "need 1 <= patch_stride <= patch_len, got {} / {}",
                self.patch_stride, self.patch_len
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.mlp_hidden == 0 {
            return bad("mlp_hidden must be positive".into());
        }
        if !self.levels.is_empty() && self.levels.iter().map(|l| l.k).sum::<usize>() != self.k_total {
            return bad("levels do not add up to k_total".into());
        }
        if let Some(n) = &self.normalization {
            if n.mean.len() != self.channels || n.std.len() != self.channels {
                return bad("normalization stats do not match channel count".into());
            }
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        patch_count(self.window, self.patch_len, self.patch_stride)
    }

    pub fn granularity(&self) -> Option<GranularitySpec> {
        GranularitySpec::new(self.levels.clone()).ok()
    }
}

/// Number of patch tokens after replicate-padding the tail so that the
/// stride divides `T - P`.
pub fn patch_count(len: usize, patch: usize, stride: usize) -> usize {
    (len - patch).div_ceil(stride) + 1
}

/// `T_patched x (C*P)`; each row flattens `P` consecutive timesteps with
/// channels varying fastest.
pub fn patchify<F: Float>(x: &Array2<F>, patch: usize, stride: usize) -> Result<Array2<F>> {
    let (len, c) = x.dim();
    if patch > len {
        return Err(Error::PatchTooLong { patch, window: len });
    }
    if patch == 0 || stride == 0 {
        return Err(Error::InvalidConfig("patch length and stride must be positive".into()));
    }
    let n = patch_count(len, patch, stride);
    let mut out = Array2::zeros((n, c * patch));
    for i in 0..n {
        for j in 0..patch {
            let t = (i * stride + j).min(len - 1);
            out.slice_mut(s![i, j * c..(j + 1) * c]).assign(&x.row(t));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnIds {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIds {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderLayerIds {
    pub attn: AttnIds,
    pub norm1: NormIds,
    pub ff: MlpIds,
    pub norm2: NormIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderLayerIds {
    pub self_attn: AttnIds,
    pub norm1: NormIds,
    pub prompt_to_series: AttnIds,
    pub norm2: NormIds,
    pub mlp: MlpIds,
    pub norm3: NormIds,
    pub series_to_prompt: AttnIds,
    pub norm4: NormIds,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform Glorot range times a gain.
    Xavier(f64),
    Zeros,
    Ones,
    Normal(f64),
    /// Sinusoid evaluated at `offset + row * step`.
    Sinusoid { offset: f64, step: f64 },
}

#[derive(Debug, Clone)]
struct TensorSpec {
    name: String,
    shape: (usize, usize),
    init: Init,
}

/// Index of every named tensor, derived deterministically from a config.
#[derive(Debug, Clone)]
pub struct Layout {
    specs: Vec<TensorSpec>,
    pub patch_w: usize,
    pub patch_b: usize,
    pub patch_pos: usize,
    pub time_pos: usize,
    pub label_w: usize,
    pub label_b: usize,
    pub boundary_table: usize,
    pub encoder: Vec<EncoderLayerIds>,
    pub decoder: Vec<DecoderLayerIds>,
    pub head_w: usize,
    pub head_b: usize,
}

struct LayoutBuilder {
    specs: Vec<TensorSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.specs.push(TensorSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        self.scaled_linear(prefix, fan_in, fan_out, 1.0)
    }

    fn scaled_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) -> (usize, usize) {
        (
            self.add(format!("{prefix}.weight"), (fan_in, fan_out), Init::Xavier(gain)),
            self.add(format!("{prefix}.bias"), (1, fan_out), Init::Zeros),
        )
    }

    /// `out_gain` scales the projection that feeds the residual sum.
    fn attn(&mut self, prefix: &str, d: usize, out_gain: f64) -> AttnIds {
        let (wq, bq) = self.linear(&format!("{prefix}.q"), d, d);
        let (wk, bk) = self.linear(&format!("{prefix}.k"), d, d);
        let (wv, bv) = self.linear(&format!("{prefix}.v"), d, d);
        let (wo, bo) = self.scaled_linear(&format!("{prefix}.out"), d, d, out_gain);
        AttnIds {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gamma: self.add(format!("{prefix}.gamma"), (1, d), Init::Ones),
            beta: self.add(format!("{prefix}.beta"), (1, d), Init::Zeros),
        }
    }

    fn mlp(&mut self, prefix: &str, d: usize, hidden: usize, out_gain: f64) -> MlpIds {
        let (w1, b1) = self.linear(&format!("{prefix}.fc1"), d, hidden);
        let (w2, b2) = self.scaled_linear(&format!("{prefix}.fc2"), hidden, d, out_gain);
        MlpIds { w1, b1, w2, b2 }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut b = LayoutBuilder { specs: Vec::new() };
        let (patch_w, patch_b) = b.linear("encoder.patch_proj", cfg.channels * cfg.patch_len, d);
        let center = (cfg.patch_len as f64 - 1.0) / 2.0;
        let patch_pos = b.add(
            "encoder.patch_pos".into(),
            (cfg.patches(), d),
            Init::Sinusoid {
                offset: center,
                step: cfg.patch_stride as f64,
            },
        );
        // Residual branches start small so that a deep post-norm stack is
        // close to the identity at init: gain 1/sqrt(residual blocks).
        let enc_gain = 1.0 / ((2 * cfg.encoder_layers).max(1) as f64).sqrt();
        let dec_gain = 1.0 / ((4 * cfg.decoder_layers).max(1) as f64).sqrt();
        let encoder = (0..cfg.encoder_layers)
            .map(|l| {
                let p = format!("encoder.layers.{l}");
                EncoderLayerIds {
                    attn: b.attn(&format!("{p}.attn"), d, enc_gain),
                    norm1: b.norm(&format!("{p}.norm1"), d),
                    ff: b.mlp(&format!("{p}.ff"), d, cfg.mlp_hidden, enc_gain),
                    norm2: b.norm(&format!("{p}.norm2"), d),
                }
            })
            .collect();
        // Rows act as embeddings of one-hot states, so they get unit-variance
        // entries like the boundary table rather than fan-scaled ones.
        let label_w = b.add("prompt.label.weight".into(), (2 * cfg.k_total, d), Init::Normal(1.0));
        let label_b = b.add("prompt.label.bias".into(), (1, d), Init::Zeros);
        let boundary_table = b.add("prompt.boundary_table".into(), (2, d), Init::Normal(1.0));
        let time_pos = b.add(
            "decoder.time_pos".into(),
            (cfg.window, d),
            Init::Sinusoid { offset: 0.0, step: 1.0 },
        );
        let decoder = (0..cfg.decoder_layers)
            .map(|l| {
                let p = format!("decoder.layers.{l}");
                DecoderLayerIds {
                    self_attn: b.attn(&format!("{p}.self_attn"), d, dec_gain),
                    norm1: b.norm(&format!("{p}.norm1"), d),
                    prompt_to_series: b.attn(&format!("{p}.prompt_to_series"), d, dec_gain),
                    norm2: b.norm(&format!("{p}.norm2"), d),
                    mlp: b.mlp(&format!("{p}.mlp"), d, cfg.mlp_hidden, dec_gain),
                    norm3: b.norm(&format!("{p}.norm3"), d),
                    series_to_prompt: b.attn(&format!("{p}.series_to_prompt"), d, dec_gain),
                    norm4: b.norm(&format!("{p}.norm4"), d),
                }
            })
            .collect();
        let (head_w, head_b) = b.linear("head", d, cfg.k_total);
        Self {
            specs: b.specs,
            patch_w,
            patch_b,
            patch_pos,
            time_pos,
            label_w,
            label_b,
            boundary_table,
            encoder,
            decoder,
            head_w,
            head_b,
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.specs[id].name
    }

    pub fn shape(&self, id: usize) -> (usize, usize) {
        self.specs[id].shape
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }
}

/// All learnable tensors of one model, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F = f32> {
    pub config: ModelConfig,
    pub tensors: Vec<Array2<F>>,
}

fn sinusoid(pos: f64, j: usize, d: usize) -> f64 {
    let pair = (j / 2) as f64;
    let freq = 1.0 / 10_000f64.powf(2.0 * pair / d as f64);
    if j % 2 == 0 {
        (pos * freq).sin()
    } else {
        (pos * freq).cos()
    }
}

impl<F: Float> ModelParams<F> {
    /// Fresh parameters; deterministic given `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .specs
            .iter()
            .map(|spec| {
                let (r, c) = spec.shape;
                match spec.init {
                    Init::Zeros => Array2::zeros((r, c)),
                    Init::Ones => Array2::ones((r, c)),
                    Init::Xavier(gain) => {
                        let a = gain * (6.0 / (r + c) as f64).sqrt();
                        Array2::from_shape_simple_fn((r, c), || F::from_f64_lossy(rng.random_range(-a..a)))
                    }
                    Init::Normal(sd) => Array2::from_shape_simple_fn((r, c), || {
                        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                        F::from_f64_lossy(sd * z)
                    }),
                    Init::Sinusoid { offset, step } => Array2::from_shape_fn((r, c), |(i, j)| {
                        F::from_f64_lossy(sinusoid(offset + i as f64 * step, j, c))
                    }),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn cast<G: Float>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| G::from_f64_lossy(v.to_f64_lossy())))
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Checks tensor count, shapes and finiteness against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let layout = self.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tensors for a layout of {}",
                self.tensors.len(),
                layout.len()
            )));
        }
        for (id, t) in self.tensors.iter().enumerate() {
            if t.dim() != layout.shape(id) {
                return Err(Error::ShapeMismatch(format!(
                    "{}: {:?} vs {:?}",
                    layout.name(id),
                    t.dim(),
                    layout.shape(id)
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation(format!("parameter {}", layout.name(id))));
            }
        }
        Ok(())
    }

    pub fn prompt_encoder(&self) -> PromptEncoderParams<'_, F> {
        let l = self.layout();
        PromptEncoderParams {
            label_weight: &self.tensors[l.label_w],
            label_bias: &self.tensors[l.label_b],
            boundary_table: &self.tensors[l.boundary_table],
        }
    }
}

/// Evaluation runs without dropout; training draws dropout masks from the
/// supplied generator.
pub enum RunMode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl RunMode<'_> {
    fn dropout<F: Float>(&mut self, tape: &mut Tape<'_, F>, x: Var, p: f64) -> Var {
        match self {
            RunMode::Eval => x,
            RunMode::Train(rng) => tape.dropout(x, p, &mut **rng),
        }
    }
}

/// Builds the network graph on a tape.
pub struct Network<'a> {
    pub config: &'a ModelConfig,
    pub layout: Layout,
}

impl<'a> Network<'a> {
    pub fn new(config: &'a ModelConfig) -> Self {
        Self {
            config,
            layout: Layout::new(config),
        }
    }

    fn attention<F: Float>(&self, tape: &mut Tape<'_, F>, ids: &AttnIds, q_in: Var, k_in: Var, v_in: Var) -> Var {
        let q = {
            let (w, b) = (tape.param(ids.wq), tape.param(ids.bq));
            tape.linear(q_in, w, b)
        };
        let k = {
            let (w, b) = (tape.param(ids.wk), tape.param(ids.bk));
            tape.linear(k_in, w, b)
        };
        let v = {
            let (w, b) = (tape.param(ids.wv), tape.param(ids.bv));
            tape.linear(v_in, w, b)
        };
        let o = tape.attention(q, k, v, self.config.heads);
        let (w, b) = (tape.param(ids.wo), tape.param(ids.bo));
        tape.linear(o, w, b)
    }

    fn norm<F: Float>(&self, tape: &mut Tape<'_, F>, ids: &NormIds, x: Var) -> Var {
        let (g, b) = (tape.param(ids.gamma), tape.param(ids.beta));
        tape.layer_norm(x, g, b)
    }

    fn mlp<F: Float>(&self, tape: &mut Tape<'_, F>, ids: &MlpIds, x: Var) -> Var {
        let (w1, b1) = (tape.param(ids.w1), tape.param(ids.b1));
        let h = tape.linear(x, w1, b1);
        let h = tape.gelu(h);
        let (w2, b2) = (tape.param(ids.w2), tape.param(ids.b2));
        tape.linear(h, w2, b2)
    }

    /// Residual, dropout, then layer normalization.
    fn residual<F: Float>(&self, tape: &mut Tape<'_, F>, norm: &NormIds, x: Var, update: Var, mode: &mut RunMode) -> Var {
        let update = mode.dropout(tape, update, self.config.dropout);
        let sum = tape.add(x, update);
        self.norm(tape, norm, sum)
    }

    /// Series encoder over an already patched input.
    pub fn encode<F: Float>(&self, tape: &mut Tape<'_, F>, x_patched: Var, mode: &mut RunMode) -> Var {
        let (w, b) = (tape.param(self.layout.patch_w), tape.param(self.layout.patch_b));
        let h = tape.linear(x_patched, w, b);
        let pos = tape.param(self.layout.patch_pos);
        let mut h = tape.add(h, pos);
        h = mode.dropout(tape, h, self.config.dropout);
        for ids in &self.layout.encoder {
            let a = self.attention(tape, &ids.attn, h, h, h);
            h = self.residual(tape, &ids.norm1, h, a, mode);
            let f = self.mlp(tape, &ids.ff, h);
            h = self.residual(tape, &ids.norm2, h, f, mode);
        }
        h
    }

    /// Initial prompt stream: prompt embedding plus timestep positions.
    pub fn prompt_tokens<F: Float>(&self, tape: &mut Tape<'_, F>, rows: &PromptRows) -> Var {
        let len = self.config.window;
        let (w, b) = (tape.param(self.layout.label_w), tape.param(self.layout.label_b));
        let label = tape.label_embed(w, b, rows.label.clone(), len);
        let table = tape.param(self.layout.boundary_table);
        let boundary = tape.boundary_embed(table, rows.boundary.clone(), len);
        let z = tape.add(label, boundary);
        let pos = tape.param(self.layout.time_pos);
        tape.add(z, pos)
    }

    /// One two-way layer: prompt self-attention, prompt-to-series
    /// cross-attention, MLP on prompts, series-to-prompt cross-attention.
    pub fn two_way_layer<F: Float>(
        &self,
        tape: &mut Tape<'_, F>,
        layer: usize,
        z_p: Var,
        z_x: Var,
        mode: &mut RunMode,
    ) -> (Var, Var) {
        let ids = self.layout.decoder[layer];
        let tpos = tape.param(self.layout.time_pos);
        let ppos = tape.param(self.layout.patch_pos);

        let q = tape.add(z_p, tpos);
        let a = self.attention(tape, &ids.self_attn, q, q, z_p);
        let z_p = self.residual(tape, &ids.norm1, z_p, a, mode);

        let q = tape.add(z_p, tpos);
        let k = tape.add(z_x, ppos);
        let a = self.attention(tape, &ids.prompt_to_series, q, k, z_x);
        let z_p = self.residual(tape, &ids.norm2, z_p, a, mode);

        let m = self.mlp(tape, &ids.mlp, z_p);
        let z_p = self.residual(tape, &ids.norm3, z_p, m, mode);

        let q = tape.add(z_x, ppos);
        let k = tape.add(z_p, tpos);
        let a = self.attention(tape, &ids.series_to_prompt, q, k, z_p);
        let z_x = self.residual(tape, &ids.norm4, z_x, a, mode);
        (z_p, z_x)
    }

    pub fn head<F: Float>(&self, tape: &mut Tape<'_, F>, z_p: Var) -> Var {
        let (w, b) = (tape.param(self.layout.head_w), tape.param(self.layout.head_b));
        tape.linear(z_p, w, b)
    }

    /// Decoder stack plus head: `T x K_total` logits.
    pub fn decode<F: Float>(&self, tape: &mut Tape<'_, F>, z_x: Var, rows: &PromptRows, mode: &mut RunMode) -> Var {
        let mut z_p = self.prompt_tokens(tape, rows);
        let mut z_x = z_x;
        for layer in 0..self.layout.decoder.len() {
            (z_p, z_x) = self.two_way_layer(tape, layer, z_p, z_x, mode);
        }
        self.head(tape, z_p)
    }

    /// Patches `x` and places it on the tape as a constant.
    pub fn patched_input<F: Float>(&self, tape: &mut Tape<'_, F>, x: &Array2<F>) -> Result<Var> {
        if x.dim() != (self.config.window, self.config.channels) {
            return Err(Error::ShapeMismatch(format!(
                "input {:?}, expected ({}, {})",
                x.dim(),
                self.config.window,
                self.config.channels
            )));
        }
        let xp = patchify(x, self.config.patch_len, self.config.patch_stride)?;
        Ok(tape.input(xp))
    }
}

/// Per-timestep state distribution for one window (or a stitched series).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub probs: Array2<f64>,
    pub states: Vec<usize>,
    /// Mean probability mass per granularity level; empty when levels are
    /// unknown.
    pub level_scores: Vec<f64>,
}

/// First index of the row maximum.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

impl SegmentationResult {
    pub fn from_probs(probs: Array2<f64>, levels: &[Level]) -> Self {
        let states = probs.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
        let n = probs.nrows().max(1) as f64;
        let mut level_scores = Vec::with_capacity(levels.len());
        let mut off = 0;
        for l in levels {
            let mass: f64 = probs.slice(s![.., off..off + l.k]).sum();
            level_scores.push(mass / n);
            off += l.k;
        }
        Self {
            probs,
            states,
            level_scores,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

fn check_finite<F: Float>(m: &Array2<F>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation(what.into()))
    }
}

/// Series encoder in evaluation mode.
pub fn encode_series<F: Float>(x_patched: &Array2<F>, params: &ModelParams<F>) -> Result<Array2<F>> {
    let cfg = &params.config;
    if x_patched.dim() != (cfg.patches(), cfg.channels * cfg.patch_len) {
        return Err(Error::ShapeMismatch(format!("patched input {:?}", x_patched.dim())));
    }
    let net = Network::new(cfg);
    let mut tape = Tape::new(&params.tensors);
    let xp = tape.input(x_patched.clone());
    let z = net.encode(&mut tape, xp, &mut RunMode::Eval);
    check_finite(tape.value(z), "series encoder")?;
    Ok(tape.value(z).clone())
}

/// One decoder layer in evaluation mode.
pub fn two_way_layer<F: Float>(
    z_p: &Array2<F>,
    z_x: &Array2<F>,
    params: &ModelParams<F>,
    layer: usize,
) -> Result<(Array2<F>, Array2<F>)> {
    let cfg = &params.config;
    if z_p.dim() != (cfg.window, cfg.d_model) || z_x.dim() != (cfg.patches(), cfg.d_model) {
        return Err(Error::ShapeMismatch(format!("streams {:?} / {:?}", z_p.dim(), z_x.dim())));
    }
    if layer >= cfg.decoder_layers {
        return Err(Error::ShapeMismatch(format!("no decoder layer {layer}")));
    }
    let net = Network::new(cfg);
    let mut tape = Tape::new(&params.tensors);
    let (p, x) = (tape.input(z_p.clone()), tape.input(z_x.clone()));
    let (p, x) = net.two_way_layer(&mut tape, layer, p, x, &mut RunMode::Eval);
    check_finite(tape.value(p), "two-way layer")?;
    check_finite(tape.value(x), "two-way layer")?;
    Ok((tape.value(p).clone(), tape.value(x).clone()))
}

/// Linear head plus row softmax.
pub fn decode_states<F: Float>(z_p: &Array2<F>, head_w: &Array2<F>, head_b: &Array2<F>, levels: &[Level]) -> Result<SegmentationResult> {
    if z_p.ncols() != head_w.nrows() || head_b.dim() != (1, head_w.ncols()) {
        return Err(Error::ShapeMismatch(format!(
            "head {:?}/{:?} for input {:?}",
            head_w.dim(),
            head_b.dim(),
            z_p.dim()
        )));
    }
    let logits = z_p.dot(head_w) + &head_b.row(0);
    Ok(probs_from_logits(&logits, levels))
}

pub fn probs_from_logits<F: Float>(logits: &Array2<F>, levels: &[Level]) -> SegmentationResult {
    let mut probs = logits.mapv(|v| v.to_f64_lossy());
    softmax_rows_inplace(&mut probs);
    SegmentationResult::from_probs(probs, levels)
}

/// Full forward pass for one window.
pub fn forward<F: Float>(x: &Array2<F>, prompts: &PromptSet, params: &ModelParams<F>, mode: RunMode) -> Result<SegmentationResult> {
    let logits = forward_logits(x, prompts, params, mode)?;
    Ok(probs_from_logits(&logits, &params.config.levels))
}

pub fn forward_logits<F: Float>(x: &Array2<F>, prompts: &PromptSet, params: &ModelParams<F>, mut mode: RunMode) -> Result<Array2<F>> {
    let cfg = &params.config;
    let rows = PromptRows::new(prompts, cfg.window, cfg.k_total)?;
    let net = Network::new(cfg);
    let mut tape = Tape::new(&params.tensors);
    let xp = net.patched_input(&mut tape, x)?;
    let z_x = net.encode(&mut tape, xp, &mut mode);
    let logits = net.decode(&mut tape, z_x, &rows, &mut mode);
    check_finite(tape.value(logits), "state head")?;
    Ok(tape.value(logits).clone())
}

/// Prompt embedding without positions, for inspection.
pub fn prompt_embedding<F: Float>(prompts: &PromptSet, params: &ModelParams<F>) -> Result<Array2<F>> {
    embed_prompts(prompts, params.config.window, params.prompt_encoder())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{LabelPrompt, Prompt};

    fn tiny() -> ModelConfig {
        ModelConfig {
            window: 12,
            channels: 2,
            k_total: 3,
            d_model: 8,
            patch_len: 4,
            patch_stride: 2,
            encoder_layers: 1,
            decoder_layers: 2,
            heads: 2,
            dropout: 0.1,
            mlp_hidden: 16,
            levels: vec![],
            normalization: None,
        }
    }

    fn input(cfg: &ModelConfig, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((cfg.window, cfg.channels), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn patch_count_matches_enumeration() {
        for len in 1..=64usize {
            for p in 1..=len {
                for stride in 1..=p {
                    let padded = p + (len - p).div_ceil(stride) * stride;
                    let starts = (0..).map(|i| i * stride).take_while(|&s| s + p <= padded).count();
                    assert_eq!(patch_count(len, p, stride), starts, "{len} {p} {stride}");
                }
            }
        }
        assert_eq!(patch_count(256, 16, 8), 31);
    }

    #[test]
    fn patchify_layout() {
        let x = Array2::from_shape_fn((16, 2), |(t, c)| (t * 10 + c) as f64);
        let p = patchify(&x, 16, 8).unwrap();
        assert_eq!(p.dim(), (1, 32));
        assert_eq!(p.row(0).to_vec(), x.iter().copied().collect::<Vec<_>>());

        let p = patchify(&x, 4, 3).unwrap();
        // T-P = 12 is a multiple of 3: 5 tokens, no padding
        assert_eq!(p.nrows(), 5);
        assert_eq!(p.row(1).to_vec(), vec![30., 31., 40., 41., 50., 51., 60., 61.]);

        let p = patchify(&x, 5, 4).unwrap();
        // 11 is padded to 12 by replicating the last timestep
        assert_eq!(p.nrows(), 4);
        assert_eq!(p.row(3).to_vec(), vec![120., 121., 130., 131., 140., 141., 150., 151., 150., 151.]);

        assert!(patchify(&Array2::<f64>::zeros((256, 3)), 16, 8).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(patchify(&x, 17, 8), Err(Error::PatchTooLong { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = tiny();
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = tiny();
        c.patch_len = 13;
        assert!(matches!(c.validate(), Err(Error::PatchTooLong { .. })));
        let mut c = tiny();
        c.patch_stride = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn encoder_shape_determinism_and_equivariance() {
        let cfg = tiny();
        let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let x = patchify(&input(&cfg, 2), cfg.patch_len, cfg.patch_stride).unwrap();
        let z = encode_series(&x, &params).unwrap();
        assert_eq!(z.dim(), (cfg.patches(), cfg.d_model));
        assert_eq!(z, encode_series(&x, &params).unwrap());

        let (i, j) = (1, 3);
        let mut xs = x.clone();
        swap_rows(&mut xs, i, j);
        let mut ps = params.clone();
        let pos = params.layout().patch_pos;
        swap_rows(&mut ps.tensors[pos], i, j);
        let mut expect = z.clone();
        swap_rows(&mut expect, i, j);
        let got = encode_series(&xs, &ps).unwrap();
        let err = (&got - &expect).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err < 1e-12, "{err}");
    }

    fn swap_rows(m: &mut Array2<f64>, i: usize, j: usize) {
        let a = m.row(i).to_owned();
        let b = m.row(j).to_owned();
        m.row_mut(i).assign(&b);
        m.row_mut(j).assign(&a);
    }

    #[test]
    fn two_way_layer_updates_both_streams() {
        let cfg = tiny();
        let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zp = Array2::from_shape_simple_fn((cfg.window, cfg.d_model), || rng.random_range(-1.0..1.0));
        let zx = Array2::from_shape_simple_fn((cfg.patches(), cfg.d_model), || rng.random_range(-1.0..1.0));
        let (p, x) = two_way_layer(&zp, &zx, &params, 0).unwrap();
        assert_eq!(p.dim(), zp.dim());
        assert_eq!(x.dim(), zx.dim());
        let delta = (&x - &zx).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(delta > 0.0);
        assert!(two_way_layer(&zx, &zx, &params, 0).is_err());
    }

    #[test]
    fn decode_uniform_and_shift_invariance() {
        let z = Array2::from_shape_fn((5, 3), |(i, j)| (i + j) as f64);
        let w = Array2::<f64>::zeros((3, 4));
        let b = Array2::<f64>::zeros((1, 4));
        let r = decode_states(&z, &w, &b, &[]).unwrap();
        assert!(r.probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert_eq!(r.states, vec![0; 5]);

        let logits = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 1.5);
        let shifted = logits.mapv(|v| v + 37.25);
        let a = probs_from_logits(&logits, &[]);
        let b = probs_from_logits(&shifted, &[]);
        assert!(a.probs.iter().zip(&b.probs).all(|(x, y)| (x - y).abs() < 1e-9));
        assert_eq!(a.states, b.states);
        for row in a.probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
        }
        assert!(decode_states(&z, &Array2::zeros((2, 4)), &b.probs.slice(s![0..1, ..]).to_owned(), &[]).is_err());
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax([0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax([0.5, 0.5]), 0);
    }

    #[test]
    fn forward_shapes_and_eval_determinism() {
        let mut cfg = tiny();
        cfg.levels = vec![Level { name: "a".into(), k: 2 }, Level { name: "b".into(), k: 1 }];
        let params = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let x = input(&cfg, 6);
        let empty = forward(&x, &PromptSet::new(), &params, RunMode::Eval).unwrap();
        assert_eq!(empty.probs.dim(), (cfg.window, cfg.k_total));
        for row in empty.probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        assert_eq!(empty.level_scores.len(), 2);
        assert!((empty.level_scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let mut prompts = PromptSet::new();
        prompts.insert(Prompt::Label(LabelPrompt::positive(3, 2)));
        let a = forward(&x, &prompts, &params, RunMode::Eval).unwrap();
        let b = forward(&x, &prompts, &params, RunMode::Eval).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.probs, empty.probs);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = forward(&x, &prompts, &params, RunMode::Train(&mut rng)).unwrap();
        assert_ne!(t.probs, a.probs);

        prompts.insert(Prompt::Label(LabelPrompt::positive(cfg.window, 0)));
        assert!(forward(&x, &prompts, &params, RunMode::Eval).is_err());
        assert!(forward(&Array2::zeros((3, 2)), &PromptSet::new(), &params, RunMode::Eval).is_err());
    }

    #[test]
    fn cast_round_trip() {
        let params = ModelParams::<f32>::init(&tiny(), 9).unwrap();
        let back: ModelParams<f32> = params.cast::<f64>().cast();
        assert_eq!(back, params);
        assert!(params.validate().is_ok());
    }
}
