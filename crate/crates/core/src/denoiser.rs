//! Hybrid linear/softmax attention DiT velocity predictor.
//!
//! Block math, with per-token modulation `(shift, scale, gate)` for the
//! attention and feed-forward branches taken from `silu(c) W_mod + b_mod`:
//!
//! ```text
//! x = x + gate_a * attn(norm(x) * (1 + scale_a) + shift_a)
//! x = x + gate_f * ffn(norm(x) * (1 + scale_f) + shift_f)
//! ffn(u) = gelu(u W_1 + b_1) W_2 + b_2
//! ```
//!
//! `norm` is an RMS normalization without learned gain. The stack ends with a
//! modulated norm and a zero-initialized projection back to 128 channels.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attention::{attend, AttentionKind, AttentionParams, ExecStrategy, Pos3, QkNorm, RopeConfig};
use crate::contract::{contract_into, Contraction};
use crate::error::{invalid, shape_err, Error, Result};
use crate::flow::{VelocityModel, LATENT_CHANNELS};
use crate::rng::{random_normal, Rng};
use crate::tensor::{rms_row, Tensor, DEFAULT_RMS_EPS};

/// Timesteps in `[0, 1]` are multiplied by this before the sinusoidal ladder.
pub const TIME_SCALE: f64 = 1000.0;
/// Motion scores in `[0, 10]` are multiplied by this before the sinusoidal ladder.
pub const MOTION_SCALE: f64 = 100.0;
pub const MAX_MOTION: f32 = 10.0;
const FREQ_BASE: f64 = 10_000.0;

/// Where rotary position encoding is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopePlacement {
    None,
    #[default]
    SoftmaxOnly,
    AllLayers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Zero-based indices of softmax layers; all others use linear attention.
    pub softmax_layers: BTreeSet<usize>,
    pub latent_channels: usize,
    pub cond_dim: usize,
    pub qk_norm: bool,
    pub rope: RopePlacement,
    pub strategy: ExecStrategy,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DenoiserConfig {
    /// 16 layers at a width small enough to run full 720p token grids on a CPU.
    pub fn desk() -> Self {
        Self {
            layers: 16,
            hidden: 64,
            heads: 4,
            ffn_mult: 4,
            softmax_layers: [7, 15].into_iter().collect(),
            latent_channels: LATENT_CHANNELS,
            cond_dim: 64,
            qk_norm: true,
            rope: RopePlacement::SoftmaxOnly,
            strategy: ExecStrategy::ALL,
        }
    }

    /// Full-width estimate (about 0.28B parameters). The width and head count
    /// are assumptions, not published values.
    pub fn full() -> Self {
        Self {
            hidden: 1152,
            heads: 16,
            cond_dim: 256,
            ..Self::desk()
        }
    }

    /// Two layers, width 8, softmax at index 1.
    pub fn micro() -> Self {
        Self {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn_mult: 4,
            softmax_layers: [1].into_iter().collect(),
            latent_channels: LATENT_CHANNELS,
            cond_dim: 8,
            qk_norm: false,
            rope: RopePlacement::SoftmaxOnly,
            strategy: ExecStrategy::ALL,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if let Some(&bad) = self.softmax_layers.iter().find(|&&i| i >= self.layers) {
            return Err(Error::Config(format!(
                "softmax layer {bad} is outside 0..{}",
                self.layers
            )));
        }
        if self.latent_channels != LATENT_CHANNELS {
            return Err(Error::Config(format!(
                "latent channels are fixed at {LATENT_CHANNELS}"
            )));
        }
        if self.cond_dim == 0 || self.cond_dim % 2 != 0 {
            return Err(Error::Config("cond_dim must be positive and even".into()));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        if self.rope != RopePlacement::None {
            RopeConfig::for_head_dim(self.head_dim())
                .map_err(|e| Error::Config(format!("rotary encoding: {e}")))?;
        }
        Ok(())
    }

    pub fn layer_kind(&self, layer: usize) -> AttentionKind {
        if self.softmax_layers.contains(&layer) {
            AttentionKind::Softmax
        } else {
            AttentionKind::Linear
        }
    }

    pub fn layer_kinds(&self) -> Vec<AttentionKind> {
        (0..self.layers).map(|l| self.layer_kind(l)).collect()
    }

    fn layer_rope(&self, layer: usize) -> Result<Option<RopeConfig>> {
        let on = match self.rope {
            RopePlacement::None => false,
            RopePlacement::SoftmaxOnly => self.layer_kind(layer) == AttentionKind::Softmax,
            RopePlacement::AllLayers => true,
        };
        if on {
            Ok(Some(RopeConfig::for_head_dim(self.head_dim())?))
        } else {
            Ok(None)
        }
    }
}

/// Exact number of weight scalars:
///
/// ```text
/// input      128 C + C
/// embedder   2 (D^2 + D)                          D = cond_dim
/// per block  4 C^2 + [2 C if qk_norm] + 2 f C^2 + f C + C + 6 C D + 6 C
/// final      2 C D + 2 C + 128 C + 128
/// ```
pub fn parameter_count(config: &DenoiserConfig) -> Result<u64> {
    config.validate()?;
    let c = config.hidden as u64;
    let d = config.cond_dim as u64;
    let f = config.ffn_mult as u64;
    let lat = config.latent_channels as u64;
    let input = lat * c + c;
    let embedder = 2 * (d * d + d);
    let qk = if config.qk_norm { 2 * c } else { 0 };
    let block = 4 * c * c + qk + 2 * f * c * c + f * c + c + 6 * c * d + 6 * c;
    let fin = 2 * c * d + 2 * c + c * lat + lat;
    Ok(input + embedder + config.layers as u64 * block + fin)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn: AttentionParams,
    pub ffn_in: Tensor,
    pub ffn_in_bias: Tensor,
    pub ffn_out: Tensor,
    pub ffn_out_bias: Tensor,
    /// `(cond_dim, 6C)`: shift, scale, gate for attention, then for the ffn.
    pub modulation: Tensor,
    pub modulation_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights {
    pub input: Tensor,
    pub input_bias: Tensor,
    pub embed_in: Tensor,
    pub embed_in_bias: Tensor,
    pub embed_out: Tensor,
    pub embed_out_bias: Tensor,
    pub blocks: Vec<BlockWeights>,
    /// `(cond_dim, 2C)`: shift, then scale.
    pub final_modulation: Tensor,
    pub final_modulation_bias: Tensor,
    pub output: Tensor,
    pub output_bias: Tensor,
}

/// Matrices from `N(0, 1 / fan_in)`, drawn in entry-name order from one stream;
/// biases, the output projection and the modulation gate columns start at zero.
pub fn init_weights(config: &DenoiserConfig, seed: u64) -> Result<DenoiserWeights> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let (c, d, lat) = (config.hidden, config.cond_dim, config.latent_channels);
    let fc = config.ffn_mult * c;
    let mut mat = |rows: usize, cols: usize| -> Result<Tensor> {
        let scale = 1.0 / (rows as f32).sqrt();
        Ok(random_normal(&mut rng, &[rows, cols])?.map(|v| v * scale))
    };
    let zeros = |n: usize| Tensor::zeros(&[n]);

    let input = mat(lat, c)?;
    let embed_in = mat(d, d)?;
    let embed_out = mat(d, d)?;
    let mut blocks = Vec::with_capacity(config.layers);
    for layer in 0..config.layers {
        let (wq, wk, wv, wo) = (mat(c, c)?, mat(c, c)?, mat(c, c)?, mat(c, c)?);
        let ffn_in = mat(c, fc)?;
        let ffn_out = mat(fc, c)?;
        let mut modulation = mat(d, 6 * c)?;
        for row in modulation.data_mut().chunks_exact_mut(6 * c) {
            row[2 * c..3 * c].fill(0.0);
            row[5 * c..6 * c].fill(0.0);
        }
        blocks.push(BlockWeights {
            attn: build_attention(config, layer, wq, wk, wv, wo, None)?,
            ffn_in,
            ffn_in_bias: zeros(fc)?,
            ffn_out,
            ffn_out_bias: zeros(c)?,
            modulation,
            modulation_bias: zeros(6 * c)?,
        });
    }
    let final_modulation = mat(d, 2 * c)?;
    Ok(DenoiserWeights {
        input,
        input_bias: zeros(c)?,
        embed_in,
        embed_in_bias: zeros(d)?,
        embed_out,
        embed_out_bias: zeros(d)?,
        blocks,
        final_modulation,
        final_modulation_bias: zeros(2 * c)?,
        output: Tensor::zeros(&[c, lat])?,
        output_bias: zeros(lat)?,
    })
}

fn build_attention(
    config: &DenoiserConfig,
    layer: usize,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    gains: Option<(Vec<f32>, Vec<f32>)>,
) -> Result<AttentionParams> {
    let mut p = AttentionParams::new(wq, wk, wv, wo, config.heads)?;
    if config.qk_norm {
        let (q_gain, k_gain) =
            gains.unwrap_or_else(|| (vec![1.0; config.hidden], vec![1.0; config.hidden]));
        p = p.with_qk_norm(QkNorm { q_gain, k_gain })?;
    }
    if let Some(r) = config.layer_rope(layer)? {
        p = p.with_rope(r)?;
    }
    Ok(p)
}

impl DenoiserWeights {
    /// Named tensors in a fixed order, for the tensor container.
    ///
    /// `input.{weight,bias}`, `embed.{0,1}.{weight,bias}`,
    /// `blocks.{i}.attn.{q,k,v,o}`, `blocks.{i}.attn.{q_gain,k_gain}` (with qk-norm),
    /// `blocks.{i}.ffn.{0,1}.{weight,bias}`, `blocks.{i}.modulation.{weight,bias}`,
    /// `final.modulation.{weight,bias}`, `output.{weight,bias}`.
    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("input.weight".to_string(), self.input.clone()),
            ("input.bias".into(), self.input_bias.clone()),
            ("embed.0.weight".into(), self.embed_in.clone()),
            ("embed.0.bias".into(), self.embed_in_bias.clone()),
            ("embed.1.weight".into(), self.embed_out.clone()),
            ("embed.1.bias".into(), self.embed_out_bias.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.attn.q"), b.attn.w_q.clone()));
            out.push((format!("{p}.attn.k"), b.attn.w_k.clone()));
            out.push((format!("{p}.attn.v"), b.attn.w_v.clone()));
            out.push((format!("{p}.attn.o"), b.attn.w_o.clone()));
            if let Some(n) = &b.attn.qk_norm {
                let len = n.q_gain.len();
                out.push((format!("{p}.attn.q_gain"), Tensor::new(&[len], n.q_gain.clone()).expect("gain")));
                out.push((format!("{p}.attn.k_gain"), Tensor::new(&[len], n.k_gain.clone()).expect("gain")));
            }
            out.push((format!("{p}.ffn.0.weight"), b.ffn_in.clone()));
            out.push((format!("{p}.ffn.0.bias"), b.ffn_in_bias.clone()));
            out.push((format!("{p}.ffn.1.weight"), b.ffn_out.clone()));
            out.push((format!("{p}.ffn.1.bias"), b.ffn_out_bias.clone()));
            out.push((format!("{p}.modulation.weight"), b.modulation.clone()));
            out.push((format!("{p}.modulation.bias"), b.modulation_bias.clone()));
        }
        out.push(("final.modulation.weight".into(), self.final_modulation.clone()));
        out.push(("final.modulation.bias".into(), self.final_modulation_bias.clone()));
        out.push(("output.weight".into(), self.output.clone()));
        out.push(("output.bias".into(), self.output_bias.clone()));
        out
    }

    pub fn from_entries(config: &DenoiserConfig, entries: &[(String, Tensor)]) -> Result<Self> {
        config.validate()?;
        let (c, d, lat) = (config.hidden, config.cond_dim, config.latent_channels);
        let fc = config.ffn_mult * c;
        let take = |name: &str, dims: &[usize]| -> Result<Tensor> {
            let t = entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::MissingEntry(name.to_string()))?;
            if t.dims() != dims {
                return Err(shape_err(format!("{name} is {:?}, expected {dims:?}", t.dims())));
            }
            t.ensure_finite("weight entry")
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for layer in 0..config.layers {
            let p = format!("blocks.{layer}");
            let gains = if config.qk_norm {
                Some((
                    take(&format!("{p}.attn.q_gain"), &[c])?.into_data(),
                    take(&format!("{p}.attn.k_gain"), &[c])?.into_data(),
                ))
            } else {
                None
            };
            let attn = build_attention(
                config,
                layer,
                take(&format!("{p}.attn.q"), &[c, c])?,
                take(&format!("{p}.attn.k"), &[c, c])?,
                take(&format!("{p}.attn.v"), &[c, c])?,
                take(&format!("{p}.attn.o"), &[c, c])?,
                gains,
            )?;
            blocks.push(BlockWeights {
                attn,
                ffn_in: take(&format!("{p}.ffn.0.weight"), &[c, fc])?,
                ffn_in_bias: take(&format!("{p}.ffn.0.bias"), &[fc])?,
                ffn_out: take(&format!("{p}.ffn.1.weight"), &[fc, c])?,
                ffn_out_bias: take(&format!("{p}.ffn.1.bias"), &[c])?,
                modulation: take(&format!("{p}.modulation.weight"), &[d, 6 * c])?,
                modulation_bias: take(&format!("{p}.modulation.bias"), &[6 * c])?,
            });
        }
        Ok(Self {
            input: take("input.weight", &[lat, c])?,
            input_bias: take("input.bias", &[c])?,
            embed_in: take("embed.0.weight", &[d, d])?,
            embed_in_bias: take("embed.0.bias", &[d])?,
            embed_out: take("embed.1.weight", &[d, d])?,
            embed_out_bias: take("embed.1.bias", &[d])?,
            blocks,
            final_modulation: take("final.modulation.weight", &[d, 2 * c])?,
            final_modulation_bias: take("final.modulation.bias", &[2 * c])?,
            output: take("output.weight", &[c, lat])?,
            output_bias: take("output.bias", &[lat])?,
        })
    }

    pub fn scalar_count(&self) -> u64 {
        self.to_entries().iter().map(|(_, t)| t.len() as u64).sum()
    }
}

/// Per-token conditioning. `positions` may be empty when no layer uses rotary encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningInputs {
    pub token_timesteps: Vec<f32>,
    pub motion_score: f32,
    pub positions: Vec<Pos3>,
}

impl ConditioningInputs {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.token_timesteps.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain(format!("token timestep {t} outside [0, 1]")));
        }
        if !self.motion_score.is_finite() || !(0.0..=MAX_MOTION).contains(&self.motion_score) {
            return Err(Error::Domain(format!(
                "motion score {} outside [0, {MAX_MOTION}]",
                self.motion_score
            )));
        }
        if !self.positions.is_empty() && self.positions.len() != self.token_timesteps.len() {
            return Err(shape_err(format!(
                "{} positions for {} tokens",
                self.positions.len(),
                self.token_timesteps.len()
            )));
        }
        Ok(())
    }
}

/// `exp(-ln(10000) i / (dim / 2))` for `i` in `0..dim / 2`.
pub fn frequency_ladder(dim: usize) -> Vec<f64> {
    let half = dim / 2;
    (0..half)
        .map(|i| libm::exp(-libm::log(FREQ_BASE) * i as f64 / half as f64))
        .collect()
}

/// `[cos(v f_0), .., cos(v f_{h-1}), sin(v f_0), .., sin(v f_{h-1})]`.
pub fn sinusoidal_embedding(value: f64, ladder: &[f64]) -> Vec<f32> {
    let mut out = Vec::with_capacity(2 * ladder.len());
    out.extend(ladder.iter().map(|f| libm::cos(value * f) as f32));
    out.extend(ladder.iter().map(|f| libm::sin(value * f) as f32));
    out
}

/// Per-token conditioning vectors `(N, cond_dim)`:
/// `c = (silu(e W_1 + b_1)) W_2 + b_2` with `e = emb(1000 t_i) + emb(100 m)`.
pub fn condition_embed(
    cond: &ConditioningInputs,
    config: &DenoiserConfig,
    weights: &DenoiserWeights,
) -> Result<Tensor> {
    cond.validate()?;
    let d = config.cond_dim;
    let n = cond.token_timesteps.len();
    let ladder = frequency_ladder(d);
    let motion = sinusoidal_embedding(cond.motion_score as f64 * MOTION_SCALE, &ladder);
    let mut e = Vec::with_capacity(n * d);
    for &t in &cond.token_timesteps {
        let te = sinusoidal_embedding(t as f64 * TIME_SCALE, &ladder);
        e.extend(te.iter().zip(&motion).map(|(a, b)| a + b));
    }
    let mut h = dense(&e, n, &weights.embed_in, Some(&weights.embed_in_bias));
    h.iter_mut().for_each(|v| *v = silu(*v));
    let c = dense(&h, n, &weights.embed_out, Some(&weights.embed_out_bias));
    Tensor::new(&[n, d], c)
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    const K: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (K * (x + 0.044_715 * x * x * x)).tanh())
}

/// `x (rows, in) W (in, out) + bias`.
fn dense(x: &[f32], rows: usize, w: &Tensor, bias: Option<&Tensor>) -> Vec<f32> {
    let (inp, out) = (w.dims()[0], w.dims()[1]);
    let mut y = vec![0.0f32; rows * out];
    contract_into(Contraction::MatMul, x, w.data(), rows, inp, out, &mut y);
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(out) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    y
}

/// RMS-normalizes each row of `x` and applies `(1 + scale) + shift`, taken
/// from columns `scale_at` and `shift_at` of the token's modulation row.
fn modulated_norm(
    x: &[f32],
    c: usize,
    tokens: usize,
    modulation: &[f32],
    mod_width: usize,
    shift_at: usize,
    scale_at: usize,
) -> Vec<f32> {
    let ones = vec![1.0f32; c];
    let mut out = x.to_vec();
    for (r, row) in out.chunks_exact_mut(c).enumerate() {
        rms_row(row, &ones, DEFAULT_RMS_EPS);
        let m = &modulation[(r % tokens) * mod_width..(r % tokens + 1) * mod_width];
        let (shift, scale) = (&m[shift_at..shift_at + c], &m[scale_at..scale_at + c]);
        for ((v, sh), sc) in row.iter_mut().zip(shift).zip(scale) {
            *v = *v * (1.0 + sc) + sh;
        }
    }
    out
}

fn gated_add(x: &mut [f32], update: &[f32], c: usize, tokens: usize, modulation: &[f32], gate_at: usize) {
    let width = 6 * c;
    for (r, (row, up)) in x.chunks_exact_mut(c).zip(update.chunks_exact(c)).enumerate() {
        let gate = &modulation[(r % tokens) * width + gate_at..(r % tokens) * width + gate_at + c];
        for ((v, u), g) in row.iter_mut().zip(up).zip(gate) {
            *v += g * u;
        }
    }
}

/// Velocity prediction for `(B, N, 128)` latent tokens.
pub fn denoiser_forward(
    latent_tokens: &Tensor,
    cond: &ConditioningInputs,
    weights: &DenoiserWeights,
    config: &DenoiserConfig,
) -> Result<Tensor> {
    config.validate()?;
    let lat = config.latent_channels;
    if latent_tokens.rank() != 3 || latent_tokens.dims()[2] != lat {
        return Err(shape_err(format!(
            "latent tokens must be (B, N, {lat}), got {:?}",
            latent_tokens.dims()
        )));
    }
    if weights.blocks.len() != config.layers {
        return Err(invalid(format!(
            "{} weight blocks for {} layers",
            weights.blocks.len(),
            config.layers
        )));
    }
    let (b, n) = (latent_tokens.dims()[0], latent_tokens.dims()[1]);
    if cond.token_timesteps.len() != n {
        return Err(shape_err(format!(
            "{} timesteps for {n} tokens",
            cond.token_timesteps.len()
        )));
    }
    let c = config.hidden;
    let rows = b * n;
    let positions = (!cond.positions.is_empty()).then_some(cond.positions.as_slice());

    let cvec = condition_embed(cond, config, weights)?;
    let act: Vec<f32> = cvec.data().iter().map(|&v| silu(v)).collect();

    let mut x = dense(latent_tokens.data(), rows, &weights.input, Some(&weights.input_bias));
    for (layer, blk) in weights.blocks.iter().enumerate() {
        let m = dense(&act, n, &blk.modulation, Some(&blk.modulation_bias));
        let a_in = modulated_norm(&x, c, n, &m, 6 * c, 0, c);
        let a_in = Tensor::new(&[b, n, c], a_in)?;
        let a = attend(config.layer_kind(layer), &a_in, positions, &blk.attn, config.strategy)?;
        gated_add(&mut x, a.data(), c, n, &m, 2 * c);

        let f_in = modulated_norm(&x, c, n, &m, 6 * c, 3 * c, 4 * c);
        let mut hdn = dense(&f_in, rows, &blk.ffn_in, Some(&blk.ffn_in_bias));
        hdn.iter_mut().for_each(|v| *v = gelu(*v));
        let f = dense(&hdn, rows, &blk.ffn_out, Some(&blk.ffn_out_bias));
        gated_add(&mut x, &f, c, n, &m, 5 * c);
    }
    let fm = dense(&act, n, &weights.final_modulation, Some(&weights.final_modulation_bias));
    let y = modulated_norm(&x, c, n, &fm, 2 * c, 0, c);
    let out = dense(&y, rows, &weights.output, Some(&weights.output_bias));
    Tensor::new(latent_tokens.dims(), out)?.ensure_finite("denoiser output")
}

/// A configured network with its weights.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub weights: DenoiserWeights,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, weights: DenoiserWeights) -> Result<Self> {
        config.validate()?;
        if weights.blocks.len() != config.layers {
            return Err(invalid("weight blocks do not match layer count"));
        }
        Ok(Self { config, weights })
    }

    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let weights = init_weights(&config, seed)?;
        Ok(Self { config, weights })
    }

    pub fn forward(&self, latent_tokens: &Tensor, cond: &ConditioningInputs) -> Result<Tensor> {
        denoiser_forward(latent_tokens, cond, &self.weights, &self.config)
    }
}

impl VelocityModel for Denoiser {
    fn predict(&self, z: &Tensor, cond: &ConditioningInputs) -> Result<Tensor> {
        let (n, d) = (z.dims()[0], z.last_dim());
        let out = self.forward(&z.clone().reshape(&[1, n, d])?, cond)?;
        out.reshape(&[n, d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond(n: usize, t: f32) -> ConditioningInputs {
        ConditioningInputs {
            token_timesteps: vec![t; n],
            motion_score: 2.0,
            positions: (0..n as i64).map(|i| [0, i / 4, i % 4]).collect(),
        }
    }

    #[test]
    fn default_layer_schedule() {
        let kinds = DenoiserConfig::desk().layer_kinds();
        assert_eq!(kinds.len(), 16);
        for (i, k) in kinds.iter().enumerate() {
            let want = if i == 7 || i == 15 {
                AttentionKind::Softmax
            } else {
                AttentionKind::Linear
            };
            assert_eq!(*k, want, "layer {i}");
        }
    }

    #[test]
    fn config_validation() {
        let mut c = DenoiserConfig::micro();
        c.softmax_layers.insert(2);
        assert!(c.validate().is_err());
        let mut c = DenoiserConfig::micro();
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_weights(&DenoiserConfig::micro(), 5).unwrap();
        let b = init_weights(&DenoiserConfig::micro(), 5).unwrap();
        assert_eq!(a, b);
        let c = init_weights(&DenoiserConfig::micro(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_variance_of_square_matrix() {
        let cfg = DenoiserConfig {
            hidden: 64,
            heads: 4,
            ..DenoiserConfig::micro()
        };
        let w = init_weights(&cfg, 11).unwrap();
        let m = &w.blocks[0].attn.w_q;
        let n = m.len() as f64;
        let mean = m.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = m.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((var * 64.0 - 1.0).abs() < 0.2, "var {var}");
    }

    #[test]
    fn zero_init_outputs_zero() {
        let cfg = DenoiserConfig::micro();
        let w = init_weights(&cfg, 1).unwrap();
        let x = random_normal(&mut Rng::new(2), &[2, 6, 128]).unwrap();
        let y = denoiser_forward(&x, &cond(6, 0.4), &w, &cfg).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perturbed_output_projection_is_nonzero() {
        let cfg = DenoiserConfig::micro();
        let mut w = init_weights(&cfg, 1).unwrap();
        w.output = random_normal(&mut Rng::new(3), &[cfg.hidden, 128]).unwrap();
        let x = random_normal(&mut Rng::new(2), &[1, 6, 128]).unwrap();
        let y = denoiser_forward(&x, &cond(6, 0.4), &w, &cfg).unwrap();
        assert!(y.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn parameter_count_matches_weights() {
        for cfg in [DenoiserConfig::micro(), DenoiserConfig::desk()] {
            let w = init_weights(&cfg, 0).unwrap();
            assert_eq!(parameter_count(&cfg).unwrap(), w.scalar_count());
        }
    }

    #[test]
    fn parameter_count_micro_fixture() {
        // input 128*8+8 = 1032; embedder 2*(64+8) = 144;
        // block 4*64 + (8*32+32+32*8+8) + (8*48+48) = 256 + 552 + 432 = 1240;
        // final 8*16+16 = 144; output 8*128+128 = 1152.
        let cfg = DenoiserConfig {
            layers: 1,
            softmax_layers: BTreeSet::new(),
            ..DenoiserConfig::micro()
        };
        assert_eq!(parameter_count(&cfg).unwrap(), 3712);
        let zero = DenoiserConfig {
            layers: 0,
            ..cfg
        };
        assert_eq!(parameter_count(&zero).unwrap(), 1032 + 144 + 144 + 1152);
    }

    #[test]
    fn parameter_count_grows_with_width() {
        let mut prev = 0;
        for hidden in [8, 16, 24, 32, 64] {
            let cfg = DenoiserConfig {
                hidden,
                ..DenoiserConfig::micro()
            };
            let n = parameter_count(&cfg).unwrap();
            assert!(n > prev);
            prev = n;
        }
    }

    #[test]
    fn full_is_about_a_quarter_billion() {
        let n = parameter_count(&DenoiserConfig::full()).unwrap();
        assert!((2.0e8..3.5e8).contains(&(n as f64)), "{n}");
    }

    #[test]
    fn embedding_properties() {
        let cfg = DenoiserConfig::micro();
        let w = init_weights(&cfg, 4).unwrap();
        let mut c = cond(3, 0.3);
        c.token_timesteps = vec![0.0, 0.3, 0.3];
        let e = condition_embed(&c, &cfg, &w).unwrap();
        let d = cfg.cond_dim;
        assert_eq!(&e.data()[d..2 * d], &e.data()[2 * d..3 * d]);
        c.token_timesteps = vec![0.0, 1.0, 1.0];
        let e = condition_embed(&c, &cfg, &w).unwrap();
        let dist: f32 = (0..d).map(|i| (e.data()[i] - e.data()[d + i]).powi(2)).sum();
        assert!(dist > 0.0);
        c.token_timesteps = vec![0.0, 1.5, 1.0];
        assert!(condition_embed(&c, &cfg, &w).is_err());
    }

    #[test]
    fn ladder_against_closed_form() {
        let d = 16;
        let ladder = frequency_ladder(d);
        let emb = sinusoidal_embedding(0.5 * TIME_SCALE, &ladder);
        for i in 0..d / 2 {
            let f = (-(10_000f64).ln() * i as f64 / (d / 2) as f64).exp();
            assert!((emb[i] as f64 - (500.0 * f).cos()).abs() <= 1e-6);
            assert!((emb[d / 2 + i] as f64 - (500.0 * f).sin()).abs() <= 1e-6);
        }
    }

    #[test]
    fn weight_entries_round_trip() {
        let mut cfg = DenoiserConfig::micro();
        cfg.qk_norm = true;
        let w = init_weights(&cfg, 8).unwrap();
        let back = DenoiserWeights::from_entries(&cfg, &w.to_entries()).unwrap();
        assert_eq!(w, back);
        let mut entries = w.to_entries();
        entries.retain(|(n, _)| n != "output.bias");
        assert!(matches!(
            DenoiserWeights::from_entries(&cfg, &entries),
            Err(Error::MissingEntry(_))
        ));
    }
}
