//! Softmax and ReLU-kernel linear attention.
//!
//! Both kinds share one execution pipeline (projection, head split, kernel,
//! head merge, output projection) whose data movement is selected by an
//! [`ExecStrategy`]. Every strategy accumulates each output element over the
//! same operands in the same order, so strategies differ in speed only.
//!
//! Linear attention uses `Sim(q, k) = relu(q) . relu(k)` and a denominator
//! stabilizer [`LINEAR_DELTA`]:
//!
//! ```text
//! o_i = relu(q_i) M / (relu(q_i) . kbar + delta),   M = sum_j relu(k_j)^T v_j,
//!                                                   kbar = sum_j relu(k_j)
//! ```

mod bench;
mod kernel;
mod rope;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use bench::{bench_ablation, bench_attention, log_log_slope, BenchShape, LatencyRow};
pub use rope::{apply_rope3d, Pos3, RopeConfig};

use crate::error::{invalid, shape_err, Result};
use crate::rng::{random_normal, Rng};
use crate::tensor::Tensor;

/// Added to the linear-attention denominator; all-negative queries would
/// otherwise divide zero by zero.
pub const LINEAR_DELTA: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Softmax,
    Linear,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Softmax => "softmax",
            Self::Linear => "linear",
        }
    }
}

impl FromStr for AttentionKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "linear" => Ok(Self::Linear),
            other => Err(invalid(format!("unknown attention kind {other:?}"))),
        }
    }
}

/// Execution-path selector. All-false is the baseline path.
///
/// * `channels_first_4d`: projections read and write `(B, C, 1, S)` so each
///   head is a contiguous `(d, S)` tile.
/// * `head_tiling`: heads run one at a time over query tiles instead of one
///   batched call over all heads.
/// * `reduced_data_movement`: skip the reshape/permute copies around the head
///   split and merge; K is the only operand transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ExecStrategy {
    pub channels_first_4d: bool,
    pub head_tiling: bool,
    pub reduced_data_movement: bool,
}

impl ExecStrategy {
    pub const BASELINE: Self = Self {
        channels_first_4d: false,
        head_tiling: false,
        reduced_data_movement: false,
    };

    pub const ALL: Self = Self {
        channels_first_4d: true,
        head_tiling: true,
        reduced_data_movement: true,
    };

    /// The eight flag combinations, baseline first.
    pub fn combinations() -> Vec<Self> {
        (0..8u8)
            .map(|m| Self {
                channels_first_4d: m & 1 != 0,
                head_tiling: m & 2 != 0,
                reduced_data_movement: m & 4 != 0,
            })
            .collect()
    }

    /// `baseline`, `all`, or a `+`-joined list of `4dc`, `ht`, `rdm`.
    pub fn label(&self) -> String {
        if *self == Self::BASELINE {
            return "baseline".into();
        }
        if *self == Self::ALL {
            return "all".into();
        }
        let mut parts = Vec::new();
        if self.channels_first_4d {
            parts.push("4dc");
        }
        if self.head_tiling {
            parts.push("ht");
        }
        if self.reduced_data_movement {
            parts.push("rdm");
        }
        parts.join("+")
    }
}

impl fmt::Display for ExecStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for ExecStrategy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => return Ok(Self::BASELINE),
            "all" => return Ok(Self::ALL),
            _ => {}
        }
        let mut out = Self::BASELINE;
        for part in s.split('+') {
            match part {
                "4dc" => out.channels_first_4d = true,
                "ht" => out.head_tiling = true,
                "rdm" => out.reduced_data_movement = true,
                other => return Err(invalid(format!("unknown strategy {other:?}"))),
            }
        }
        Ok(out)
    }
}

impl Serialize for ExecStrategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for ExecStrategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-head RMS gains applied to queries and keys before the similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct QkNorm {
    /// `heads * head_dim` entries, head-major.
    pub q_gain: Vec<f32>,
    pub k_gain: Vec<f32>,
}

/// Projection weights and head layout of one attention layer.
///
/// Projections multiply on the right: `Q = x W_q` with `W_q` stored `(C_in, C_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
    pub qk_norm: Option<QkNorm>,
    pub rope: Option<RopeConfig>,
}

impl AttentionParams {
    pub fn new(
        w_q: Tensor,
        w_k: Tensor,
        w_v: Tensor,
        w_o: Tensor,
        heads: usize,
    ) -> Result<Self> {
        let p = Self {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
            qk_norm: None,
            rope: None,
        };
        p.validate()?;
        Ok(p)
    }

    /// Projections drawn from `N(0, 1 / C)`.
    pub fn random(channels: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        let scale = 1.0 / (channels as f32).sqrt();
        let mut mat = || -> Result<Tensor> {
            Ok(random_normal(rng, &[channels, channels])?.map(|v| v * scale))
        };
        Self::new(mat()?, mat()?, mat()?, mat()?, heads)
    }

    pub fn with_qk_norm(mut self, norm: QkNorm) -> Result<Self> {
        self.qk_norm = Some(norm);
        self.validate()?;
        Ok(self)
    }

    pub fn with_rope(mut self, rope: RopeConfig) -> Result<Self> {
        self.rope = Some(rope);
        self.validate()?;
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.w_q.dims().first().copied().unwrap_or(0)
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, w) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ] {
            if w.dims() != [c, c] {
                return Err(shape_err(format!("{name} is {:?}, expected [{c}, {c}]", w.dims())));
            }
            if !w.is_finite() {
                return Err(crate::Error::NonFinite("projection matrix"));
            }
        }
        if self.heads == 0 || c % self.heads != 0 {
            return Err(invalid(format!("{c} channels do not split into {} heads", self.heads)));
        }
        if let Some(n) = &self.qk_norm {
            if n.q_gain.len() != c || n.k_gain.len() != c {
                return Err(shape_err("qk-norm gains must hold heads * head_dim entries"));
            }
        }
        if let Some(r) = &self.rope {
            let d = self.head_dim();
            if d < 2 {
                return Err(invalid("rotary encoding needs head width >= 2"));
            }
            r.validate(d)?;
        }
        Ok(())
    }
}

/// Runs either attention kind. `positions` is required when rotary encoding is on.
pub fn attend(
    kind: AttentionKind,
    x: &Tensor,
    positions: Option<&[Pos3]>,
    params: &AttentionParams,
    strategy: ExecStrategy,
) -> Result<Tensor> {
    kernel::run(kind, x, positions, params, strategy)
}

pub fn softmax_attention(
    x: &Tensor,
    params: &AttentionParams,
    strategy: ExecStrategy,
) -> Result<Tensor> {
    attend(AttentionKind::Softmax, x, None, params, strategy)
}

/// O(S) factored linear attention.
pub fn linear_attention_streaming(
    x: &Tensor,
    params: &AttentionParams,
    strategy: ExecStrategy,
) -> Result<Tensor> {
    attend(AttentionKind::Linear, x, None, params, strategy)
}

/// O(S^2) pairwise evaluation of linear attention; the oracle for the streaming form.
pub fn linear_attention_reference(x: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    kernel::linear_reference(x, None, params)
}

pub fn linear_attention_reference_with_positions(
    x: &Tensor,
    positions: Option<&[Pos3]>,
    params: &AttentionParams,
) -> Result<Tensor> {
    kernel::linear_reference(x, positions, params)
}
