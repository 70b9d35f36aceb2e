//! Three-axis rotary position encoding.
//!
//! A head vector of width `d` is split into three even sub-blocks assigned to
//! the time, height and width axes. Within the sub-block of width `da`, pair
//! `(2i, 2i + 1)` is rotated by `pos_axis * base^(-2i / da)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// `(t, h, w)` coordinate of a latent token.
pub type Pos3 = [i64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub base: f32,
    /// Widths of the time, height and width sub-blocks; they sum to the head width.
    pub axis_dims: [usize; 3],
}

impl RopeConfig {
    /// Default split of a head of width `d`: height and width get `floor(pairs / 3)`
    /// pairs each, time gets the rest.
    pub fn for_head_dim(d: usize) -> Result<Self> {
        if d % 2 != 0 {
            return Err(invalid(format!("rotary head width {d} is odd")));
        }
        let pairs = d / 2;
        let hw = pairs / 3;
        let cfg = Self {
            base: 10_000.0,
            axis_dims: [2 * (pairs - 2 * hw), 2 * hw, 2 * hw],
        };
        cfg.validate(d)?;
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.axis_dims.iter().sum()
    }

    pub fn validate(&self, head_dim: usize) -> Result<()> {
        if let Some(odd) = self.axis_dims.iter().find(|&&a| a % 2 != 0) {
            return Err(invalid(format!("rotary sub-block of width {odd} is odd")));
        }
        if self.head_dim() != head_dim {
            return Err(invalid(format!(
                "rotary sub-blocks {:?} do not cover head width {head_dim}",
                self.axis_dims
            )));
        }
        if !(self.base.is_finite() && self.base > 0.0) {
            return Err(invalid("rotary base must be positive"));
        }
        Ok(())
    }

    /// Per-token `(cos, sin)` pairs, `d / 2` of them per token, in head order.
    pub(crate) fn table(&self, positions: &[Pos3]) -> RopeTable {
        let pairs = self.head_dim() / 2;
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for pos in positions {
            for (axis, &da) in self.axis_dims.iter().enumerate() {
                for i in 0..da / 2 {
                    let freq = libm::pow(self.base as f64, -(2.0 * i as f64) / da as f64);
                    let angle = pos[axis] as f64 * freq;
                    cos.push(libm::cos(angle) as f32);
                    sin.push(libm::sin(angle) as f32);
                }
            }
        }
        RopeTable { pairs, cos, sin }
    }
}

pub(crate) struct RopeTable {
    pairs: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    /// Rotates one head vector of token `token` in place.
    pub(crate) fn rotate(&self, token: usize, v: &mut [f32]) {
        let c = &self.cos[token * self.pairs..(token + 1) * self.pairs];
        let s = &self.sin[token * self.pairs..(token + 1) * self.pairs];
        for (p, pair) in v.chunks_exact_mut(2).enumerate() {
            let (x0, x1) = (pair[0], pair[1]);
            pair[0] = x0 * c[p] - x1 * s[p];
            pair[1] = x0 * s[p] + x1 * c[p];
        }
    }
}

/// Rotates every head of a `(B, S, C)` query or key tensor.
pub fn apply_rope3d(x: &Tensor, positions: &[Pos3], rope: &RopeConfig) -> Result<Tensor> {
    let d = rope.head_dim();
    rope.validate(d)?;
    if x.rank() != 3 {
        return Err(shape_err(format!("expected (B, S, C), got {:?}", x.dims())));
    }
    let (s, c) = (x.dims()[1], x.dims()[2]);
    if d == 0 || c % d != 0 {
        return Err(shape_err(format!("width {c} is not a multiple of head width {d}")));
    }
    if positions.len() != s {
        return Err(shape_err(format!(
            "{} positions for {s} tokens",
            positions.len()
        )));
    }
    let table = rope.table(positions);
    let mut out = x.clone();
    for (row_idx, row) in out.data_mut().chunks_exact_mut(c).enumerate() {
        let token = row_idx % s;
        for head in row.chunks_exact_mut(d) {
            table.rotate(token, head);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{random_normal, Rng};

    fn cfg() -> RopeConfig {
        RopeConfig {
            base: 10_000.0,
            axis_dims: [4, 2, 2],
        }
    }

    #[test]
    fn default_split_is_even_and_complete() {
        for d in [2, 4, 8, 16, 32, 64, 72] {
            let r = RopeConfig::for_head_dim(d).unwrap();
            assert_eq!(r.head_dim(), d);
            assert!(r.axis_dims.iter().all(|a| a % 2 == 0));
        }
        assert_eq!(RopeConfig::for_head_dim(32).unwrap().axis_dims, [12, 10, 10]);
        assert!(RopeConfig::for_head_dim(7).is_err());
    }

    #[test]
    fn odd_sub_block_rejected() {
        let bad = RopeConfig {
            base: 10_000.0,
            axis_dims: [3, 3, 2],
        };
        assert!(bad.validate(8).is_err());
    }

    #[test]
    fn zero_position_is_identity() {
        let x = random_normal(&mut Rng::new(1), &[1, 3, 16]).unwrap();
        let y = apply_rope3d(&x, &[[0, 0, 0]; 3], &cfg()).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn pair_norms_preserved() {
        let x = random_normal(&mut Rng::new(2), &[2, 3, 16]).unwrap();
        let pos = [[1, 2, 3], [4, -5, 6], [100, 7, 0]];
        let y = apply_rope3d(&x, &pos, &cfg()).unwrap();
        for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
            assert!((na - nb).abs() <= 1e-6 * na.max(1.0), "{na} vs {nb}");
        }
    }

    #[test]
    fn first_pair_of_time_axis_rotates_by_position() {
        // i = 0 has frequency 1, so the angle equals the time coordinate.
        let mut v = vec![0.0f32; 8];
        v[0] = 1.0;
        let x = Tensor::new(&[1, 1, 8], v).unwrap();
        let y = apply_rope3d(&x, &[[1, 0, 0]], &cfg()).unwrap();
        assert!((y.data()[0] - 1f32.cos()).abs() < 1e-7);
        assert!((y.data()[1] - 1f32.sin()).abs() < 1e-7);
    }

    #[test]
    fn position_count_must_match() {
        let x = Tensor::zeros(&[1, 2, 8]).unwrap();
        assert!(apply_rope3d(&x, &[[0, 0, 0]], &cfg()).is_err());
    }
}
