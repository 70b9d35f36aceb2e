//! Dense f32 tensors with an explicit layout tag.
//!
//! Storage is always contiguous row-major over `dims`. The layout tag records
//! how the axes should be read: `RowMajor` is the plain `(B, S, C)` token-major
//! convention, while `ChannelsFirst4D` marks a rank-4 `(B, C, 1, S)` tensor
//! whose sequence axis is the innermost one.

use crate::error::{invalid, shape_err, Error, Result};

pub const MAX_RANK: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    RowMajor,
    ChannelsFirst4D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
    layout: Layout,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::with_layout(dims, data, Layout::RowMajor)
    }

    pub fn with_layout(dims: &[usize], data: Vec<f32>, layout: Layout) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::RankTooLarge(dims.len()));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(shape_err(format!(
                "dims {dims:?} hold {n} values but {} were given",
                data.len()
            )));
        }
        if layout == Layout::ChannelsFirst4D && (dims.len() != 4 || dims[2] != 1) {
            return Err(Error::Layout(format!(
                "channels-first tensors are (B, C, 1, S), got {dims:?}"
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
            layout,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, vec![0.0; n])
    }

    pub fn full(dims: &[usize], value: f32) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            dims: Vec::new(),
            data: vec![value],
            layout: Layout::RowMajor,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    /// Same storage, new dims. The layout resets to row-major.
    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            layout: self.layout,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, what: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err(format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }
}

/// Largest absolute difference divided by the largest magnitude of `reference`.
///
/// Returns the absolute difference when the reference is identically zero.
pub fn relative_error(actual: &[f32], reference: &[f32]) -> f64 {
    assert_eq!(actual.len(), reference.len(), "length mismatch");
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&a, &r) in actual.iter().zip(reference) {
        diff = diff.max((a as f64 - r as f64).abs());
        scale = scale.max((r as f64).abs());
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Row-wise softmax over the last axis, with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    softmax_rows_in_place(out.data_mut(), x.last_dim())?;
    Ok(out)
}

pub(crate) fn softmax_rows_in_place(data: &mut [f32], row_len: usize) -> Result<()> {
    if row_len == 0 {
        return Err(invalid("softmax over an empty last axis"));
    }
    for row in data.chunks_exact_mut(row_len) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if !max.is_finite() {
            return Err(Error::NonFinite("softmax logits"));
        }
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(())
}

pub const DEFAULT_RMS_EPS: f32 = 1e-6;

/// Divides each last-axis slice by `sqrt(mean(x^2) + eps)` and multiplies by `gain`.
///
/// `eps = 0` is accepted so the closed-form case can be checked exactly; a zero
/// slice then maps to zero rather than NaN.
pub fn rms_normalize(x: &Tensor, gain: &[f32], eps: f32) -> Result<Tensor> {
    let n = x.last_dim();
    if gain.len() != n {
        return Err(shape_err(format!(
            "gain has {} entries, last axis has {n}",
            gain.len()
        )));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(invalid("eps must be nonnegative"));
    }
    let mut out = x.clone();
    if n > 0 {
        for row in out.data_mut().chunks_exact_mut(n) {
            rms_row(row, gain, eps);
        }
    }
    Ok(out)
}

pub(crate) fn rms_row(row: &mut [f32], gain: &[f32], eps: f32) {
    let ms = row.iter().map(|v| v * v).sum::<f32>() / row.len() as f32;
    let denom = (ms + eps).sqrt();
    let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    for (v, g) in row.iter_mut().zip(gain) {
        *v = *v * inv * g;
    }
}

/// Converts between `(B, S, C)` row-major and `(B, C, 1, S)` channels-first.
///
/// Element `(b, s, c)` of a row-major tensor lands at `(b, c, 0, s)`.
pub fn layout_convert(x: &Tensor, target: Layout) -> Result<Tensor> {
    match (x.layout, target, x.rank()) {
        (Layout::RowMajor, Layout::ChannelsFirst4D, 3) => {
            let (b, s, c) = (x.dims[0], x.dims[1], x.dims[2]);
            let mut out = vec![0.0f32; x.len()];
            for bi in 0..b {
                let src = &x.data[bi * s * c..(bi + 1) * s * c];
                let dst = &mut out[bi * s * c..(bi + 1) * s * c];
                transpose_into(src, s, c, dst);
            }
            Tensor::with_layout(&[b, c, 1, s], out, Layout::ChannelsFirst4D)
        }
        (Layout::ChannelsFirst4D, Layout::RowMajor, 4) => {
            let (b, c, s) = (x.dims[0], x.dims[1], x.dims[3]);
            let mut out = vec![0.0f32; x.len()];
            for bi in 0..b {
                let src = &x.data[bi * s * c..(bi + 1) * s * c];
                let dst = &mut out[bi * s * c..(bi + 1) * s * c];
                transpose_into(src, c, s, dst);
            }
            Tensor::new(&[b, s, c], out)
        }
        (from, to, rank) => Err(Error::Layout(format!(
            "{from:?} rank {rank} -> {to:?}"
        ))),
    }
}

/// `dst[j * rows + i] = src[i * cols + j]` for a `rows x cols` source.
pub(crate) fn transpose_into(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    const BLOCK: usize = 32;
    for i0 in (0..rows).step_by(BLOCK) {
        for j0 in (0..cols).step_by(BLOCK) {
            for i in i0..(i0 + BLOCK).min(rows) {
                for j in j0..(j0 + BLOCK).min(cols) {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
}
