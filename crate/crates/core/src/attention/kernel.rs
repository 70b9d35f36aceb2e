//! Shared attention pipeline.
//!
//! Head operands live in one of two orientations:
//! token-major `(n, S, d)` tiles or channel-major `(n, d, S)` tiles, with
//! `n = B * heads` and head `h` of batch `b` at tile `b * heads + h`.
//! Channel-major tiles are exactly the `(B, C, 1, S)` projection output, so
//! they need no copy. Every path sums each output element over the same
//! products in the same order.

use super::rope::{Pos3, RopeTable};
use super::{AttentionKind, AttentionParams, ExecStrategy, LINEAR_DELTA};
use crate::contract::{contract_into, Contraction};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    layout_convert, rms_row, softmax_rows_in_place, transpose_into, Layout, Tensor,
    DEFAULT_RMS_EPS,
};

/// Query rows per tile when head tiling is on.
const QUERY_TILE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Orient {
    TokenMajor,
    ChannelMajor,
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    batch: usize,
    seq: usize,
    heads: usize,
    d: usize,
}

impl Geom {
    fn channels(&self) -> usize {
        self.heads * self.d
    }
    fn tiles(&self) -> usize {
        self.batch * self.heads
    }
    fn tile_len(&self) -> usize {
        self.seq * self.d
    }
}

fn geometry(x: &Tensor, params: &AttentionParams) -> Result<Geom> {
    params.validate()?;
    if x.rank() != 3 {
        return Err(shape_err(format!("attention input must be (B, S, C), got {:?}", x.dims())));
    }
    let (batch, seq, c) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    if c != params.channels() {
        return Err(shape_err(format!(
            "input width {c} does not match projection width {}",
            params.channels()
        )));
    }
    if seq == 0 {
        return Err(shape_err("attention needs at least one token"));
    }
    Ok(Geom {
        batch,
        seq,
        heads: params.heads,
        d: params.head_dim(),
    })
}

fn rope_table(
    params: &AttentionParams,
    positions: Option<&[Pos3]>,
    seq: usize,
) -> Result<Option<RopeTable>> {
    match (&params.rope, positions) {
        (None, _) => Ok(None),
        (Some(_), None) => Err(crate::error::invalid(
            "rotary encoding is enabled but no token positions were given",
        )),
        (Some(r), Some(p)) => {
            if p.len() != seq {
                return Err(shape_err(format!("{} positions for {seq} tokens", p.len())));
            }
            Ok(Some(r.table(p)))
        }
    }
}

pub(super) fn run(
    kind: AttentionKind,
    x: &Tensor,
    positions: Option<&[Pos3]>,
    params: &AttentionParams,
    st: ExecStrategy,
) -> Result<Tensor> {
    let g = geometry(x, params)?;
    let rope = rope_table(params, positions, g.seq)?;
    let orient = if st.channels_first_4d && st.reduced_data_movement {
        Orient::ChannelMajor
    } else {
        Orient::TokenMajor
    };

    let (mut q, mut k, v) = if st.channels_first_4d {
        let xcf = layout_convert(x, Layout::ChannelsFirst4D)?;
        let proj = |w: &Tensor| project_channels_first(xcf.data(), w, g);
        let (q, k, v) = (proj(&params.w_q), proj(&params.w_k), proj(&params.w_v));
        if st.reduced_data_movement {
            (q, k, v)
        } else {
            let split = |t: Vec<f32>| split_heads_naive(&channels_first_to_rows(&t, g), g);
            (split(q), split(k), split(v))
        }
    } else {
        let proj = |w: &Tensor| project_rows(x.data(), w, g);
        let split = |t: Vec<f32>| {
            if st.reduced_data_movement {
                gather_heads(&t, g)
            } else {
                split_heads_naive(&t, g)
            }
        };
        (
            split(proj(&params.w_q)),
            split(proj(&params.w_k)),
            split(proj(&params.w_v)),
        )
    };

    prepare_qk(kind, &mut q, &mut k, params, rope.as_ref(), g, orient);

    let mut o = vec![0.0f32; g.tiles() * g.tile_len()];
    let tile = g.tile_len();
    if st.head_tiling {
        for t in 0..g.tiles() {
            let range = t * tile..(t + 1) * tile;
            run_kernel(
                kind,
                orient,
                &q[range.clone()],
                &k[range.clone()],
                &v[range.clone()],
                1,
                g,
                QUERY_TILE,
                &mut o[range],
            )?;
        }
    } else {
        run_kernel(kind, orient, &q, &k, &v, g.tiles(), g, g.seq, &mut o)?;
    }

    let out = match (orient, st.channels_first_4d) {
        (Orient::ChannelMajor, _) => {
            let y = project_channels_first(&o, &params.w_o, g);
            channels_first_to_rows(&y, g)
        }
        (Orient::TokenMajor, cf) => {
            let rows = if st.reduced_data_movement {
                scatter_heads(&o, g)
            } else {
                merge_heads_naive(&o, g)
            };
            if cf {
                let xcf = rows_to_channels_first(&rows, g);
                channels_first_to_rows(&project_channels_first(&xcf, &params.w_o, g), g)
            } else {
                project_rows(&rows, &params.w_o, g)
            }
        }
    };
    Tensor::new(x.dims(), out)?.ensure_finite("attention output")
}

/// O(S^2) linear attention: every (query, key) similarity is formed explicitly.
pub(super) fn linear_reference(
    x: &Tensor,
    positions: Option<&[Pos3]>,
    params: &AttentionParams,
) -> Result<Tensor> {
    let g = geometry(x, params)?;
    let rope = rope_table(params, positions, g.seq)?;
    let mut q = split_heads_naive(&project_rows(x.data(), &params.w_q, g), g);
    let mut k = split_heads_naive(&project_rows(x.data(), &params.w_k, g), g);
    let v = split_heads_naive(&project_rows(x.data(), &params.w_v, g), g);
    prepare_qk(
        AttentionKind::Linear,
        &mut q,
        &mut k,
        params,
        rope.as_ref(),
        g,
        Orient::TokenMajor,
    );
    let (s, d) = (g.seq, g.d);
    let mut o = vec![0.0f32; q.len()];
    let mut num = vec![0.0f32; d];
    for t in 0..g.tiles() {
        let base = t * s * d;
        for i in 0..s {
            let qi = &q[base + i * d..base + (i + 1) * d];
            num.fill(0.0);
            let mut den = 0.0f32;
            for j in 0..s {
                let kj = &k[base + j * d..base + (j + 1) * d];
                let vj = &v[base + j * d..base + (j + 1) * d];
                let sim: f32 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                den += sim;
                for (n, vv) in num.iter_mut().zip(vj) {
                    *n += sim * vv;
                }
            }
            let den = den + LINEAR_DELTA;
            for (oo, n) in o[base + i * d..base + (i + 1) * d].iter_mut().zip(&num) {
                *oo = n / den;
            }
        }
    }
    let rows = merge_heads_naive(&o, g);
    let out = project_rows(&rows, &params.w_o, g);
    Tensor::new(x.dims(), out)?.ensure_finite("attention output")
}

/// `(B * S, C) x (C, C)`.
fn project_rows(x: &[f32], w: &Tensor, g: Geom) -> Vec<f32> {
    let c = g.channels();
    let mut out = vec![0.0f32; g.batch * g.seq * c];
    contract_into(Contraction::MatMul, x, w.data(), g.batch * g.seq, c, c, &mut out);
    out
}

/// `(B, C, S)` input to `(B, C, S)` output, i.e. a 1x1 convolution.
fn project_channels_first(x: &[f32], w: &Tensor, g: Geom) -> Vec<f32> {
    let (c, s) = (g.channels(), g.seq);
    let mut out = vec![0.0f32; g.batch * c * s];
    for (src, dst) in x.chunks_exact(c * s).zip(out.chunks_exact_mut(c * s)) {
        contract_into(Contraction::MatMulAT, w.data(), src, c, c, s, dst);
    }
    out
}

fn channels_first_to_rows(x: &[f32], g: Geom) -> Vec<f32> {
    let (c, s) = (g.channels(), g.seq);
    let mut out = vec![0.0f32; x.len()];
    for (src, dst) in x.chunks_exact(c * s).zip(out.chunks_exact_mut(c * s)) {
        transpose_into(src, c, s, dst);
    }
    out
}

fn rows_to_channels_first(x: &[f32], g: Geom) -> Vec<f32> {
    let (c, s) = (g.channels(), g.seq);
    let mut out = vec![0.0f32; x.len()];
    for (src, dst) in x.chunks_exact(c * s).zip(out.chunks_exact_mut(c * s)) {
        transpose_into(src, s, c, dst);
    }
    out
}

/// `(B, S, h, d)` to `(B, h, S, d)` in one pass.
fn gather_heads(rows: &[f32], g: Geom) -> Vec<f32> {
    let (s, h, d) = (g.seq, g.heads, g.d);
    let mut out = vec![0.0f32; rows.len()];
    for b in 0..g.batch {
        for si in 0..s {
            for hi in 0..h {
                let src = ((b * s + si) * h + hi) * d;
                let dst = ((b * h + hi) * s + si) * d;
                out[dst..dst + d].copy_from_slice(&rows[src..src + d]);
            }
        }
    }
    out
}

fn scatter_heads(tiles: &[f32], g: Geom) -> Vec<f32> {
    let (s, h, d) = (g.seq, g.heads, g.d);
    let mut out = vec![0.0f32; tiles.len()];
    for b in 0..g.batch {
        for hi in 0..h {
            for si in 0..s {
                let src = ((b * h + hi) * s + si) * d;
                let dst = ((b * s + si) * h + hi) * d;
                out[dst..dst + d].copy_from_slice(&tiles[src..src + d]);
            }
        }
    }
    out
}

/// Baseline head split: materialize the `(B, S, h, d)` reshape, then permute it.
fn split_heads_naive(rows: &[f32], g: Geom) -> Vec<f32> {
    let reshaped = rows.to_vec();
    gather_heads(&reshaped, g)
}

/// Baseline head merge: permute back to `(B, S, h, d)`, then materialize the reshape.
fn merge_heads_naive(tiles: &[f32], g: Geom) -> Vec<f32> {
    let permuted = scatter_heads(tiles, g);
    permuted.to_vec()
}

/// Applies `f(token, vector)` to the head vector of every token of every tile.
fn for_each_token(
    buf: &mut [f32],
    g: Geom,
    orient: Orient,
    mut f: impl FnMut(usize, usize, &mut [f32]),
) {
    let (s, d) = (g.seq, g.d);
    match orient {
        Orient::TokenMajor => {
            for (t, tile) in buf.chunks_exact_mut(s * d).enumerate() {
                for (si, vec) in tile.chunks_exact_mut(d).enumerate() {
                    f(t % g.heads, si, vec);
                }
            }
        }
        Orient::ChannelMajor => {
            let mut tmp = vec![0.0f32; d];
            for (t, tile) in buf.chunks_exact_mut(s * d).enumerate() {
                for si in 0..s {
                    for (a, slot) in tmp.iter_mut().enumerate() {
                        *slot = tile[a * s + si];
                    }
                    f(t % g.heads, si, &mut tmp);
                    for (a, &val) in tmp.iter().enumerate() {
                        tile[a * s + si] = val;
                    }
                }
            }
        }
    }
}

/// QK normalization, rotary encoding, then the kind-specific feature map
/// (query scaling by `1/sqrt(d)` for softmax, ReLU for linear).
fn prepare_qk(
    kind: AttentionKind,
    q: &mut [f32],
    k: &mut [f32],
    params: &AttentionParams,
    rope: Option<&RopeTable>,
    g: Geom,
    orient: Orient,
) {
    let d = g.d;
    if params.qk_norm.is_some() || rope.is_some() {
        let norm = params.qk_norm.as_ref();
        for (buf, is_q) in [(&mut *q, true), (&mut *k, false)] {
            for_each_token(buf, g, orient, |head, token, vec| {
                if let Some(n) = norm {
                    let gain = if is_q { &n.q_gain } else { &n.k_gain };
                    rms_row(vec, &gain[head * d..(head + 1) * d], DEFAULT_RMS_EPS);
                }
                if let Some(r) = rope {
                    r.rotate(token, vec);
                }
            });
        }
    }
    match kind {
        AttentionKind::Softmax => {
            let scale = 1.0 / (d as f32).sqrt();
            q.iter_mut().for_each(|v| *v *= scale);
        }
        AttentionKind::Linear => {
            q.iter_mut().for_each(|v| *v = v.max(0.0));
            k.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_kernel(
    kind: AttentionKind,
    orient: Orient,
    q: &[f32],
    k: &[f32],
    v: &[f32],
    tiles: usize,
    g: Geom,
    query_tile: usize,
    o: &mut [f32],
) -> Result<()> {
    match (kind, orient) {
        (AttentionKind::Softmax, Orient::TokenMajor) => {
            softmax_token_major(q, k, v, tiles, g, query_tile, o)
        }
        (AttentionKind::Softmax, Orient::ChannelMajor) => {
            softmax_channel_major(q, k, v, tiles, g, query_tile, o)
        }
        (AttentionKind::Linear, Orient::TokenMajor) => {
            linear_token_major(q, k, v, tiles, g, o);
            Ok(())
        }
        (AttentionKind::Linear, Orient::ChannelMajor) => {
            linear_channel_major(q, k, v, tiles, g, o);
            Ok(())
        }
    }
}

fn softmax_token_major(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    tiles: usize,
    g: Geom,
    query_tile: usize,
    o: &mut [f32],
) -> Result<()> {
    let (s, d) = (g.seq, g.d);
    let tile = s * d;
    let mut kt = vec![0.0f32; tiles * tile];
    for t in 0..tiles {
        transpose_into(&k[t * tile..(t + 1) * tile], s, d, &mut kt[t * tile..(t + 1) * tile]);
    }
    let qt = query_tile.min(s);
    let mut scores = vec![0.0f32; tiles * qt * s];
    for q0 in (0..s).step_by(qt) {
        let rows = qt.min(s - q0);
        for t in 0..tiles {
            let qs = &q[t * tile + q0 * d..t * tile + (q0 + rows) * d];
            let sc = &mut scores[t * qt * s..t * qt * s + rows * s];
            contract_into(Contraction::MatMul, qs, &kt[t * tile..(t + 1) * tile], rows, d, s, sc);
        }
        for t in 0..tiles {
            softmax_rows_in_place(&mut scores[t * qt * s..t * qt * s + rows * s], s)?;
        }
        for t in 0..tiles {
            let p = &scores[t * qt * s..t * qt * s + rows * s];
            let dst = &mut o[t * tile + q0 * d..t * tile + (q0 + rows) * d];
            contract_into(Contraction::MatMul, p, &v[t * tile..(t + 1) * tile], rows, s, d, dst);
        }
    }
    Ok(())
}

/// Softmax over the key axis of a `(keys, queries)` block, column by column.
fn softmax_columns(block: &mut [f32], keys: usize, queries: usize) -> Result<()> {
    let mut max = vec![f32::NEG_INFINITY; queries];
    for row in block.chunks_exact(queries).take(keys) {
        for (m, &v) in max.iter_mut().zip(row) {
            *m = m.max(v);
        }
    }
    if max.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    let mut sum = vec![0.0f32; queries];
    for row in block.chunks_exact_mut(queries).take(keys) {
        for ((v, m), acc) in row.iter_mut().zip(&max).zip(sum.iter_mut()) {
            *v = (*v - m).exp();
            *acc += *v;
        }
    }
    for s in sum.iter_mut() {
        *s = 1.0 / *s;
    }
    for row in block.chunks_exact_mut(queries).take(keys) {
        for (v, inv) in row.iter_mut().zip(&sum) {
            *v *= inv;
        }
    }
    Ok(())
}

fn softmax_channel_major(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    tiles: usize,
    g: Geom,
    query_tile: usize,
    o: &mut [f32],
) -> Result<()> {
    let (s, d) = (g.seq, g.d);
    let tile = s * d;
    let qt = query_tile.min(s);
    let mut scores = vec![0.0f32; tiles * s * qt];
    let mut qblock = vec![0.0f32; d * qt];
    let mut oblock = vec![0.0f32; d * qt];
    for q0 in (0..s).step_by(qt) {
        let cols = qt.min(s - q0);
        for t in 0..tiles {
            let qtile = &q[t * tile..(t + 1) * tile];
            let qb: &[f32] = if cols == s {
                qtile
            } else {
                for a in 0..d {
                    qblock[a * cols..(a + 1) * cols]
                        .copy_from_slice(&qtile[a * s + q0..a * s + q0 + cols]);
                }
                &qblock[..d * cols]
            };
            let sc = &mut scores[t * s * qt..t * s * qt + s * cols];
            contract_into(Contraction::MatMulAT, &k[t * tile..(t + 1) * tile], qb, s, d, cols, sc);
        }
        for t in 0..tiles {
            softmax_columns(&mut scores[t * s * qt..t * s * qt + s * cols], s, cols)?;
        }
        for t in 0..tiles {
            let p = &scores[t * s * qt..t * s * qt + s * cols];
            let vt = &v[t * tile..(t + 1) * tile];
            let otile = &mut o[t * tile..(t + 1) * tile];
            if cols == s {
                contract_into(Contraction::MatMul, vt, p, d, s, cols, otile);
            } else {
                let ob = &mut oblock[..d * cols];
                contract_into(Contraction::MatMul, vt, p, d, s, cols, ob);
                for a in 0..d {
                    otile[a * s + q0..a * s + q0 + cols]
                        .copy_from_slice(&ob[a * cols..(a + 1) * cols]);
                }
            }
        }
    }
    Ok(())
}

fn linear_token_major(q: &[f32], k: &[f32], v: &[f32], tiles: usize, g: Geom, o: &mut [f32]) {
    let (s, d) = (g.seq, g.d);
    let tile = s * d;
    let mut kt = vec![0.0f32; tiles * tile];
    let mut m = vec![0.0f32; tiles * d * d];
    let mut ksum = vec![0.0f32; tiles * d];
    for t in 0..tiles {
        let kt_t = &mut kt[t * tile..(t + 1) * tile];
        transpose_into(&k[t * tile..(t + 1) * tile], s, d, kt_t);
        contract_into(
            Contraction::MatMul,
            kt_t,
            &v[t * tile..(t + 1) * tile],
            d,
            s,
            d,
            &mut m[t * d * d..(t + 1) * d * d],
        );
        let ks = &mut ksum[t * d..(t + 1) * d];
        for row in k[t * tile..(t + 1) * tile].chunks_exact(d) {
            for (acc, &kv) in ks.iter_mut().zip(row) {
                *acc += kv;
            }
        }
    }
    for t in 0..tiles {
        let qs = &q[t * tile..(t + 1) * tile];
        let ot = &mut o[t * tile..(t + 1) * tile];
        contract_into(Contraction::MatMul, qs, &m[t * d * d..(t + 1) * d * d], s, d, d, ot);
        let ks = &ksum[t * d..(t + 1) * d];
        for (qrow, orow) in qs.chunks_exact(d).zip(ot.chunks_exact_mut(d)) {
            let mut den = 0.0f32;
            for (&qa, &ka) in qrow.iter().zip(ks) {
                den += qa * ka;
            }
            let den = den + LINEAR_DELTA;
            orow.iter_mut().for_each(|x| *x /= den);
        }
    }
}

fn linear_channel_major(q: &[f32], k: &[f32], v: &[f32], tiles: usize, g: Geom, o: &mut [f32]) {
    let (s, d) = (g.seq, g.d);
    let tile = s * d;
    let mut kt = vec![0.0f32; tile];
    let mut mt = vec![0.0f32; d * d];
    let mut ksum = vec![0.0f32; d];
    let mut den = vec![0.0f32; s];
    for t in 0..tiles {
        let (qt, kt_src, vt) = (
            &q[t * tile..(t + 1) * tile],
            &k[t * tile..(t + 1) * tile],
            &v[t * tile..(t + 1) * tile],
        );
        // The one transpose on the attention path: K to token-major.
        transpose_into(kt_src, d, s, &mut kt);
        contract_into(Contraction::MatMul, vt, &kt, d, s, d, &mut mt);
        for (acc, row) in ksum.iter_mut().zip(kt_src.chunks_exact(s)) {
            let mut sum = 0.0f32;
            for &x in row {
                sum += x;
            }
            *acc = sum;
        }
        let ot = &mut o[t * tile..(t + 1) * tile];
        contract_into(Contraction::MatMul, &mt, qt, d, d, s, ot);
        den.fill(0.0);
        for (&ka, qrow) in ksum.iter().zip(qt.chunks_exact(s)) {
            for (dq, &qa) in den.iter_mut().zip(qrow) {
                *dq += qa * ka;
            }
        }
        for row in ot.chunks_exact_mut(s) {
            for (x, &dq) in row.iter_mut().zip(&den) {
                *x /= dq + LINEAR_DELTA;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use crate::contract::Contraction;
    use crate::rng::{random_normal, Rng};
    use crate::tensor::relative_error;

    /// Dense f64 softmax attention with explicit exp/normalize.
    fn dense_softmax_oracle(x: &Tensor, p: &AttentionParams) -> Vec<f32> {
        let (b, s, c) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let (h, d) = (p.heads, p.head_dim());
        let proj = |w: &Tensor| -> Vec<f64> {
            let mut out = vec![0.0; b * s * c];
            for r in 0..b * s {
                for o in 0..c {
                    out[r * c + o] = (0..c)
                        .map(|i| x.data()[r * c + i] as f64 * w.data()[i * c + o] as f64)
                        .sum();
                }
            }
            out
        };
        let (q, k, v) = (proj(&p.w_q), proj(&p.w_k), proj(&p.w_v));
        let mut heads_out = vec![0.0f64; b * s * c];
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..s {
                    let logits: Vec<f64> = (0..s)
                        .map(|j| {
                            (0..d)
                                .map(|a| {
                                    q[(bi * s + i) * c + hi * d + a] * k[(bi * s + j) * c + hi * d + a]
                                })
                                .sum::<f64>()
                                / (d as f64).sqrt()
                        })
                        .collect();
                    let w: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
                    let z: f64 = w.iter().sum();
                    for a in 0..d {
                        heads_out[(bi * s + i) * c + hi * d + a] = (0..s)
                            .map(|j| w[j] / z * v[(bi * s + j) * c + hi * d + a])
                            .sum();
                    }
                }
            }
        }
        let mut out = vec![0.0f32; b * s * c];
        for r in 0..b * s {
            for o in 0..c {
                out[r * c + o] = (0..c)
                    .map(|i| heads_out[r * c + i] * p.w_o.data()[i * c + o] as f64)
                    .sum::<f64>() as f32;
            }
        }
        out
    }

    fn identity(c: usize) -> Tensor {
        let mut m = vec![0.0; c * c];
        for i in 0..c {
            m[i * c + i] = 1.0;
        }
        Tensor::new(&[c, c], m).unwrap()
    }

    #[test]
    fn softmax_single_token_is_projected_value() {
        let mut rng = Rng::new(1);
        let p = AttentionParams::random(8, 2, &mut rng).unwrap();
        let x = random_normal(&mut rng, &[1, 1, 8]).unwrap();
        let v = crate::contract::batched_contract(
            &x,
            &p.w_v.clone().reshape(&[1, 8, 8]).unwrap(),
            Contraction::MatMul,
        )
        .unwrap();
        let want = crate::contract::batched_contract(
            &v,
            &p.w_o.clone().reshape(&[1, 8, 8]).unwrap(),
            Contraction::MatMul,
        )
        .unwrap();
        for st in ExecStrategy::combinations() {
            let got = softmax_attention(&x, &p, st).unwrap();
            assert!(relative_error(got.data(), want.data()) < 1e-6, "{st}");
        }
    }

    #[test]
    fn softmax_identical_keys_average_values() {
        let mut rng = Rng::new(2);
        let c = 4;
        let zero_k = Tensor::zeros(&[c, c]).unwrap();
        let p = AttentionParams::new(
            random_normal(&mut rng, &[c, c]).unwrap(),
            zero_k,
            identity(c),
            identity(c),
            2,
        )
        .unwrap();
        let x = random_normal(&mut rng, &[1, 5, c]).unwrap();
        let got = softmax_attention(&x, &p, ExecStrategy::BASELINE).unwrap();
        for ch in 0..c {
            let mean: f32 = (0..5).map(|si| x.data()[si * c + ch]).sum::<f32>() / 5.0;
            for si in 0..5 {
                assert!((got.data()[si * c + ch] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_matches_dense_oracle() {
        let mut rng = Rng::new(3);
        let p = AttentionParams::random(8, 2, &mut rng).unwrap();
        let x = random_normal(&mut rng, &[2, 4, 8]).unwrap();
        let want = dense_softmax_oracle(&x, &p);
        for st in ExecStrategy::combinations() {
            let got = softmax_attention(&x, &p, st).unwrap();
            assert!(relative_error(got.data(), &want) <= 1e-6, "{st}");
        }
    }

    #[test]
    fn linear_single_token_cancels() {
        let c = 4;
        let mut rng = Rng::new(4);
        // Positive Q and K so relu(q).relu(k) > 0.
        let ones = Tensor::full(&[c, c], 0.5).unwrap();
        let w_v = random_normal(&mut rng, &[c, c]).unwrap();
        let p = AttentionParams::new(ones.clone(), ones, w_v.clone(), identity(c), 2).unwrap();
        let x = Tensor::full(&[1, 1, c], 1.0).unwrap();
        let v: Vec<f32> = (0..c).map(|o| (0..c).map(|i| w_v.data()[i * c + o]).sum()).collect();
        let r = linear_attention_reference(&x, &p).unwrap();
        assert!(relative_error(r.data(), &v) < 1e-5);
        for st in ExecStrategy::combinations() {
            let s = linear_attention_streaming(&x, &p, st).unwrap();
            assert!(relative_error(s.data(), &v) < 1e-5, "{st}");
        }
    }

    #[test]
    fn linear_negative_queries_give_zero() {
        let c = 4;
        let mut rng = Rng::new(5);
        let w_q = Tensor::full(&[c, c], -1.0).unwrap();
        let p = AttentionParams::new(
            w_q,
            random_normal(&mut rng, &[c, c]).unwrap(),
            random_normal(&mut rng, &[c, c]).unwrap(),
            random_normal(&mut rng, &[c, c]).unwrap(),
            1,
        )
        .unwrap();
        let x = Tensor::full(&[1, 3, c], 1.0).unwrap();
        assert!(linear_attention_reference(&x, &p).unwrap().data().iter().all(|&v| v == 0.0));
        for st in ExecStrategy::combinations() {
            let s = linear_attention_streaming(&x, &p, st).unwrap();
            assert!(s.data().iter().all(|&v| v == 0.0), "{st}");
        }
    }

    #[test]
    fn linear_reference_matches_hand_loop() {
        let mut rng = Rng::new(6);
        let c = 4;
        let p = AttentionParams::new(identity(c), identity(c), identity(c), identity(c), 1).unwrap();
        let x = random_normal(&mut rng, &[1, 3, c]).unwrap().map(f32::abs);
        let xs = x.data();
        let mut want = vec![0.0f32; 12];
        for i in 0..3 {
            let mut den = 0.0f64;
            let mut num = [0.0f64; 4];
            for j in 0..3 {
                let sim: f64 = (0..c).map(|a| xs[i * c + a] as f64 * xs[j * c + a] as f64).sum();
                den += sim;
                for a in 0..c {
                    num[a] += sim * xs[j * c + a] as f64;
                }
            }
            for a in 0..c {
                want[i * c + a] = (num[a] / (den + 1e-6)) as f32;
            }
        }
        let got = linear_attention_reference(&x, &p).unwrap();
        assert!(relative_error(got.data(), &want) <= 1e-6);
    }

    #[test]
    fn strategies_are_bit_identical_with_norm_and_rope() {
        let mut rng = Rng::new(7);
        let (c, h, s) = (16, 2, 300);
        let d = c / h;
        let norm = QkNorm {
            q_gain: (0..c).map(|i| 0.5 + i as f32 / c as f32).collect(),
            k_gain: (0..c).map(|i| 1.5 - i as f32 / c as f32).collect(),
        };
        let p = AttentionParams::random(c, h, &mut rng)
            .unwrap()
            .with_qk_norm(norm)
            .unwrap()
            .with_rope(RopeConfig::for_head_dim(d).unwrap())
            .unwrap();
        let x = random_normal(&mut rng, &[2, s, c]).unwrap();
        let pos: Vec<Pos3> = (0..s as i64).map(|i| [i / 100, (i / 10) % 10, i % 10]).collect();
        for kind in [AttentionKind::Softmax, AttentionKind::Linear] {
            let base = attend(kind, &x, Some(&pos), &p, ExecStrategy::BASELINE).unwrap();
            for st in ExecStrategy::combinations() {
                let got = attend(kind, &x, Some(&pos), &p, st).unwrap();
                assert_eq!(got.data(), base.data(), "{kind:?} {st}");
            }
        }
    }

    #[test]
    fn rope_requires_positions() {
        let mut rng = Rng::new(8);
        let p = AttentionParams::random(8, 2, &mut rng)
            .unwrap()
            .with_rope(RopeConfig::for_head_dim(4).unwrap())
            .unwrap();
        let x = Tensor::zeros(&[1, 2, 8]).unwrap();
        assert!(softmax_attention(&x, &p, ExecStrategy::BASELINE).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut rng = Rng::new(9);
        let p = AttentionParams::random(8, 2, &mut rng).unwrap();
        assert!(softmax_attention(&Tensor::zeros(&[1, 2, 4]).unwrap(), &p, ExecStrategy::ALL).is_err());
        assert!(softmax_attention(&Tensor::zeros(&[2, 8]).unwrap(), &p, ExecStrategy::ALL).is_err());
        assert!(AttentionParams::random(8, 3, &mut rng).is_err());
    }
}
