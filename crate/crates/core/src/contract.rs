//! Batched contractions over rank-3 operands.
//!
//! Every pattern accumulates each output element in f32 starting from `0.0`
//! and adds the products in ascending order of the contracted index, so any
//! implementation following the same order (including a naive triple loop) is
//! bit-identical. A batch extent of 1 on either operand broadcasts.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Contraction {
    /// `bij,bjk->bik`
    MatMul,
    /// `bij,bkj->bik`
    MatMulBT,
    /// `bji,bjk->bik`
    MatMulAT,
}

impl Contraction {
    pub const ALL: [Contraction; 3] = [Self::MatMul, Self::MatMulBT, Self::MatMulAT];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::MatMul => "bij,bjk->bik",
            Self::MatMulBT => "bij,bkj->bik",
            Self::MatMulAT => "bji,bjk->bik",
        }
    }

    /// `(i, j, k)` extents from per-batch operand shapes `a = [a0, a1]`, `b = [b0, b1]`.
    fn extents(self, a: [usize; 2], b: [usize; 2]) -> Result<(usize, usize, usize)> {
        let (i, ja, jb, k) = match self {
            Self::MatMul => (a[0], a[1], b[0], b[1]),
            Self::MatMulBT => (a[0], a[1], b[1], b[0]),
            Self::MatMulAT => (a[1], a[0], b[0], b[1]),
        };
        if ja != jb {
            return Err(shape_err(format!(
                "{}: contracted extents {ja} and {jb} differ",
                self.as_str()
            )));
        }
        Ok((i, ja, k))
    }
}

impl fmt::Display for Contraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Contraction {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == compact)
            .ok_or_else(|| invalid(format!("unknown contraction pattern {s:?}")))
    }
}

pub fn batched_contract(a: &Tensor, b: &Tensor, spec: Contraction) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 {
        return Err(shape_err(format!(
            "{spec} needs rank-3 operands, got {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (ad, bd) = (a.dims(), b.dims());
    let batch = match (ad[0], bd[0]) {
        (x, y) if x == y => x,
        (1, y) => y,
        (x, 1) => x,
        (x, y) => return Err(shape_err(format!("batch extents {x} and {y} differ"))),
    };
    let (i, j, k) = spec.extents([ad[1], ad[2]], [bd[1], bd[2]])?;
    let a_stride = if ad[0] == 1 { 0 } else { ad[1] * ad[2] };
    let b_stride = if bd[0] == 1 { 0 } else { bd[1] * bd[2] };
    let mut out = vec![0.0f32; batch * i * k];
    for (bi, dst) in out.chunks_exact_mut((i * k).max(1)).enumerate().take(batch) {
        let sa = &a.data()[bi * a_stride..bi * a_stride + ad[1] * ad[2]];
        let sb = &b.data()[bi * b_stride..bi * b_stride + bd[1] * bd[2]];
        contract_into(spec, sa, sb, i, j, k, dst);
    }
    Tensor::new(&[batch, i, k], out)
}

/// Output columns are processed in blocks of this many; the per-element
/// summation order is unaffected.
const K_BLOCK: usize = 256;

/// Single-batch kernel writing an `i x k` result into `out` (overwritten).
pub(crate) fn contract_into(
    spec: Contraction,
    a: &[f32],
    b: &[f32],
    i: usize,
    j: usize,
    k: usize,
    out: &mut [f32],
) {
    debug_assert_eq!(out.len(), i * k);
    out.fill(0.0);
    match spec {
        Contraction::MatMul => {
            for k0 in (0..k).step_by(K_BLOCK) {
                let k1 = (k0 + K_BLOCK).min(k);
                let mut ii = 0;
                while ii + ROWS <= i {
                    for jj in 0..j {
                        let alpha = [0, 1, 2, 3].map(|r| a[(ii + r) * j + jj]);
                        axpy_rows(out, ii, k, k0..k1, alpha, &b[jj * k + k0..jj * k + k1]);
                    }
                    ii += ROWS;
                }
                for ii in ii..i {
                    let row = &mut out[ii * k + k0..ii * k + k1];
                    let arow = &a[ii * j..(ii + 1) * j];
                    for (jj, &av) in arow.iter().enumerate() {
                        axpy(row, av, &b[jj * k + k0..jj * k + k1]);
                    }
                }
            }
        }
        Contraction::MatMulAT => {
            for k0 in (0..k).step_by(K_BLOCK) {
                let k1 = (k0 + K_BLOCK).min(k);
                let mut ii = 0;
                while ii + ROWS <= i {
                    for jj in 0..j {
                        let alpha = [0, 1, 2, 3].map(|r| a[jj * i + ii + r]);
                        axpy_rows(out, ii, k, k0..k1, alpha, &b[jj * k + k0..jj * k + k1]);
                    }
                    ii += ROWS;
                }
                for ii in ii..i {
                    let row = &mut out[ii * k + k0..ii * k + k1];
                    for jj in 0..j {
                        axpy(row, a[jj * i + ii], &b[jj * k + k0..jj * k + k1]);
                    }
                }
            }
        }
        Contraction::MatMulBT => {
            for ii in 0..i {
                let arow = &a[ii * j..(ii + 1) * j];
                for kk in 0..k {
                    let brow = &b[kk * j..(kk + 1) * j];
                    let mut acc = 0.0f32;
                    for (x, y) in arow.iter().zip(brow) {
                        acc += x * y;
                    }
                    out[ii * k + kk] = acc;
                }
            }
        }
    }
}

/// Output rows updated together, sharing each load of the right operand.
const ROWS: usize = 4;

/// `out[row0 + r][cols] += alpha[r] * src` for `r` in `0..ROWS`.
#[inline]
fn axpy_rows(
    out: &mut [f32],
    row0: usize,
    k: usize,
    cols: std::ops::Range<usize>,
    alpha: [f32; ROWS],
    src: &[f32],
) {
    let block = &mut out[row0 * k..(row0 + ROWS) * k];
    let (r0, rest) = block.split_at_mut(k);
    let (r1, rest) = rest.split_at_mut(k);
    let (r2, r3) = rest.split_at_mut(k);
    let (r0, r1, r2, r3) = (
        &mut r0[cols.clone()],
        &mut r1[cols.clone()],
        &mut r2[cols.clone()],
        &mut r3[cols],
    );
    for (x, (((d0, d1), d2), d3)) in src
        .iter()
        .zip(r0.iter_mut().zip(r1.iter_mut()).zip(r2.iter_mut()).zip(r3.iter_mut()))
    {
        *d0 += alpha[0] * x;
        *d1 += alpha[1] * x;
        *d2 += alpha[2] * x;
        *d3 += alpha[3] * x;
    }
}

#[inline]
fn axpy(dst: &mut [f32], alpha: f32, src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{random_normal, Rng};

    fn naive(a: &Tensor, b: &Tensor, spec: Contraction) -> Vec<f32> {
        let (ad, bd) = (a.dims(), b.dims());
        let batch = ad[0].max(bd[0]);
        let at = |bi: usize, r: usize, c: usize| {
            let bi = if ad[0] == 1 { 0 } else { bi };
            a.data()[(bi * ad[1] + r) * ad[2] + c]
        };
        let bt = |bi: usize, r: usize, c: usize| {
            let bi = if bd[0] == 1 { 0 } else { bi };
            b.data()[(bi * bd[1] + r) * bd[2] + c]
        };
        let (i, j, k) = match spec {
            Contraction::MatMul => (ad[1], ad[2], bd[2]),
            Contraction::MatMulBT => (ad[1], ad[2], bd[1]),
            Contraction::MatMulAT => (ad[2], ad[1], bd[2]),
        };
        let mut out = Vec::new();
        for bi in 0..batch {
            for ii in 0..i {
                for kk in 0..k {
                    let mut acc = 0.0f32;
                    for jj in 0..j {
                        acc += match spec {
                            Contraction::MatMul => at(bi, ii, jj) * bt(bi, jj, kk),
                            Contraction::MatMulBT => at(bi, ii, jj) * bt(bi, kk, jj),
                            Contraction::MatMulAT => at(bi, jj, ii) * bt(bi, jj, kk),
                        };
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    fn shapes(spec: Contraction, batch: usize, i: usize, j: usize, k: usize) -> ([usize; 3], [usize; 3]) {
        match spec {
            Contraction::MatMul => ([batch, i, j], [batch, j, k]),
            Contraction::MatMulBT => ([batch, i, j], [batch, k, j]),
            Contraction::MatMulAT => ([batch, j, i], [batch, j, k]),
        }
    }

    #[test]
    fn pattern_strings_round_trip() {
        for p in Contraction::ALL {
            assert_eq!(p.as_str().parse::<Contraction>().unwrap(), p);
        }
        assert!("bij,bjk->bkk".parse::<Contraction>().is_err());
        assert_eq!(" bij, bjk -> bik".parse::<Contraction>().unwrap(), Contraction::MatMul);
    }

    #[test]
    fn identity_operand() {
        let mut rng = Rng::new(3);
        let b = random_normal(&mut rng, &[2, 3, 4]).unwrap();
        let mut eye = vec![0.0; 2 * 9];
        for bi in 0..2 {
            for d in 0..3 {
                eye[bi * 9 + d * 3 + d] = 1.0;
            }
        }
        let eye = Tensor::new(&[2, 3, 3], eye).unwrap();
        let out = batched_contract(&eye, &b, Contraction::MatMul).unwrap();
        assert_eq!(out.data(), b.data());
        let out = batched_contract(&eye, &b, Contraction::MatMulAT).unwrap();
        assert_eq!(out.data(), b.data());
    }

    #[test]
    fn degenerate_scalar_product() {
        let a = Tensor::new(&[1, 1, 1], vec![3.0]).unwrap();
        let b = Tensor::new(&[1, 1, 1], vec![-2.5]).unwrap();
        for p in Contraction::ALL {
            assert_eq!(batched_contract(&a, &b, p).unwrap().data(), &[-7.5]);
        }
    }

    #[test]
    fn random_3x3_batch_2_matches_naive_bitwise() {
        let mut rng = Rng::new(11);
        for p in Contraction::ALL {
            let a = random_normal(&mut rng, &[2, 3, 3]).unwrap();
            let b = random_normal(&mut rng, &[2, 3, 3]).unwrap();
            let got = batched_contract(&a, &b, p).unwrap();
            let want = naive(&a, &b, p);
            assert_eq!(
                got.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                want.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn mismatched_extents() {
        let a = Tensor::zeros(&[1, 2, 3]).unwrap();
        let b = Tensor::zeros(&[1, 4, 2]).unwrap();
        assert!(batched_contract(&a, &b, Contraction::MatMul).is_err());
        let b = Tensor::zeros(&[3, 3, 2]).unwrap();
        let a2 = Tensor::zeros(&[2, 2, 3]).unwrap();
        assert!(batched_contract(&a2, &b, Contraction::MatMul).is_err());
    }

    #[test]
    fn broadcast_batch() {
        let mut rng = Rng::new(5);
        let a = random_normal(&mut rng, &[1, 2, 3]).unwrap();
        let b = random_normal(&mut rng, &[4, 3, 2]).unwrap();
        let got = batched_contract(&a, &b, Contraction::MatMul).unwrap();
        assert_eq!(got.dims(), &[4, 2, 2]);
        assert_eq!(got.data(), naive(&a, &b, Contraction::MatMul).as_slice());
    }

    proptest::proptest! {
        #[test]
        fn matches_naive_for_small_extents(
            batch in 1usize..=8, i in 1usize..=8, j in 1usize..=8, k in 1usize..=8,
            pat in 0usize..3, seed in 0u64..1000,
        ) {
            let spec = Contraction::ALL[pat];
            let (sa, sb) = shapes(spec, batch, i, j, k);
            let mut rng = Rng::new(seed);
            let a = random_normal(&mut rng, &sa).unwrap();
            let b = random_normal(&mut rng, &sb).unwrap();
            let got = batched_contract(&a, &b, spec).unwrap();
            let want = naive(&a, &b, spec);
            proptest::prop_assert!(got.data().iter().zip(&want).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
