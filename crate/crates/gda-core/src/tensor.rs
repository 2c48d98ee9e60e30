//! Dense row-major tensors over `f32`/`f64` and the kernel set used by the
//! rest of the crate.
//!
//! Design rules the other modules rely on:
//!
//! * One flat buffer per tensor, row-major, no views or strides. Slicing
//!   copies. This keeps every kernel a plain loop over contiguous memory.
//! * Determinism: every reduction fixes its summation order (ascending
//!   index). `matmul` accumulates each output element over `k` in ascending
//!   order with a fused multiply-add per term (exactly rounded, so bitwise
//!   reproducible across platforms); the compiler may vectorize across
//!   output columns but may not reassociate a single element's sum.
//! * No hidden upcasting: kernels accumulate in the element type (the fused
//!   product inside `mul_add` is exact by definition and rounds once on
//!   add). Callers that need wider accumulation (loss, norms over long
//!   spans) do it explicitly in `f64`.
//! * `softmax_rows` always subtracts the row max before exponentiating, and
//!   masked entries are exact zeros, never tiny residues.

use crate::error::{GdaError, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use std::fmt;

/// Element width of a checkpoint or model. The numeric value doubles as the
/// on-disk tag and the byte width of one element.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub const fn tag(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            4 => Ok(Precision::F32),
            8 => Ok(Precision::F64),
            other => Err(GdaError::Format(format!(
                "unknown precision tag {other} (expected 4 for f32 or 8 for f64)"
            ))),
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    /// Bytes per element; numerically equal to the tag by construction.
    pub const fn size(self) -> usize {
        self.tag() as usize
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Floating-point element type. Implemented for `f32` and `f64` only; the
/// whole model is generic over this so the same code path serves fast
/// training and strict 64-bit verification.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Little-endian serialization, the only byte order used on disk.
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Row mask for `softmax_rows`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Row `i` may attend to columns `0..=i`; everything later is masked to
    /// an exact zero. Requires a square matrix.
    Causal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Shape invariants: rank >= 1, every extent >= 1, and the buffer holds
    /// exactly the product of the extents.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() {
            return Err(GdaError::Config("tensor rank must be at least 1".into()));
        }
        let mut numel: usize = 1;
        for &e in &shape {
            if e == 0 {
                return Err(GdaError::Config(format!(
                    "tensor extents must be positive, got shape {shape:?}"
                )));
            }
            numel = numel.checked_mul(e).ok_or_else(|| {
                GdaError::Config(format!("tensor shape {shape:?} overflows usize"))
            })?;
        }
        if numel != data.len() {
            return Err(GdaError::Config(format!(
                "shape {shape:?} implies {numel} elements but buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![T::zero(); numel]).expect("static shape")
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel]).expect("static shape")
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The two extents of a matrix, or a shape error naming `op`.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(GdaError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        debug_assert_eq!(self.rank(), 2);
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        debug_assert_eq!(self.rank(), 2);
        let n = self.shape[1];
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: T) {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    /// Matrix product. For each output element the sum over `k` runs in
    /// ascending order with one fused multiply-add per term; fused rounding
    /// is exactly specified by IEEE 754, so the result is bitwise
    /// reproducible and identical to the textbook triple loop written with
    /// the same fused accumulate. Register-blocked tiles only change which
    /// independent output elements share a pass over the right-hand matrix;
    /// no element's summation is reordered or split.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(GdaError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        // Four output rows advance through the k loop together (each row of
        // the right-hand matrix is loaded once per four output rows), and k
        // is unrolled by two so every accumulator store covers two fused
        // terms. Both measures only improve reuse; per element the terms
        // are still added in ascending k.
        const MR: usize = 4;
        let mut out = vec![T::zero(); m * n];
        let full_i = m - m % MR;
        let full_k = k - k % 4;
        let mut rest = out.as_mut_slice();
        for ib in (0..full_i).step_by(MR) {
            let (r0, tail) = rest.split_at_mut(n);
            let (r1, tail) = tail.split_at_mut(n);
            let (r2, tail) = tail.split_at_mut(n);
            let (r3, tail) = tail.split_at_mut(n);
            rest = tail;
            let a0 = &self.data[ib * k..(ib + 1) * k];
            let a1 = &self.data[(ib + 1) * k..(ib + 2) * k];
            let a2 = &self.data[(ib + 2) * k..(ib + 3) * k];
            let a3 = &self.data[(ib + 3) * k..(ib + 4) * k];
            for kk in (0..full_k).step_by(4) {
                let bx = &rhs.data[kk * n..kk * n + n];
                let by = &rhs.data[(kk + 1) * n..(kk + 1) * n + n];
                let bz = &rhs.data[(kk + 2) * n..(kk + 2) * n + n];
                let bw = &rhs.data[(kk + 3) * n..(kk + 3) * n + n];
                let s0 = [a0[kk], a0[kk + 1], a0[kk + 2], a0[kk + 3]];
                let s1 = [a1[kk], a1[kk + 1], a1[kk + 2], a1[kk + 3]];
                let s2 = [a2[kk], a2[kk + 1], a2[kk + 2], a2[kk + 3]];
                let s3 = [a3[kk], a3[kk + 1], a3[kk + 2], a3[kk + 3]];
                for j in 0..n {
                    r0[j] = s0[3].mul_add(bw[j], s0[2].mul_add(bz[j], s0[1].mul_add(by[j], s0[0].mul_add(bx[j], r0[j]))));
                    r1[j] = s1[3].mul_add(bw[j], s1[2].mul_add(bz[j], s1[1].mul_add(by[j], s1[0].mul_add(bx[j], r1[j]))));
                    r2[j] = s2[3].mul_add(bw[j], s2[2].mul_add(bz[j], s2[1].mul_add(by[j], s2[0].mul_add(bx[j], r2[j]))));
                    r3[j] = s3[3].mul_add(bw[j], s3[2].mul_add(bz[j], s3[1].mul_add(by[j], s3[0].mul_add(bx[j], r3[j]))));
                }
            }
            for kk in full_k..k {
                let bx = &rhs.data[kk * n..kk * n + n];
                let (s0, s1, s2, s3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
                for j in 0..n {
                    r0[j] = s0.mul_add(bx[j], r0[j]);
                    r1[j] = s1.mul_add(bx[j], r1[j]);
                    r2[j] = s2.mul_add(bx[j], r2[j]);
                    r3[j] = s3.mul_add(bx[j], r3[j]);
                }
            }
        }
        for i in full_i..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[kk * n..(kk + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = a.mul_add(b, *o);
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transposed(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    fn zip_map(&self, rhs: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != rhs.shape {
            return Err(GdaError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(rhs, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, rhs: &Tensor<T>) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(GdaError::ShapeMismatch {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        let data = self.data.iter().map(|&a| a * s).collect();
        Tensor::new(self.shape.clone(), data).expect("same shape")
    }

    pub fn scale_in_place(&mut self, s: T) {
        for a in &mut self.data {
            *a = *a * s;
        }
    }

    /// Row-wise softmax with optional causal masking. The row max is always
    /// subtracted before exponentiation, so arbitrarily large finite scores
    /// cannot overflow. Masked positions come out as exact zeros and each
    /// row sums to 1 over its visible prefix up to rounding.
    pub fn softmax_rows(&self, mask: Mask) -> Result<Tensor<T>> {
        let (m, n) = self.dims2("softmax_rows")?;
        if mask == Mask::Causal && m != n {
            return Err(GdaError::ShapeMismatch {
                op: "causal softmax",
                lhs: self.shape.clone(),
                rhs: vec![m, m],
            });
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let visible = match mask {
                Mask::None => n,
                Mask::Causal => i + 1,
            };
            if visible == 0 {
                // Unreachable while extents are positive; kept as a guard so
                // a future mask variant cannot silently divide by zero.
                return Err(GdaError::AllMasked { row: i });
            }
            let row = &self.data[i * n..i * n + visible];
            let mut mx = row[0];
            for &v in &row[1..] {
                if v > mx {
                    mx = v;
                }
            }
            let out_row = &mut out[i * n..i * n + visible];
            let mut sum = T::zero();
            for (o, &v) in out_row.iter_mut().zip(row) {
                let e = (v - mx).exp();
                *o = e;
                sum = sum + e;
            }
            for o in out_row.iter_mut() {
                *o = *o / sum;
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Root-mean-square normalization over the last axis with a learnable
    /// per-channel gain: `y = x / sqrt(mean(x^2) + eps) * gain`.
    /// `eps = 0` is allowed (exact scale invariance); negative eps is not.
    pub fn rms_norm(&self, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = *self.shape.last().expect("rank >= 1");
        if gain.rank() != 1 || gain.shape[0] != d {
            return Err(GdaError::ShapeMismatch {
                op: "rms_norm",
                lhs: self.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(GdaError::Config(format!(
                "rms_norm eps must be finite and non-negative, got {eps}"
            )));
        }
        let eps_t = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let mut out = vec![T::zero(); self.numel()];
        for (xr, yr) in self.data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mut ss = T::zero();
            for &x in xr {
                ss = ss + x * x;
            }
            let inv = T::one() / (ss * inv_d + eps_t).sqrt();
            for ((y, &x), &g) in yr.iter_mut().zip(xr).zip(&gain.data) {
                *y = x * inv * g;
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Rotary position encoding: adjacent pairs `(x[2k], x[2k+1])` of each
    /// row are rotated by `position * theta^(-2k/d)`. Rows pair with
    /// `positions` one-to-one, so arbitrary (e.g. shifted) positions work.
    pub fn apply_rope(&self, positions: &[usize], theta: f64) -> Result<Tensor<T>> {
        self.rope_impl(positions, theta, 1.0)
    }

    /// Rotation by the negated angles. Because each pair rotation is
    /// orthogonal, this is both the inverse of `apply_rope` and the
    /// gradient propagation rule through it.
    pub fn apply_rope_inverse(&self, positions: &[usize], theta: f64) -> Result<Tensor<T>> {
        self.rope_impl(positions, theta, -1.0)
    }

    fn rope_impl(&self, positions: &[usize], theta: f64, sign: f64) -> Result<Tensor<T>> {
        let (n, d) = self.dims2("apply_rope")?;
        if d % 2 != 0 {
            return Err(GdaError::Config(format!(
                "rotary encoding needs an even width, got {d}"
            )));
        }
        if positions.len() != n {
            return Err(GdaError::ShapeMismatch {
                op: "apply_rope positions",
                lhs: self.shape.clone(),
                rhs: vec![positions.len()],
            });
        }
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(GdaError::Config(format!(
                "rotary base must be finite and positive, got {theta}"
            )));
        }
        let half = d / 2;
        // Angles are computed in f64 regardless of T so that both precisions
        // rotate by the same geometry.
        let freqs: Vec<f64> = (0..half)
            .map(|k| theta.powf(-((2 * k) as f64) / d as f64))
            .collect();
        let mut out = vec![T::zero(); n * d];
        for (ri, &p) in positions.iter().enumerate() {
            let xr = &self.data[ri * d..(ri + 1) * d];
            let yr = &mut out[ri * d..(ri + 1) * d];
            for (k, &f) in freqs.iter().enumerate() {
                let (s, c) = (sign * p as f64 * f).sin_cos();
                let (s, c) = (T::from_f64(s), T::from_f64(c));
                let x0 = xr[2 * k];
                let x1 = xr[2 * k + 1];
                yr[2 * k] = x0 * c - x1 * s;
                yr[2 * k + 1] = x0 * s + x1 * c;
            }
        }
        Tensor::new(vec![n, d], out)
    }

    /// Copy of columns `[start, start + width)` of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor<T>> {
        let (m, n) = self.dims2("slice_cols")?;
        let end = start.checked_add(width).filter(|&e| e <= n).ok_or(
            GdaError::IndexOutOfRange {
                what: "column slice end",
                index: start + width,
                bound: n + 1,
            },
        )?;
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + end]);
        }
        Tensor::new(vec![m, width], out)
    }

    /// Accumulate `block` into columns `[start, start + block.cols)`.
    pub fn add_into_cols(&mut self, start: usize, block: &Tensor<T>) -> Result<()> {
        let (m, n) = self.dims2("add_into_cols")?;
        let (bm, bn) = block.dims2("add_into_cols")?;
        if bm != m || start + bn > n {
            return Err(GdaError::ShapeMismatch {
                op: "add_into_cols",
                lhs: self.shape.clone(),
                rhs: block.shape.clone(),
            });
        }
        for i in 0..m {
            let dst = &mut self.data[i * n + start..i * n + start + bn];
            let src = &block.data[i * bn..(i + 1) * bn];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
        Ok(())
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| {
            GdaError::Config("concat_cols needs at least one tensor".into())
        })?;
        let (m, _) = first.dims2("concat_cols")?;
        let mut total = 0usize;
        for p in parts {
            let (pm, pn) = p.dims2("concat_cols")?;
            if pm != m {
                return Err(GdaError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                let pn = p.shape[1];
                out.extend_from_slice(&p.data[i * pn..(i + 1) * pn]);
            }
        }
        Tensor::new(vec![m, total], out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Guard used after module-level forward passes. Overflow must surface
    /// as an error the training loop can turn into a structured abort, not
    /// as a panic, so this checks in every build.
    pub fn assert_finite(&self, stage: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(GdaError::NonFinite {
                stage: stage.to_string(),
            })
        }
    }

    pub fn max_abs_diff(&self, rhs: &Tensor<T>) -> Result<f64> {
        if self.shape != rhs.shape {
            return Err(GdaError::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut worst = 0.0f64;
        for (&a, &b) in self.data.iter().zip(&rhs.data) {
            let d = (a.to_f64() - b.to_f64()).abs();
            if d > worst {
                worst = d;
            }
        }
        Ok(worst)
    }

    /// Sum of squares accumulated in f64, for norms over whole parameter
    /// tables where element-type accumulation would lose too much.
    pub fn sum_sq_f64(&self) -> f64 {
        let mut s = 0.0f64;
        for &v in &self.data {
            let x = v.to_f64();
            s += x * x;
        }
        s
    }

    /// Lossy precision conversion (f64 -> f32 rounds; f32 -> f64 is exact).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect();
        Tensor::new(self.shape.clone(), data).expect("same shape")
    }
}

/// Backward rule for one `rms_norm` row with a folded output scale:
/// forward was `y = scale * (x * inv_rms) .* gain`. Writes `dx`, accumulates
/// into `dgain`.
pub(crate) fn rms_backward_row<T: Scalar>(
    x: &[T],
    gain: &[T],
    inv_rms: T,
    scale: T,
    dy: &[T],
    dx: &mut [T],
    dgain: &mut [T],
) {
    let k = x.len();
    let mut dot = T::zero();
    for i in 0..k {
        let dn = scale * gain[i] * dy[i];
        dgain[i] = dgain[i] + scale * (x[i] * inv_rms) * dy[i];
        dot = dot + dn * x[i];
    }
    let coef = inv_rms * inv_rms * inv_rms * dot * T::from_f64(1.0 / k as f64);
    for i in 0..k {
        let dn = scale * gain[i] * dy[i];
        dx[i] = inv_rms * dn - coef * x[i];
    }
}

/// Backward rule for row-wise softmax: given the forward output `a` and the
/// upstream gradient `da`, the score gradient is `a .* (da - sum(a .* da))`
/// per row, restricted to the visible prefix under a causal mask.
pub(crate) fn softmax_backward<T: Scalar>(
    a: &Tensor<T>,
    da: &Tensor<T>,
    mask: Mask,
) -> Result<Tensor<T>> {
    let (m, n) = a.dims2("softmax_backward")?;
    if da.shape() != a.shape() {
        return Err(GdaError::ShapeMismatch {
            op: "softmax_backward",
            lhs: a.shape.clone(),
            rhs: da.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let visible = match mask {
            Mask::None => n,
            Mask::Causal => i + 1,
        };
        let ar = &a.data[i * n..i * n + visible];
        let dr = &da.data[i * n..i * n + visible];
        let mut dot = T::zero();
        for (&av, &dv) in ar.iter().zip(dr) {
            dot = dot + av * dv;
        }
        let or = &mut out[i * n..i * n + visible];
        for ((o, &av), &dv) in or.iter_mut().zip(ar).zip(dr) {
            *o = av * (dv - dot);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Gaussian-initialized tensor: `std * z` with `z ~ N(0, 1)` drawn in f64.
pub fn randn<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64(std * z)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("static shape")
}

/// Gaussian init with rejection outside `clip` standard deviations, so a
/// fresh model cannot start from an extreme outlier weight.
pub fn randn_clipped<T: Scalar, R: Rng>(
    shape: &[usize],
    std: f64,
    clip: f64,
    rng: &mut R,
) -> Tensor<T> {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let mut z: f64 = rng.sample(StandardNormal);
            while z.abs() > clip {
                z = rng.sample(StandardNormal);
            }
            T::from_f64(std * z)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("static shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t64(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_rows(rows, cols, v.to_vec()).unwrap()
    }

    /// Independent matmul oracle: the textbook i, j, k triple loop with the
    /// same fused multiply-add per term as the kernel.
    fn matmul_naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for kk in 0..k {
                    acc = a.data()[i * k + kk].mul_add(b.data()[kk * n + j], acc);
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::from_rows(m, n, out).unwrap()
    }

    #[test]
    fn shape_invariants_enforced() {
        assert!(Tensor::<f64>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn matmul_small_cases() {
        let id = t64(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let v = t64(2, 1, &[3.0, 4.0]);
        assert_eq!(id.matmul(&v).unwrap().data(), &[3.0, 4.0]);

        let a = t64(1, 1, &[2.0]);
        let b = t64(1, 1, &[3.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t64(2, 3, &[0.0; 6]);
        let b = t64(2, 3, &[0.0; 6]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "unhelpful message: {msg}");
        assert!(msg.contains("matmul"), "unhelpful message: {msg}");
    }

    #[test]
    fn matmul_matches_naive_oracle_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // Shapes cover full tiles, row/column remainders, and sub-tile
        // matrices so every path through the blocked kernel is compared.
        for &(m, k, n) in &[
            (1, 1, 1),
            (5, 4, 3),
            (8, 16, 2),
            (3, 7, 11),
            (4, 8, 32),
            (4, 8, 64),
            (65, 33, 70),
            (128, 16, 128),
            (128, 128, 384),
        ] {
            let a: Tensor<f64> = randn(&[m, k], 1.0, &mut rng);
            let b: Tensor<f64> = randn(&[k, n], 1.0, &mut rng);
            let got = a.matmul(&b).unwrap();
            let want = matmul_naive(&a, &b);
            assert_eq!(got.data(), want.data(), "({m},{k},{n})");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matmul_equals_naive_for_random_shapes(
            m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Tensor<f64> = randn(&[m, k], 1.0, &mut rng);
            let b: Tensor<f64> = randn(&[k, n], 1.0, &mut rng);
            let got = a.matmul(&b).unwrap();
            let want = matmul_naive(&a, &b);
            prop_assert_eq!(got.data(), want.data());
        }

        #[test]
        fn rms_norm_scale_invariant_at_zero_eps(
            seed in 0u64..1000, c in 0.25f64..8.0, d in 1usize..9
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x: Tensor<f64> = randn(&[3, d], 1.0, &mut rng);
            // Keep rows away from zero so the norm is well conditioned.
            for v in x.data_mut() { *v += 0.1 * v.signum() + 0.05; }
            let gain = Tensor::filled(&[d], 1.0);
            let base = x.rms_norm(&gain, 0.0).unwrap();
            let scaled = x.scale(c).rms_norm(&gain, 0.0).unwrap();
            prop_assert!(base.max_abs_diff(&scaled).unwrap() < 1e-10);
        }

        #[test]
        fn rope_preserves_pair_norms(seed in 0u64..1000, p in 0usize..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Tensor<f64> = randn(&[1, 8], 1.0, &mut rng);
            let y = x.apply_rope(&[p], 10_000.0).unwrap();
            for k in 0..4 {
                let nx = x.data()[2 * k].hypot(x.data()[2 * k + 1]);
                let ny = y.data()[2 * k].hypot(y.data()[2 * k + 1]);
                prop_assert!((nx - ny).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn softmax_basics() {
        let x = t64(1, 2, &[0.0, 0.0]);
        assert_eq!(x.softmax_rows(Mask::None).unwrap().data(), &[0.5, 0.5]);

        // ln 3 gap gives exactly a 1:3 split.
        let x = t64(1, 2, &[0.0, 3.0f64.ln()]);
        let s = x.softmax_rows(Mask::None).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_handles_huge_scores_without_overflow() {
        let x = t64(1, 3, &[1000.0, 1000.0, 1000.0]);
        let s = x.softmax_rows(Mask::None).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let x32 = Tensor::<f32>::from_rows(1, 2, vec![90.0, 90.0]).unwrap();
        let s32 = x32.softmax_rows(Mask::None).unwrap();
        assert!(s32.is_finite());
        assert!((s32.data()[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn causal_softmax_masks_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor<f64> = randn(&[5, 5], 2.0, &mut rng);
        let s = x.softmax_rows(Mask::Causal).unwrap();
        for i in 0..5 {
            let row = s.row(i);
            for (j, &v) in row.iter().enumerate() {
                if j > i {
                    assert_eq!(v, 0.0, "masked entry must be exactly zero");
                }
            }
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // First row puts everything on the only visible column.
        assert_eq!(s.get2(0, 0), 1.0);
    }

    #[test]
    fn causal_softmax_rejects_non_square() {
        let x = t64(2, 3, &[0.0; 6]);
        assert!(x.softmax_rows(Mask::Causal).is_err());
    }

    #[test]
    fn softmax_row_sums_across_many_random_rows_both_precisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Tensor<f64> = randn(&[1000, 16], 3.0, &mut rng);
        let s = x.softmax_rows(Mask::None).unwrap();
        for i in 0..1000 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
        }

        let x32: Tensor<f32> = x.cast();
        let s32 = x32.softmax_rows(Mask::None).unwrap();
        for i in 0..1000 {
            let sum: f32 = s32.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-5, "f32 row {i} sums to {sum}");
        }
    }

    #[test]
    fn rms_norm_reference_values() {
        // Unit gain leaves a constant-magnitude row unchanged at eps = 0.
        let ones = t64(1, 4, &[1.0; 4]);
        let gain = Tensor::filled(&[4], 1.0);
        assert_eq!(ones.rms_norm(&gain, 0.0).unwrap().data(), &[1.0; 4]);

        // Oracle: x / sqrt(mean(x^2)) computed directly.
        let x = t64(1, 2, &[3.0, 4.0]);
        let gain2 = Tensor::filled(&[2], 1.0);
        let y = x.rms_norm(&gain2, 0.0).unwrap();
        let rms = ((3.0f64 * 3.0 + 4.0 * 4.0) / 2.0).sqrt();
        assert!((y.data()[0] - 3.0 / rms).abs() < 1e-12);
        assert!((y.data()[1] - 4.0 / rms).abs() < 1e-12);
        // Frozen expected values for the same case.
        assert!((y.data()[0] - 0.848_528_137_423_857).abs() < 1e-12);
        assert!((y.data()[1] - 1.131_370_849_898_476).abs() < 1e-12);
    }

    #[test]
    fn rms_norm_zero_row_stays_zero_with_eps() {
        let x = t64(1, 3, &[0.0; 3]);
        let gain = Tensor::filled(&[3], 1.0);
        let y = x.rms_norm(&gain, 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0; 3]);
    }

    #[test]
    fn rms_norm_rejects_negative_eps_and_bad_gain() {
        let x = t64(1, 3, &[1.0; 3]);
        let gain = Tensor::filled(&[3], 1.0);
        assert!(x.rms_norm(&gain, -1.0).is_err());
        let bad_gain = Tensor::filled(&[2], 1.0);
        assert!(x.rms_norm(&bad_gain, 0.0).is_err());
    }

    #[test]
    fn rms_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Tensor<f64> = randn(&[1, 6], 1.0, &mut rng);
        let gain: Tensor<f64> = randn(&[6], 0.2, &mut rng);
        let gain = gain.add(&Tensor::filled(&[6], 1.0)).unwrap();
        let dy: Tensor<f64> = randn(&[1, 6], 1.0, &mut rng);
        let eps = 1e-6;
        let scale = 0.7;

        let f = |xv: &[f64], gv: &[f64]| -> f64 {
            let xt = Tensor::from_rows(1, 6, xv.to_vec()).unwrap();
            let gt = Tensor::new(vec![6], gv.to_vec()).unwrap();
            let y = xt.rms_norm(&gt, eps).unwrap();
            y.data().iter().zip(dy.data()).map(|(a, b)| scale * a * b).sum()
        };

        let ss: f64 = x.data().iter().map(|v| v * v).sum();
        let inv = 1.0 / (ss / 6.0 + eps).sqrt();
        let mut dx = vec![0.0; 6];
        let mut dg = vec![0.0; 6];
        rms_backward_row(x.data(), gain.data(), inv, scale, dy.data(), &mut dx, &mut dg);

        let h = 1e-6;
        for i in 0..6 {
            let mut xp = x.data().to_vec();
            let mut xm = x.data().to_vec();
            xp[i] += h;
            xm[i] -= h;
            let num = (f(&xp, gain.data()) - f(&xm, gain.data())) / (2.0 * h);
            assert!((num - dx[i]).abs() < 1e-7, "dx[{i}]: fd {num} vs {}", dx[i]);

            let mut gp = gain.data().to_vec();
            let mut gm = gain.data().to_vec();
            gp[i] += h;
            gm[i] -= h;
            let num = (f(x.data(), &gp) - f(x.data(), &gm)) / (2.0 * h);
            assert!((num - dg[i]).abs() < 1e-7, "dgain[{i}]: fd {num} vs {}", dg[i]);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Tensor<f64> = randn(&[4, 4], 1.0, &mut rng);
        let dy: Tensor<f64> = randn(&[4, 4], 1.0, &mut rng);
        for mask in [Mask::None, Mask::Causal] {
            let a = x.softmax_rows(mask).unwrap();
            let ds = softmax_backward(&a, &dy, mask).unwrap();
            let h = 1e-6;
            for i in 0..16 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.data_mut()[i] += h;
                xm.data_mut()[i] -= h;
                let fp: f64 = xp
                    .softmax_rows(mask)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(a, b)| a * b)
                    .sum();
                let fm: f64 = xm
                    .softmax_rows(mask)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(a, b)| a * b)
                    .sum();
                let num = (fp - fm) / (2.0 * h);
                assert!(
                    (num - ds.data()[i]).abs() < 1e-7,
                    "{mask:?} d[{i}]: fd {num} vs {}",
                    ds.data()[i]
                );
            }
        }
    }

    #[test]
    fn rope_identity_at_position_zero() {
        let x = t64(1, 6, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.apply_rope(&[0], 10_000.0).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn rope_matches_per_pair_oracle() {
        // d = 4, theta = 100: pair k rotates by p * 100^(-2k/4).
        let x = t64(1, 4, &[1.0, 0.0, 0.5, -2.0]);
        let p = 3usize;
        let y = x.apply_rope(&[p], 100.0).unwrap();
        let angles = [3.0 * 1.0, 3.0 * 100.0f64.powf(-0.5)];
        let mut want = [0.0; 4];
        for k in 0..2 {
            let (s, c) = angles[k].sin_cos();
            want[2 * k] = x.data()[2 * k] * c - x.data()[2 * k + 1] * s;
            want[2 * k + 1] = x.data()[2 * k] * s + x.data()[2 * k + 1] * c;
        }
        for i in 0..4 {
            assert!((y.data()[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_inverse_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x: Tensor<f64> = randn(&[3, 8], 1.0, &mut rng);
        let y = x
            .apply_rope(&[5, 90, 1000], 10_000.0)
            .unwrap()
            .apply_rope_inverse(&[5, 90, 1000], 10_000.0)
            .unwrap();
        assert!(x.max_abs_diff(&y).unwrap() < 1e-12);
    }

    #[test]
    fn rope_rejects_odd_width_and_bad_positions() {
        let x = t64(1, 3, &[0.0; 3]);
        assert!(x.apply_rope(&[0], 10.0).is_err());
        let x = t64(2, 4, &[0.0; 8]);
        assert!(x.apply_rope(&[0], 10.0).is_err());
        assert!(x.apply_rope(&[0, 1], -1.0).is_err());
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let x = t64(2, 4, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let a = x.slice_cols(0, 2).unwrap();
        let b = x.slice_cols(2, 2).unwrap();
        assert_eq!(a.data(), &[1.0, 2.0, 5.0, 6.0]);
        let back = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(back.data(), x.data());
        assert!(x.slice_cols(3, 2).is_err());
    }

    #[test]
    fn transpose_matches_definition() {
        let x = t64(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let xt = x.transposed().unwrap();
        assert_eq!(xt.shape(), &[3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(x.get2(i, j), xt.get2(j, i));
            }
        }
    }

    #[test]
    fn precision_tags_roundtrip() {
        assert_eq!(Precision::F32.tag(), 4);
        assert_eq!(Precision::F64.tag(), 8);
        assert_eq!(Precision::from_tag(4).unwrap(), Precision::F32);
        assert_eq!(Precision::from_tag(8).unwrap(), Precision::F64);
        assert!(Precision::from_tag(2).is_err());
    }

    #[test]
    fn randn_is_deterministic_per_seed_and_respects_clip() {
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let a: Tensor<f64> = randn_clipped(&[64], 0.02, 3.0, &mut r1);
        let b: Tensor<f64> = randn_clipped(&[64], 0.02, 3.0, &mut r2);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.abs() <= 0.02 * 3.0 + 1e-15));
    }
}
