use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Rows whose Euclidean norm falls below this normalize to the zero row.
pub const EPSILON_NORM: f64 = 1e-12;

pub const ROPE_BASE: f64 = 10_000.0;

/// `a[m×k] · b[k×n]`. Every output element accumulates its `k` products in
/// ascending order starting from `0.0`, so results are reproducible bit for
/// bit and match a naive triple loop exactly.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(shape_err("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bpj) in orow.iter_mut().zip(brow) {
                *o += aip * bpj;
            }
        }
    }
    Ok(Tensor::finish(vec![m, n], out, a.precision()))
}

/// Row-wise softmax with an optional additive mask of `0` / `-inf` entries.
/// Masked entries come out as exactly `0.0`.
pub fn softmax_rows(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let (m, n) = (x.rows(), x.cols());
    if let Some(mask) = mask {
        if mask.shape() != x.shape() {
            return Err(shape_err(
                "softmax_rows",
                format!("mask {:?} vs scores {:?}", mask.shape(), x.shape()),
            ));
        }
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = x.row(i);
        let allowed = |j: usize| mask.is_none_or(|mk| mk.row(i)[j] != f64::NEG_INFINITY);
        let max = (0..n)
            .filter(|&j| allowed(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::EmptyAttentionRow { row: i });
        }
        let orow = &mut out[i * n..(i + 1) * n];
        let mut sum = 0.0;
        for j in 0..n {
            if allowed(j) {
                let e = libm::exp(row[j] - max);
                orow[j] = e;
                sum += e;
            }
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(Tensor::finish(vec![m, n], out, x.precision()))
}

/// Normalizes each row to unit Euclidean norm.
pub fn l2norm_rows(x: &Tensor) -> Tensor {
    l2norm_groups(x, x.cols())
}

/// Normalizes each contiguous run of `group` values (one head of one token
/// in the `[L, H·D]` layout) to unit norm; runs with norm below
/// [`EPSILON_NORM`] become zero.
pub fn l2norm_groups(x: &Tensor, group: usize) -> Tensor {
    debug_assert!(group > 0 && x.len().is_multiple_of(group));
    let mut out = x.data().to_vec();
    for chunk in out.chunks_mut(group) {
        let norm = libm::sqrt(chunk.iter().map(|v| v * v).sum::<f64>());
        if norm < EPSILON_NORM {
            chunk.fill(0.0);
        } else {
            for v in chunk.iter_mut() {
                *v /= norm;
            }
        }
    }
    Tensor::finish(x.shape().to_vec(), out, x.precision())
}

/// Rotary embedding of an `m×D` tensor: pair `(x[2i], x[2i+1])` of row `r`
/// is rotated by `positions[r] · base^(-2i/D)`.
pub fn rope(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    rope_grouped(x, positions, x.cols(), base)
}

/// Rotary embedding applied independently to every `group`-wide block of a
/// row, all blocks of row `r` sharing position `positions[r]`.
pub fn rope_grouped(x: &Tensor, positions: &[usize], group: usize, base: f64) -> Result<Tensor> {
    rotate(x, positions, group, base, 1.0)
}

/// Inverse of [`rope_grouped`] (rotation by the negated angles).
pub fn rope_inverse_grouped(x: &Tensor, positions: &[usize], group: usize, base: f64) -> Result<Tensor> {
    rotate(x, positions, group, base, -1.0)
}

fn rotate(x: &Tensor, positions: &[usize], group: usize, base: f64, sign: f64) -> Result<Tensor> {
    if !group.is_multiple_of(2) {
        return Err(Error::OddRopeDim { dim: group });
    }
    let (m, w) = (x.rows(), x.cols());
    if positions.len() != m || w % group != 0 {
        return Err(shape_err(
            "rope",
            format!("{m} rows of width {w}, {} positions, group {group}", positions.len()),
        ));
    }
    let freqs: Vec<f64> = (0..group / 2)
        .map(|i| libm::pow(base, -((2 * i) as f64) / group as f64))
        .collect();
    let mut out = x.data().to_vec();
    for (r, &pos) in positions.iter().enumerate() {
        let row = &mut out[r * w..(r + 1) * w];
        if pos == 0 {
            continue;
        }
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.iter().map(|f| libm::sincos(sign * pos as f64 * f)).unzip();
        for block in row.chunks_mut(group) {
            for i in 0..group / 2 {
                let (a, b) = (block[2 * i], block[2 * i + 1]);
                block[2 * i] = a * cos[i] - b * sin[i];
                block[2 * i + 1] = a * sin[i] + b * cos[i];
            }
        }
    }
    Ok(Tensor::finish(x.shape().to_vec(), out, x.precision()))
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}
