//! Baseline block-causal softmax attention over a growing KV cache, and the
//! intra-frame bidirectional attention reused by the hybrid layer.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::numerics::{matmul, rope_grouped, softmax_rows, Precision, Rng, Tensor, ROPE_BASE};

/// Frozen pretrained attention projections. All four matrices are `d×d`
/// with `d = heads · head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    heads: usize,
    head_dim: usize,
}

impl ProjectionSet {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: usize, head_dim: usize) -> Result<Self> {
        let d = heads * head_dim;
        if heads == 0 || head_dim == 0 {
            return Err(shape_err("projection_set", "heads and head_dim must be positive"));
        }
        for (name, w) in [("wq", &wq), ("wk", &wk), ("wv", &wv), ("wo", &wo)] {
            if w.shape() != [d, d] {
                return Err(shape_err(
                    "projection_set",
                    format!("{name} is {:?}, expected [{d}, {d}]", w.shape()),
                ));
            }
            w.check_finite(name)?;
        }
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            heads,
            head_dim,
        })
    }

    /// Gaussian weights with standard deviation `gain / sqrt(d)`.
    pub fn random(rng: &mut Rng, heads: usize, head_dim: usize, gain: f64) -> Self {
        let d = heads * head_dim;
        let std = gain / libm::sqrt(d as f64);
        let mut w = || rng.normal_tensor([d, d], std);
        let (wq, wk, wv, wo) = (w(), w(), w(), w());
        Self {
            wq,
            wk,
            wv,
            wo,
            heads,
            head_dim,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub(crate) fn check_input(&self, x: &Tensor, op: &'static str) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.model_dim() {
            return Err(shape_err(
                op,
                format!("input {:?}, model width {}", x.shape(), self.model_dim()),
            ));
        }
        Ok(())
    }
}

/// Positions `frame_index·L .. frame_index·L + L`.
pub fn global_positions(frame_index: usize, tokens: usize) -> Vec<usize> {
    (frame_index * tokens..(frame_index + 1) * tokens).collect()
}

pub fn local_positions(tokens: usize) -> Vec<usize> {
    (0..tokens).collect()
}

/// Per-layer store of past clean frames' keys (already rotated at their
/// global positions) and values.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    frames: Vec<(Tensor, Tensor)>,
    precision: Precision,
}

impl KVCache {
    pub fn new(precision: Precision) -> Self {
        Self {
            frames: Vec::new(),
            precision,
        }
    }

    pub fn frames_stored(&self) -> usize {
        self.frames.len()
    }

    /// Total key rows across all stored frames.
    pub fn token_rows(&self) -> usize {
        self.frames.iter().map(|(k, _)| k.rows()).sum()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Bytes held by the stored key and value buffers.
    pub fn total_bytes(&self) -> usize {
        self.frames.iter().map(|(k, v)| k.size_bytes() + v.size_bytes()).sum()
    }

    pub fn frames(&self) -> &[(Tensor, Tensor)] {
        &self.frames
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }
}

/// Row-softmax attention probabilities per head, `Lq × Lk` each, with the
/// `1/sqrt(head_dim)` scale.
pub fn head_attention_weights(q: &Tensor, k: &Tensor, heads: usize, head_dim: usize) -> Result<Vec<Tensor>> {
    if q.cols() != heads * head_dim || k.cols() != heads * head_dim {
        return Err(shape_err(
            "attention",
            format!("q {:?}, k {:?}, {heads} heads of {head_dim}", q.shape(), k.shape()),
        ));
    }
    let scale = 1.0 / libm::sqrt(head_dim as f64);
    (0..heads)
        .map(|h| {
            let qh = head_slice(q, h, head_dim);
            let kh = head_slice(k, h, head_dim);
            let scores = matmul(&qh, &kh.transpose())?.scale(scale);
            softmax_rows(&scores, None)
        })
        .collect()
}

/// Multi-head attention of `q[Lq×H·D]` over `k, v[Lk×H·D]`; returns the
/// concatenated per-head outputs `[Lq, H·D]`, before any output projection.
pub fn head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, head_dim: usize) -> Result<Tensor> {
    if v.shape() != k.shape() {
        return Err(shape_err(
            "attention",
            format!("k {:?} vs v {:?}", k.shape(), v.shape()),
        ));
    }
    let probs = head_attention_weights(q, k, heads, head_dim)?;
    let mut heads_out = Vec::with_capacity(heads);
    for (h, p) in probs.iter().enumerate() {
        heads_out.push(matmul(p, &head_slice(v, h, head_dim))?);
    }
    Ok(merge_heads(&heads_out, q.precision()))
}

/// Columns `h·D..(h+1)·D` as an `[rows, D]` tensor.
pub fn head_slice(x: &Tensor, h: usize, head_dim: usize) -> Tensor {
    let rows = x.rows();
    let mut data = Vec::with_capacity(rows * head_dim);
    for r in 0..rows {
        data.extend_from_slice(&x.row(r)[h * head_dim..(h + 1) * head_dim]);
    }
    Tensor::finish(alloc::vec![rows, head_dim], data, x.precision())
}

pub fn merge_heads(parts: &[Tensor], precision: Precision) -> Tensor {
    let rows = parts[0].rows();
    let hd = parts[0].cols();
    let mut data = Vec::with_capacity(rows * hd * parts.len());
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::finish(alloc::vec![rows, hd * parts.len()], data, precision)
}

/// Baseline attention for frame `N = cache.frames_stored()`: the frame's
/// queries attend bidirectionally within the frame and without masking to
/// every cached frame. Queries and keys are rotated at global positions;
/// the result is projected by `W_o`.
pub fn full_attention(x: &Tensor, cache: &KVCache, proj: &ProjectionSet) -> Result<Tensor> {
    proj.check_input(x, "full_attention")?;
    let (heads, hd) = (proj.heads, proj.head_dim);
    let pos = global_positions(cache.frames_stored(), x.rows());
    let q = rope_grouped(&matmul(x, &proj.wq)?, &pos, hd, ROPE_BASE)?;
    let k = rope_grouped(&matmul(x, &proj.wk)?, &pos, hd, ROPE_BASE)?;
    let v = matmul(x, &proj.wv)?;
    for (ck, _) in &cache.frames {
        if ck.cols() != x.cols() {
            return Err(shape_err(
                "full_attention",
                format!("cached width {} vs {}", ck.cols(), x.cols()),
            ));
        }
    }
    let mut keys: Vec<&Tensor> = cache.frames.iter().map(|(k, _)| k).collect();
    let mut values: Vec<&Tensor> = cache.frames.iter().map(|(_, v)| v).collect();
    keys.push(&k);
    values.push(&v);
    let k_all = Tensor::concat_rows(&keys)?;
    let v_all = Tensor::concat_rows(&values)?;
    let o = head_attention(&q, &k_all, &v_all, heads, hd)?;
    matmul(&o, &proj.wo)
}

/// Bidirectional attention over the current frame only, frame-local
/// positions, no output projection. Returns `[L, H·D]`.
pub fn intra_attention(x: &Tensor, proj: &ProjectionSet) -> Result<Tensor> {
    proj.check_input(x, "intra_attention")?;
    let q = matmul(x, &proj.wq)?;
    let k = matmul(x, &proj.wk)?;
    let v = matmul(x, &proj.wv)?;
    intra_from_projected(&q, &k, &v, proj)
}

/// [`intra_attention`] from already projected (unrotated) `Q, K, V`.
pub(crate) fn intra_from_projected(q: &Tensor, k: &Tensor, v: &Tensor, proj: &ProjectionSet) -> Result<Tensor> {
    let pos = local_positions(q.rows());
    let q = rope_grouped(q, &pos, proj.head_dim, ROPE_BASE)?;
    let k = rope_grouped(k, &pos, proj.head_dim, ROPE_BASE)?;
    head_attention(&q, &k, v, proj.heads, proj.head_dim)
}

/// Commits a clean frame's rotated keys and values to the cache.
pub fn append_clean_frame(cache: &mut KVCache, clean: &Tensor, proj: &ProjectionSet) -> Result<()> {
    proj.check_input(clean, "append_clean_frame")?;
    let pos = global_positions(cache.frames_stored(), clean.rows());
    let k = rope_grouped(&matmul(clean, &proj.wk)?, &pos, proj.head_dim, ROPE_BASE)?;
    let v = matmul(clean, &proj.wv)?;
    cache
        .frames
        .push((k.with_precision(cache.precision), v.with_precision(cache.precision)));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed: u64, heads: usize, hd: usize) -> (Rng, ProjectionSet) {
        let mut rng = Rng::new(seed);
        let proj = ProjectionSet::random(&mut rng, heads, hd, 1.0);
        (rng, proj)
    }

    #[test]
    fn single_token_empty_cache_returns_projected_value() {
        let (mut rng, proj) = setup(1, 2, 4);
        let x = rng.normal_tensor([1, 8], 1.0);
        let y = full_attention(&x, &KVCache::new(Precision::Double), &proj).unwrap();
        let want = matmul(&matmul(&x, &proj.wv).unwrap(), &proj.wo).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn empty_cache_coincides_with_intra() {
        let (mut rng, proj) = setup(2, 2, 4);
        let x = rng.normal_tensor([5, 8], 1.0);
        let full = full_attention(&x, &KVCache::new(Precision::Double), &proj).unwrap();
        let intra = matmul(&intra_attention(&x, &proj).unwrap(), &proj.wo).unwrap();
        assert!(full.bitwise_eq(&intra));
    }

    #[test]
    fn intra_single_token_is_value() {
        let (mut rng, proj) = setup(3, 2, 4);
        let x = rng.normal_tensor([1, 8], 1.0);
        let o = intra_attention(&x, &proj).unwrap();
        let v = matmul(&x, &proj.wv).unwrap();
        assert!(o.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn intra_ignores_frame_index() {
        let (mut rng, proj) = setup(4, 2, 4);
        let x = rng.normal_tensor([4, 8], 1.0);
        let at0 = intra_attention(&x, &proj).unwrap();
        // Fill a cache with seven frames; intra never reads it.
        let mut cache = KVCache::new(Precision::Double);
        for _ in 0..7 {
            append_clean_frame(&mut cache, &rng.normal_tensor([4, 8], 1.0), &proj).unwrap();
        }
        let at7 = intra_attention(&x, &proj).unwrap();
        assert!(at0.bitwise_eq(&at7));
    }

    #[test]
    fn cache_bytes_follow_appends() {
        let (mut rng, proj) = setup(5, 2, 4);
        let mut cache = KVCache::new(Precision::Double);
        append_clean_frame(&mut cache, &rng.normal_tensor([3, 8], 1.0), &proj).unwrap();
        assert_eq!(cache.total_bytes(), 2 * 3 * 8 * 8);
        for n in 2..=20 {
            append_clean_frame(&mut cache, &rng.normal_tensor([3, 8], 1.0), &proj).unwrap();
            assert_eq!(cache.frames_stored(), n);
            assert_eq!(cache.total_bytes(), n * 2 * 3 * 8 * 8);
        }
        let mut single = KVCache::new(Precision::Single);
        append_clean_frame(&mut single, &rng.normal_tensor([3, 8], 1.0), &proj).unwrap();
        assert_eq!(single.total_bytes(), 2 * 3 * 8 * 4);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let (mut rng, proj) = setup(6, 2, 4);
        let x = rng.normal_tensor([2, 6], 1.0);
        assert!(full_attention(&x, &KVCache::new(Precision::Double), &proj).is_err());
        assert!(intra_attention(&x, &proj).is_err());
    }

    #[test]
    fn every_token_attends_to_every_frame_token() {
        let (mut rng, proj) = setup(7, 2, 4);
        let x = rng.normal_tensor([6, 8], 1.0);
        let q = matmul(&x, &proj.wq).unwrap();
        let k = matmul(&x, &proj.wk).unwrap();
        for p in head_attention_weights(&q, &k, 2, 4).unwrap() {
            assert!(p.data().iter().all(|&w| w > 0.0));
        }
    }
}
