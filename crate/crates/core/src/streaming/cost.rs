//! Closed-form attention cost model. Counts are multiply-accumulates (MACs),
//! one per multiply-add, for a single layer.

use super::Backend;
use crate::numerics::Precision;

/// Geometry of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnDims {
    /// Tokens per frame `L`.
    pub tokens: usize,
    /// Hidden width `d = heads · head_dim`.
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    pub fn new(tokens: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            tokens,
            model_dim: heads * head_dim,
            heads,
            head_dim,
        }
    }
}

fn projections(a: AttnDims) -> u64 {
    8 * (a.tokens * a.model_dim * a.model_dim) as u64
}

/// MACs of one forward pass of one layer with `history_frames` frames of
/// context behind the current one.
///
/// * softmax: scores and value mix over `history·L + L` keys, `2·L·(hL+L)·D·H`
///   each, plus `8·L·d²` for projections;
/// * hybrid: intra-frame softmax `4·L²·D·H`, state query `2·L·D²·H`,
///   feature maps `6·L·D²·H`, projections `8·L·d²`. Independent of history.
pub fn count_attention_flops(backend: Backend, dims: AttnDims, history_frames: usize) -> u64 {
    let (l, dh, h) = (dims.tokens as u64, dims.head_dim as u64, dims.heads as u64);
    match backend {
        Backend::Softmax => {
            let keys = history_frames as u64 * l + l;
            2 * (2 * l * keys * dh * h) + projections(dims)
        }
        Backend::Hybrid => 2 * l * l * dh * h * 2 + 2 * l * dh * dh * h + 2 * l * dh * dh * h * 3 + projections(dims),
    }
}

/// MACs of the once-per-frame recurrent state write, `4·L·D²·H`.
pub fn state_update_macs(dims: AttnDims) -> u64 {
    4 * (dims.tokens * dims.head_dim * dims.head_dim * dims.heads) as u64
}

/// Bytes one layer keeps between frames: the KV cache (`2·history·L·d`
/// scalars) or the recurrent state (`H·D²` scalars, whatever the history).
pub fn memory_footprint(backend: Backend, dims: AttnDims, history_frames: usize, precision: Precision) -> u64 {
    let b = precision.bytes_per_scalar() as u64;
    match backend {
        Backend::Softmax => 2 * (history_frames * dims.tokens * dims.model_dim) as u64 * b,
        Backend::Hybrid => (dims.heads * dims.head_dim * dims.head_dim) as u64 * b,
    }
}

/// Cumulative MACs of one layer after generating `frames` frames with
/// `denoise_steps` noisy passes plus one clean pass each, as a polynomial in
/// the frame count (no per-frame loop).
pub fn cumulative_macs(backend: Backend, dims: AttnDims, frames: u64, denoise_steps: u64) -> u64 {
    let passes = denoise_steps + 1;
    let (l, dh, h) = (dims.tokens as u64, dims.head_dim as u64, dims.heads as u64);
    match backend {
        Backend::Softmax => {
            // Σ_{i<N} (4·L·(iL + L)·D·H + 8Ld²)
            let per_key = 4 * l * dh * h;
            let fixed = per_key * l + projections(dims);
            passes * (frames * fixed + per_key * l * frames * frames.saturating_sub(1) / 2)
        }
        Backend::Hybrid => frames * (passes * count_attention_flops(backend, dims, 0) + state_update_macs(dims)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: AttnDims = AttnDims {
        tokens: 16,
        model_dim: 64,
        heads: 4,
        head_dim: 16,
    };

    #[test]
    fn no_history_differs_by_recurrent_terms_only() {
        let s = count_attention_flops(Backend::Softmax, DIMS, 0);
        let h = count_attention_flops(Backend::Hybrid, DIMS, 0);
        let (l, dh, heads) = (16u64, 16u64, 4u64);
        assert_eq!(h - s, 2 * l * dh * dh * heads + 6 * l * dh * dh * heads);
    }

    #[test]
    fn softmax_history_term_is_linear_per_pass() {
        let hist =
            |k| count_attention_flops(Backend::Softmax, DIMS, k) - count_attention_flops(Backend::Softmax, DIMS, 0);
        for k in [1, 5, 50, 500] {
            assert_eq!(hist(2 * k), 2 * hist(k));
        }
        let ratio = count_attention_flops(Backend::Softmax, DIMS, 20_000) as f64
            / count_attention_flops(Backend::Softmax, DIMS, 10_000) as f64;
        assert!((ratio - 2.0).abs() < 1e-3);
    }

    #[test]
    fn hybrid_cost_ignores_history() {
        assert_eq!(
            count_attention_flops(Backend::Hybrid, DIMS, 0),
            count_attention_flops(Backend::Hybrid, DIMS, 1_000_000)
        );
    }

    #[test]
    fn memory_constancy_and_slope() {
        let p = Precision::Double;
        assert_eq!(
            memory_footprint(Backend::Hybrid, DIMS, 0, p),
            memory_footprint(Backend::Hybrid, DIMS, 1_000_000, p)
        );
        let slope = memory_footprint(Backend::Softmax, DIMS, 11, p) - memory_footprint(Backend::Softmax, DIMS, 10, p);
        assert_eq!(slope, 2 * 16 * 64 * 8);
        assert_eq!(memory_footprint(Backend::Softmax, DIMS, 0, Precision::Single), 0);
    }

    #[test]
    fn cumulative_matches_frame_loop() {
        for backend in [Backend::Softmax, Backend::Hybrid] {
            for t in [1, 4] {
                let mut acc = 0;
                for i in 0..30u64 {
                    acc += (t + 1) * count_attention_flops(backend, DIMS, i as usize);
                    if backend == Backend::Hybrid {
                        acc += state_update_macs(DIMS);
                    }
                    assert_eq!(cumulative_macs(backend, DIMS, i + 1, t), acc);
                }
            }
        }
    }
}
