//! Inter-frame recurrent branch: the gated delta state update, sequential and
//! chunkwise, and the read-only state query.
//!
//! Per head the state is a `D×D` matrix `S` (row index = key coordinate,
//! column index = value coordinate). Token `j` with unit key row `k`, value
//! row `v` and gates `α, β ∈ (0, 1)` applies
//!
//! ```text
//! S ← α·S + β·kᵀ(v − k·S)
//! ```
//!
//! i.e. the linear map `S ↦ (αI − β·kᵀk)·S` plus the write `β·kᵀv`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{matmul, sigmoid, Precision, Tensor};

pub const DEFAULT_CHUNK_SIZE: usize = 16;

/// Fixed-size per-layer memory `S[H×D×D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    s: Tensor,
    heads: usize,
    head_dim: usize,
    /// Index of the last absorbed clean frame, `-1` before the first.
    pub last_clean_frame: i64,
    /// Number of frames written into the state.
    pub write_count: u64,
}

impl RecurrentState {
    pub fn new(heads: usize, head_dim: usize, precision: Precision) -> Self {
        Self {
            s: Tensor::zeros([heads, head_dim, head_dim]).with_precision(precision),
            heads,
            head_dim,
            last_clean_frame: -1,
            write_count: 0,
        }
    }

    /// Wraps an explicit `[H, D, D]` matrix stack (fresh bookkeeping).
    pub fn from_matrices(s: Tensor) -> Result<Self> {
        let shape = s.shape();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(shape_err("recurrent_state", format!("{shape:?} is not [H, D, D]")));
        }
        let (heads, head_dim) = (shape[0], shape[1]);
        Ok(Self {
            s,
            heads,
            head_dim,
            last_clean_frame: -1,
            write_count: 0,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn matrices(&self) -> &Tensor {
        &self.s
    }

    pub fn head(&self, h: usize) -> &[f64] {
        let dd = self.head_dim * self.head_dim;
        &self.s.data()[h * dd..(h + 1) * dd]
    }

    /// Bytes of the state buffer; independent of how many frames it absorbed.
    pub fn size_bytes(&self) -> usize {
        self.s.size_bytes()
    }

    pub fn reset(&mut self) {
        let precision = self.s.precision();
        *self = Self::new(self.heads, self.head_dim, precision);
    }

    fn check_update_inputs(&self, k: &Tensor, v: &Tensor, alpha: &Tensor, beta: &Tensor) -> Result<usize> {
        let width = self.heads * self.head_dim;
        let l = k.rows();
        if k.cols() != width || v.shape() != k.shape() {
            return Err(shape_err(
                "gdn_update",
                format!("k {:?}, v {:?}, state width {width}", k.shape(), v.shape()),
            ));
        }
        for g in [alpha, beta] {
            if g.shape() != [l, self.heads] {
                return Err(shape_err(
                    "gdn_update",
                    format!("gate {:?}, expected [{l}, {}]", g.shape(), self.heads),
                ));
            }
        }
        Ok(l)
    }

    fn commit(&mut self, data: Vec<f64>) -> Result<()> {
        let next = Tensor::finish(self.s.shape().to_vec(), data, self.s.precision());
        if !next.is_finite() {
            return Err(Error::NonFinite {
                context: "gated delta state update".into(),
            });
        }
        self.s = next;
        self.write_count += 1;
        Ok(())
    }
}

/// Per-token projections producing the forget gate `α` and the write
/// strength `β`, one of each per head.
#[derive(Debug, Clone, PartialEq)]
pub struct GatePredictors {
    pub w_alpha: Tensor,
    pub b_alpha: Tensor,
    pub w_beta: Tensor,
    pub b_beta: Tensor,
}

impl GatePredictors {
    /// Zero weights with `b_α = +2` (α ≈ 0.88) and `b_β = −2` (β ≈ 0.12).
    pub fn init(model_dim: usize, heads: usize) -> Self {
        Self {
            w_alpha: Tensor::zeros([model_dim, heads]),
            b_alpha: Tensor::filled([heads], 2.0),
            w_beta: Tensor::zeros([model_dim, heads]),
            b_beta: Tensor::filled([heads], -2.0),
        }
    }
}

/// `α = σ(x·w_α + b_α)`, `β = σ(x·w_β + b_β)`, each `[L, H]`.
pub fn predict_gates(x: &Tensor, gp: &GatePredictors) -> Result<(Tensor, Tensor)> {
    let alpha = matmul(x, &gp.w_alpha)?.add_row(&gp.b_alpha)?.map(sigmoid);
    let beta = matmul(x, &gp.w_beta)?.add_row(&gp.b_beta)?.map(sigmoid);
    Ok((alpha, beta))
}

/// Token-by-token application of the delta rule; one frame, one write.
pub fn update_sequential(
    state: &mut RecurrentState,
    k: &Tensor,
    v: &Tensor,
    alpha: &Tensor,
    beta: &Tensor,
) -> Result<()> {
    let l = state.check_update_inputs(k, v, alpha, beta)?;
    let (heads, dk) = (state.heads, state.head_dim);
    let mut s = state.s.data().to_vec();
    let mut ks = vec![0.0; dk];
    for h in 0..heads {
        let sh = &mut s[h * dk * dk..(h + 1) * dk * dk];
        for j in 0..l {
            let kj = &k.row(j)[h * dk..(h + 1) * dk];
            let vj = &v.row(j)[h * dk..(h + 1) * dk];
            let (a, b) = (alpha.row(j)[h], beta.row(j)[h]);
            ks.fill(0.0);
            for (p, &kp) in kj.iter().enumerate() {
                for (acc, &spq) in ks.iter_mut().zip(&sh[p * dk..(p + 1) * dk]) {
                    *acc += kp * spq;
                }
            }
            for (p, &kp) in kj.iter().enumerate() {
                for q in 0..dk {
                    let idx = p * dk + q;
                    sh[idx] = a * sh[idx] + b * kp * (vj[q] - ks[q]);
                }
            }
        }
    }
    state.commit(s)
}

/// Blocked evaluation of [`update_sequential`].
///
/// Within a chunk of `n` tokens starting from state `S₀`, with
/// `r(i, j) = α_{i+1}···α_j` and residuals `u_j = v_j − k_j·S_{j−1}`:
///
/// ```text
/// u_j = v_j − r(−1, j−1)·k_j·S₀ − Σ_{i<j} r(i, j−1)·β_i·(k_j·k_i)·u_i
/// S_n = r(−1, n−1)·S₀ + Σ_i r(i, n−1)·β_i·k_iᵀu_i
/// ```
///
/// The residuals solve a unit lower-triangular `n×n` system; `K·S₀`, `K·Kᵀ`
/// and the final `Kᵀ·U` are matrix products.
pub fn update_chunkwise(
    state: &mut RecurrentState,
    k: &Tensor,
    v: &Tensor,
    alpha: &Tensor,
    beta: &Tensor,
    chunk_size: usize,
) -> Result<()> {
    if chunk_size == 0 {
        return Err(Error::InvalidArgument {
            detail: "chunk_size must be positive".into(),
        });
    }
    let l = state.check_update_inputs(k, v, alpha, beta)?;
    let (heads, dk) = (state.heads, state.head_dim);
    let mut s = state.s.data().to_vec();
    for h in 0..heads {
        let mut sh = Tensor::new([dk, dk], s[h * dk * dk..(h + 1) * dk * dk].to_vec())?;
        let mut start = 0;
        while start < l {
            let n = chunk_size.min(l - start);
            sh = chunk_step(&sh, k, v, alpha, beta, h, dk, start, n)?;
            start += n;
        }
        s[h * dk * dk..(h + 1) * dk * dk].copy_from_slice(sh.data());
    }
    state.commit(s)
}

#[allow(clippy::too_many_arguments)]
fn chunk_step(
    s0: &Tensor,
    k: &Tensor,
    v: &Tensor,
    alpha: &Tensor,
    beta: &Tensor,
    h: usize,
    dk: usize,
    start: usize,
    n: usize,
) -> Result<Tensor> {
    let block = |t: &Tensor| {
        let mut data = Vec::with_capacity(n * dk);
        for j in start..start + n {
            data.extend_from_slice(&t.row(j)[h * dk..(h + 1) * dk]);
        }
        Tensor::new([n, dk], data)
    };
    let kc = block(k)?;
    let vc = block(v)?;
    let a: Vec<f64> = (start..start + n).map(|j| alpha.row(j)[h]).collect();
    let b: Vec<f64> = (start..start + n).map(|j| beta.row(j)[h]).collect();

    // decay[i + 1][j + 1] = r(i, j) = Π_{m=i+1}^{j} α_m for -1 ≤ i ≤ j < n.
    let mut decay = vec![vec![0.0; n + 1]; n + 1];
    #[allow(clippy::needless_range_loop)]
    for i in 0..=n {
        decay[i][i] = 1.0;
        for j in i + 1..=n {
            decay[i][j] = decay[i][j - 1] * a[j - 1];
        }
    }
    let r = |i: isize, j: isize| decay[(i + 1) as usize][(j + 1) as usize];

    let ks0 = matmul(&kc, s0)?;
    let gram = matmul(&kc, &kc.transpose())?;
    let mut u = vec![0.0; n * dk];
    for j in 0..n {
        let carry = r(-1, j as isize - 1);
        for q in 0..dk {
            u[j * dk + q] = vc.row(j)[q] - carry * ks0.row(j)[q];
        }
        for i in 0..j {
            let t = r(i as isize, j as isize - 1) * b[i] * gram.row(j)[i];
            if t != 0.0 {
                for q in 0..dk {
                    u[j * dk + q] -= t * u[i * dk + q];
                }
            }
        }
    }
    // Rows of U scaled by r(i, n-1)·β_i, then S_n = r(-1, n-1)·S₀ + Kᵀ·U'.
    for i in 0..n {
        let w = r(i as isize, n as isize - 1) * b[i];
        for q in 0..dk {
            u[i * dk + q] *= w;
        }
    }
    let write = matmul(&kc.transpose(), &Tensor::new([n, dk], u)?)?;
    s0.scale(r(-1, n as isize - 1)).add(&write)
}

/// `O[i, h] = q'[i, h] · S_h` for every token; reads the state only.
pub fn query(state: &RecurrentState, q: &Tensor) -> Result<Tensor> {
    let (heads, dk) = (state.heads, state.head_dim);
    if q.cols() != heads * dk {
        return Err(shape_err(
            "gdn_query",
            format!("q {:?}, state {heads}x{dk}x{dk}", q.shape()),
        ));
    }
    let l = q.rows();
    let mut out = vec![0.0; l * heads * dk];
    for i in 0..l {
        for h in 0..heads {
            let qi = &q.row(i)[h * dk..(h + 1) * dk];
            let sh = state.head(h);
            let o = &mut out[(i * heads + h) * dk..(i * heads + h + 1) * dk];
            for (p, &qp) in qi.iter().enumerate() {
                for (acc, &spq) in o.iter_mut().zip(&sh[p * dk..(p + 1) * dk]) {
                    *acc += qp * spq;
                }
            }
        }
    }
    Ok(Tensor::finish(vec![l, heads * dk], out, q.precision()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{l2norm_groups, Rng};

    fn random_frame(rng: &mut Rng, l: usize, heads: usize, dk: usize) -> [Tensor; 4] {
        let k = l2norm_groups(&rng.normal_tensor([l, heads * dk], 1.0), dk);
        let v = rng.normal_tensor([l, heads * dk], 1.0);
        let a = rng.uniform_tensor([l, heads], 0.05, 0.99);
        let b = rng.uniform_tensor([l, heads], 0.01, 0.99);
        [k, v, a, b]
    }

    /// Straight-line transcription of the update rule, sharing nothing with
    /// the kernels above.
    fn oracle_update(s: &mut [f64], k: &Tensor, v: &Tensor, a: &Tensor, b: &Tensor, heads: usize, dk: usize) {
        for h in 0..heads {
            for j in 0..k.rows() {
                let kv = |t: &Tensor, x: usize| t.data()[j * heads * dk + h * dk + x];
                let mut next = vec![0.0; dk * dk];
                for p in 0..dk {
                    for q in 0..dk {
                        let mut k_s = 0.0;
                        for r in 0..dk {
                            k_s += kv(k, r) * s[h * dk * dk + r * dk + q];
                        }
                        next[p * dk + q] = a.data()[j * heads + h] * s[h * dk * dk + p * dk + q]
                            + b.data()[j * heads + h] * kv(k, p) * (kv(v, q) - k_s);
                    }
                }
                s[h * dk * dk..(h + 1) * dk * dk].copy_from_slice(&next);
            }
        }
    }

    #[test]
    fn zero_write_strength_with_unit_retention_is_identity() {
        let mut rng = Rng::new(1);
        let mut st = RecurrentState::from_matrices(rng.normal_tensor([2, 4, 4], 1.0)).unwrap();
        let before = st.matrices().clone();
        let [k, v, _, _] = random_frame(&mut rng, 5, 2, 4);
        let ones = Tensor::filled([5, 2], 1.0);
        let zeros = Tensor::zeros([5, 2]);
        update_sequential(&mut st, &k, &v, &ones, &zeros).unwrap();
        assert!(st.matrices().bitwise_eq(&before));
        assert_eq!(st.write_count, 1);
    }

    #[test]
    fn rank_one_write_is_retrievable() {
        let mut rng = Rng::new(2);
        let mut st = RecurrentState::new(1, 4, Precision::Double);
        let k = Tensor::new([1, 4], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let v = rng.normal_tensor([1, 4], 1.0);
        let ones = Tensor::filled([1, 1], 1.0);
        update_sequential(&mut st, &k, &v, &ones, &ones).unwrap();
        let outer = matmul(&k.transpose(), &v).unwrap();
        assert!(st.matrices().reshape([4, 4]).unwrap().bitwise_eq(&outer));
        assert!(query(&st, &k).unwrap().bitwise_eq(&v));
    }

    #[test]
    fn sequential_matches_oracle() {
        for seed in 0..10 {
            let mut rng = Rng::new(seed);
            let (heads, dk) = (2, 4);
            let init = rng.normal_tensor([heads, dk, dk], 0.5);
            let [k, v, a, b] = random_frame(&mut rng, 5, heads, dk);
            let mut st = RecurrentState::from_matrices(init.clone()).unwrap();
            update_sequential(&mut st, &k, &v, &a, &b).unwrap();
            let mut want = init.into_data();
            oracle_update(&mut want, &k, &v, &a, &b, heads, dk);
            let got = st.matrices().data();
            let err = got.iter().zip(&want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-12, "seed {seed}: {err}");
        }
    }

    #[test]
    fn chunkwise_degenerate_chunk_sizes() {
        let mut rng = Rng::new(3);
        let init = rng.normal_tensor([2, 4, 4], 0.5);
        let [k, v, a, b] = random_frame(&mut rng, 7, 2, 4);
        let mut seq = RecurrentState::from_matrices(init.clone()).unwrap();
        update_sequential(&mut seq, &k, &v, &a, &b).unwrap();
        for (c, tol) in [(1, 1e-12), (7, 1e-10), (64, 1e-10)] {
            let mut ch = RecurrentState::from_matrices(init.clone()).unwrap();
            update_chunkwise(&mut ch, &k, &v, &a, &b, c).unwrap();
            assert!(ch.matrices().max_abs_diff(seq.matrices()) <= tol, "chunk {c}");
            assert_eq!(ch.write_count, 1);
        }
    }

    #[test]
    fn chunkwise_matches_sequential_over_seeds() {
        for seed in 0..50 {
            let mut rng = Rng::new(100 + seed);
            let init = rng.normal_tensor([2, 8, 8], 0.3);
            let [k, v, a, b] = random_frame(&mut rng, 16, 2, 8);
            let mut seq = RecurrentState::from_matrices(init.clone()).unwrap();
            let mut ch = RecurrentState::from_matrices(init).unwrap();
            update_sequential(&mut seq, &k, &v, &a, &b).unwrap();
            update_chunkwise(&mut ch, &k, &v, &a, &b, 4).unwrap();
            assert!(ch.matrices().max_abs_diff(seq.matrices()) <= 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn zero_key_only_decays() {
        let mut st = RecurrentState::from_matrices(Tensor::filled([1, 2, 2], 1.0)).unwrap();
        let k = Tensor::zeros([1, 2]);
        let v = Tensor::filled([1, 2], 3.0);
        let a = Tensor::filled([1, 1], 0.5);
        let b = Tensor::filled([1, 1], 0.9);
        update_chunkwise(&mut st, &k, &v, &a, &b, 16).unwrap();
        assert!(st.matrices().data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn non_finite_update_errors() {
        let mut st = RecurrentState::new(1, 2, Precision::Double);
        let k = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        let v = Tensor::new([1, 2], vec![f64::INFINITY, 0.0]).unwrap();
        let g = Tensor::filled([1, 1], 0.5);
        assert!(matches!(
            update_sequential(&mut st, &k, &v, &g, &g),
            Err(Error::NonFinite { .. })
        ));
        assert_eq!(st.write_count, 0);
    }

    #[test]
    fn fresh_state_queries_zero() {
        let st = RecurrentState::new(2, 4, Precision::Double);
        let q = Rng::new(4).normal_tensor([3, 8], 1.0);
        assert!(query(&st, &q).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn query_commutes_with_token_permutation() {
        let mut rng = Rng::new(5);
        let st = RecurrentState::from_matrices(rng.normal_tensor([2, 4, 4], 1.0)).unwrap();
        let q = rng.normal_tensor([4, 8], 1.0);
        let perm = [2, 0, 3, 1];
        let mut pdata = Vec::new();
        for &p in &perm {
            pdata.extend_from_slice(q.row(p));
        }
        let qp = Tensor::new([4, 8], pdata).unwrap();
        let (o, op) = (query(&st, &q).unwrap(), query(&st, &qp).unwrap());
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(op.row(i), o.row(p));
        }
    }

    #[test]
    fn gates_at_zero_are_one_half_and_saturate() {
        let x = Tensor::zeros([3, 4]);
        let mut gp = GatePredictors::init(4, 2);
        gp.b_alpha = Tensor::zeros([2]);
        gp.b_beta = Tensor::zeros([2]);
        let (a, b) = predict_gates(&x, &gp).unwrap();
        assert!(a.data().iter().chain(b.data()).all(|&g| g == 0.5));
        gp.b_alpha = Tensor::filled([2], 40.0);
        let (a, _) = predict_gates(&x, &gp).unwrap();
        assert!(a.data().iter().all(|&g| g > 1.0 - 1e-15));
    }

    #[test]
    fn gates_stay_open_interval() {
        let mut rng = Rng::new(6);
        let gp = GatePredictors {
            w_alpha: rng.normal_tensor([8, 2], 1.0),
            b_alpha: rng.normal_tensor([2], 1.0),
            w_beta: rng.normal_tensor([8, 2], 1.0),
            b_beta: rng.normal_tensor([2], 1.0),
        };
        let x = rng.normal_tensor([5000, 8], 1.0);
        let (a, b) = predict_gates(&x, &gp).unwrap();
        assert!(a.data().iter().chain(b.data()).all(|&g| g > 0.0 && g < 1.0));
    }
}
