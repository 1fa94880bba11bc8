//! One hybrid attention layer: frozen softmax projections for the current
//! frame, a gated-delta state for everything earlier, and a sigmoid gate
//! mixing the two before the shared output projection.

use alloc::format;
use alloc::vec::Vec;

use crate::attention::{global_positions, intra_from_projected, ProjectionSet};
use crate::error::{shape_err, Error, Result};
use crate::gdn::{
    predict_gates, query, update_chunkwise, update_sequential, GatePredictors, RecurrentState, DEFAULT_CHUNK_SIZE,
};
use crate::numerics::{l2norm_groups, matmul, rope_grouped, sigmoid, Precision, Tensor, ROPE_BASE};

/// Per-head `D×D` linear maps adapting `Q, K, V` to the recurrent branch.
/// Each is stored as `[H, D, D]`; head `h` only mixes its own coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub phi_q: Tensor,
    pub phi_k: Tensor,
    pub phi_v: Tensor,
}

impl FeatureMaps {
    pub fn identity(heads: usize, head_dim: usize) -> Self {
        let eye = Tensor::from_fn([heads, head_dim, head_dim], |i| {
            let r = i % (head_dim * head_dim);
            if r / head_dim == r % head_dim {
                1.0
            } else {
                0.0
            }
        });
        Self {
            phi_q: eye.clone(),
            phi_k: eye.clone(),
            phi_v: eye,
        }
    }
}

/// Applies a grouped per-head map `phi[H, D, D]` to `x[L, H·D]`.
pub fn apply_headwise(x: &Tensor, phi: &Tensor) -> Result<Tensor> {
    let (heads, dk) = (phi.shape()[0], phi.shape()[1]);
    if x.cols() != heads * dk {
        return Err(shape_err(
            "feature_map",
            format!("input {:?}, map {:?}", x.shape(), phi.shape()),
        ));
    }
    let mut out = alloc::vec![0.0; x.len()];
    for i in 0..x.rows() {
        for h in 0..heads {
            let xi = &x.row(i)[h * dk..(h + 1) * dk];
            let ph = &phi.data()[h * dk * dk..(h + 1) * dk * dk];
            let o = &mut out[i * heads * dk + h * dk..i * heads * dk + (h + 1) * dk];
            for (p, &xp) in xi.iter().enumerate() {
                for (acc, &w) in o.iter_mut().zip(&ph[p * dk..(p + 1) * dk]) {
                    *acc += xp * w;
                }
            }
        }
    }
    Ok(Tensor::finish(x.shape().to_vec(), out, x.precision()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum GateGranularity {
    /// One gate value shared by all heads and coordinates.
    Scalar,
    /// One gate value per head, broadcast over the head's coordinates.
    #[default]
    Headwise,
    /// One gate value per coordinate.
    Elementwise,
}

impl GateGranularity {
    pub fn width(self, heads: usize, head_dim: usize) -> usize {
        match self {
            GateGranularity::Scalar => 1,
            GateGranularity::Headwise => heads,
            GateGranularity::Elementwise => heads * head_dim,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GateGranularity::Scalar => "scalar",
            GateGranularity::Headwise => "headwise",
            GateGranularity::Elementwise => "elementwise",
        }
    }
}

/// Branch-fusion gate `G = σ(x·W_g + b_g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w_g: Tensor,
    pub b_g: Tensor,
    pub granularity: GateGranularity,
}

impl GateParams {
    /// Zero weights and bias: every gate starts at 0.5.
    pub fn init(model_dim: usize, heads: usize, head_dim: usize, granularity: GateGranularity) -> Self {
        let g = granularity.width(heads, head_dim);
        Self {
            w_g: Tensor::zeros([model_dim, g]),
            b_g: Tensor::zeros([g]),
            granularity,
        }
    }

    /// Raw gate activations `[L, G]`.
    pub fn activations(&self, x: &Tensor) -> Result<Tensor> {
        Ok(matmul(x, &self.w_g)?.add_row(&self.b_g)?.map(sigmoid))
    }

    /// Gate activations expanded to `[L, H·D]`.
    pub fn broadcast(&self, x: &Tensor, heads: usize, head_dim: usize) -> Result<Tensor> {
        let g = self.activations(x)?;
        Ok(broadcast_gate(&g, self.granularity, heads, head_dim))
    }
}

pub fn broadcast_gate(g: &Tensor, granularity: GateGranularity, heads: usize, head_dim: usize) -> Tensor {
    let width = heads * head_dim;
    let gw = g.cols();
    Tensor::from_fn([g.rows(), width], |idx| {
        let (i, c) = (idx / width, idx % width);
        let col = match granularity {
            GateGranularity::Scalar => 0,
            GateGranularity::Headwise => c / head_dim,
            GateGranularity::Elementwise => c,
        };
        g.data()[i * gw + col]
    })
    .with_precision(g.precision())
}

/// Ablation switches; the defaults are the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Policy {
    /// All tokens of a frame read the same pre-frame state. When false,
    /// [`HybridLayer::forward`] runs the token-level variant.
    pub frame_level_access: bool,
    /// The state is written only from clean frames. When false, the
    /// streaming harness also writes every noisy denoising pass.
    pub clean_pass_only: bool,
}

impl Default for Policy {
    fn default() -> Self {
        Self {
            frame_level_access: true,
            clean_pass_only: true,
        }
    }
}

/// The two branch outputs and the broadcast gate, all `[L, H·D]`.
#[derive(Debug, Clone)]
pub struct Branches {
    pub intra: Tensor,
    pub inter: Tensor,
    pub gate: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridLayer {
    proj: ProjectionSet,
    pub fmaps: FeatureMaps,
    pub gates: GateParams,
    pub gp: GatePredictors,
    pub state: RecurrentState,
    pub policy: Policy,
    pub chunk_size: usize,
}

impl HybridLayer {
    /// Student initialized from frozen teacher projections: identity feature
    /// maps, headwise gate at 0.5, default gate predictors, empty state.
    pub fn from_teacher(proj: ProjectionSet, precision: Precision) -> Self {
        Self::with_granularity(proj, precision, GateGranularity::Headwise)
    }

    pub fn with_granularity(proj: ProjectionSet, precision: Precision, granularity: GateGranularity) -> Self {
        let (heads, hd, d) = (proj.heads(), proj.head_dim(), proj.model_dim());
        Self {
            fmaps: FeatureMaps::identity(heads, hd),
            gates: GateParams::init(d, heads, hd, granularity),
            gp: GatePredictors::init(d, heads),
            state: RecurrentState::new(heads, hd, precision),
            policy: Policy::default(),
            chunk_size: DEFAULT_CHUNK_SIZE,
            proj,
        }
    }

    /// Reassembles a layer from its parts (e.g. after deserialization).
    pub fn from_parts(
        proj: ProjectionSet,
        fmaps: FeatureMaps,
        gates: GateParams,
        gp: GatePredictors,
        state: RecurrentState,
    ) -> Result<Self> {
        let (heads, hd, d) = (proj.heads(), proj.head_dim(), proj.model_dim());
        let dd = [heads, hd, hd];
        let ok = fmaps.phi_q.shape() == dd
            && fmaps.phi_k.shape() == dd
            && fmaps.phi_v.shape() == dd
            && gates.w_g.shape() == [d, gates.granularity.width(heads, hd)]
            && gates.b_g.len() == gates.granularity.width(heads, hd)
            && gp.w_alpha.shape() == [d, heads]
            && gp.w_beta.shape() == [d, heads]
            && gp.b_alpha.len() == heads
            && gp.b_beta.len() == heads
            && state.heads() == heads
            && state.head_dim() == hd;
        if !ok {
            return Err(shape_err("hybrid_layer", "parameter shapes disagree with projections"));
        }
        Ok(Self {
            proj,
            fmaps,
            gates,
            gp,
            state,
            policy: Policy::default(),
            chunk_size: DEFAULT_CHUNK_SIZE,
        })
    }

    pub fn proj(&self) -> &ProjectionSet {
        &self.proj
    }

    fn check_unabsorbed(&self, frame_index: usize) -> Result<()> {
        if frame_index as i64 <= self.state.last_clean_frame {
            return Err(Error::FrameOrder {
                expected: self.state.last_clean_frame + 1,
                got: frame_index as i64,
            });
        }
        Ok(())
    }

    /// `L2Norm(RoPE(φ(x)))` at global positions of `frame_index`.
    fn recurrent_features(&self, raw: &Tensor, phi: &Tensor, frame_index: usize) -> Result<Tensor> {
        let hd = self.proj.head_dim();
        let pos = global_positions(frame_index, raw.rows());
        let rotated = rope_grouped(&apply_headwise(raw, phi)?, &pos, hd, ROPE_BASE)?;
        Ok(l2norm_groups(&rotated, hd))
    }

    /// Both branch outputs for frame `frame_index` under frame-level access.
    pub fn branches(&self, x: &Tensor, frame_index: usize) -> Result<Branches> {
        self.proj.check_input(x, "hybrid_forward")?;
        self.check_unabsorbed(frame_index)?;
        let proj = &self.proj;
        let q = matmul(x, &proj.wq)?;
        let k = matmul(x, &proj.wk)?;
        let v = matmul(x, &proj.wv)?;
        let intra = intra_from_projected(&q, &k, &v, proj)?;
        let q_rec = self.recurrent_features(&q, &self.fmaps.phi_q, frame_index)?;
        let inter = query(&self.state, &q_rec)?;
        let gate = self.gates.broadcast(x, proj.heads(), proj.head_dim())?;
        Ok(Branches { intra, inter, gate })
    }

    /// `(O_intra + G ⊙ O_inter)·W_o`. Reads the state, never writes it.
    pub fn forward(&self, x: &Tensor, frame_index: usize) -> Result<Tensor> {
        if !self.policy.frame_level_access {
            return self.forward_token_level_ablation(x, frame_index);
        }
        let b = self.branches(x, frame_index)?;
        let fused = b.intra.add(&b.gate.mul(&b.inter)?)?;
        matmul(&fused, &self.proj.wo)
    }

    /// Token-level access: token `j` reads a scratch copy of the state that
    /// already absorbed tokens `0..j` of this (noisy) frame. The persistent
    /// state is untouched.
    pub fn forward_token_level_ablation(&self, x: &Tensor, frame_index: usize) -> Result<Tensor> {
        self.proj.check_input(x, "hybrid_forward")?;
        self.check_unabsorbed(frame_index)?;
        let proj = &self.proj;
        let q = matmul(x, &proj.wq)?;
        let k = matmul(x, &proj.wk)?;
        let v = matmul(x, &proj.wv)?;
        let intra = intra_from_projected(&q, &k, &v, proj)?;
        let q_rec = self.recurrent_features(&q, &self.fmaps.phi_q, frame_index)?;
        let k_rec = self.recurrent_features(&k, &self.fmaps.phi_k, frame_index)?;
        let v_rec = apply_headwise(&v, &self.fmaps.phi_v)?;
        let (alpha, beta) = predict_gates(x, &self.gp)?;

        let mut scratch = self.state.clone();
        let mut rows: Vec<f64> = Vec::with_capacity(x.len());
        let row = |t: &Tensor, j: usize| Tensor::new([1, t.cols()], t.row(j).to_vec());
        for j in 0..x.rows() {
            rows.extend_from_slice(query(&scratch, &row(&q_rec, j)?)?.data());
            update_sequential(
                &mut scratch,
                &row(&k_rec, j)?,
                &row(&v_rec, j)?,
                &row(&alpha, j)?,
                &row(&beta, j)?,
            )?;
        }
        let inter = Tensor::finish(intra.shape().to_vec(), rows, intra.precision());
        let gate = self.gates.broadcast(x, proj.heads(), proj.head_dim())?;
        let fused = intra.add(&gate.mul(&inter)?)?;
        matmul(&fused, &proj.wo)
    }

    fn write(&mut self, x: &Tensor, frame_index: usize) -> Result<()> {
        self.proj.check_input(x, "absorb")?;
        let k = matmul(x, &self.proj.wk)?;
        let v = matmul(x, &self.proj.wv)?;
        let k_rec = self.recurrent_features(&k, &self.fmaps.phi_k, frame_index)?;
        let v_rec = apply_headwise(&v, &self.fmaps.phi_v)?;
        let (alpha, beta) = predict_gates(x, &self.gp)?;
        update_chunkwise(&mut self.state, &k_rec, &v_rec, &alpha, &beta, self.chunk_size)
    }

    /// Writes clean frame `frame_index` into the state; frames must arrive
    /// in order, one write each.
    pub fn absorb_clean_frame(&mut self, clean: &Tensor, frame_index: usize) -> Result<()> {
        let expected = self.state.last_clean_frame + 1;
        if frame_index as i64 != expected {
            return Err(Error::FrameOrder {
                expected,
                got: frame_index as i64,
            });
        }
        self.write(clean, frame_index)?;
        self.state.last_clean_frame = frame_index as i64;
        Ok(())
    }

    /// Writes a noisy intermediate of the current frame (ablation of the
    /// clean-pass rule). Does not mark the frame as absorbed.
    pub fn absorb_noisy_pass(&mut self, noisy: &Tensor, frame_index: usize) -> Result<()> {
        self.check_unabsorbed(frame_index)?;
        self.write(noisy, frame_index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{full_attention, intra_attention, KVCache};
    use crate::numerics::Rng;
    use alloc::vec;

    fn random_layer(seed: u64, heads: usize, hd: usize) -> (Rng, HybridLayer) {
        let mut rng = Rng::new(seed);
        let proj = ProjectionSet::random(&mut rng, heads, hd, 1.0);
        let mut layer = HybridLayer::from_teacher(proj, Precision::Double);
        let d = heads * hd;
        layer.fmaps.phi_q = rng.normal_tensor([heads, hd, hd], 0.5);
        layer.fmaps.phi_k = rng.normal_tensor([heads, hd, hd], 0.5);
        layer.fmaps.phi_v = rng.normal_tensor([heads, hd, hd], 0.5);
        layer.gates.w_g = rng.normal_tensor([d, heads], 0.3);
        layer.gp.w_alpha = rng.normal_tensor([d, heads], 0.3);
        layer.gp.w_beta = rng.normal_tensor([d, heads], 0.3);
        (rng, layer)
    }

    #[test]
    fn first_frame_matches_teacher_bitwise() {
        for seed in 0..5 {
            let (mut rng, layer) = random_layer(seed, 2, 4);
            let x = rng.normal_tensor([5, 8], 1.0);
            let student = layer.forward(&x, 0).unwrap();
            let teacher = full_attention(&x, &KVCache::new(Precision::Double), layer.proj()).unwrap();
            assert!(student.bitwise_eq(&teacher), "seed {seed}");
        }
    }

    #[test]
    fn closed_gate_leaves_intra_only() {
        let (mut rng, mut layer) = random_layer(1, 2, 4);
        for f in 0..2 {
            layer.absorb_clean_frame(&rng.normal_tensor([4, 8], 1.0), f).unwrap();
        }
        layer.gates.b_g = Tensor::filled([2], f64::NEG_INFINITY);
        let x = rng.normal_tensor([4, 8], 1.0);
        let y = layer.forward(&x, 2).unwrap();
        let intra = matmul(&intra_attention(&x, layer.proj()).unwrap(), &layer.proj().wo).unwrap();
        assert!(y.bitwise_eq(&intra));
    }

    #[test]
    fn every_token_reads_the_same_state() {
        let (mut rng, mut layer) = random_layer(2, 2, 4);
        for f in 0..2 {
            layer.absorb_clean_frame(&rng.normal_tensor([4, 8], 1.0), f).unwrap();
        }
        let x = rng.normal_tensor([4, 8], 1.0);
        let full = layer.branches(&x, 2).unwrap();
        // Token i's inter output from its own query row and the shared state.
        let q = matmul(&x, &layer.proj().wq).unwrap();
        let q_rec = layer.recurrent_features(&q, &layer.fmaps.phi_q, 2).unwrap();
        for i in 0..4 {
            let qi = Tensor::new([1, 8], q_rec.row(i).to_vec()).unwrap();
            let oi = query(&layer.state, &qi).unwrap();
            assert_eq!(oi.data(), full.inter.row(i));
        }
    }

    #[test]
    fn forward_does_not_touch_state() {
        let (mut rng, mut layer) = random_layer(3, 2, 4);
        layer.absorb_clean_frame(&rng.normal_tensor([4, 8], 1.0), 0).unwrap();
        let before = layer.state.clone();
        for _ in 0..3 {
            layer.forward(&rng.normal_tensor([4, 8], 1.0), 1).unwrap();
        }
        assert_eq!(layer.state, before);
    }

    #[test]
    fn absorb_counts_and_orders() {
        let (mut rng, mut layer) = random_layer(4, 2, 4);
        let bytes = layer.state.size_bytes();
        for f in 0..10 {
            layer.absorb_clean_frame(&rng.normal_tensor([4, 8], 1.0), f).unwrap();
        }
        assert_eq!(layer.state.write_count, 10);
        assert_eq!(layer.state.last_clean_frame, 9);
        assert_eq!(layer.state.size_bytes(), bytes);
        let err = layer
            .absorb_clean_frame(&rng.normal_tensor([4, 8], 1.0), 12)
            .unwrap_err();
        assert_eq!(err, Error::FrameOrder { expected: 10, got: 12 });
        let err = layer.forward(&rng.normal_tensor([4, 8], 1.0), 9).unwrap_err();
        assert!(matches!(err, Error::FrameOrder { .. }));
    }

    #[test]
    fn token_level_ablation_parity() {
        let (mut rng, mut layer) = random_layer(5, 2, 4);
        layer.absorb_clean_frame(&rng.normal_tensor([4, 8], 1.0), 0).unwrap();
        let x1 = rng.normal_tensor([1, 8], 1.0);
        assert!(layer
            .forward_token_level_ablation(&x1, 1)
            .unwrap()
            .bitwise_eq(&layer.forward(&x1, 1).unwrap()));

        let x = rng.normal_tensor([4, 8], 1.0);
        let frame = layer.forward(&x, 1).unwrap();
        let token = layer.forward_token_level_ablation(&x, 1).unwrap();
        // The first token reads S_{N-1} under both access patterns.
        assert_eq!(frame.row(0), token.row(0));
        for j in 1..4 {
            assert!(frame.row(j) != token.row(j), "token {j} should differ");
        }
    }

    #[test]
    fn policy_switch_routes_forward() {
        let (mut rng, mut layer) = random_layer(6, 2, 4);
        layer.absorb_clean_frame(&rng.normal_tensor([4, 8], 1.0), 0).unwrap();
        let x = rng.normal_tensor([4, 8], 1.0);
        let token = layer.forward_token_level_ablation(&x, 1).unwrap();
        layer.policy.frame_level_access = false;
        assert!(layer.forward(&x, 1).unwrap().bitwise_eq(&token));
    }

    #[test]
    fn gate_granularities_broadcast() {
        let g = Tensor::new([1, 2], vec![0.25, 0.75]).unwrap();
        let b = broadcast_gate(&g, GateGranularity::Headwise, 2, 3);
        assert_eq!(b.data(), &[0.25, 0.25, 0.25, 0.75, 0.75, 0.75]);
        let s = broadcast_gate(&Tensor::filled([1, 1], 0.5), GateGranularity::Scalar, 2, 3);
        assert!(s.data().iter().all(|&x| x == 0.5));
        for gran in [GateGranularity::Scalar, GateGranularity::Elementwise] {
            let mut rng = Rng::new(7);
            let proj = ProjectionSet::random(&mut rng, 2, 4, 1.0);
            let layer = HybridLayer::with_granularity(proj, Precision::Double, gran);
            let x = rng.normal_tensor([3, 8], 1.0);
            let br = layer.branches(&x, 0).unwrap();
            assert!(br.gate.data().iter().all(|&v| v == 0.5));
        }
    }
}
