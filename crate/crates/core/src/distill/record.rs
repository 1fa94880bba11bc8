//! Loss recordings on the gradient tape.

use alloc::vec::Vec;

use super::params::{hybrid_param, ParamGrads, ParamId, ParamKind, TrainableSet};
use super::{velocity_after_history, AlignmentSample, JointSample};
use crate::attention::{append_clean_frame, full_attention, global_positions, local_positions, KVCache, ProjectionSet};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::hybrid::{GateGranularity, HybridLayer};
use crate::numerics::Tensor;
use crate::streaming::{AttentionBlock, ToyModel};

struct Recorder<'a> {
    tape: Tape,
    trainable: &'a TrainableSet,
    leaves: Vec<(ParamId, Var)>,
}

impl<'a> Recorder<'a> {
    fn new(trainable: &'a TrainableSet) -> Self {
        Self {
            tape: Tape::new(),
            trainable,
            leaves: Vec::new(),
        }
    }

    fn leaf(&mut self, id: ParamId, value: &Tensor) -> Var {
        if self.trainable.contains(id) {
            let v = self.tape.param(value.clone());
            self.leaves.push((id, v));
            v
        } else {
            self.tape.constant(value.clone())
        }
    }

    fn finish(self, root: Var) -> Result<(f64, ParamGrads)> {
        let loss = self.tape.value(root).data()[0];
        let grads = self.tape.backward(root)?;
        let entries = self
            .leaves
            .iter()
            .map(|&(id, v)| (id, grads.get_or_zeros(v, self.tape.value(v))))
            .collect();
        Ok((loss, ParamGrads { entries }))
    }
}

struct ProjVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
    head_dim: usize,
}

fn record_proj(rec: &mut Recorder, layer: usize, proj: &ProjectionSet) -> ProjVars {
    ProjVars {
        wq: rec.leaf(ParamId::new(layer, ParamKind::Wq), &proj.wq),
        wk: rec.leaf(ParamId::new(layer, ParamKind::Wk), &proj.wk),
        wv: rec.leaf(ParamId::new(layer, ParamKind::Wv), &proj.wv),
        wo: rec.leaf(ParamId::new(layer, ParamKind::Wo), &proj.wo),
        heads: proj.heads(),
        head_dim: proj.head_dim(),
    }
}

struct HybridVars {
    p: ProjVars,
    phi_q: Var,
    phi_k: Var,
    phi_v: Var,
    w_g: Var,
    b_g: Var,
    w_a: Var,
    b_a: Var,
    w_b: Var,
    b_b: Var,
    granularity: GateGranularity,
}

fn record_hybrid(rec: &mut Recorder, layer: usize, h: &HybridLayer) -> HybridVars {
    let p = record_proj(rec, layer, h.proj());
    let mut get = |kind| {
        let value = hybrid_param(h, kind).expect("hybrid parameter");
        rec.leaf(ParamId::new(layer, kind), value)
    };
    HybridVars {
        phi_q: get(ParamKind::PhiQ),
        phi_k: get(ParamKind::PhiK),
        phi_v: get(ParamKind::PhiV),
        w_g: get(ParamKind::GateW),
        b_g: get(ParamKind::GateB),
        w_a: get(ParamKind::AlphaW),
        b_a: get(ParamKind::AlphaB),
        w_b: get(ParamKind::BetaW),
        b_b: get(ParamKind::BetaB),
        granularity: h.gates.granularity,
        p,
    }
}

fn features(t: &mut Tape, raw: Var, phi: Var, frame: usize, hd: usize) -> Result<Var> {
    let rows = t.value(raw).rows();
    let mapped = t.head_map(raw, phi)?;
    let rotated = t.rope(mapped, global_positions(frame, rows), hd)?;
    Ok(t.l2norm(rotated, hd))
}

fn sigmoid_affine(t: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let z = t.matmul(x, w)?;
    let z = t.add_row(z, b)?;
    Ok(t.sigmoid(z))
}

fn hybrid_forward(t: &mut Tape, hv: &HybridVars, s: Var, x: Var, frame: usize) -> Result<Var> {
    let (heads, hd) = (hv.p.heads, hv.p.head_dim);
    let q = t.matmul(x, hv.p.wq)?;
    let k = t.matmul(x, hv.p.wk)?;
    let v = t.matmul(x, hv.p.wv)?;
    let local = local_positions(t.value(x).rows());
    let qi = t.rope(q, local.clone(), hd)?;
    let ki = t.rope(k, local, hd)?;
    let intra = t.attention(qi, ki, v, heads, hd)?;
    let q_rec = features(t, q, hv.phi_q, frame, hd)?;
    let inter = t.gdn_query(q_rec, s)?;
    let g = sigmoid_affine(t, x, hv.w_g, hv.b_g)?;
    let g = t.gate_broadcast(g, hv.granularity, heads, hd);
    let gated = t.mul(g, inter)?;
    let fused = t.add(intra, gated)?;
    t.matmul(fused, hv.p.wo)
}

fn hybrid_absorb(t: &mut Tape, hv: &HybridVars, s: Var, x: Var, frame: usize) -> Result<Var> {
    let hd = hv.p.head_dim;
    let k = t.matmul(x, hv.p.wk)?;
    let v = t.matmul(x, hv.p.wv)?;
    let k_rec = features(t, k, hv.phi_k, frame, hd)?;
    let v_rec = t.head_map(v, hv.phi_v)?;
    let alpha = sigmoid_affine(t, x, hv.w_a, hv.b_a)?;
    let beta = sigmoid_affine(t, x, hv.w_b, hv.b_b)?;
    t.gdn_update(s, k_rec, v_rec, alpha, beta)
}

fn softmax_kv(t: &mut Tape, pv: &ProjVars, x: Var, frame: usize) -> Result<(Var, Var)> {
    let pos = global_positions(frame, t.value(x).rows());
    let k = t.matmul(x, pv.wk)?;
    let k = t.rope(k, pos, pv.head_dim)?;
    let v = t.matmul(x, pv.wv)?;
    Ok((k, v))
}

fn softmax_forward(t: &mut Tape, pv: &ProjVars, cache: &[(Var, Var)], x: Var, frame: usize) -> Result<Var> {
    let pos = global_positions(frame, t.value(x).rows());
    let q = t.matmul(x, pv.wq)?;
    let q = t.rope(q, pos, pv.head_dim)?;
    let (k, v) = softmax_kv(t, pv, x, frame)?;
    let mut keys: Vec<Var> = cache.iter().map(|c| c.0).collect();
    let mut values: Vec<Var> = cache.iter().map(|c| c.1).collect();
    keys.push(k);
    values.push(v);
    let k_all = t.concat_rows(&keys)?;
    let v_all = t.concat_rows(&values)?;
    let o = t.attention(q, k_all, v_all, pv.heads, pv.head_dim)?;
    t.matmul(o, pv.wo)
}

fn empty_state(t: &mut Tape, heads: usize, hd: usize) -> Var {
    t.constant(Tensor::zeros([heads, hd, hd]))
}

fn check_samples<T>(samples: &[T]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument {
            detail: "empty training batch".into(),
        });
    }
    Ok(())
}

/// Mean alignment loss over `samples` and its gradients for the recurrent
/// parameters of `student`, labeled as layer `layer`.
pub fn alignment_gradients(
    student: &HybridLayer,
    layer: usize,
    samples: &[AlignmentSample],
) -> Result<(f64, ParamGrads)> {
    check_samples(samples)?;
    let trainable = TrainableSet::stage1(layer);
    let mut rec = Recorder::new(&trainable);
    let hv = record_hybrid(&mut rec, layer, student);
    let proj = student.proj();
    let mut total: Option<Var> = None;
    for sample in samples {
        let mut cache = KVCache::new(student.state.matrices().precision());
        let t = &mut rec.tape;
        let mut s = empty_state(t, hv.p.heads, hv.p.head_dim);
        for (f, frame) in sample.history.iter().enumerate() {
            append_clean_frame(&mut cache, frame, proj)?;
            let x = t.constant(frame.clone());
            s = hybrid_absorb(t, &hv, s, x, f)?;
        }
        let target = full_attention(&sample.x_t, &cache, proj)?;
        let x = t.constant(sample.x_t.clone());
        let y = hybrid_forward(t, &hv, s, x, sample.history.len())?;
        let target = t.constant(target);
        let diff = t.sub(y, target)?;
        let sq = t.sum_squares(diff);
        let norm = (sample.x_t.rows() * sample.x_t.cols()) as f64;
        let term = t.scale(sq, 1.0 / norm);
        total = Some(match total {
            Some(acc) => t.add(acc, term)?,
            None => term,
        });
    }
    let t = &mut rec.tape;
    let root = t.scale(total.expect("nonempty"), 1.0 / samples.len() as f64);
    rec.finish(root)
}

enum Memory {
    Cache(Vec<(Var, Var)>),
    State(Var),
}

enum LayerVars {
    Softmax(ProjVars),
    Hybrid(HybridVars),
}

struct ToyLayerVars {
    attn: LayerVars,
    ff_in: Var,
    ff_out: Var,
}

fn model_pass(
    t: &mut Tape,
    layers: &[ToyLayerVars],
    memory: &mut [Memory],
    x: Var,
    frame: usize,
    commit: bool,
) -> Result<Var> {
    let mut h = x;
    for (lv, mem) in layers.iter().zip(memory.iter_mut()) {
        let a = match (&lv.attn, &*mem) {
            (LayerVars::Softmax(pv), Memory::Cache(c)) => softmax_forward(t, pv, c, h, frame)?,
            (LayerVars::Hybrid(hv), Memory::State(s)) => hybrid_forward(t, hv, *s, h, frame)?,
            _ => unreachable!("memory kind follows the layer kind"),
        };
        if commit {
            match (&lv.attn, &mut *mem) {
                (LayerVars::Softmax(pv), Memory::Cache(c)) => c.push(softmax_kv(t, pv, h, frame)?),
                (LayerVars::Hybrid(hv), Memory::State(s)) => *s = hybrid_absorb(t, hv, *s, h, frame)?,
                _ => unreachable!("memory kind follows the layer kind"),
            }
        }
        let mid = t.add(h, a)?;
        let hidden = t.matmul(mid, lv.ff_in)?;
        let hidden = t.tanh(hidden);
        let out = t.matmul(hidden, lv.ff_out)?;
        h = t.add(mid, out)?;
    }
    Ok(h)
}

/// Mean joint velocity loss over `samples` and its gradients for the
/// parameters in `trainable`. The teacher only provides constant targets.
pub fn joint_gradients(
    student: &ToyModel,
    teacher: &ToyModel,
    samples: &[JointSample],
    trainable: &TrainableSet,
) -> Result<(f64, ParamGrads)> {
    check_samples(samples)?;
    if student.dims() != teacher.dims() {
        return Err(Error::InvalidArgument {
            detail: "student and teacher dimensions differ".into(),
        });
    }
    let mut rec = Recorder::new(trainable);
    let mut layers = Vec::with_capacity(student.layers.len());
    for (l, layer) in student.layers.iter().enumerate() {
        let attn = match &layer.attn {
            AttentionBlock::Softmax { proj, .. } => LayerVars::Softmax(record_proj(&mut rec, l, proj)),
            AttentionBlock::Hybrid(h) => LayerVars::Hybrid(record_hybrid(&mut rec, l, h)),
        };
        let ff_in = rec.leaf(ParamId::new(l, ParamKind::FfIn), &layer.ff_in);
        let ff_out = rec.leaf(ParamId::new(l, ParamKind::FfOut), &layer.ff_out);
        layers.push(ToyLayerVars { attn, ff_in, ff_out });
    }
    let dims = student.dims();
    let mut total: Option<Var> = None;
    for sample in samples {
        let target = velocity_after_history(teacher, sample)?;
        let t = &mut rec.tape;
        let mut memory: Vec<Memory> = layers
            .iter()
            .map(|lv| match lv.attn {
                LayerVars::Softmax(_) => Memory::Cache(Vec::new()),
                LayerVars::Hybrid(_) => Memory::State(empty_state(t, dims.heads, dims.head_dim)),
            })
            .collect();
        for (f, clean) in sample.history.iter().enumerate() {
            let x = t.constant(student.embed(clean, 0.0)?);
            model_pass(t, &layers, &mut memory, x, f, true)?;
        }
        let x = t.constant(student.embed(&sample.z, sample.t)?);
        let h = model_pass(t, &layers, &mut memory, x, sample.history.len(), false)?;
        let v = t.sub(h, x)?;
        let target = t.constant(target);
        let diff = t.sub(v, target)?;
        let term = t.sum_squares(diff);
        total = Some(match total {
            Some(acc) => t.add(acc, term)?,
            None => term,
        });
    }
    let t = &mut rec.tape;
    let root = t.scale(total.expect("nonempty"), 1.0 / samples.len() as f64);
    rec.finish(root)
}
