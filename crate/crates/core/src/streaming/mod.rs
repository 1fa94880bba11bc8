//! Chunk-by-chunk generation with a toy block-stacked denoiser.
//!
//! Every frame starts from seeded Gaussian noise and runs `T` denoising
//! passes that only *read* each layer's memory (KV cache or recurrent
//! state). The resulting clean latent then goes through one clean pass,
//! after which each layer commits it: softmax layers append its keys and
//! values, hybrid layers absorb it into their state.

mod cost;

use alloc::format;
use alloc::vec::Vec;

pub use cost::{count_attention_flops, cumulative_macs, memory_footprint, state_update_macs, AttnDims};

use crate::attention::{append_clean_frame, full_attention, KVCache, ProjectionSet};
use crate::error::{shape_err, Error, Result};
use crate::hybrid::{HybridLayer, Policy};
use crate::numerics::{matmul, Precision, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backend {
    Softmax,
    Hybrid,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Softmax => "softmax",
            Backend::Hybrid => "hybrid",
        }
    }
}

/// Source of wall-clock readings for per-pass timing.
pub trait Clock {
    fn now_ns(&self) -> u64;
}

/// Clock that always reads zero; keeps metrics fully deterministic.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_ns(&self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum AttentionBlock {
    Softmax { proj: ProjectionSet, cache: KVCache },
    Hybrid(HybridLayer),
}

impl AttentionBlock {
    pub fn backend(&self) -> Backend {
        match self {
            AttentionBlock::Softmax { .. } => Backend::Softmax,
            AttentionBlock::Hybrid(_) => Backend::Hybrid,
        }
    }

    pub fn proj(&self) -> &ProjectionSet {
        match self {
            AttentionBlock::Softmax { proj, .. } => proj,
            AttentionBlock::Hybrid(layer) => layer.proj(),
        }
    }

    /// Attention output for frame `frame_index`; memory is only read.
    pub fn forward(&self, x: &Tensor, frame_index: usize) -> Result<Tensor> {
        match self {
            AttentionBlock::Softmax { proj, cache } => {
                if cache.frames_stored() != frame_index {
                    return Err(Error::FrameOrder {
                        expected: cache.frames_stored() as i64,
                        got: frame_index as i64,
                    });
                }
                full_attention(x, cache, proj)
            }
            AttentionBlock::Hybrid(layer) => layer.forward(x, frame_index),
        }
    }

    /// Commits a clean frame to the layer's memory.
    pub fn commit(&mut self, clean: &Tensor, frame_index: usize) -> Result<()> {
        match self {
            AttentionBlock::Softmax { proj, cache } => append_clean_frame(cache, clean, proj),
            AttentionBlock::Hybrid(layer) => layer.absorb_clean_frame(clean, frame_index),
        }
    }

    /// Bytes of the cache or state buffers currently held.
    pub fn memory_bytes(&self) -> usize {
        match self {
            AttentionBlock::Softmax { cache, .. } => cache.total_bytes(),
            AttentionBlock::Hybrid(layer) => layer.state.size_bytes(),
        }
    }

    /// Frames of history currently held (cache length or absorbed frames).
    pub fn history_frames(&self) -> usize {
        match self {
            AttentionBlock::Softmax { cache, .. } => cache.frames_stored(),
            AttentionBlock::Hybrid(layer) => (layer.state.last_clean_frame + 1) as usize,
        }
    }

    pub fn state_writes(&self) -> u64 {
        match self {
            AttentionBlock::Softmax { cache, .. } => cache.frames_stored() as u64,
            AttentionBlock::Hybrid(layer) => layer.state.write_count,
        }
    }

    fn reset_memory(&mut self) {
        match self {
            AttentionBlock::Softmax { cache, .. } => cache.clear(),
            AttentionBlock::Hybrid(layer) => layer.state.reset(),
        }
    }
}

/// One residual block: `h = x + attn(x)`, `out = h + tanh(h·W₁)·W₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLayer {
    pub attn: AttentionBlock,
    pub ff_in: Tensor,
    pub ff_out: Tensor,
}

impl ToyLayer {
    fn feedforward(&self, h: &Tensor) -> Result<Tensor> {
        let hidden = matmul(h, &self.ff_in)?.map(libm::tanh);
        h.add(&matmul(&hidden, &self.ff_out)?)
    }
}

/// Shape of a toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub num_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ff_dim: usize,
}

impl ModelDims {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub layers: Vec<ToyLayer>,
    /// Conditioning vector `c`, `[1, d]`, added to every token.
    pub cond: Tensor,
    dims: ModelDims,
    precision: Precision,
}

/// Gain of the random attention and feedforward weights.
const WEIGHT_GAIN: f64 = 0.5;

impl ToyModel {
    /// Random weights from `seed`; the weights do not depend on `backends`,
    /// so models differing only in backends share every frozen tensor.
    pub fn new(dims: ModelDims, backends: &[Backend], seed: u64, precision: Precision) -> Result<Self> {
        if backends.len() != dims.num_layers {
            return Err(shape_err(
                "toy_model",
                format!("{} backends for {} layers", backends.len(), dims.num_layers),
            ));
        }
        let d = dims.model_dim();
        let mut rng = Rng::new(seed);
        let cond = rng.normal_tensor([1, d], 0.5);
        let mut layers = Vec::with_capacity(dims.num_layers);
        for &backend in backends {
            let mut lrng = rng.fork();
            let proj = ProjectionSet::random(&mut lrng, dims.heads, dims.head_dim, 1.0);
            let proj = ProjectionSet::new(
                proj.wq.clone(),
                proj.wk.clone(),
                proj.wv.clone(),
                proj.wo.scale(WEIGHT_GAIN),
                dims.heads,
                dims.head_dim,
            )?;
            let ff_in = lrng.normal_tensor([d, dims.ff_dim], 1.0 / libm::sqrt(d as f64));
            let ff_out = lrng.normal_tensor([dims.ff_dim, d], WEIGHT_GAIN / libm::sqrt(dims.ff_dim as f64));
            let attn = match backend {
                Backend::Softmax => AttentionBlock::Softmax {
                    proj,
                    cache: KVCache::new(precision),
                },
                Backend::Hybrid => AttentionBlock::Hybrid(HybridLayer::from_teacher(proj, precision)),
            };
            layers.push(ToyLayer { attn, ff_in, ff_out });
        }
        Ok(Self {
            layers,
            cond,
            dims,
            precision,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn backends(&self) -> Vec<Backend> {
        self.layers.iter().map(|l| l.attn.backend()).collect()
    }

    /// Swaps the listed layers to hybrid attention initialized from their
    /// frozen projections; other layers are left as they are.
    pub fn replace_layers(&mut self, indices: &[usize]) -> Result<()> {
        for &i in indices {
            let layer = self.layers.get_mut(i).ok_or_else(|| Error::InvalidArgument {
                detail: format!("layer {i} out of range"),
            })?;
            if let AttentionBlock::Softmax { proj, .. } = &layer.attn {
                layer.attn = AttentionBlock::Hybrid(HybridLayer::from_teacher(proj.clone(), self.precision));
            }
        }
        Ok(())
    }

    pub fn set_policy(&mut self, policy: Policy, chunk_size: usize) {
        for layer in &mut self.layers {
            if let AttentionBlock::Hybrid(h) = &mut layer.attn {
                h.policy = policy;
                h.chunk_size = chunk_size;
            }
        }
    }

    /// Clears every cache and state.
    pub fn reset_memory(&mut self) {
        for layer in &mut self.layers {
            layer.attn.reset_memory();
        }
    }

    /// `x = z + t + c`: scalar timestep and conditioning vector broadcast
    /// onto every token.
    pub fn embed(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        z.map(|v| v + t).add_row(&self.cond)
    }

    /// Per-layer inputs and the velocity `h_final − x` for frame
    /// `frame_index`; memory is read only.
    pub fn run(&self, z: &Tensor, t: f64, frame_index: usize) -> Result<(Tensor, Vec<Tensor>)> {
        let x = self.embed(z, t)?.with_precision(self.precision);
        let mut h = x.clone();
        let mut inputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = layer.attn.forward(&h, frame_index)?;
            let mid = h.add(&a)?;
            inputs.push(h);
            h = layer.feedforward(&mid)?;
        }
        Ok((h.sub(&x)?, inputs))
    }

    /// Predicted velocity for `z` at time `t`.
    pub fn velocity(&self, z: &Tensor, t: f64, frame_index: usize) -> Result<Tensor> {
        Ok(self.run(z, t, frame_index)?.0)
    }
}

/// Run parameters for [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub num_frames: usize,
    pub tokens_per_frame: usize,
    pub denoise_steps: usize,
    pub seed: u64,
    pub precision: Precision,
    pub policy: Policy,
    pub chunk_size: usize,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 || self.tokens_per_frame == 0 || self.denoise_steps == 0 || self.chunk_size == 0 {
            return Err(Error::InvalidArgument {
                detail: "num_frames, tokens_per_frame, denoise_steps and chunk_size must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PassType {
    Noisy,
    Clean,
}

impl PassType {
    pub fn name(self) -> &'static str {
        match self {
            PassType::Noisy => "noisy",
            PassType::Clean => "clean",
        }
    }
}

/// One layer's share of one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassRecord {
    pub frame: usize,
    pub layer: usize,
    pub backend: Backend,
    pub pass_type: PassType,
    /// MACs of this pass in this layer, including any state write it made.
    pub flops_macs: u64,
    /// Cache or state bytes held by the layer after the pass.
    pub bytes: u64,
    /// Cumulative writes into the layer's memory after the pass.
    pub state_writes: u64,
    pub wall_ns: u64,
}

/// Totals over all layers, cumulative up to and including a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FrameTotals {
    pub frame: usize,
    pub attention_macs: u64,
    pub memory_bytes: u64,
    pub state_writes: u64,
    pub wall_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MetricsRecord {
    pub passes: Vec<PassRecord>,
    pub frames: Vec<FrameTotals>,
}

impl MetricsRecord {
    /// Cumulative MACs of one layer over the whole run.
    pub fn layer_macs(&self, layer: usize) -> u64 {
        self.passes
            .iter()
            .filter(|p| p.layer == layer)
            .map(|p| p.flops_macs)
            .sum()
    }

    /// Writes recorded for `layer` at the end of the run.
    pub fn layer_state_writes(&self, layer: usize) -> u64 {
        self.passes
            .iter()
            .rev()
            .find(|p| p.layer == layer)
            .map_or(0, |p| p.state_writes)
    }

    /// Same record with wall times zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut m = self.clone();
        m.passes.iter_mut().for_each(|p| p.wall_ns = 0);
        m.frames.iter_mut().for_each(|f| f.wall_ns = 0);
        m
    }
}

/// Generates `cfg.num_frames` frames and records per-pass metrics.
///
/// The model's caches and states are cleared first. Noise for frame `i` is
/// drawn after that of frames `0..i` from one stream seeded by `cfg.seed`,
/// so a shorter run reproduces the prefix of a longer one.
pub fn generate(model: &mut ToyModel, cfg: &StreamConfig, clock: &dyn Clock) -> Result<(Vec<Tensor>, MetricsRecord)> {
    cfg.validate()?;
    if cfg.precision != model.precision {
        return Err(Error::InvalidArgument {
            detail: format!(
                "config precision {} vs model precision {}",
                cfg.precision.name(),
                model.precision.name()
            ),
        });
    }
    model.reset_memory();
    model.set_policy(cfg.policy, cfg.chunk_size);
    let dims = model.dims;
    let adims = AttnDims::new(cfg.tokens_per_frame, dims.heads, dims.head_dim);
    let d = dims.model_dim();
    let mut rng = Rng::new(cfg.seed);
    let dt = 1.0 / cfg.denoise_steps as f64;

    let mut frames = Vec::with_capacity(cfg.num_frames);
    let mut metrics = MetricsRecord::default();
    let mut totals = FrameTotals::default();

    for i in 0..cfg.num_frames {
        let mut z = rng
            .normal_tensor([cfg.tokens_per_frame, d], 1.0)
            .with_precision(cfg.precision);
        for step in 0..cfg.denoise_steps {
            let t = 1.0 - step as f64 * dt;
            let (v, inputs) = timed_pass(
                model,
                &z,
                t,
                i,
                PassType::Noisy,
                adims,
                clock,
                &mut metrics,
                &mut totals,
            )?;
            if !cfg.policy.clean_pass_only {
                write_noisy(model, &inputs, i, adims, &mut metrics, &mut totals)?;
            }
            z = z.add(&v.scale(dt))?;
            z.check_finite(&format!("latent of frame {i}, step {step}"))
                .map_err(|_| Error::NonFinite {
                    context: format!("latent of frame {i}, step {step}"),
                })?;
        }
        // Clean pass: read with the pre-frame memory, then commit each
        // layer's input.
        let (_, inputs) = timed_pass(
            model,
            &z,
            0.0,
            i,
            PassType::Clean,
            adims,
            clock,
            &mut metrics,
            &mut totals,
        )?;
        let first_clean = metrics.passes.len() - model.layers.len();
        for (l, (layer, input)) in model.layers.iter_mut().zip(&inputs).enumerate() {
            let t0 = clock.now_ns();
            layer.attn.commit(input, i)?;
            let elapsed = clock.now_ns().saturating_sub(t0);
            let rec = &mut metrics.passes[first_clean + l];
            if layer.attn.backend() == Backend::Hybrid {
                rec.flops_macs += state_update_macs(adims);
                totals.attention_macs += state_update_macs(adims);
            }
            rec.bytes = layer.attn.memory_bytes() as u64;
            rec.state_writes = layer.attn.state_writes();
            rec.wall_ns += elapsed;
            totals.wall_ns += elapsed;
        }
        totals.frame = i;
        totals.memory_bytes = model.layers.iter().map(|l| l.attn.memory_bytes() as u64).sum();
        totals.state_writes = model.layers.iter().map(|l| l.attn.state_writes()).sum();
        metrics.frames.push(totals);
        frames.push(z);
    }
    Ok((frames, metrics))
}

#[allow(clippy::too_many_arguments)]
fn timed_pass(
    model: &ToyModel,
    z: &Tensor,
    t: f64,
    frame: usize,
    pass_type: PassType,
    adims: AttnDims,
    clock: &dyn Clock,
    metrics: &mut MetricsRecord,
    totals: &mut FrameTotals,
) -> Result<(Tensor, Vec<Tensor>)> {
    let t0 = clock.now_ns();
    let out = model.run(z, t, frame)?;
    let elapsed = clock.now_ns().saturating_sub(t0);
    let per_layer = elapsed / model.layers.len().max(1) as u64;
    for (l, layer) in model.layers.iter().enumerate() {
        let macs = count_attention_flops(layer.attn.backend(), adims, layer.attn.history_frames());
        totals.attention_macs += macs;
        totals.wall_ns += per_layer;
        metrics.passes.push(PassRecord {
            frame,
            layer: l,
            backend: layer.attn.backend(),
            pass_type,
            flops_macs: macs,
            bytes: layer.attn.memory_bytes() as u64,
            state_writes: layer.attn.state_writes(),
            wall_ns: per_layer,
        });
    }
    Ok(out)
}

fn write_noisy(
    model: &mut ToyModel,
    inputs: &[Tensor],
    frame: usize,
    adims: AttnDims,
    metrics: &mut MetricsRecord,
    totals: &mut FrameTotals,
) -> Result<()> {
    let first = metrics.passes.len() - model.layers.len();
    for (l, (layer, input)) in model.layers.iter_mut().zip(inputs).enumerate() {
        if let AttentionBlock::Hybrid(h) = &mut layer.attn {
            h.absorb_noisy_pass(input, frame)?;
            let rec = &mut metrics.passes[first + l];
            rec.flops_macs += state_update_macs(adims);
            rec.state_writes = h.state.write_count;
            totals.attention_macs += state_update_macs(adims);
        }
    }
    Ok(())
}
