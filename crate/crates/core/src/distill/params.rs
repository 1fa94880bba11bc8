use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::hybrid::HybridLayer;
use crate::numerics::Tensor;
use crate::streaming::{AttentionBlock, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    PhiQ,
    PhiK,
    PhiV,
    GateW,
    GateB,
    AlphaW,
    AlphaB,
    BetaW,
    BetaB,
    FfIn,
    FfOut,
    Wq,
    Wk,
    Wv,
    Wo,
}

impl ParamKind {
    /// Parameters owned by a hybrid layer's recurrent branch.
    pub const HYBRID: [ParamKind; 9] = [
        ParamKind::PhiQ,
        ParamKind::PhiK,
        ParamKind::PhiV,
        ParamKind::GateW,
        ParamKind::GateB,
        ParamKind::AlphaW,
        ParamKind::AlphaB,
        ParamKind::BetaW,
        ParamKind::BetaB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::PhiQ => "phi_q",
            ParamKind::PhiK => "phi_k",
            ParamKind::PhiV => "phi_v",
            ParamKind::GateW => "w_g",
            ParamKind::GateB => "b_g",
            ParamKind::AlphaW => "w_alpha",
            ParamKind::AlphaB => "b_alpha",
            ParamKind::BetaW => "w_beta",
            ParamKind::BetaB => "b_beta",
            ParamKind::FfIn => "ff_in",
            ParamKind::FfOut => "ff_out",
            ParamKind::Wq => "w_q",
            ParamKind::Wk => "w_k",
            ParamKind::Wv => "w_v",
            ParamKind::Wo => "w_o",
        }
    }

    /// Pretrained attention projections; never trained.
    pub fn is_frozen(self) -> bool {
        matches!(self, ParamKind::Wq | ParamKind::Wk | ParamKind::Wv | ParamKind::Wo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

impl ParamId {
    pub fn new(layer: usize, kind: ParamKind) -> Self {
        Self { layer, kind }
    }

    pub fn label(&self) -> alloc::string::String {
        format!("layer{}.{}", self.layer, self.kind.name())
    }
}

/// Parameters a training run may update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableSet {
    ids: Vec<ParamId>,
}

impl TrainableSet {
    /// Recurrent-branch parameters of one layer.
    pub fn stage1(layer: usize) -> Self {
        Self {
            ids: ParamKind::HYBRID.iter().map(|&k| ParamId::new(layer, k)).collect(),
        }
    }

    /// Recurrent-branch parameters of every hybrid layer plus every layer's
    /// feedforward weights.
    pub fn stage2(model: &ToyModel) -> Self {
        let mut ids = Vec::new();
        for (l, layer) in model.layers.iter().enumerate() {
            if matches!(layer.attn, AttentionBlock::Hybrid(_)) {
                ids.extend(ParamKind::HYBRID.iter().map(|&k| ParamId::new(l, k)));
            }
            ids.push(ParamId::new(l, ParamKind::FfIn));
            ids.push(ParamId::new(l, ParamKind::FfOut));
        }
        Self { ids }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.ids.contains(&id)
    }
}

/// Gradients keyed by parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub(crate) entries: Vec<(ParamId, Tensor)>,
}

impl ParamGrads {
    /// Gradient of a trainable parameter. Frozen or untracked parameters are
    /// an error, not zeros.
    pub fn get(&self, id: ParamId) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g)
            .ok_or_else(|| Error::FrozenParameter { name: id.label() })
    }

    pub fn iter(&self) -> impl Iterator<Item = &(ParamId, Tensor)> {
        self.entries.iter()
    }
}

pub fn hybrid_param(layer: &HybridLayer, kind: ParamKind) -> Option<&Tensor> {
    Some(match kind {
        ParamKind::PhiQ => &layer.fmaps.phi_q,
        ParamKind::PhiK => &layer.fmaps.phi_k,
        ParamKind::PhiV => &layer.fmaps.phi_v,
        ParamKind::GateW => &layer.gates.w_g,
        ParamKind::GateB => &layer.gates.b_g,
        ParamKind::AlphaW => &layer.gp.w_alpha,
        ParamKind::AlphaB => &layer.gp.b_alpha,
        ParamKind::BetaW => &layer.gp.w_beta,
        ParamKind::BetaB => &layer.gp.b_beta,
        ParamKind::Wq => &layer.proj().wq,
        ParamKind::Wk => &layer.proj().wk,
        ParamKind::Wv => &layer.proj().wv,
        ParamKind::Wo => &layer.proj().wo,
        ParamKind::FfIn | ParamKind::FfOut => return None,
    })
}

/// Mutable access to a trainable hybrid parameter; `None` for frozen ones.
pub fn hybrid_param_mut(layer: &mut HybridLayer, kind: ParamKind) -> Option<&mut Tensor> {
    Some(match kind {
        ParamKind::PhiQ => &mut layer.fmaps.phi_q,
        ParamKind::PhiK => &mut layer.fmaps.phi_k,
        ParamKind::PhiV => &mut layer.fmaps.phi_v,
        ParamKind::GateW => &mut layer.gates.w_g,
        ParamKind::GateB => &mut layer.gates.b_g,
        ParamKind::AlphaW => &mut layer.gp.w_alpha,
        ParamKind::AlphaB => &mut layer.gp.b_alpha,
        ParamKind::BetaW => &mut layer.gp.w_beta,
        ParamKind::BetaB => &mut layer.gp.b_beta,
        _ => return None,
    })
}

pub fn model_param(model: &ToyModel, id: ParamId) -> Option<&Tensor> {
    let layer = model.layers.get(id.layer)?;
    match id.kind {
        ParamKind::FfIn => Some(&layer.ff_in),
        ParamKind::FfOut => Some(&layer.ff_out),
        kind => match &layer.attn {
            AttentionBlock::Hybrid(h) => hybrid_param(h, kind),
            AttentionBlock::Softmax { proj, .. } => match kind {
                ParamKind::Wq => Some(&proj.wq),
                ParamKind::Wk => Some(&proj.wk),
                ParamKind::Wv => Some(&proj.wv),
                ParamKind::Wo => Some(&proj.wo),
                _ => None,
            },
        },
    }
}

/// Mutable access to a trainable model parameter; `None` for frozen ones.
pub fn model_param_mut(model: &mut ToyModel, id: ParamId) -> Option<&mut Tensor> {
    let layer = model.layers.get_mut(id.layer)?;
    match id.kind {
        ParamKind::FfIn => Some(&mut layer.ff_in),
        ParamKind::FfOut => Some(&mut layer.ff_out),
        kind => match &mut layer.attn {
            AttentionBlock::Hybrid(h) => hybrid_param_mut(h, kind),
            AttentionBlock::Softmax { .. } => None,
        },
    }
}
