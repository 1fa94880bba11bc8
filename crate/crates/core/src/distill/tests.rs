use super::*;
use crate::attention::ProjectionSet;
use crate::hybrid::GateGranularity;
use crate::numerics::{Precision, Rng};
use crate::streaming::{Backend, ModelDims};
use alloc::vec;

const FD_EPS: f64 = 1e-5;

fn perturbed_layer(seed: u64, granularity: GateGranularity) -> HybridLayer {
    let mut rng = Rng::new(seed);
    let proj = ProjectionSet::random(&mut rng, 2, 4, 1.0);
    let mut layer = HybridLayer::with_granularity(proj, Precision::Double, granularity);
    for kind in ParamKind::HYBRID {
        let p = hybrid_param_mut(&mut layer, kind).unwrap();
        *p = p.add(&rng.normal_tensor(p.shape().to_vec(), 0.3)).unwrap();
    }
    layer
}

fn samples(seed: u64, batch: usize, history: usize) -> Vec<AlignmentSample> {
    AlignmentSampler {
        batch,
        tokens: 3,
        history_frames: history,
        correlation: 0.5,
        scale: 1.0,
    }
    .draw(8, seed)
    .unwrap()
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let tol = 1e-4 * analytic.abs().max(numeric.abs()) + 1e-8;
    assert!(
        (analytic - numeric).abs() <= tol,
        "{what}: analytic {analytic} numeric {numeric}"
    );
}

#[test]
fn tape_alignment_loss_matches_plain() {
    let layer = perturbed_layer(1, GateGranularity::Headwise);
    let data = samples(2, 3, 3);
    let (tape, _) = alignment_gradients(&layer, 0, &data).unwrap();
    let plain = alignment_loss_batch(&layer, &data).unwrap();
    assert!((tape - plain).abs() <= 1e-12 * plain.abs().max(1.0));
}

#[test]
fn alignment_gradients_match_finite_differences() {
    for gran in [
        GateGranularity::Scalar,
        GateGranularity::Headwise,
        GateGranularity::Elementwise,
    ] {
        let layer = perturbed_layer(3, gran);
        let data = samples(4, 2, 3);
        let (_, grads) = alignment_gradients(&layer, 0, &data).unwrap();
        for kind in ParamKind::HYBRID {
            let g = grads.get(ParamId::new(0, kind)).unwrap();
            for idx in 0..g.len() {
                let eval = |delta: f64| {
                    let mut l = layer.clone();
                    hybrid_param_mut(&mut l, kind).unwrap().data_mut()[idx] += delta;
                    alignment_loss_batch(&l, &data).unwrap()
                };
                let numeric = (eval(FD_EPS) - eval(-FD_EPS)) / (2.0 * FD_EPS);
                assert_close(g.data()[idx], numeric, kind.name());
            }
        }
    }
}

fn small_model(backends: &[Backend]) -> ToyModel {
    let dims = ModelDims {
        num_layers: backends.len(),
        heads: 2,
        head_dim: 4,
        ff_dim: 6,
    };
    ToyModel::new(dims, backends, 9, Precision::Double).unwrap()
}

fn joint_data(seed: u64) -> Vec<JointSample> {
    JointSampler {
        batch: 2,
        tokens: 3,
        history_frames: 3,
        correlation: 0.5,
    }
    .draw(8, seed)
    .unwrap()
}

#[test]
fn joint_gradients_match_finite_differences() {
    let teacher = small_model(&[Backend::Softmax, Backend::Softmax]);
    let mut student = small_model(&[Backend::Softmax, Backend::Hybrid]);
    if let crate::streaming::AttentionBlock::Hybrid(h) = &mut student.layers[1].attn {
        *h = {
            let mut p = perturbed_layer(5, GateGranularity::Headwise);
            let proj = h.proj().clone();
            let mut fresh = HybridLayer::from_teacher(proj, Precision::Double);
            fresh.fmaps = p.fmaps.clone();
            fresh.gates = core::mem::replace(&mut p.gates, fresh.gates);
            fresh.gp = p.gp.clone();
            fresh
        };
    }
    let data = joint_data(6);
    let set = TrainableSet::stage2(&student);
    let (tape_loss, grads) = joint_gradients(&student, &teacher, &data, &set).unwrap();
    let plain = joint_loss_batch(&student, &teacher, &data).unwrap();
    assert!(plain > 0.0);
    assert!((tape_loss - plain).abs() <= 1e-12 * plain.max(1.0));
    for &id in set.ids() {
        let g = grads.get(id).unwrap();
        // every third entry keeps the check fast while covering all tensors
        for idx in (0..g.len()).step_by(3) {
            let eval = |delta: f64| {
                let mut m = student.clone();
                model_param_mut(&mut m, id).unwrap().data_mut()[idx] += delta;
                joint_loss_batch(&m, &teacher, &data).unwrap()
            };
            let numeric = (eval(FD_EPS) - eval(-FD_EPS)) / (2.0 * FD_EPS);
            assert_close(g.data()[idx], numeric, &id.label());
        }
    }
}

#[test]
fn frozen_projections_have_no_gradient() {
    let layer = perturbed_layer(7, GateGranularity::Headwise);
    let (_, grads) = alignment_gradients(&layer, 0, &samples(1, 1, 1)).unwrap();
    for kind in [ParamKind::Wq, ParamKind::Wk, ParamKind::Wv, ParamKind::Wo] {
        assert!(kind.is_frozen());
        assert!(matches!(
            grads.get(ParamId::new(0, kind)),
            Err(Error::FrozenParameter { .. })
        ));
    }
    assert!(hybrid_param_mut(&mut layer.clone(), ParamKind::Wq).is_none());
}

#[test]
fn no_history_starts_aligned() {
    let mut rng = Rng::new(11);
    let layer = HybridLayer::from_teacher(ProjectionSet::random(&mut rng, 2, 4, 1.0), Precision::Double);
    let loss = alignment_loss_batch(&layer, &samples(3, 2, 0)).unwrap();
    assert_eq!(loss, 0.0);
}

#[test]
fn zero_learning_rate_keeps_everything_fixed() {
    let mut layer = perturbed_layer(8, GateGranularity::Headwise);
    let before = layer.clone();
    let sampler = AlignmentSampler {
        batch: 2,
        tokens: 3,
        history_frames: 2,
        correlation: 0.5,
        scale: 1.0,
    };
    let run = train_stage1(&mut layer, 0, &sampler, &TrainConfig::new(5, 0.0, 1)).unwrap();
    assert_eq!(layer, before);
    assert!(run.loss_trace.iter().all(|&l| l == run.final_loss));
}

#[test]
fn stage1_descends_and_is_deterministic() {
    let sampler = AlignmentSampler {
        batch: 4,
        tokens: 3,
        history_frames: 2,
        correlation: 0.8,
        scale: 1.0,
    };
    let mut rng = Rng::new(21);
    let proj = ProjectionSet::random(&mut rng, 2, 4, 1.0);
    let start = HybridLayer::from_teacher(proj, Precision::Double);
    let cfg = TrainConfig::new(40, 0.05, 3);
    let mut a = start.clone();
    let mut b = start.clone();
    let ra = train_stage1(&mut a, 0, &sampler, &cfg).unwrap();
    let rb = train_stage1(&mut b, 0, &sampler, &cfg).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
    assert!(ra.final_loss < ra.initial_loss());
    // the frozen projections never move
    assert_eq!(a.proj(), start.proj());
}

#[test]
fn stage2_descends_and_keeps_projections() {
    let teacher = small_model(&[Backend::Softmax, Backend::Softmax]);
    let mut student = teacher.clone();
    student.replace_layers(&[1]).unwrap();
    let sampler = JointSampler {
        batch: 2,
        tokens: 3,
        history_frames: 2,
        correlation: 0.8,
    };
    let run = train_stage2(&mut student, &teacher, &sampler, &TrainConfig::new(20, 0.01, 4)).unwrap();
    assert!(run.final_loss < run.initial_loss());
    for (s, t) in student.layers.iter().zip(&teacher.layers) {
        assert_eq!(s.attn.proj(), t.attn.proj());
    }
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let mut layer = perturbed_layer(12, GateGranularity::Headwise);
    let sampler = AlignmentSampler {
        batch: 2,
        tokens: 3,
        history_frames: 2,
        correlation: 0.5,
        scale: 3.0,
    };
    let err = train_stage1(&mut layer, 0, &sampler, &TrainConfig::new(200, 1e6, 1)).unwrap_err();
    assert!(
        matches!(err, Error::Divergence { .. } | Error::NonFinite { .. }),
        "{err}"
    );
}

#[test]
fn mismatched_teacher_is_rejected() {
    let layer = perturbed_layer(13, GateGranularity::Headwise);
    let other = ProjectionSet::random(&mut Rng::new(99), 2, 4, 1.0);
    let x = Rng::new(1).normal_tensor(vec![3, 8], 1.0);
    let cache = KVCache::new(Precision::Double);
    assert!(alignment_loss(&layer, &other, &cache, &x, 0).is_err());
}
