use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::embed::{SemanticEmbedding, EMBED_DIM};
use crate::likelihoods::MixtureOfLogistics;
use crate::model::{FloorEncoderConfig, ModelConfig, ModelMeta, StepPrediction};
use crate::scene::{FloorPlan, FurnitureInstance, RoomType, Transform7};

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        feature_dim: 16,
        query_dim: 16,
        n_layers: 1,
        n_heads: 2,
        ff_dim: 16,
        mol_components: 2,
        pe_frequencies: 3,
        embed_proj_width: 8,
        head_hidden: 12,
        max_instances: 8,
        floor: FloorEncoderConfig {
            resolution: 16,
            width: 2,
            weights: None,
            seed: 1,
        },
        seed: 1,
    }
}

fn index(n: usize) -> EmbeddingIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows = (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..EMBED_DIM).map(|_| rng.random_range(-1.0..1.0f32)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            SemanticEmbedding::new(v.iter().map(|x| x / norm).collect()).unwrap()
        })
        .collect();
    EmbeddingIndex::new(
        (0..n).map(|i| format!("a{i}")).collect(),
        vec![vec![RoomType::Bedroom]; n],
        rows,
        "test@0",
        "none",
    )
    .unwrap()
}

fn scene(n: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Scene::new(format!("s{seed}"), RoomType::Bedroom, FloorPlan::rectangle(4.0, 3.0, 16, 6.4).unwrap());
    for i in 0..n {
        let t = Transform7::new(
            [rng.random_range(-1.5..1.5), 0.4, rng.random_range(-1.0..1.0)],
            [0.3, 0.4, 0.3],
            rng.random_range(-PI..PI),
        );
        s.instances.push(FurnitureInstance::new(format!("i{i}"), format!("a{}", i % 4), t));
    }
    s
}

fn bounds_of(scenes: &[Scene]) -> NormalizationBounds {
    NormalizationBounds::from_scenes(scenes).unwrap()
}

#[test]
fn single_instance_empty_context() {
    let s = scene(1, 0);
    let b = bounds_of(std::slice::from_ref(&s));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ex = training_example_with_context_size(&s, &b, AugmentConfig::NONE, 0, &mut rng).unwrap();
    assert!(ex.context.is_empty());
    match ex.target {
        TrainingTarget::Instance { asset_id, .. } => assert_eq!(asset_id, "a0"),
        TrainingTarget::Stop => panic!("expected an instance target"),
    }
    let ex = training_example_with_context_size(&s, &b, AugmentConfig::NONE, 1, &mut rng).unwrap();
    assert_eq!(ex.target, TrainingTarget::Stop);
    assert_eq!(ex.floor, s.floor.mask);
    assert!(training_example_with_context_size(&s, &b, AugmentConfig::NONE, 2, &mut rng).is_err());
}

#[test]
fn targets_and_stops_have_the_right_frequencies() {
    let mut s = scene(4, 1);
    for (i, inst) in s.instances.iter_mut().enumerate() {
        inst.asset_id = format!("a{i}");
    }
    let b = bounds_of(std::slice::from_ref(&s));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let ex = training_example_with_context_size(&s, &b, AugmentConfig::default(), 0, &mut rng).unwrap();
        if let TrainingTarget::Instance { asset_id, .. } = ex.target {
            counts[asset_id[1..].parse::<usize>().unwrap()] += 1;
        }
    }
    for c in counts {
        assert!((c as f64 / n as f64 - 0.25).abs() < 0.02, "{counts:?}");
    }
    let stops = (0..n)
        .filter(|_| {
            sample_training_example(&s, &b, AugmentConfig::default(), &mut rng).unwrap().target
                == TrainingTarget::Stop
        })
        .count();
    assert!((stops as f64 / n as f64 - 0.2).abs() < 0.02);
}

#[test]
fn augmentation_moves_the_whole_scene() {
    let s = scene(3, 2);
    let b = bounds_of(std::slice::from_ref(&s));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut seen_other_floor = false;
    for _ in 0..40 {
        let ex = training_example_with_context_size(&s, &b, AugmentConfig::default(), 3, &mut rng).unwrap();
        if ex.floor != s.floor.mask {
            seen_other_floor = true;
            // a 4 x 3 room rotated a quarter turn has a different mask
        }
        assert_eq!(ex.context.len(), 3);
    }
    assert!(seen_other_floor);
}

fn mixture_at(x: f64, s: f64) -> MixtureOfLogistics {
    MixtureOfLogistics::new(vec![0.0], vec![x], vec![s.ln()]).unwrap()
}

fn prediction(stop_logits: [f64; 2], emb: Vec<f32>, t: &NormalizedTransform7, s: f64) -> StepPrediction {
    let v = t.values;
    StepPrediction {
        stop_logits,
        predicted_embedding: emb,
        translation: [mixture_at(v[0], s), mixture_at(v[1], s), mixture_at(v[2], s)],
        rotation: mixture_at(v[6], s),
        size: [mixture_at(v[3], s), mixture_at(v[4], s), mixture_at(v[5], s)],
    }
}

#[test]
fn loss_oracles() {
    let idx = index(6);
    let t = NormalizedTransform7::new([0.3, 0.5, 0.2, 0.6, 0.4, 0.7, 0.9]).unwrap();
    let target = TrainingTarget::Instance {
        asset_id: "a2".into(),
        transform: t,
    };
    let no_smooth = LossConfig {
        label_smoothing: 0.0,
        ..Default::default()
    };
    // confident "continue", zero embedding, sharp mixtures at the target
    let pred = prediction([40.0, -40.0], vec![0.0; EMBED_DIM], &t, 1e-3);
    let r = compute_losses(&pred, &target, &idx, &no_smooth).unwrap();
    assert!(r.stop_loss < 1e-12);
    assert!((r.embedding_loss - 6f64.ln()).abs() < 1e-12);
    let peak = -(1.0 / (4.0 * 1e-3f64)).ln();
    assert!((r.translation_nll - 3.0 * peak).abs() < 1e-9);
    assert!((r.rotation_nll - peak).abs() < 1e-9);
    assert!((r.size_nll - 3.0 * peak).abs() < 1e-9);
    let parts = r.stop_loss + r.embedding_loss + r.translation_nll + r.rotation_nll + r.size_nll;
    assert!((r.total - parts).abs() < 1e-9);
    let smoothed = compute_losses(&pred, &target, &idx, &LossConfig::default()).unwrap();
    assert!(smoothed.stop_loss > r.stop_loss);

    let stop = compute_losses(&prediction([-40.0, 40.0], vec![0.0; EMBED_DIM], &t, 0.1), &TrainingTarget::Stop, &idx, &no_smooth).unwrap();
    assert!(stop.stop_loss < 1e-12);
    assert_eq!(stop.embedding_loss, 0.0);
    assert_eq!(stop.total, stop.stop_loss);

    let missing = TrainingTarget::Instance {
        asset_id: "zzz".into(),
        transform: t,
    };
    assert!(compute_losses(&pred, &missing, &idx, &no_smooth).is_err());
}

#[test]
fn embedding_loss_matches_explicit_softmax() {
    let idx = index(5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let emb: Vec<f32> = (0..EMBED_DIM).map(|_| rng.random_range(-0.5..0.5)).collect();
    let t = NormalizedTransform7::new([0.5; 7]).unwrap();
    let target = TrainingTarget::Instance {
        asset_id: "a4".into(),
        transform: t,
    };
    let r = compute_losses(&prediction([0.0, 0.0], emb.clone(), &t, 0.1), &target, &idx, &LossConfig::default()).unwrap();
    let scores: Vec<f64> = (0..5)
        .map(|i| idx.row(i).iter().zip(&emb).map(|(&a, &b)| a as f64 * b as f64).sum())
        .collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    let explicit = -(scores[4].exp() / z).ln();
    assert!((r.embedding_loss - explicit).abs() < 1e-7);
}

#[test]
fn loss_ignores_context_order() {
    let idx = index(4);
    let s = scene(5, 4);
    let b = bounds_of(std::slice::from_ref(&s));
    let model = SceneModel::new(tiny_cfg(), b, ModelMeta::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ex = training_example_with_context_size(&s, &b, AugmentConfig::NONE, 4, &mut rng).unwrap();
    let base = example_loss_report(&model, &ex, &idx, &LossConfig::default()).unwrap();
    let mut permuted = ex.clone();
    permuted.context.reverse();
    permuted.context.swap(0, 2);
    let p = example_loss_report(&model, &permuted, &idx, &LossConfig::default()).unwrap();
    assert!((base.total - p.total).abs() < 1e-5);
}

#[test]
fn end_to_end_gradient_check() {
    let idx = index(4);
    let s = scene(2, 5);
    let b = bounds_of(std::slice::from_ref(&s));
    let model = SceneModel::new(tiny_cfg(), b, ModelMeta::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let exs = [
        training_example_with_context_size(&s, &b, AugmentConfig::NONE, 1, &mut rng).unwrap(),
        training_example_with_context_size(&s, &b, AugmentConfig::NONE, 2, &mut rng).unwrap(),
    ];
    let cfg = LossConfig::default();
    let floor = Arc::new(model.backbone_features(&s.floor.mask).unwrap());
    let resolved: Vec<_> = exs.iter().map(|e| resolve_example(e, floor.clone(), &idx).unwrap()).collect();
    let store: ParamStore<f64> = model.params().cast();
    let total = |st: &ParamStore<f64>| -> f64 {
        resolved
            .iter()
            .map(|e| example_loss(&model.net, st, e, &idx, &cfg, false).unwrap().0.total)
            .sum()
    };
    let mut grads = Grads::new(store.len());
    for e in &resolved {
        grads.merge(&example_loss(&model.net, &store, e, &idx, &cfg, true).unwrap().1.unwrap());
    }
    let (mut num, mut ana) = (Vec::new(), Vec::new());
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let len = store.get(id).data.len();
        for j in [0, len / 2, len - 1] {
            let h = 1e-6;
            let mut plus = store.clone();
            plus.get_mut(id).data[j] += h;
            let mut minus = store.clone();
            minus.get_mut(id).data[j] -= h;
            num.push((total(&plus) - total(&minus)) / (2.0 * h));
            ana.push(grads.get(id).map_or(0.0, |g| g.data[j]));
        }
    }
    let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(diff / scale <= 1e-3, "relative error {}", diff / scale);
    assert!(ana.iter().filter(|g| **g != 0.0).count() > ana.len() / 2);
}

fn small_train_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        adam: AdamConfig {
            lr: 3e-3,
            ..Default::default()
        },
        checkpoint_every: 0,
        ..Default::default()
    }
}

#[test]
fn training_reduces_loss_and_writes_metrics() {
    let idx = index(4);
    let scenes = vec![scene(3, 6)];
    let b = bounds_of(&scenes);
    let model = SceneModel::new(tiny_cfg(), b, ModelMeta::default()).unwrap();
    let mut tr = Trainer::new(model, &scenes, &idx, small_train_cfg(150)).unwrap();
    let before = tr.batch_loss(10_000).unwrap().total;
    let dir = tempfile::tempdir().unwrap();
    tr.run(Some(dir.path())).unwrap();
    let after = tr.batch_loss(10_000).unwrap().total;
    assert!(after < before - 1.0, "{before} -> {after}");
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 151);
    assert!(csv.starts_with("step,total,"));
    let jsonl = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 150);
    let ck = Checkpoint::load(dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.optimizer.unwrap().step, 150);
    assert_eq!(ck.model.meta.index_hash, idx.content_hash());
}

#[test]
fn resume_reproduces_the_next_step() {
    let idx = index(4);
    let scenes = vec![scene(3, 7), scene(2, 8)];
    let b = bounds_of(&scenes);
    let model = SceneModel::new(tiny_cfg(), b, ModelMeta::default()).unwrap();
    let mut tr = Trainer::new(model, &scenes, &idx, small_train_cfg(20)).unwrap();
    for _ in 0..10 {
        tr.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.safetensors");
    tr.save_checkpoint(&p).unwrap();
    let next = tr.step().unwrap();
    let mut resumed = Trainer::resume(Checkpoint::load(&p).unwrap(), &scenes, &idx, small_train_cfg(20)).unwrap();
    assert_eq!(resumed.step_count(), 10);
    let again = resumed.step().unwrap();
    assert!((next.loss.total - again.loss.total).abs() <= 1e-5);
    assert_eq!(tr.model().params(), resumed.model().params());
}

#[test]
fn training_is_deterministic() {
    let idx = index(4);
    let scenes = vec![scene(3, 9)];
    let b = bounds_of(&scenes);
    let run = || {
        let model = SceneModel::new(tiny_cfg(), b, ModelMeta::default()).unwrap();
        let mut tr = Trainer::new(model, &scenes, &idx, small_train_cfg(5)).unwrap();
        tr.run(None).unwrap();
        tr.into_model()
    };
    assert_eq!(run().params(), run().params());
}

#[test]
fn non_finite_loss_aborts() {
    let idx = index(4);
    let scenes = vec![scene(2, 10)];
    let b = bounds_of(&scenes);
    let mut model = SceneModel::new(tiny_cfg(), b, ModelMeta::default()).unwrap();
    let id = model.params().id("head.stop.l2.b").unwrap();
    model.params_mut().get_mut(id).data[0] = f32::NAN;
    let mut tr = Trainer::new(model, &scenes, &idx, small_train_cfg(5)).unwrap();
    assert!(matches!(tr.step(), Err(Error::Diverged { step: 0, .. })));
}

#[test]
fn missing_assets_are_rejected_up_front() {
    let idx = index(2);
    let scenes = vec![scene(4, 11)];
    let b = bounds_of(&scenes);
    let model = SceneModel::new(tiny_cfg(), b, ModelMeta::default()).unwrap();
    assert!(Trainer::new(model, &scenes, &idx, small_train_cfg(1)).is_err());
}
