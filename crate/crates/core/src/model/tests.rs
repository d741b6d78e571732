use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::embed::SemanticEmbedding;
use crate::nn::Adam;
use crate::scene::FloorPlan;

fn bounds() -> NormalizationBounds {
    NormalizationBounds::new(
        [-3.0, 0.0, -3.0, 0.05, 0.05, 0.05, -PI],
        [3.0, 2.0, 3.0, 1.0, 1.0, 1.0, PI],
    )
    .unwrap()
}

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        feature_dim: 16,
        query_dim: 8,
        n_layers: 2,
        n_heads: 2,
        ff_dim: 24,
        mol_components: 3,
        pe_frequencies: 4,
        embed_proj_width: 8,
        head_hidden: 12,
        max_instances: 12,
        floor: FloorEncoderConfig {
            resolution: 16,
            width: 2,
            weights: None,
            seed,
        },
        seed,
    }
}

fn model(seed: u64) -> SceneModel {
    SceneModel::new(tiny(seed), bounds(), ModelMeta::default()).unwrap()
}

fn random_embedding(rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..EMBED_DIM).map(|_| rng.random_range(-0.1..0.1)).collect()
}

fn random_transform(rng: &mut ChaCha8Rng) -> NormalizedTransform7 {
    NormalizedTransform7::new(std::array::from_fn(|_| rng.random::<f64>())).unwrap()
}

fn floor(m: &SceneModel) -> FloorFeature {
    let plan = FloorPlan::rectangle(3.0, 2.0, 16, 6.4).unwrap();
    m.encode_floor(&plan.mask).unwrap()
}

#[test]
fn positional_code_basics() {
    let v = NormalizedTransform7::new([0.0; 7]).unwrap();
    let code = positional_encode(&v, 4);
    assert_eq!(code.len(), 7 * 8);
    for pair in code.chunks(2) {
        assert_eq!(pair[0], 0.0);
        assert_eq!(pair[1], 1.0);
    }
    let v = NormalizedTransform7::new([0.13, 0.5, 0.77, 1.0, 0.2, 0.9, 0.33]).unwrap();
    assert!(positional_encode(&v, 16).iter().all(|x| x.abs() <= 1.0));
}

#[test]
fn positional_code_separates_a_fine_grid() {
    let codes: Vec<Vec<f64>> = (0..=1000)
        .map(|i| positional_encode_values(&[i as f64 * 1e-3], 8))
        .collect();
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            let d: f64 = codes[i].iter().zip(&codes[j]).map(|(a, b)| (a - b).abs()).sum();
            assert!(d > 1e-6, "grid points {i} and {j} collide");
        }
    }
}

#[test]
fn floor_encoding_is_deterministic_and_checked() {
    let m = model(1);
    let res = 16;
    let zeros = FloorMask { resolution: res, cells: vec![0; res * res] };
    let ones = FloorMask { resolution: res, cells: vec![1; res * res] };
    let a = m.encode_floor(&zeros).unwrap();
    assert_eq!(a, m.encode_floor(&zeros).unwrap());
    let b = m.encode_floor(&ones).unwrap();
    let d: f32 = a.0.iter().zip(&b.0).map(|(x, y)| (x - y).powi(2)).sum();
    assert!(d > 0.0);
    let wrong = FloorMask { resolution: 8, cells: vec![1; 64] };
    assert!(m.encode_floor(&wrong).is_err());
}

#[test]
fn instance_encoding() {
    let mut m = model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = random_embedding(&mut rng);
    let t1 = random_transform(&mut rng);
    let t2 = random_transform(&mut rng);
    let a = m.encode_instance(&h, &t1).unwrap();
    assert_eq!(a, m.encode_instance(&h, &t1).unwrap());
    assert_ne!(a, m.encode_instance(&h, &t2).unwrap());
    for name in ["instance.proj.w", "instance.proj.b"] {
        let id = m.params().id(name).unwrap();
        m.params_mut().get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
    }
    assert!(m.encode_instance(&h, &t2).unwrap().0.iter().all(|&x| x == 0.0));
    assert!(m.encode_instance(&h[..10], &t2).is_err());
}

fn prediction_distance(a: &StepPrediction, b: &StepPrediction) -> f64 {
    let mut d: f64 = (a.stop_logits[0] - b.stop_logits[0])
        .abs()
        .max((a.stop_logits[1] - b.stop_logits[1]).abs());
    for (x, y) in a.predicted_embedding.iter().zip(&b.predicted_embedding) {
        d = d.max((x - y).abs() as f64);
    }
    let ma = a.translation.iter().chain([&a.rotation]).chain(a.size.iter());
    let mb = b.translation.iter().chain([&b.rotation]).chain(b.size.iter());
    for (x, y) in ma.zip(mb) {
        for (p, q) in x.to_flat().iter().zip(y.to_flat()) {
            d = d.max((p - q).abs());
        }
    }
    d
}

#[test]
fn context_order_does_not_matter() {
    let m = model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = floor(&m);
    let mut ctx: Vec<EncodedInstance> = (0..6)
        .map(|_| {
            let h = random_embedding(&mut rng);
            m.encode_instance(&h, &random_transform(&mut rng)).unwrap()
        })
        .collect();
    let h = random_embedding(&mut rng);
    let t = random_transform(&mut rng);
    let base = m.predict(&f, &ctx, &h, &t).unwrap();
    for _ in 0..10 {
        ctx.shuffle(&mut rng);
        let p = m.predict(&f, &ctx, &h, &t).unwrap();
        assert!(prediction_distance(&base, &p) <= 1e-5);
    }
}

#[test]
fn empty_and_duplicate_contexts() {
    let m = model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = floor(&m);
    let h = random_embedding(&mut rng);
    let t = random_transform(&mut rng);
    let empty = m.predict(&f, &[], &h, &t).unwrap();
    assert!(empty.stop_probability().is_finite());
    for mix in empty.translation.iter().chain([&empty.rotation]).chain(empty.size.iter()) {
        assert!((mix.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let c = m.encode_instance(&h, &t).unwrap();
    let one = m.predict(&f, std::slice::from_ref(&c), &h, &t).unwrap();
    let two = m.predict(&f, &[c.clone(), c], &h, &t).unwrap();
    assert!(prediction_distance(&one, &two) > 1e-6);
}

#[test]
fn context_overflow_is_an_error() {
    let m = model(5);
    let f = floor(&m);
    let ctx = vec![EncodedInstance(vec![0.0; 16]); 13];
    assert!(m.decode_step(&f, &ctx).is_err());
}

#[test]
fn cascade_is_causal() {
    let m = model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f = floor(&m);
    let ctx = vec![m.encode_instance(&random_embedding(&mut rng), &random_transform(&mut rng)).unwrap()];
    let h = random_embedding(&mut rng);
    let t = random_transform(&mut rng);
    let a = m.predict(&f, &ctx, &h, &t).unwrap();
    let mut m2 = m.clone();
    let names: Vec<String> = m2
        .params()
        .iter()
        .filter(|(_, n, _)| n.starts_with("head.rotation"))
        .map(|(_, n, _)| n.to_string())
        .collect();
    assert!(!names.is_empty());
    for n in names {
        let id = m2.params().id(&n).unwrap();
        m2.params_mut().get_mut(id).data.iter_mut().for_each(|x| *x += 0.5);
    }
    let b = m2.predict(&f, &ctx, &h, &t).unwrap();
    assert_eq!(a.stop_logits, b.stop_logits);
    assert_eq!(a.predicted_embedding, b.predicted_embedding);
    assert_eq!(a.translation, b.translation);
    assert_ne!(a.rotation, b.rotation);
}

#[test]
fn rotation_depends_on_translation() {
    let m = model(7);
    let f = floor(&m);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = random_embedding(&mut rng);
    let mut st = m.decode_step(&f, &[]).unwrap();
    let a = st.rotation(&h, [0.1, 0.2, 0.3]).unwrap();
    let b = st.rotation(&h, [0.9, 0.2, 0.3]).unwrap();
    assert_ne!(a, b);
}

fn orthonormal_index(n: usize) -> EmbeddingIndex {
    let rows = (0..n)
        .map(|i| {
            let mut v = vec![0f32; EMBED_DIM];
            v[i * 3] = 1.0;
            SemanticEmbedding::new(v).unwrap()
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

#[test]
fn embedding_logits_are_dot_products() {
    let idx = orthonormal_index(5);
    let s = embedding_logits(idx.row(3), &idx).unwrap();
    let best = (0..5).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
    assert_eq!(best, 3);
    assert!(embedding_logits(&vec![0.0; EMBED_DIM], &idx).unwrap().iter().all(|&x| x == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = random_embedding(&mut rng);
    let s = embedding_logits(&q, &idx).unwrap();
    for (i, si) in s.iter().enumerate() {
        let mut naive = 0f64;
        for j in 0..EMBED_DIM {
            naive += idx.row(i)[j] as f64 * q[j] as f64;
        }
        assert!((si - naive).abs() < 1e-6);
    }
}

#[test]
fn raw_mixture_layout_and_clamp() {
    let k = 2;
    let raw = vec![0.0, 1.0, 0.2, 0.8, -9.0, -2.0];
    let m = mixtures_from_raw(&raw, 1, k).unwrap();
    assert_eq!(m[0].log_scales, vec![LOG_SCALE_MIN, -2.0]);
    let (_, g) = m[0].nll_and_grad(0.3);
    let rg = raw_grad(&raw, std::slice::from_ref(&g), k);
    assert_eq!(rg[4], 0.0);
    assert_eq!(rg[5], g.log_scales[1]);
    assert!(mixtures_from_raw(&raw, 2, k).is_err());
}

#[test]
fn config_parsing_and_validation() {
    let cfg = ModelConfig::from_toml_str("feature_dim = 32\nn_heads = 4\n[floor]\nwidth = 4\n").unwrap();
    assert_eq!(cfg.feature_dim, 32);
    assert_eq!(cfg.floor.width, 4);
    assert!(ModelConfig::from_toml_str("feature_dim = 30\nn_heads = 4\n").is_err());
    assert!(ModelConfig::from_toml_str("n_layers = 0\n").is_err());
    assert!(ModelConfig::from_toml_str("bogus = 1\n").is_err());
    ModelConfig::default().validate().unwrap();
    ModelConfig::compact().validate().unwrap();
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut m = model(9);
    m.meta = ModelMeta {
        encoder: "stub@1".into(),
        index_hash: "abc".into(),
        room_type: Some(RoomType::Bedroom),
    };
    let mut adam = Adam::new(Default::default(), m.params());
    adam.t = 7;
    adam.m[0].data[0] = 0.25;
    adam.v[1].data[0] = 1.5;
    let state = OptimizerState { adam, step: 42 };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.safetensors");
    m.save(&p, Some(&state)).unwrap();
    let ck = Checkpoint::load(&p).unwrap();
    assert_eq!(ck.model.params, m.params);
    assert_eq!(ck.model.backbone, m.backbone);
    assert_eq!(ck.model.bounds, m.bounds);
    assert_eq!(ck.model.meta, m.meta);
    assert_eq!(ck.model.config(), m.config());
    assert_eq!(ck.optimizer.unwrap(), state);
    let p2 = dir.path().join("m2.safetensors");
    ck.model.save(&p2, None).unwrap();
    assert!(Checkpoint::load(&p2).unwrap().optimizer.is_none());
    std::fs::write(&p2, b"garbage").unwrap();
    assert!(SceneModel::load(&p2).is_err());
}
