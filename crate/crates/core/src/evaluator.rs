//! Completion metrics: retrieval precision/recall, eight-view scene renders
//! and Fréchet distances between pooled image features.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assets::AssetLibrary;
use crate::embed::{EmbeddingIndex, EncoderBackend};
use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::model::SceneModel;
use crate::nn::resnet::ResNet18;
use crate::render::{render, MaterialOverride, Placement, RenderObject, ViewConfig, ViewImage, BACKGROUND, NUM_VIEWS};
use crate::scene::io::write_atomic;
use crate::scene::Scene;
use crate::synthesizer::{complete_scene, Guidance, SynthesisOptions};

/// Albedo of every floor, so floors never differ in texture between scenes.
pub const FLOOR_COLOR: [f64; 3] = [0.78, 0.74, 0.66];

pub const EVAL_IMAGE_SIZE: usize = 512;

/// Multiset precision and recall. Precision is 0 when nothing was retrieved,
/// recall is 0 when the ground truth is empty.
pub fn retrieval_pr<A: AsRef<str>, B: AsRef<str>>(ground_truth: &[A], retrieved: &[B]) -> (f64, f64) {
    let mut remaining: HashMap<&str, usize> = HashMap::new();
    for g in ground_truth {
        *remaining.entry(g.as_ref()).or_default() += 1;
    }
    let mut hits = 0usize;
    for r in retrieved {
        if let Some(c) = remaining.get_mut(r.as_ref()) {
            if *c > 0 {
                *c -= 1;
                hits += 1;
            }
        }
    }
    let ratio = |n: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    (ratio(retrieved.len()), ratio(ground_truth.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePr {
    pub scene_id: String,
    pub precision: f64,
    pub recall: f64,
}

/// Per-scene precision/recall and their means over scenes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub precision: f64,
    pub recall: f64,
    pub per_scene: Vec<ScenePr>,
}

impl RetrievalReport {
    pub fn from_scenes(per_scene: Vec<ScenePr>) -> Self {
        let n = per_scene.len().max(1) as f64;
        RetrievalReport {
            precision: per_scene.iter().map(|s| s.precision).sum::<f64>() / n,
            recall: per_scene.iter().map(|s| s.recall).sum::<f64>() / n,
            per_scene,
        }
    }
}

/// Floor as a four-triangle fan per occupied mask cell, at height zero. The
/// fan keeps the tessellation symmetric under quarter turns.
fn floor_mesh(scene: &Scene) -> Option<Mesh> {
    let mask = &scene.floor.mask;
    let res = mask.resolution;
    let cell = scene.floor.extent / res as f64;
    let origin = -0.5 * scene.floor.extent;
    let mut positions = Vec::new();
    let mut faces = Vec::new();
    for i in 0..res {
        for j in 0..res {
            if mask.get(i, j) == 0 {
                continue;
            }
            let (x0, x1) = (origin + j as f64 * cell, origin + (j + 1) as f64 * cell);
            let (z0, z1) = (origin + i as f64 * cell, origin + (i + 1) as f64 * cell);
            let b = positions.len() as u32;
            let c = [0.5 * (x0 + x1), 0.0, 0.5 * (z0 + z1)];
            positions.extend([[x0, 0.0, z0], [x1, 0.0, z0], [x1, 0.0, z1], [x0, 0.0, z1], c]);
            faces.extend([[b, b + 1, b + 4], [b + 1, b + 2, b + 4], [b + 2, b + 3, b + 4], [b + 3, b, b + 4]]);
        }
    }
    (!faces.is_empty()).then(|| Mesh::new(positions, faces, FLOOR_COLOR))
}

/// Floor and furniture meshes ready to render.
struct SceneGeometry {
    floor: Option<Mesh>,
    furniture: Vec<(Mesh, Placement)>,
}

impl SceneGeometry {
    fn build(scene: &Scene, library: &AssetLibrary) -> Result<Self> {
        let mut boxes: HashMap<&str, Mesh> = HashMap::new();
        let mut furniture = Vec::with_capacity(scene.instances.len());
        for inst in &scene.instances {
            let mesh = match boxes.get(inst.asset_id.as_str()) {
                Some(m) => m.clone(),
                None => {
                    let asset = library.get(&inst.asset_id).ok_or_else(|| {
                        Error::NotFound(format!("asset `{}` is not in the library", inst.asset_id))
                    })?;
                    let m = asset.mesh.normalized_box()?;
                    boxes.insert(&inst.asset_id, m.clone());
                    m
                }
            };
            let t = &inst.transform;
            furniture.push((mesh, Placement::from_pose(t.translation, t.size, t.yaw)));
        }
        Ok(SceneGeometry {
            floor: floor_mesh(scene),
            furniture,
        })
    }

    fn view(&self, cfg: &ViewConfig, k: usize) -> ViewImage {
        let mut objects: Vec<RenderObject<'_>> = Vec::with_capacity(self.furniture.len() + 1);
        if let Some(f) = &self.floor {
            objects.push(RenderObject {
                mesh: f,
                placement: Placement::IDENTITY,
            });
        }
        objects.extend(self.furniture.iter().map(|(mesh, placement)| RenderObject {
            mesh,
            placement: *placement,
        }));
        render(
            &objects,
            cfg.eye(k),
            cfg.look_at,
            cfg.fov_y_deg,
            cfg.image_size,
            cfg.image_size,
            &MaterialOverride::default(),
            BACKGROUND,
        )
    }
}

/// The eight canonical views of a furnished scene.
pub fn render_scene_views(scene: &Scene, library: &AssetLibrary, cfg: &ViewConfig) -> Result<Vec<ViewImage>> {
    cfg.validate()?;
    let geo = SceneGeometry::build(scene, library)?;
    Ok((0..NUM_VIEWS).map(|k| geo.view(cfg, k)).collect())
}

/// A single canonical view.
pub fn render_scene_view(scene: &Scene, library: &AssetLibrary, cfg: &ViewConfig, view: usize) -> Result<ViewImage> {
    cfg.validate()?;
    if view >= NUM_VIEWS {
        return Err(Error::OutOfRange(format!("view {view} outside 0..{NUM_VIEWS}")));
    }
    Ok(SceneGeometry::build(scene, library)?.view(cfg, view))
}

/// Maps an image to a feature vector for Fréchet statistics.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn features(&self, image: &ViewImage) -> Result<Vec<f64>>;
}

/// Convolutional features of the luminance image followed by the mean RGB.
pub struct ConvFeatureExtractor {
    net: ResNet18,
    resolution: usize,
}

impl ConvFeatureExtractor {
    pub fn new(net: ResNet18, resolution: usize) -> Self {
        ConvFeatureExtractor { net, resolution }
    }

    pub fn random(width: usize, resolution: usize, seed: u64) -> Result<Self> {
        Ok(Self::new(ResNet18::random(width, seed)?, resolution))
    }
}

impl FeatureExtractor for ConvFeatureExtractor {
    fn name(&self) -> &str {
        "conv"
    }

    fn features(&self, image: &ViewImage) -> Result<Vec<f64>> {
        let small = image.resized(self.resolution, self.resolution);
        let mut luma = Vec::with_capacity(self.resolution * self.resolution);
        let mut mean = [0f64; 3];
        for p in small.rgba.chunks_exact(4) {
            let [r, g, b] = [p[0], p[1], p[2]].map(|c| c as f64 / 255.0);
            luma.push((0.299 * r + 0.587 * g + 0.114 * b) as f32);
            mean[0] += r;
            mean[1] += g;
            mean[2] += b;
        }
        let n = luma.len() as f64;
        let mut out: Vec<f64> = self.net.features(&luma, self.resolution)?.into_iter().map(f64::from).collect();
        out.extend(mean.map(|m| m / n));
        Ok(out)
    }
}

/// Image embeddings from a semantic encoder.
pub struct EncoderFeatureExtractor<'a>(pub &'a dyn EncoderBackend);

impl FeatureExtractor for EncoderFeatureExtractor<'_> {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn features(&self, image: &ViewImage) -> Result<Vec<f64>> {
        Ok(self.0.embed_image(image)?.into_iter().map(f64::from).collect())
    }
}

fn moments(feats: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = feats.len();
    let x = DMatrix::from_fn(n, dim, |i, j| feats[i][j]);
    let mean = DVector::from_fn(dim, |j, _| x.column(j).sum() / n as f64);
    let mut centred = x;
    for j in 0..dim {
        let m = mean[j];
        centred.column_mut(j).add_scalar_mut(-m);
    }
    let mut cov = centred.transpose() * &centred / (n - 1) as f64;
    if n <= dim {
        // pull toward a scaled identity so the estimate is full rank
        let lambda = dim as f64 / (n + dim) as f64;
        let avg = cov.trace() / dim as f64;
        cov *= 1.0 - lambda;
        for j in 0..dim {
            cov[(j, j)] += lambda * avg;
        }
    }
    (mean, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("each feature set needs at least two samples".into()));
    }
    let dim = a[0].len();
    if dim == 0 || a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::Shape("feature vectors differ in dimension".into()));
    }
    let (ma, ca) = moments(a, dim);
    let (mb, cb) = moments(b, dim);
    let ra = sqrt_psd(&ca);
    let cross = sqrt_psd(&(&ra * &cb * &ra));
    let d = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Anything that can finish a partially furnished scene.
pub trait SceneCompleter: Sync {
    fn complete(&self, scene: &Scene, rng: &mut dyn RngCore) -> Result<Scene>;
}

/// Completion with a trained model and no text guidance.
pub struct ModelCompleter<'a> {
    pub model: &'a SceneModel,
    pub index: &'a EmbeddingIndex,
    pub options: SynthesisOptions,
}

impl SceneCompleter for ModelCompleter<'_> {
    fn complete(&self, scene: &Scene, rng: &mut dyn RngCore) -> Result<Scene> {
        Ok(complete_scene(self.model, self.index, scene, &Guidance::none(), &self.options, rng)?.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletionEvalConfig {
    /// Instances kept from each test scene before completing it.
    pub keep_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub view: ViewConfig,
    /// Recorded in the report; the completer decides how it decodes.
    pub greedy: bool,
}

impl Default for CompletionEvalConfig {
    fn default() -> Self {
        CompletionEvalConfig {
            keep_counts: vec![1, 2, 3, 4, 5],
            seeds: (0..5).collect(),
            view: ViewConfig::scene_preset(EVAL_IMAGE_SIZE),
            greedy: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRow {
    pub keep: usize,
    pub fid: f64,
    pub clip_fid: f64,
    pub precision: f64,
    pub recall: f64,
    pub greedy: bool,
    /// Test scenes with more instances than `keep`.
    pub scenes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CompletionReport {
    pub rows: Vec<CompletionRow>,
}

impl CompletionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Prepopulated #,FID,CLIP-FID,Precision,Recall,Decoding,Scenes\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{},{}",
                r.keep,
                r.fid,
                r.clip_fid,
                r.precision,
                r.recall,
                if r.greedy { "greedy" } else { "sampling" },
                r.scenes
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }
}

fn scene_features(
    scene: &Scene,
    library: &AssetLibrary,
    view: &ViewConfig,
    extractors: [&dyn FeatureExtractor; 2],
) -> Result<[Vec<Vec<f64>>; 2]> {
    let views = render_scene_views(scene, library, view)?;
    let mut out = [Vec::with_capacity(NUM_VIEWS), Vec::with_capacity(NUM_VIEWS)];
    for img in &views {
        for (e, o) in extractors.iter().zip(out.iter_mut()) {
            o.push(e.features(img)?);
        }
    }
    Ok(out)
}

fn pooled(per_scene: Vec<[Vec<Vec<f64>>; 2]>) -> [Vec<Vec<f64>>; 2] {
    let mut out = [Vec::new(), Vec::new()];
    for [a, b] in per_scene {
        out[0].extend(a);
        out[1].extend(b);
    }
    out
}

/// Strips each test scene to `keep` random instances, completes it, and scores
/// the additions against the removed instances. Fréchet scores compare renders
/// of the completed scenes with renders of the same scenes untouched. Scenes
/// with at most `keep` instances are skipped for that count. Every
/// metric is averaged over the seeds.
pub fn evaluate_completion(
    completer: &dyn SceneCompleter,
    library: &AssetLibrary,
    test_scenes: &[Scene],
    image_features: &dyn FeatureExtractor,
    semantic_features: &dyn FeatureExtractor,
    cfg: &CompletionEvalConfig,
) -> Result<CompletionReport> {
    if test_scenes.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    if cfg.seeds.is_empty() || cfg.keep_counts.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed and one keep count".into()));
    }
    cfg.view.validate()?;
    let extractors = [image_features, semantic_features];
    let reference_feats = test_scenes
        .par_iter()
        .map(|s| scene_features(s, library, &cfg.view, extractors))
        .collect::<Result<Vec<_>>>()?;
    let mut report = CompletionReport::default();
    for &keep in &cfg.keep_counts {
        let eligible: Vec<(usize, &Scene)> = test_scenes
            .iter()
            .enumerate()
            .filter(|(_, s)| s.instances.len() > keep)
            .collect();
        if eligible.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no test scene has more than {keep} instances"
            )));
        }
        let reference = pooled(eligible.iter().map(|&(i, _)| reference_feats[i].clone()).collect());
        let mut acc = [0f64; 4];
        for &seed in &cfg.seeds {
            let results = eligible
                .par_iter()
                .map(|&(i, scene)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(((keep as u64) << 32) | i as u64);
                    let n = scene.instances.len();
                    let mut kept_idx = sample(&mut rng, n, keep).into_vec();
                    kept_idx.sort_unstable();
                    let kept: HashSet<usize> = kept_idx.iter().copied().collect();
                    let mut stripped = scene.clone();
                    stripped.instances = kept_idx.iter().map(|&k| scene.instances[k].clone()).collect();
                    let removed: Vec<&str> = (0..n)
                        .filter(|k| !kept.contains(k))
                        .map(|k| scene.instances[k].asset_id.as_str())
                        .collect();
                    let completed = completer.complete(&stripped, &mut rng)?;
                    let existing: HashSet<&str> = stripped.instances.iter().map(|i| i.id.as_str()).collect();
                    let added: Vec<&str> = completed
                        .instances
                        .iter()
                        .filter(|i| !existing.contains(i.id.as_str()))
                        .map(|i| i.asset_id.as_str())
                        .collect();
                    let (precision, recall) = retrieval_pr(&removed, &added);
                    let feats = scene_features(&completed, library, &cfg.view, extractors)?;
                    Ok((
                        ScenePr {
                            scene_id: scene.id.clone(),
                            precision,
                            recall,
                        },
                        feats,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let (prs, feats): (Vec<ScenePr>, Vec<_>) = results.into_iter().unzip();
            let pr = RetrievalReport::from_scenes(prs);
            let generated = pooled(feats);
            acc[0] += frechet_distance(&reference[0], &generated[0])?;
            acc[1] += frechet_distance(&reference[1], &generated[1])?;
            acc[2] += pr.precision;
            acc[3] += pr.recall;
        }
        let n = cfg.seeds.len() as f64;
        report.rows.push(CompletionRow {
            keep,
            fid: acc[0] / n,
            clip_fid: acc[1] / n,
            precision: acc[2] / n,
            recall: acc[3] / n,
            greedy: cfg.greedy,
            scenes: eligible.len(),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::{prop, prop_assert, proptest};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::embed::StubEncoder;
    use crate::scene::{FloorPlan, FurnitureInstance, RoomType, Transform7};
    use crate::toyworld::{generate_dataset, generate_library, ToySceneConfig};

    #[test]
    fn pr_examples() {
        assert_eq!(retrieval_pr(&["a", "b"], &["a", "b"]), (1.0, 1.0));
        let (p, r) = retrieval_pr(&["a", "a", "b"], &["a", "b", "b"]);
        assert!((p - 2.0 / 3.0).abs() < 1e-12 && (r - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(retrieval_pr(&["a"], &[] as &[&str]), (0.0, 0.0));
    }

    proptest! {
        #[test]
        fn pr_bounded_and_monotone(gt in prop::collection::vec(0u8..5, 1..8), got in prop::collection::vec(0u8..5, 0..8)) {
            let gt: Vec<String> = gt.iter().map(|x| x.to_string()).collect();
            let got: Vec<String> = got.iter().map(|x| x.to_string()).collect();
            let (p, r) = retrieval_pr(&gt, &got);
            prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
            // adding an item still missing from the retrieval
            let mut left: HashMap<&str, isize> = HashMap::new();
            for g in &gt { *left.entry(g).or_default() += 1; }
            for g in &got { *left.entry(g).or_default() -= 1; }
            if let Some((&extra, _)) = left.iter().filter(|(_, &c)| c > 0).min_by_key(|(k, _)| **k) {
                let mut more = got.clone();
                more.push(extra.to_string());
                let (p2, r2) = retrieval_pr(&gt, &more);
                prop_assert!(p2 >= p - 1e-12 && r2 >= r - 1e-12);
            }
        }
    }

    fn gaussian(n: usize, dim: usize, shift: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| { let z: f64 = StandardNormal.sample(rng); z + shift }).collect::<Vec<f64>>())
            .collect()
    }

    #[test]
    fn frechet_identity_symmetry_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = gaussian(300, 6, 0.0, &mut rng);
        let b = gaussian(200, 6, 0.5, &mut rng);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        let a1 = gaussian(20_000, 1, 0.0, &mut rng);
        let b1 = gaussian(20_000, 1, 1.0, &mut rng);
        assert!((frechet_distance(&a1, &b1).unwrap() - 1.0).abs() < 0.05);
    }

    #[test]
    fn frechet_matches_one_dimensional_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(-1.0..2.0)]).collect();
        let b: Vec<Vec<f64>> = (0..70).map(|_| vec![rng.random_range(0.0..5.0)]).collect();
        let stats = |v: &[Vec<f64>]| {
            let n = v.len() as f64;
            let m = v.iter().map(|x| x[0]).sum::<f64>() / n;
            let var = v.iter().map(|x| (x[0] - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, var.sqrt())
        };
        let ((ma, sa), (mb, sb)) = (stats(&a), stats(&b));
        let oracle = (ma - mb).powi(2) + (sa - sb).powi(2);
        assert!((frechet_distance(&a, &b).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn frechet_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dim = 5;
        let a = gaussian(100, dim, 0.0, &mut rng);
        let b = gaussian(120, dim, 0.3, &mut rng);
        let m = DMatrix::from_fn(dim, dim, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
        let q = m.qr().q();
        let rot = |s: &[Vec<f64>]| -> Vec<Vec<f64>> {
            s.iter()
                .map(|v| (&q * DVector::from_column_slice(v)).iter().copied().collect())
                .collect()
        };
        let d0 = frechet_distance(&a, &b).unwrap();
        let d1 = frechet_distance(&rot(&a), &rot(&b)).unwrap();
        assert!((d0 - d1).abs() < 1e-6);
    }

    #[test]
    fn frechet_errors_and_shrinkage() {
        let a = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(frechet_distance(&a, &[vec![0.0], vec![1.0]]).is_err());
        assert!(frechet_distance(&a[..1], &a).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let few = gaussian(4, 10, 0.0, &mut rng);
        let d = frechet_distance(&few, &few).unwrap();
        assert!(d.abs() < 1e-8);
        let other = gaussian(4, 10, 1.0, &mut rng);
        assert!(frechet_distance(&few, &other).unwrap().is_finite());
    }

    fn toy() -> (AssetLibrary, Vec<Scene>) {
        let specs = generate_library(3, 4, 1).unwrap();
        let lib = AssetLibrary::from_toy_specs(&specs).unwrap();
        let scenes = generate_dataset(&specs, 4, 10, &ToySceneConfig::default()).unwrap();
        (lib, scenes)
    }

    #[test]
    fn scene_renders_are_deterministic_and_react_to_furniture() {
        let (lib, scenes) = toy();
        let cfg = ViewConfig::scene_preset(48);
        let a = render_scene_views(&scenes[0], &lib, &cfg).unwrap();
        let b = render_scene_views(&scenes[0], &lib, &cfg).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, b);
        let mut empty = scenes[0].clone();
        empty.instances.clear();
        let e = render_scene_views(&empty, &lib, &cfg).unwrap();
        assert!(e.iter().all(|v| v.coverage() > 0));
        assert!(a.iter().zip(&e).any(|(x, y)| x.rgba != y.rgba));
        let mut bad = scenes[0].clone();
        bad.instances.push(FurnitureInstance::new("x", "missing", Transform7::new([0.0; 3], [0.2; 3], 0.0)));
        assert!(render_scene_views(&bad, &lib, &cfg).is_err());
        assert!(render_scene_view(&scenes[0], &lib, &cfg, 8).is_err());
        assert_eq!(render_scene_view(&scenes[0], &lib, &cfg, 3).unwrap(), a[3]);
    }

    #[test]
    fn square_floor_views_are_rotationally_consistent() {
        let lib = AssetLibrary::default();
        let floor = FloorPlan::rectangle(4.0, 4.0, 16, 6.4).unwrap();
        let s = Scene::new("e", RoomType::Bedroom, floor);
        let v = render_scene_views(&s, &lib, &ViewConfig::scene_preset(40)).unwrap();
        // a square floor looks the same every quarter turn
        for k in [2, 4, 6] {
            assert_eq!(v[0].rgba, v[k].rgba);
        }
        assert_eq!(v[1].rgba, v[3].rgba);
    }

    struct Oracle<'a>(&'a [Scene]);

    impl SceneCompleter for Oracle<'_> {
        fn complete(&self, scene: &Scene, _rng: &mut dyn RngCore) -> Result<Scene> {
            Ok(self.0.iter().find(|s| s.id == scene.id).unwrap().clone())
        }
    }

    struct Idle;

    impl SceneCompleter for Idle {
        fn complete(&self, scene: &Scene, _rng: &mut dyn RngCore) -> Result<Scene> {
            Ok(scene.clone())
        }
    }

    fn eval_cfg() -> CompletionEvalConfig {
        CompletionEvalConfig {
            keep_counts: vec![1, 2],
            seeds: vec![0, 1],
            view: ViewConfig::scene_preset(32),
            greedy: true,
        }
    }

    #[test]
    fn oracle_completion_is_perfect() {
        let (lib, scenes) = toy();
        let conv = ConvFeatureExtractor::random(2, 16, 0).unwrap();
        let enc = StubEncoder::new();
        let sem = EncoderFeatureExtractor(&enc);
        let r = evaluate_completion(&Oracle(&scenes), &lib, &scenes, &conv, &sem, &eval_cfg()).unwrap();
        for row in &r.rows {
            assert_eq!((row.precision, row.recall), (1.0, 1.0));
            assert!(row.fid.abs() < 1e-8 && row.clip_fid.abs() < 1e-8, "{row:?}");
        }
        let idle = evaluate_completion(&Idle, &lib, &scenes, &conv, &sem, &eval_cfg()).unwrap();
        assert!(idle.rows.iter().all(|r| r.recall == 0.0 && r.precision == 0.0));
        assert!(idle.rows.iter().all(|r| r.fid > 0.0));
        let csv = idle.to_csv();
        assert!(csv.starts_with("Prepopulated #,FID,CLIP-FID,Precision,Recall"));
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv, evaluate_completion(&Idle, &lib, &scenes, &conv, &sem, &eval_cfg()).unwrap().to_csv());
        assert!(evaluate_completion(&Idle, &lib, &[], &conv, &sem, &eval_cfg()).is_err());
    }
}
