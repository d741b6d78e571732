//! Example sampling, per-step losses and the optimization loop.

mod loss;

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingIndex;
use crate::error::{Error, Result};
use crate::likelihoods::MixtureOfLogistics;
use crate::model::network::Network;
use crate::model::{mixtures_from_raw, raw_grad, Checkpoint, OptimizerState, SceneModel};
use crate::nn::{Adam, AdamConfig, Grads, NodeId, ParamStore, Real, Tape, Tensor};
use crate::scene::{
    augment_scene, normalize_transform, Augmentation, FloorMask, NormalizationBounds,
    NormalizeMode, NormalizedTransform7, Scene,
};

pub use loss::{compute_losses, LossConfig, LossReport, TrainingTarget};
use loss::{evaluate, resolve_target, ResolvedTarget};

/// Rigid augmentations drawn per example. Rotations are restricted to
/// quarter turns so augmented floor masks stay few and cacheable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub quarter_turns: bool,
    pub mirror: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            quarter_turns: true,
            mirror: true,
        }
    }
}

impl AugmentConfig {
    pub const NONE: AugmentConfig = AugmentConfig {
        quarter_turns: false,
        mirror: false,
    };
}

/// One autoregressive training step drawn from a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub floor: FloorMask,
    /// Already-placed instances in random order.
    pub context: Vec<(String, NormalizedTransform7)>,
    pub target: TrainingTarget,
}

fn augment_randomly<R: Rng + ?Sized>(scene: &Scene, aug: AugmentConfig, rng: &mut R) -> Scene {
    let mut out = None;
    if aug.quarter_turns {
        let k = rng.random_range(0..4u32);
        if k > 0 {
            out = Some(augment_scene(scene, Augmentation::Rotate(k as f64 * FRAC_PI_2)));
        }
    }
    if aug.mirror && rng.random_bool(0.5) {
        out = Some(augment_scene(out.as_ref().unwrap_or(scene), Augmentation::MirrorX));
    }
    out.unwrap_or_else(|| scene.clone())
}

/// Draws a context size uniformly from `0..=n`, then an example with it.
pub fn sample_training_example<R: Rng + ?Sized>(
    scene: &Scene,
    bounds: &NormalizationBounds,
    aug: AugmentConfig,
    rng: &mut R,
) -> Result<TrainingExample> {
    let n = scene.instances.len();
    if n == 0 {
        return Err(Error::InvalidArgument(format!("scene `{}` has no instances", scene.id)));
    }
    let size = rng.random_range(0..=n);
    training_example_with_context_size(scene, bounds, aug, size, rng)
}

/// Augments the whole scene, permutes its instances, keeps the first `size`
/// as context and takes the next one as target (or stop when none is left).
pub fn training_example_with_context_size<R: Rng + ?Sized>(
    scene: &Scene,
    bounds: &NormalizationBounds,
    aug: AugmentConfig,
    size: usize,
    rng: &mut R,
) -> Result<TrainingExample> {
    let n = scene.instances.len();
    if n == 0 || size > n {
        return Err(Error::InvalidArgument(format!(
            "context size {size} for a scene with {n} instances"
        )));
    }
    let scene = augment_randomly(scene, aug, rng);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let norm = |i: usize| -> Result<(String, NormalizedTransform7)> {
        let inst = &scene.instances[i];
        let t = normalize_transform(&inst.transform, bounds, NormalizeMode::Training)
            .map_err(|e| Error::OutOfRange(format!("scene `{}` instance `{}`: {e}", scene.id, inst.id)))?;
        Ok((inst.asset_id.clone(), t))
    };
    let context = order[..size].iter().map(|&i| norm(i)).collect::<Result<Vec<_>>>()?;
    let target = if size == n {
        TrainingTarget::Stop
    } else {
        let (asset_id, transform) = norm(order[size])?;
        TrainingTarget::Instance {
            asset_id,
            transform,
        }
    };
    Ok(TrainingExample {
        floor: scene.floor.mask,
        context,
        target,
    })
}

/// Example with embeddings and floor features looked up.
pub(crate) struct ResolvedExample<'a> {
    pub floor: Arc<Vec<f32>>,
    pub context: Vec<(&'a [f32], [f64; 7])>,
    pub target: ResolvedTarget,
}

pub(crate) fn resolve_example<'a>(
    ex: &TrainingExample,
    floor: Arc<Vec<f32>>,
    index: &'a EmbeddingIndex,
) -> Result<ResolvedExample<'a>> {
    let context = ex
        .context
        .iter()
        .map(|(id, t)| {
            index
                .embedding(id)
                .map(|h| (h, t.values))
                .ok_or_else(|| Error::NotFound(format!("context asset `{id}` is not in the index")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResolvedExample {
        floor,
        context,
        target: resolve_target(&ex.target, index)?,
    })
}

/// Forward pass, losses and (optionally) parameter gradients for one example.
pub(crate) fn example_loss<T: Real>(
    net: &Network,
    store: &ParamStore<T>,
    ex: &ResolvedExample<'_>,
    index: &EmbeddingIndex,
    cfg: &LossConfig,
    want_grads: bool,
) -> Result<(LossReport, Option<Grads<T>>)> {
    let mut tape = Tape::new(store);
    let f = net.floor_token(&mut tape, &ex.floor);
    let ctx: Vec<NodeId> = ex
        .context
        .iter()
        .map(|(h, t)| net.instance_token(&mut tape, h, t))
        .collect();
    let nodes = net.step(&mut tape, f, &ctx);
    let sl = tape.value(nodes.stop_logits).to_f64_vec();
    let emb = tape.value(nodes.embedding).to_f64_vec();
    let k = net.cfg.mol_components;
    let mut heads: Option<[(NodeId, Vec<f64>); 3]> = None;
    let mut mixtures: Vec<MixtureOfLogistics> = Vec::new();
    if let ResolvedTarget::Instance { row, transform } = &ex.target {
        let cond = net.condition(&mut tape, nodes.joint, index.row(*row));
        let t3 = [transform[0], transform[1], transform[2]];
        let tr = net.translation_head(&mut tape, cond);
        let rot = net.rotation_head(&mut tape, cond, t3);
        let size = net.size_head(&mut tape, cond, t3, transform[6]);
        let raws = [tr, rot, size].map(|n| (n, tape.value(n).to_f64_vec()));
        mixtures.extend(mixtures_from_raw(&raws[0].1, 3, k)?);
        mixtures.extend(mixtures_from_raw(&raws[1].1, 1, k)?);
        mixtures.extend(mixtures_from_raw(&raws[2].1, 3, k)?);
        heads = Some(raws);
    }
    let (report, g) = evaluate(
        [sl[0], sl[1]],
        &emb,
        heads.is_some().then_some(mixtures.as_slice()),
        &ex.target,
        index,
        cfg,
    )?;
    if !want_grads {
        return Ok((report, None));
    }
    let row = |v: &[f64]| Tensor::row_vector(v.iter().map(|&x| T::lit(x)).collect());
    let mut seeds = vec![(nodes.stop_logits, row(&g.stop_logits))];
    if let (Some(ge), Some(raws)) = (&g.embedding, &heads) {
        seeds.push((nodes.embedding, row(ge)));
        let parts = [&g.mixtures[0..3], &g.mixtures[3..4], &g.mixtures[4..7]];
        for ((node, raw), mg) in raws.iter().zip(parts) {
            seeds.push((*node, row(&raw_grad(raw, mg, k))));
        }
    }
    Ok((report, Some(tape.backward(&seeds))))
}

/// Loss of a single example under the model's current weights.
pub fn example_loss_report(
    model: &SceneModel,
    ex: &TrainingExample,
    index: &EmbeddingIndex,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let floor = Arc::new(model.backbone_features(&ex.floor)?);
    let resolved = resolve_example(ex, floor, index)?;
    Ok(example_loss(&model.net, &model.params, &resolved, index, cfg, false)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Steps between metric rows; every step is logged when 1.
    pub log_every: u64,
    /// Steps between checkpoint writes; a final checkpoint is always written.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 128,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            log_every: 1,
            checkpoint_every: 1000,
        }
    }
}

/// Examples per parallel work unit. Fixed so results do not depend on the
/// number of threads.
const CHUNK: usize = 8;

/// Metrics of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossReport,
    pub grad_norm: f64,
}

pub struct Trainer<'d> {
    model: SceneModel,
    state: OptimizerState,
    scenes: &'d [Scene],
    index: &'d EmbeddingIndex,
    cfg: TrainConfig,
    floor_cache: HashMap<FloorMask, Arc<Vec<f32>>>,
    history: Vec<StepMetrics>,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

impl<'d> Trainer<'d> {
    /// `index` is the retrieval vocabulary for the embedding loss; every
    /// asset used by `scenes` must be in it.
    pub fn new(
        mut model: SceneModel,
        scenes: &'d [Scene],
        index: &'d EmbeddingIndex,
        cfg: TrainConfig,
    ) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if scenes.is_empty() || scenes.iter().all(|s| s.instances.is_empty()) {
            return Err(Error::InvalidArgument("training needs scenes with instances".into()));
        }
        for s in scenes {
            for inst in &s.instances {
                if index.position(&inst.asset_id).is_none() {
                    return Err(Error::NotFound(format!(
                        "scene `{}` uses asset `{}` missing from the index",
                        s.id, inst.asset_id
                    )));
                }
            }
        }
        model.meta.index_hash = index.content_hash();
        model.meta.encoder = index.encoder().to_string();
        let adam = Adam::new(cfg.adam.clone(), model.params());
        Ok(Trainer {
            model,
            state: OptimizerState { adam, step: 0 },
            scenes,
            index,
            cfg,
            floor_cache: HashMap::new(),
            history: Vec::new(),
        })
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(
        ckpt: Checkpoint,
        scenes: &'d [Scene],
        index: &'d EmbeddingIndex,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let state = ckpt
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        if ckpt.model.meta.index_hash != index.content_hash() {
            return Err(Error::Checkpoint(
                "checkpoint was trained against a different index".into(),
            ));
        }
        let mut t = Trainer::new(ckpt.model, scenes, index, cfg)?;
        t.state = state;
        Ok(t)
    }

    pub fn model(&self) -> &SceneModel {
        &self.model
    }

    pub fn into_model(self) -> SceneModel {
        self.model
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn history(&self) -> &[StepMetrics] {
        &self.history
    }

    pub fn optimizer_state(&self) -> &OptimizerState {
        &self.state
    }

    fn floor_features(&mut self, mask: &FloorMask) -> Result<Arc<Vec<f32>>> {
        if let Some(f) = self.floor_cache.get(mask) {
            return Ok(f.clone());
        }
        let f = Arc::new(self.model.backbone_features(mask)?);
        self.floor_cache.insert(mask.clone(), f.clone());
        Ok(f)
    }

    /// The examples of a given step; a pure function of seed and step.
    pub fn batch(&self, step: u64) -> Result<Vec<TrainingExample>> {
        let mut rng = step_rng(self.cfg.seed, step);
        let usable: Vec<&Scene> = self.scenes.iter().filter(|s| !s.instances.is_empty()).collect();
        (0..self.cfg.batch_size)
            .map(|_| {
                let s = usable[rng.random_range(0..usable.len())];
                sample_training_example(s, &self.model.bounds, self.cfg.augment, &mut rng)
            })
            .collect()
    }

    /// Mean loss and gradient of a batch under the current weights.
    fn batch_gradient(&mut self, examples: &[TrainingExample]) -> Result<(LossReport, Grads<f32>)> {
        let floors = examples
            .iter()
            .map(|e| self.floor_features(&e.floor))
            .collect::<Result<Vec<_>>>()?;
        let resolved = examples
            .iter()
            .zip(floors)
            .map(|(e, f)| resolve_example(e, f, self.index))
            .collect::<Result<Vec<_>>>()?;
        let net = &self.model.net;
        let store = &self.model.params;
        let index = self.index;
        let lcfg = &self.cfg.loss;
        let partial: Vec<(LossReport, Grads<f32>)> = resolved
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut rep = LossReport::default();
                let mut g = Grads::new(store.len());
                for ex in chunk {
                    let (r, eg) = example_loss(net, store, ex, index, lcfg, true)?;
                    rep.add_scaled(&r, 1.0);
                    g.merge(&eg.expect("gradients requested"));
                }
                Ok((rep, g))
            })
            .collect::<Result<_>>()?;
        let mut report = LossReport::default();
        let mut grads = Grads::new(store.len());
        let inv = 1.0 / examples.len() as f64;
        for (r, g) in &partial {
            report.add_scaled(r, inv);
            grads.merge(g);
        }
        grads.scale(inv as f32);
        Ok((report, grads))
    }

    /// Mean loss of step `step`'s batch under the current weights, without updating.
    pub fn batch_loss(&mut self, step: u64) -> Result<LossReport> {
        let examples = self.batch(step)?;
        Ok(self.batch_gradient(&examples)?.0)
    }

    /// One optimizer update. Returns the pre-update batch metrics.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.state.step;
        let examples = self.batch(step)?;
        let (loss, grads) = self.batch_gradient(&examples)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged {
                step: step as usize,
                detail: format!(
                    "stop {} embedding {} translation {} rotation {} size {}",
                    loss.stop_loss, loss.embedding_loss, loss.translation_nll, loss.rotation_nll, loss.size_nll
                ),
            });
        }
        let grad_norm = self.state.adam.step(&mut self.model.params, &grads);
        self.state.step += 1;
        let m = StepMetrics {
            step,
            loss,
            grad_norm,
        };
        self.history.push(m);
        Ok(m)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.model.save(path, Some(&self.state))
    }

    /// Trains until `cfg.steps` updates have been applied. With an output
    /// directory, writes `metrics.csv`, `metrics.jsonl` and `checkpoint.safetensors`.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<()> {
        let mut sinks = match out_dir {
            Some(d) => Some(MetricSinks::open(d, self.state.step > 0)?),
            None => None,
        };
        while self.state.step < self.cfg.steps {
            let m = self.step()?;
            if let Some(s) = sinks.as_mut() {
                if self.cfg.log_every <= 1 || m.step % self.cfg.log_every == 0 {
                    s.write(&m)?;
                }
            }
            if m.step % 100 == 0 {
                log::info!(
                    "step {} loss {:.4} (stop {:.4} emb {:.4} t {:.3} r {:.3} s {:.3})",
                    m.step,
                    m.loss.total,
                    m.loss.stop_loss,
                    m.loss.embedding_loss,
                    m.loss.translation_nll,
                    m.loss.rotation_nll,
                    m.loss.size_nll
                );
            }
            if let Some(d) = out_dir {
                if self.cfg.checkpoint_every > 0 && self.state.step.is_multiple_of(self.cfg.checkpoint_every) {
                    self.save_checkpoint(d.join(CHECKPOINT_FILE))?;
                }
            }
        }
        if let Some(d) = out_dir {
            self.save_checkpoint(d.join(CHECKPOINT_FILE))?;
        }
        Ok(())
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

struct MetricSinks {
    csv: csv::Writer<File>,
    jsonl: File,
    path: PathBuf,
}

impl MetricSinks {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("metrics.csv");
        let json_path = dir.join("metrics.jsonl");
        let open = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(p)
                .map_err(|e| Error::io(p, e))
        };
        let csv_exists = append && csv_path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        let csv = csv::WriterBuilder::new()
            .has_headers(!csv_exists)
            .from_writer(open(&csv_path)?);
        Ok(MetricSinks {
            csv,
            jsonl: open(&json_path)?,
            path: dir.to_path_buf(),
        })
    }

    fn write(&mut self, m: &StepMetrics) -> Result<()> {
        let err = |e: String| Error::io(&self.path, std::io::Error::other(e));
        self.csv.serialize(MetricsRow::from(m)).map_err(|e| err(e.to_string()))?;
        self.csv.flush().map_err(|e| err(e.to_string()))?;
        let line = serde_json::to_string(m).map_err(|e| err(e.to_string()))?;
        writeln!(self.jsonl, "{line}").map_err(|e| err(e.to_string()))?;
        Ok(())
    }
}

#[derive(Serialize)]
struct MetricsRow {
    step: u64,
    total: f64,
    stop_loss: f64,
    embedding_loss: f64,
    translation_nll: f64,
    rotation_nll: f64,
    size_nll: f64,
    grad_norm: f64,
}

impl From<&StepMetrics> for MetricsRow {
    fn from(m: &StepMetrics) -> Self {
        MetricsRow {
            step: m.step,
            total: m.loss.total,
            stop_loss: m.loss.stop_loss,
            embedding_loss: m.loss.embedding_loss,
            translation_nll: m.loss.translation_nll,
            rotation_nll: m.loss.rotation_nll,
            size_nll: m.loss.size_nll,
            grad_norm: m.grad_norm,
        }
    }
}

#[cfg(test)]
mod tests;
