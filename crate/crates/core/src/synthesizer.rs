//! Autoregressive inference: completion, generation from a floor plan,
//! text guidance and text-driven replacement.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::index::{DEFAULT_TEMPERATURE, DEFAULT_TOP_K};
use crate::embed::{embed_text, l2_norm, retrieve_topk, EmbeddingIndex, EncoderBackend};
use crate::error::{Error, Result};
use crate::likelihoods::MixtureOfLogistics;
use crate::model::{EncodedInstance, FloorFeature, SceneModel, StepState};
use crate::scene::{
    denormalize_transform, normalize_transform, FloorPlan, FurnitureInstance, NormalizeMode,
    NormalizedTransform7, RoomType, Scene, Transform7,
};

pub const DEFAULT_W0: f64 = 0.35;
pub const DEFAULT_DECAY: f64 = 0.5;
pub const DEFAULT_MAX_NEW: usize = 32;

/// User-facing guidance settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub prompt: Option<String>,
    pub w0: f64,
    pub decay: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            prompt: None,
            w0: DEFAULT_W0,
            decay: DEFAULT_DECAY,
        }
    }
}

impl GuidanceConfig {
    /// Embeds the prompt, if any.
    pub fn resolve(&self, enc: &dyn EncoderBackend) -> Result<Guidance> {
        let text = match self.prompt.as_deref().map(str::trim) {
            Some(p) if !p.is_empty() => Some(embed_text(p, enc)?.into_vec()),
            _ => None,
        };
        Guidance::new(text, self.w0, self.decay)
    }
}

/// Guidance with the prompt already embedded.
#[derive(Clone, Debug, PartialEq)]
pub struct Guidance {
    text: Option<Vec<f32>>,
    w0: f64,
    decay: f64,
}

impl Guidance {
    pub fn new(text: Option<Vec<f32>>, w0: f64, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w0) {
            return Err(Error::InvalidArgument(format!("w0 must lie in [0, 1], got {w0}")));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::InvalidArgument(format!("decay must lie in (0, 1], got {decay}")));
        }
        if let Some(t) = &text {
            if !(l2_norm(t) > 0.0) {
                return Err(Error::InvalidArgument("guidance text embedding has zero norm".into()));
            }
        }
        Ok(Guidance { text, w0, decay })
    }

    pub fn none() -> Self {
        Guidance {
            text: None,
            w0: 0.0,
            decay: 1.0,
        }
    }

    /// Interpolation weight at step `t`: `w0 * decay^t`.
    pub fn weight_at(&self, t: usize) -> f64 {
        self.w0 * self.decay.powi(t.min(i32::MAX as usize) as i32)
    }

    fn apply(&self, predicted: &[f32], t: usize) -> Result<Vec<f32>> {
        match &self.text {
            Some(text) => apply_text_guidance(predicted, text, self.weight_at(t)),
            None => Ok(predicted.to_vec()),
        }
    }
}

/// Rescales `text` to the norm of `predicted` and interpolates towards it
/// with weight `w`.
pub fn apply_text_guidance(predicted: &[f32], text: &[f32], w: f64) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidArgument(format!("guidance weight {w} outside [0, 1]")));
    }
    if predicted.len() != text.len() {
        return Err(Error::Shape(format!(
            "predicted embedding has {} components, text has {}",
            predicted.len(),
            text.len()
        )));
    }
    let tn = l2_norm(text);
    if !(tn > 0.0) {
        return Err(Error::InvalidArgument("guidance text embedding has zero norm".into()));
    }
    let hn = l2_norm(predicted);
    if hn == 0.0 {
        log::warn!("predicted embedding has zero norm; guidance skipped");
        return Ok(predicted.to_vec());
    }
    if w == 0.0 {
        return Ok(predicted.to_vec());
    }
    let s = hn / tn;
    Ok(predicted
        .iter()
        .zip(text)
        .map(|(&h, &t)| ((1.0 - w) * h as f64 + w * s * t as f64) as f32)
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Stop when the stop probability exceeds one half.
    #[default]
    Argmax,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisOptions {
    /// Most instances a single call may add.
    pub max_new: usize,
    /// Stop predictions are ignored until this many instances were added.
    pub min_new: usize,
    pub stop: StopRule,
    pub top_k: usize,
    pub temperature: f64,
    /// Pick the best asset and each mixture's heaviest mode instead of sampling.
    pub greedy: bool,
    /// Retrieve only assets tagged with the scene's room type.
    pub filter_room_type: bool,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            max_new: DEFAULT_MAX_NEW,
            min_new: 0,
            stop: StopRule::Argmax,
            top_k: DEFAULT_TOP_K,
            temperature: DEFAULT_TEMPERATURE,
            greedy: false,
            filter_room_type: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    /// `None` on the step that stopped.
    pub asset_id: Option<String>,
    pub instance_id: Option<String>,
    pub transform: Option<Transform7>,
    pub stop_probability: f64,
    pub guidance_weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisTrace {
    pub steps: Vec<TraceStep>,
    /// Generation ended on a limit rather than a stop prediction.
    pub truncated: bool,
}

impl SynthesisTrace {
    pub fn added(&self) -> impl Iterator<Item = &TraceStep> {
        self.steps.iter().filter(|s| s.asset_id.is_some())
    }
}

fn retrieval_pool(index: &EmbeddingIndex, room: RoomType, opts: &SynthesisOptions) -> Result<EmbeddingIndex> {
    let pool = if opts.filter_room_type {
        index.filter_room_type(room)
    } else {
        index.clone()
    };
    if pool.is_empty() {
        return Err(Error::Generation(format!("no assets available for room type {room}")));
    }
    Ok(pool)
}

fn pick_asset<R: Rng + ?Sized>(
    pool: &EmbeddingIndex,
    query: &[f32],
    opts: &SynthesisOptions,
    rng: &mut R,
) -> Result<String> {
    if opts.greedy {
        let hit = pool.search(query, 1)?;
        Ok(hit[0].asset_id.clone())
    } else {
        retrieve_topk(pool, query, opts.top_k, opts.temperature, rng)
    }
}

fn draw<R: Rng + ?Sized>(m: &MixtureOfLogistics, greedy: bool, rng: &mut R) -> f64 {
    if greedy {
        m.mode_of_heaviest().clamp(0.0, 1.0)
    } else {
        m.sample(rng)
    }
}

/// Samples translation, then rotation, then size for the chosen embedding.
fn place<R: Rng + ?Sized>(
    st: &mut StepState<'_>,
    chosen: &[f32],
    greedy: bool,
    rng: &mut R,
) -> Result<NormalizedTransform7> {
    let tm = st.translation(chosen)?;
    let t = [draw(&tm[0], greedy, rng), draw(&tm[1], greedy, rng), draw(&tm[2], greedy, rng)];
    let r = draw(&st.rotation(chosen, t)?, greedy, rng);
    let sm = st.size(chosen, t, r)?;
    let s = [draw(&sm[0], greedy, rng), draw(&sm[1], greedy, rng), draw(&sm[2], greedy, rng)];
    NormalizedTransform7::new([t[0], t[1], t[2], s[0], s[1], s[2], r])
}

fn encode_existing(
    model: &SceneModel,
    index: &EmbeddingIndex,
    instances: &[FurnitureInstance],
) -> Result<Vec<EncodedInstance>> {
    instances
        .iter()
        .map(|inst| {
            let h = index.embedding(&inst.asset_id).ok_or_else(|| {
                Error::NotFound(format!("asset `{}` of instance `{}` is not indexed", inst.asset_id, inst.id))
            })?;
            let t = normalize_transform(&inst.transform, &model.bounds, NormalizeMode::Inference)?;
            model.encode_instance(h, &t)
        })
        .collect()
}

/// Adds instances to `scene` until the model predicts stop or a limit is hit.
/// Existing instances are never changed.
pub fn complete_scene<R: Rng + ?Sized>(
    model: &SceneModel,
    index: &EmbeddingIndex,
    scene: &Scene,
    guidance: &Guidance,
    opts: &SynthesisOptions,
    rng: &mut R,
) -> Result<(Scene, SynthesisTrace)> {
    let max_total = model.config().max_instances;
    if scene.instances.len() > max_total {
        return Err(Error::InvalidArgument(format!(
            "scene has {} instances, the model handles at most {max_total}",
            scene.instances.len()
        )));
    }
    let pool = retrieval_pool(index, scene.room_type, opts)?;
    let floor: FloorFeature = model.encode_floor(&scene.floor.mask)?;
    let mut encoded = encode_existing(model, index, &scene.instances)?;
    let mut out = scene.clone();
    let mut trace = SynthesisTrace::default();
    let mut added = 0usize;
    loop {
        if added >= opts.max_new || out.instances.len() >= max_total {
            trace.truncated = true;
            break;
        }
        let step = trace.steps.len();
        let mut st = model.decode_step(&floor, &encoded)?;
        let p_stop = st.stop_probability();
        let w = guidance.weight_at(step);
        let stop = added >= opts.min_new
            && match opts.stop {
                StopRule::Argmax => p_stop > 0.5,
                StopRule::Sample => rng.random::<f64>() < p_stop,
            };
        if stop {
            trace.steps.push(TraceStep {
                step,
                asset_id: None,
                instance_id: None,
                transform: None,
                stop_probability: p_stop,
                guidance_weight: w,
            });
            break;
        }
        let query = guidance.apply(st.predicted_embedding(), step)?;
        let asset_id = pick_asset(&pool, &query, opts, rng)?;
        let chosen = pool.embedding(&asset_id).expect("retrieved from this pool").to_vec();
        let normalized = place(&mut st, &chosen, opts.greedy, rng)?;
        let transform = denormalize_transform(&normalized, &model.bounds);
        let id = out.fresh_instance_id();
        out.instances.push(FurnitureInstance::new(id.clone(), asset_id.clone(), transform));
        encoded.push(model.encode_instance(&chosen, &normalized)?);
        trace.steps.push(TraceStep {
            step,
            asset_id: Some(asset_id),
            instance_id: Some(id),
            transform: Some(transform),
            stop_probability: p_stop,
            guidance_weight: w,
        });
        added += 1;
    }
    Ok((out, trace))
}

/// Synthesizes a scene on an empty floor.
pub fn generate_scene<R: Rng + ?Sized>(
    model: &SceneModel,
    index: &EmbeddingIndex,
    floor: &FloorPlan,
    room_type: RoomType,
    guidance: &Guidance,
    opts: &SynthesisOptions,
    rng: &mut R,
) -> Result<(Scene, SynthesisTrace)> {
    let empty = Scene::new("generated", room_type, floor.clone());
    complete_scene(model, index, &empty, guidance, opts, rng)
}

/// Swaps one instance for the asset best matching `text`, re-predicting its
/// placement from the remaining instances. The instance keeps its id and slot.
pub fn replace_instance<R: Rng + ?Sized>(
    model: &SceneModel,
    index: &EmbeddingIndex,
    scene: &Scene,
    instance_id: &str,
    text: &[f32],
    opts: &SynthesisOptions,
    rng: &mut R,
) -> Result<Scene> {
    let pos = scene
        .instances
        .iter()
        .position(|i| i.id == instance_id)
        .ok_or_else(|| Error::NotFound(format!("instance `{instance_id}`")))?;
    let pool = retrieval_pool(index, scene.room_type, opts)?;
    let asset_id = pick_asset(&pool, text, opts, rng)?;
    let chosen = pool.embedding(&asset_id).expect("retrieved from this pool").to_vec();
    let others: Vec<FurnitureInstance> = scene
        .instances
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != pos)
        .map(|(_, inst)| inst.clone())
        .collect();
    let floor = model.encode_floor(&scene.floor.mask)?;
    let encoded = encode_existing(model, index, &others)?;
    let mut st = model.decode_step(&floor, &encoded)?;
    let normalized = place(&mut st, &chosen, opts.greedy, rng)?;
    let mut out = scene.clone();
    let inst = &mut out.instances[pos];
    inst.asset_id = asset_id;
    inst.transform = denormalize_transform(&normalized, &model.bounds);
    Ok(out)
}

/// [`replace_instance`] with the prompt embedded by `enc`.
#[allow(clippy::too_many_arguments)]
pub fn replace_instance_with_prompt<R: Rng + ?Sized>(
    model: &SceneModel,
    index: &EmbeddingIndex,
    enc: &dyn EncoderBackend,
    scene: &Scene,
    instance_id: &str,
    prompt: &str,
    opts: &SynthesisOptions,
    rng: &mut R,
) -> Result<Scene> {
    let text = embed_text(prompt, enc)?;
    replace_instance(model, index, scene, instance_id, text.as_slice(), opts, rng)
}
