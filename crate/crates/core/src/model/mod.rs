//! The autoregressive scene network: floor and instance encoders, an
//! order-free transformer over the instance set, and cascaded attribute heads.

mod checkpoint;
pub(crate) mod network;

use std::f64::consts::PI;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::embed::{EmbeddingIndex, EMBED_DIM};
use crate::error::{Error, Result};
use crate::likelihoods::{MixtureOfLogistics, MolGrad, DEFAULT_COMPONENTS, LOG_SCALE_MIN};
use crate::nn::resnet::ResNet18;
use crate::nn::{NodeId, ParamStore, Tape, Tensor};
use crate::scene::{FloorMask, NormalizationBounds, NormalizedTransform7, RoomType};

pub use checkpoint::{Checkpoint, OptimizerState};
pub(crate) use network::Network;

/// Floor-plan backbone settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FloorEncoderConfig {
    /// Mask side in cells; masks of another resolution are rejected.
    pub resolution: usize,
    /// Channels of the first residual stage (64 in the standard network).
    pub width: usize,
    /// Pretrained weights in torchvision naming. Random weights when absent.
    pub weights: Option<PathBuf>,
    pub seed: u64,
}

impl Default for FloorEncoderConfig {
    fn default() -> Self {
        FloorEncoderConfig {
            resolution: crate::scene::DEFAULT_MASK_RESOLUTION,
            width: 64,
            weights: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Width of the learned query; projected to `feature_dim` when different.
    pub query_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub mol_components: usize,
    /// Sinusoid frequencies per encoded scalar.
    pub pe_frequencies: usize,
    /// Width the 512-d embeddings are projected to before joining other features.
    pub embed_proj_width: usize,
    pub head_hidden: usize,
    pub max_instances: usize,
    pub floor: FloorEncoderConfig,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 512,
            query_dim: 512,
            n_layers: 4,
            n_heads: 8,
            ff_dim: 1024,
            mol_components: DEFAULT_COMPONENTS,
            pe_frequencies: 16,
            embed_proj_width: 128,
            head_hidden: 256,
            max_instances: 64,
            floor: FloorEncoderConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small network for toy-scale data and tests.
    pub fn compact() -> Self {
        ModelConfig {
            feature_dim: 64,
            query_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ff_dim: 128,
            mol_components: DEFAULT_COMPONENTS,
            pe_frequencies: 8,
            embed_proj_width: 64,
            head_hidden: 128,
            max_instances: 32,
            floor: FloorEncoderConfig {
                width: 8,
                ..FloorEncoderConfig::default()
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("query_dim", self.query_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ff_dim", self.ff_dim),
            ("mol_components", self.mol_components),
            ("pe_frequencies", self.pe_frequencies),
            ("embed_proj_width", self.embed_proj_width),
            ("head_hidden", self.head_hidden),
            ("max_instances", self.max_instances),
            ("floor.width", self.floor.width),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("model config: {name} must be >= 1")));
        }
        if !self.feature_dim.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "model config: feature_dim {} not divisible by n_heads {}",
                self.feature_dim, self.n_heads
            )));
        }
        if self.floor.resolution < crate::scene::raster::MIN_MASK_RESOLUTION {
            return Err(Error::InvalidArgument(format!(
                "model config: floor.resolution {} too small",
                self.floor.resolution
            )));
        }
        if self.pe_frequencies > 30 {
            return Err(Error::InvalidArgument("model config: pe_frequencies > 30".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: "model".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sine-cosine code of each scalar: `sin(2^l pi x), cos(2^l pi x)` for
/// `l = 0..frequencies`, concatenated scalar by scalar.
pub(crate) fn positional_encode_values(values: &[f64], frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len() * 2 * frequencies);
    for &x in values {
        let mut f = PI;
        for _ in 0..frequencies {
            let (s, c) = (f * x).sin_cos();
            out.push(s);
            out.push(c);
            f *= 2.0;
        }
    }
    out
}

/// Encoding of all seven normalized components, `7 * 2 * frequencies` values.
pub fn positional_encode(v: &NormalizedTransform7, frequencies: usize) -> Vec<f64> {
    positional_encode_values(&v.values, frequencies)
}

/// Projected floor token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloorFeature(pub Vec<f32>);

/// Projected instance token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedInstance(pub Vec<f32>);

/// All outputs of one step, with the attribute heads teacher-forced on a
/// given embedding and transform.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPrediction {
    /// `[continue, stop]`.
    pub stop_logits: [f64; 2],
    pub predicted_embedding: Vec<f32>,
    pub translation: [MixtureOfLogistics; 3],
    pub rotation: MixtureOfLogistics,
    pub size: [MixtureOfLogistics; 3],
}

impl StepPrediction {
    pub fn stop_probability(&self) -> f64 {
        stop_probability(self.stop_logits)
    }
}

pub(crate) fn stop_probability(l: [f64; 2]) -> f64 {
    crate::likelihoods::sigmoid(l[1] - l[0])
}

/// Identifying information stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    /// `name@version` of the encoder that produced the training embeddings.
    pub encoder: String,
    /// Content hash of the index used for the embedding loss.
    pub index_hash: String,
    pub room_type: Option<RoomType>,
}

/// Network weights plus everything needed to interpret them.
#[derive(Clone, Debug)]
pub struct SceneModel {
    pub(crate) net: Network,
    pub(crate) params: ParamStore<f32>,
    pub(crate) backbone: ResNet18,
    pub bounds: NormalizationBounds,
    pub meta: ModelMeta,
}

impl SceneModel {
    pub fn new(cfg: ModelConfig, bounds: NormalizationBounds, meta: ModelMeta) -> Result<Self> {
        cfg.validate()?;
        let backbone = match &cfg.floor.weights {
            Some(p) => ResNet18::from_safetensors(p)?,
            None => ResNet18::random(cfg.floor.width, cfg.floor.seed)?,
        };
        SceneModel::from_parts(cfg, backbone, bounds, meta)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    /// Frozen backbone features of a floor mask, before the trainable projection.
    pub fn backbone_features(&self, mask: &FloorMask) -> Result<Vec<f32>> {
        let res = self.net.cfg.floor.resolution;
        if mask.resolution != res {
            return Err(Error::Shape(format!(
                "floor mask resolution {} but the model expects {res}",
                mask.resolution
            )));
        }
        self.backbone.features(&mask.to_f32(), res)
    }

    pub fn encode_floor(&self, mask: &FloorMask) -> Result<FloorFeature> {
        let feats = self.backbone_features(mask)?;
        self.floor_from_backbone(&feats)
    }

    pub(crate) fn floor_from_backbone(&self, feats: &[f32]) -> Result<FloorFeature> {
        let mut tape = Tape::new(&self.params);
        let n = self.net.floor_token(&mut tape, feats);
        Ok(FloorFeature(tape.value(n).data.clone()))
    }

    pub fn encode_instance(
        &self,
        embedding: &[f32],
        transform: &NormalizedTransform7,
    ) -> Result<EncodedInstance> {
        check_embedding(embedding)?;
        let mut tape = Tape::new(&self.params);
        let n = self.net.instance_token(&mut tape, embedding, &transform.values);
        Ok(EncodedInstance(tape.value(n).data.clone()))
    }

    /// Runs the transformer over the floor token and an unordered context.
    pub fn decode_step<'m>(
        &'m self,
        floor: &FloorFeature,
        ctx: &[EncodedInstance],
    ) -> Result<StepState<'m>> {
        let d = self.net.cfg.feature_dim;
        if ctx.len() > self.net.cfg.max_instances {
            return Err(Error::InvalidArgument(format!(
                "context has {} instances, limit is {}",
                ctx.len(),
                self.net.cfg.max_instances
            )));
        }
        if floor.0.len() != d || ctx.iter().any(|c| c.0.len() != d) {
            return Err(Error::Shape(format!("tokens must have {d} components")));
        }
        let mut tape = Tape::new(&self.params);
        let f = tape.input(Tensor::row_vector(floor.0.clone()));
        let c: Vec<NodeId> = ctx
            .iter()
            .map(|c| tape.input(Tensor::row_vector(c.0.clone())))
            .collect();
        let nodes = self.net.step(&mut tape, f, &c);
        let sl = &tape.value(nodes.stop_logits).data;
        let stop_logits = [sl[0] as f64, sl[1] as f64];
        let embedding = tape.value(nodes.embedding).data.clone();
        Ok(StepState {
            model: self,
            tape,
            joint: nodes.joint,
            stop_logits,
            embedding,
        })
    }

    /// Full step with the cascade teacher-forced on `chosen` and `target`.
    pub fn predict(
        &self,
        floor: &FloorFeature,
        ctx: &[EncodedInstance],
        chosen: &[f32],
        target: &NormalizedTransform7,
    ) -> Result<StepPrediction> {
        let mut st = self.decode_step(floor, ctx)?;
        let v = target.values;
        let t = [v[0], v[1], v[2]];
        let translation = st.translation(chosen)?;
        let rotation = st.rotation(chosen, t)?;
        let size = st.size(chosen, t, v[6])?;
        Ok(StepPrediction {
            stop_logits: st.stop_logits,
            predicted_embedding: st.embedding,
            translation,
            rotation,
            size,
        })
    }
}

fn check_embedding(e: &[f32]) -> Result<()> {
    if e.len() != EMBED_DIM {
        return Err(Error::Shape(format!(
            "embedding has {} components, expected {EMBED_DIM}",
            e.len()
        )));
    }
    Ok(())
}

/// The transformer pass of one step; attribute heads are evaluated on demand
/// in cascade order.
pub struct StepState<'m> {
    model: &'m SceneModel,
    tape: Tape<'m, f32>,
    joint: NodeId,
    stop_logits: [f64; 2],
    embedding: Vec<f32>,
}

impl StepState<'_> {
    /// `[continue, stop]`.
    pub fn stop_logits(&self) -> [f64; 2] {
        self.stop_logits
    }

    pub fn stop_probability(&self) -> f64 {
        stop_probability(self.stop_logits)
    }

    pub fn predicted_embedding(&self) -> &[f32] {
        &self.embedding
    }

    fn mixtures(&self, raw: NodeId, n: usize) -> Result<Vec<MixtureOfLogistics>> {
        let v: Vec<f64> = self.tape.value(raw).to_f64_vec();
        mixtures_from_raw(&v, n, self.model.net.cfg.mol_components)
    }

    pub fn translation(&mut self, chosen: &[f32]) -> Result<[MixtureOfLogistics; 3]> {
        check_embedding(chosen)?;
        let net = &self.model.net;
        let cond = net.condition(&mut self.tape, self.joint, chosen);
        let raw = net.translation_head(&mut self.tape, cond);
        let m = self.mixtures(raw, 3)?;
        Ok(m.try_into().expect("three mixtures"))
    }

    pub fn rotation(&mut self, chosen: &[f32], translation: [f64; 3]) -> Result<MixtureOfLogistics> {
        check_embedding(chosen)?;
        let net = &self.model.net;
        let cond = net.condition(&mut self.tape, self.joint, chosen);
        let raw = net.rotation_head(&mut self.tape, cond, translation);
        Ok(self.mixtures(raw, 1)?.remove(0))
    }

    pub fn size(
        &mut self,
        chosen: &[f32],
        translation: [f64; 3],
        rotation: f64,
    ) -> Result<[MixtureOfLogistics; 3]> {
        check_embedding(chosen)?;
        let net = &self.model.net;
        let cond = net.condition(&mut self.tape, self.joint, chosen);
        let raw = net.size_head(&mut self.tape, cond, translation, rotation);
        let m = self.mixtures(raw, 3)?;
        Ok(m.try_into().expect("three mixtures"))
    }
}

/// Splits raw head output into `n` mixtures laid out `[logits | means | log_scales]`,
/// flooring log-scales at [`LOG_SCALE_MIN`].
pub(crate) fn mixtures_from_raw(raw: &[f64], n: usize, k: usize) -> Result<Vec<MixtureOfLogistics>> {
    if raw.len() != n * 3 * k {
        return Err(Error::Shape(format!(
            "head output has {} values, expected {}",
            raw.len(),
            n * 3 * k
        )));
    }
    raw.chunks(3 * k)
        .map(|c| {
            MixtureOfLogistics::new(
                c[..k].to_vec(),
                c[k..2 * k].to_vec(),
                c[2 * k..].iter().map(|&s| s.max(LOG_SCALE_MIN)).collect(),
            )
        })
        .collect()
}

/// Gradient with respect to raw head output, given gradients with respect to
/// the mixtures built by [`mixtures_from_raw`].
pub(crate) fn raw_grad(raw: &[f64], grads: &[MolGrad], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    for (c, g) in raw.chunks(3 * k).zip(grads) {
        out.extend_from_slice(&g.logits);
        out.extend_from_slice(&g.means);
        for (j, &s) in c[2 * k..].iter().enumerate() {
            out.push(if s < LOG_SCALE_MIN { 0.0 } else { g.log_scales[j] });
        }
    }
    out
}

/// Dot product of a predicted embedding with every index row.
pub fn embedding_logits(predicted: &[f32], index: &EmbeddingIndex) -> Result<Vec<f64>> {
    index.scores(predicted)
}

#[cfg(test)]
mod tests;
