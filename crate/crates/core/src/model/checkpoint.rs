//! Safetensors checkpoints: weights, frozen backbone, optional optimizer
//! moments, and JSON metadata in the header.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelMeta, Network, SceneModel};
use crate::error::{Error, Result};
use crate::nn::resnet::ResNet18;
use crate::nn::{Adam, AdamConfig, ParamStore, Tensor};
use crate::scene::io::write_atomic;
use crate::scene::NormalizationBounds;

const FORMAT: &str = "scenestyle-checkpoint/1";

/// Optimizer progress saved alongside the weights so training can resume.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub adam: Adam<f32>,
    /// Completed training steps.
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SceneModel,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    cfg: AdamConfig,
    t: u64,
    step: u64,
}

/// Rewrites the header with sorted metadata keys so identical models give
/// identical files. The header length is unchanged.
fn canonical_metadata(mut bytes: Vec<u8>) -> std::result::Result<Vec<u8>, String> {
    let len = u64::from_le_bytes(bytes[..8].try_into().map_err(|_| "truncated header")?) as usize;
    let raw = bytes.get(8..8 + len).ok_or("truncated header")?;
    let mut header: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(raw).map_err(|e| e.to_string())?;
    if let Some(serde_json::Value::Object(meta)) = header.get_mut("__metadata__") {
        meta.sort_keys();
    }
    let text = serde_json::to_vec(&header).map_err(|e| e.to_string())?;
    if text.len() > len {
        return Err("canonical header is longer than the original".into());
    }
    bytes[8..8 + text.len()].copy_from_slice(&text);
    bytes[8 + text.len()..8 + len].fill(b' ');
    Ok(bytes)
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn to_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

impl SceneModel {
    pub(crate) fn from_parts(
        cfg: ModelConfig,
        backbone: ResNet18,
        bounds: NormalizationBounds,
        meta: ModelMeta,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = Network::build(&cfg, backbone.out_dim(), &mut params, &mut rng);
        Ok(SceneModel {
            net,
            params,
            backbone,
            bounds,
            meta,
        })
    }

    /// Writes the model (and optimizer state, if given) atomically.
    pub fn save(&self, path: impl AsRef<Path>, optimizer: Option<&OptimizerState>) -> Result<()> {
        let path = path.as_ref();
        let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (_, name, t) in self.params.iter() {
            tensors.push((format!("param/{name}"), vec![t.rows, t.cols], to_bytes(&t.data)));
        }
        for (name, shape, data) in self.backbone.folded_tensors() {
            tensors.push((format!("backbone/{name}"), shape, to_bytes(&data)));
        }
        let mut header = HashMap::new();
        header.insert("format".to_string(), FORMAT.to_string());
        header.insert("config".into(), json(&self.net.cfg)?);
        header.insert("bounds".into(), json(&self.bounds)?);
        header.insert("meta".into(), json(&self.meta)?);
        if let Some(opt) = optimizer {
            for (id, name, _) in self.params.iter() {
                let i = id.index();
                let (m, v) = (&opt.adam.m[i], &opt.adam.v[i]);
                tensors.push((format!("adam.m/{name}"), vec![m.rows, m.cols], to_bytes(&m.data)));
                tensors.push((format!("adam.v/{name}"), vec![v.rows, v.cols], to_bytes(&v.data)));
            }
            let h = OptimizerHeader {
                cfg: opt.adam.cfg.clone(),
                t: opt.adam.t,
                step: opt.step,
            };
            header.insert("optimizer".into(), json(&h)?);
        }
        let views = tensors
            .iter()
            .map(|(n, s, b)| {
                TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| ckpt_err(path, e))
            })
            .collect::<Result<Vec<_>>>()?;
        let bytes = safetensors::serialize(views, &Some(header)).map_err(|e| ckpt_err(path, e))?;
        write_atomic(path, &canonical_metadata(bytes).map_err(|e| ckpt_err(path, e))?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Checkpoint::load(path)?.model)
    }
}

impl Checkpoint {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e))?;
        let header = meta
            .metadata()
            .clone()
            .ok_or_else(|| ckpt_err(path, "missing header metadata"))?;
        if header.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(ckpt_err(path, "not a scene model checkpoint"));
        }
        let field = |k: &str| {
            header
                .get(k)
                .ok_or_else(|| ckpt_err(path, format!("missing `{k}` metadata")))
        };
        let cfg: ModelConfig =
            serde_json::from_str(field("config")?).map_err(|e| ckpt_err(path, e))?;
        let bounds: NormalizationBounds =
            serde_json::from_str(field("bounds")?).map_err(|e| ckpt_err(path, e))?;
        let model_meta: ModelMeta =
            serde_json::from_str(field("meta")?).map_err(|e| ckpt_err(path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e))?;
        let read = |name: &str| -> Result<Option<(Vec<usize>, Vec<f32>)>> {
            let t = match st.tensor(name) {
                Ok(t) => t,
                Err(_) => return Ok(None),
            };
            if t.dtype() != Dtype::F32 {
                return Err(ckpt_err(path, format!("{name} is not f32")));
            }
            let data = t
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(Some((t.shape().to_vec(), data)))
        };
        let mut backbone_err = None;
        let backbone = ResNet18::from_folded(|n| match read(&format!("backbone/{n}")) {
            Ok(v) => v,
            Err(e) => {
                backbone_err = Some(e);
                None
            }
        });
        if let Some(e) = backbone_err {
            return Err(e);
        }
        let mut model = SceneModel::from_parts(cfg, backbone?, bounds, model_meta)?;
        let load_into = |prefix: &str, dst: &mut Tensor<f32>, name: &str| -> Result<()> {
            let full = format!("{prefix}/{name}");
            let (shape, data) = read(&full)?.ok_or_else(|| ckpt_err(path, format!("missing {full}")))?;
            if shape != [dst.rows, dst.cols] {
                return Err(ckpt_err(
                    path,
                    format!("{full} has shape {shape:?}, expected [{}, {}]", dst.rows, dst.cols),
                ));
            }
            dst.data = data;
            Ok(())
        };
        let names: Vec<(crate::nn::ParamId, String)> = model
            .params
            .iter()
            .map(|(id, n, _)| (id, n.to_string()))
            .collect();
        for (id, name) in &names {
            load_into("param", model.params.get_mut(*id), name)?;
        }
        let optimizer = match header.get("optimizer") {
            None => None,
            Some(h) => {
                let h: OptimizerHeader = serde_json::from_str(h).map_err(|e| ckpt_err(path, e))?;
                let mut adam = Adam::new(h.cfg, &model.params);
                adam.t = h.t;
                for (id, name) in &names {
                    load_into("adam.m", &mut adam.m[id.index()], name)?;
                    load_into("adam.v", &mut adam.v[id.index()], name)?;
                }
                Some(OptimizerState { adam, step: h.step })
            }
        };
        Ok(Checkpoint { model, optimizer })
    }
}
