//! Dot-product retrieval over the embeddings of an asset library.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{dot, embed_mesh, EncoderBackend, SemanticEmbedding, EMBED_DIM};
use crate::assets::AssetLibrary;
use crate::error::{Error, Result};
use crate::render::{MaterialOverride, ViewConfig};
use crate::scene::io::{from_json_str, to_json_string, write_atomic};
use crate::scene::RoomType;

pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Immutable `rows x 512` embedding matrix with one asset id per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    room_types: Vec<Vec<RoomType>>,
    matrix: Vec<f32>,
    encoder: String,
    view_config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct IndexManifest {
    format: u32,
    dim: usize,
    ids: Vec<String>,
    room_types: Vec<Vec<RoomType>>,
    encoder: String,
    view_config_hash: String,
    matrix_file: String,
    matrix_sha256: String,
}

/// One ranked search hit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub asset_id: String,
    pub score: f64,
}

impl EmbeddingIndex {
    pub fn new(
        ids: Vec<String>,
        room_types: Vec<Vec<RoomType>>,
        rows: Vec<SemanticEmbedding>,
        encoder: impl Into<String>,
        view_config_hash: impl Into<String>,
    ) -> Result<Self> {
        if ids.len() != rows.len() || ids.len() != room_types.len() {
            return Err(Error::Shape(format!(
                "{} ids, {} room-type lists and {} embeddings",
                ids.len(),
                room_types.len(),
                rows.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Duplicate(id.clone()));
            }
        }
        let matrix = rows.into_iter().flat_map(SemanticEmbedding::into_vec).collect();
        Ok(EmbeddingIndex {
            ids,
            room_types,
            matrix,
            encoder: encoder.into(),
            view_config_hash: view_config_hash.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn room_types(&self, row: usize) -> &[RoomType] {
        &self.room_types[row]
    }

    pub fn encoder(&self) -> &str {
        &self.encoder
    }

    pub fn view_config_hash(&self) -> &str {
        &self.view_config_hash
    }

    /// Row-major matrix.
    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * EMBED_DIM..(i + 1) * EMBED_DIM]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn embedding(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn scores(&self, query: &[f32]) -> Result<Vec<f64>> {
        if query.len() != EMBED_DIM {
            return Err(Error::Shape(format!(
                "query has {} components, expected {EMBED_DIM}",
                query.len()
            )));
        }
        Ok((0..self.len()).map(|i| dot(self.row(i), query)).collect())
    }

    /// Sub-index of the rows tagged with `room`, in original order.
    pub fn filter_room_type(&self, room: RoomType) -> EmbeddingIndex {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.room_types[i].contains(&room))
            .collect();
        EmbeddingIndex {
            ids: keep.iter().map(|&i| self.ids[i].clone()).collect(),
            room_types: keep.iter().map(|&i| self.room_types[i].clone()).collect(),
            matrix: keep.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            encoder: self.encoder.clone(),
            view_config_hash: self.view_config_hash.clone(),
        }
    }

    /// All rows ranked by descending score, ties broken by asset id.
    pub fn search(&self, query: &[f32], limit: usize) -> Result<Vec<SearchHit>> {
        let scores = self.scores(query)?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.ids[a].cmp(&self.ids[b]))
        });
        Ok(order
            .into_iter()
            .take(limit)
            .map(|i| SearchHit {
                asset_id: self.ids[i].clone(),
                score: scores[i],
            })
            .collect())
    }

    /// Hex SHA-256 over ids and matrix bytes; identifies the retrieval vocabulary.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update((id.len() as u64).to_le_bytes());
            h.update(id.as_bytes());
        }
        h.update(matrix_bytes(&self.matrix));
        hex::encode(h.finalize())
    }

    /// Writes `<path>` (JSON manifest) and a sibling `.bin` little-endian f32 matrix.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bin_path = matrix_path(path);
        let bytes = matrix_bytes(&self.matrix);
        let manifest = IndexManifest {
            format: 1,
            dim: EMBED_DIM,
            ids: self.ids.clone(),
            room_types: self.room_types.clone(),
            encoder: self.encoder.clone(),
            view_config_hash: self.view_config_hash.clone(),
            matrix_file: bin_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            matrix_sha256: hex::encode(Sha256::digest(&bytes)),
        };
        write_atomic(&bin_path, &bytes)?;
        write_atomic(path, to_json_string(&manifest)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: IndexManifest = from_json_str(&text)?;
        if m.dim != EMBED_DIM {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: format!("index dimension {} is not {EMBED_DIM}", m.dim),
            });
        }
        let bin_path = path.with_file_name(&m.matrix_file);
        let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != m.matrix_sha256 {
            return Err(Error::Parse {
                path: bin_path.display().to_string(),
                message: "matrix checksum mismatch".into(),
            });
        }
        if bytes.len() != 4 * EMBED_DIM * m.ids.len() {
            return Err(Error::Parse {
                path: bin_path.display().to_string(),
                message: format!("expected {} rows of {EMBED_DIM} floats", m.ids.len()),
            });
        }
        let rows = bytes
            .chunks_exact(4 * EMBED_DIM)
            .map(|row| {
                SemanticEmbedding::new(
                    row.chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        EmbeddingIndex::new(m.ids, m.room_types, rows, m.encoder, m.view_config_hash)
    }
}

fn matrix_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn matrix_bytes(m: &[f32]) -> Vec<u8> {
    m.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Embeds every asset of the library in order. Runs in parallel when the
/// encoder allows concurrent calls.
pub fn build_index(
    library: &AssetLibrary,
    enc: &dyn EncoderBackend,
    cfg: &ViewConfig,
    mat: &MaterialOverride,
) -> Result<EmbeddingIndex> {
    cfg.validate()?;
    let assets: Vec<_> = library.iter().collect();
    let embed = |a: &&crate::assets::FurnitureAsset| {
        let label = (!a.label.is_empty()).then_some(a.label.as_str());
        embed_mesh(&a.mesh, label, enc, cfg, mat)
            .map_err(|e| Error::Encoder(format!("asset {}: {e}", a.id)))
    };
    let rows: Vec<SemanticEmbedding> = if enc.supports_concurrency() {
        assets.par_iter().map(embed).collect::<Result<_>>()?
    } else {
        assets.iter().map(embed).collect::<Result<_>>()?
    };
    EmbeddingIndex::new(
        assets.iter().map(|a| a.id.clone()).collect(),
        assets.iter().map(|a| a.room_types.clone()).collect(),
        rows,
        enc.id(),
        cfg.hash(),
    )
}

/// The sampling distribution used by [`retrieve_topk`]: softmax of
/// `score / temperature` over the `k` best rows, as `(row, probability)`.
pub fn topk_distribution(
    index: &EmbeddingIndex,
    query: &[f32],
    k: usize,
    temperature: f64,
) -> Result<Vec<(usize, f64)>> {
    if index.is_empty() {
        return Err(Error::InvalidArgument("retrieval from an empty index".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("top-k needs k >= 1".into()));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let scores = index.scores(query)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable: equal scores keep row order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    let top = scores[order[0]];
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((scores[i] - top) / temperature).exp())
        .collect();
    let z: f64 = weights.iter().sum();
    Ok(order.into_iter().zip(weights.into_iter().map(|w| w / z)).collect())
}

/// Samples one asset id from the temperature-scaled softmax restricted to the
/// `k` highest-scoring rows.
pub fn retrieve_topk<R: Rng + ?Sized>(
    index: &EmbeddingIndex,
    query: &[f32],
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<String> {
    let dist = topk_distribution(index, query, k, temperature)?;
    let row = if dist.len() == 1 {
        dist[0].0
    } else {
        let w = WeightedIndex::new(dist.iter().map(|(_, p)| *p))
            .map_err(|e| Error::InvalidArgument(format!("retrieval weights: {e}")))?;
        dist[w.sample(rng)].0
    };
    Ok(index.ids[row].clone())
}
