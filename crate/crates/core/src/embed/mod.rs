//! Semantic object embeddings from eight canonical renders, and the
//! dot-product retrieval index built from them.

pub mod index;
pub mod stub;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::render::{render_object_views, ViewImage, NUM_VIEWS};

pub use crate::render::{MaterialOverride, ViewConfig};
pub use index::{build_index, retrieve_topk, EmbeddingIndex};
pub use stub::StubEncoder;

/// Width of every semantic embedding.
pub const EMBED_DIM: usize = 512;

/// A 512-d object or text embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SemanticEmbedding(Vec<f32>);

impl SemanticEmbedding {
    pub fn new(v: Vec<f32>) -> Result<Self> {
        if v.len() != EMBED_DIM {
            return Err(Error::Shape(format!(
                "embedding has {} components, expected {EMBED_DIM}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Encoder("embedding has non-finite components".into()));
        }
        Ok(SemanticEmbedding(v))
    }

    pub fn zeros() -> Self {
        SemanticEmbedding(vec![0.0; EMBED_DIM])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn dot(&self, other: &[f32]) -> f64 {
        dot(&self.0, other)
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

/// An image/text encoder mapping into the shared 512-d space.
///
/// Implementations must be deterministic for identical inputs. Those that
/// cannot be called from several threads at once return `false` from
/// [`EncoderBackend::supports_concurrency`], and callers then serialize.
pub trait EncoderBackend: Send + Sync {
    fn name(&self) -> &str;
    fn version(&self) -> &str;
    fn embed_image(&self, image: &ViewImage) -> Result<Vec<f32>>;
    fn embed_text_raw(&self, text: &str) -> Result<Vec<f32>>;
    fn supports_concurrency(&self) -> bool {
        true
    }

    fn id(&self) -> String {
        format!("{}@{}", self.name(), self.version())
    }
}

/// Names a weights file for an external image-text encoder.
pub const ENCODER_WEIGHTS_ENV: &str = "SCENESTYLE_ENCODER_WEIGHTS";

/// The encoder selected by the environment. Only the built-in stub is
/// available; naming external weights is an error rather than a silent fallback.
pub fn encoder_from_env() -> Result<Arc<dyn EncoderBackend>> {
    match std::env::var_os(ENCODER_WEIGHTS_ENV) {
        Some(path) if !path.is_empty() => Err(Error::Encoder(format!(
            "{ENCODER_WEIGHTS_ENV} points at {}, but this build has no external encoder backend",
            Path::new(&path).display()
        ))),
        _ => Ok(Arc::new(StubEncoder::new())),
    }
}

/// Fails unless `index` was built by `enc`.
pub fn check_encoder(index: &EmbeddingIndex, enc: &dyn EncoderBackend) -> Result<()> {
    if index.encoder() != enc.id() {
        return Err(Error::Encoder(format!(
            "index was built with `{}`, the active encoder is `{}`",
            index.encoder(),
            enc.id()
        )));
    }
    Ok(())
}

/// Mean of the L2-normalized per-view embeddings. The mean is not renormalized.
pub fn pool_views(images: &[ViewImage], enc: &dyn EncoderBackend) -> Result<SemanticEmbedding> {
    if images.len() != NUM_VIEWS {
        return Err(Error::InvalidArgument(format!(
            "pooling needs exactly {NUM_VIEWS} views, got {}",
            images.len()
        )));
    }
    let mut views: Vec<Vec<f64>> = Vec::with_capacity(images.len());
    for img in images {
        let v = enc.embed_image(img)?;
        if v.len() != EMBED_DIM {
            return Err(Error::Encoder(format!(
                "encoder returned {} components, expected {EMBED_DIM}",
                v.len()
            )));
        }
        let n = l2_norm(&v);
        if n > 0.0 {
            views.push(v.iter().map(|&x| x as f64 / n).collect());
        } else {
            log::warn!("view embedding has zero norm; contributing nothing to the pool");
        }
    }
    // a canonical summation order makes the pool bit-identical under view permutations
    views.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut acc = vec![0f64; EMBED_DIM];
    for v in &views {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    SemanticEmbedding::new(acc.into_iter().map(|a| (a / NUM_VIEWS as f64) as f32).collect())
}

/// L2-normalized text embedding.
pub fn embed_text(prompt: &str, enc: &dyn EncoderBackend) -> Result<SemanticEmbedding> {
    if prompt.trim().is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let v = enc.embed_text_raw(prompt)?;
    let n = l2_norm(&v);
    if !(n > 0.0) {
        return Err(Error::Encoder(format!("text embedding of `{prompt}` has zero norm")));
    }
    SemanticEmbedding::new(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

/// Renders a mesh from the canonical views and pools the encoded views.
pub fn embed_mesh(
    mesh: &Mesh,
    label: Option<&str>,
    enc: &dyn EncoderBackend,
    cfg: &ViewConfig,
    mat: &MaterialOverride,
) -> Result<SemanticEmbedding> {
    let mut views = render_object_views(mesh, cfg, mat)?;
    for v in &mut views {
        v.label = label.map(str::to_string);
    }
    pool_views(&views, enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Returns a fixed vector per image, looked up by the image's first pixel byte.
    struct TableEncoder(Vec<Vec<f32>>);

    impl EncoderBackend for TableEncoder {
        fn name(&self) -> &str {
            "table"
        }
        fn version(&self) -> &str {
            "0"
        }
        fn embed_image(&self, image: &ViewImage) -> Result<Vec<f32>> {
            Ok(self.0[image.rgba[0] as usize].clone())
        }
        fn embed_text_raw(&self, _text: &str) -> Result<Vec<f32>> {
            Ok(self.0[0].clone())
        }
    }

    fn tagged(k: u8) -> ViewImage {
        ViewImage {
            width: 1,
            height: 1,
            rgba: vec![k, 0, 0, 255],
            label: None,
        }
    }

    fn random_vec(rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..EMBED_DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn identical_views_pool_to_unit_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = TableEncoder(vec![random_vec(&mut rng)]);
        let views: Vec<_> = (0..8).map(|_| tagged(0)).collect();
        let h = pool_views(&views, &enc).unwrap();
        assert!((h.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn opposite_views_cancel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_vec(&mut rng);
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        let enc = TableEncoder(vec![v, neg]);
        let views: Vec<_> = (0..8).map(|k| tagged((k % 2) as u8)).collect();
        let h = pool_views(&views, &enc).unwrap();
        assert!(h.norm() < 1e-6);
    }

    #[test]
    fn pooled_norm_at_most_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let enc = TableEncoder((0..8).map(|_| random_vec(&mut rng)).collect());
            let views: Vec<_> = (0..8).map(|k| tagged(k as u8)).collect();
            assert!(pool_views(&views, &enc).unwrap().norm() <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn wrong_view_count_rejected() {
        let enc = TableEncoder(vec![vec![1.0; EMBED_DIM]]);
        let views: Vec<_> = (0..7).map(|_| tagged(0)).collect();
        assert!(pool_views(&views, &enc).is_err());
    }

    #[test]
    fn empty_prompt_rejected() {
        let enc = TableEncoder(vec![vec![1.0; EMBED_DIM]]);
        assert!(embed_text("  ", &enc).is_err());
        assert!((embed_text("x", &enc).unwrap().norm() - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn pooling_is_permutation_invariant(seed in 0u64..1000, perm_seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let enc = TableEncoder((0..8).map(|_| random_vec(&mut rng)).collect());
            let views: Vec<_> = (0..8).map(|k| tagged(k as u8)).collect();
            let mut shuffled = views.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let a = pool_views(&views, &enc).unwrap();
            let b = pool_views(&shuffled, &enc).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-7);
            }
        }
    }
}
