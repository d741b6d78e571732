//! Deterministic offline encoder.
//!
//! Layout of the 512-d output:
//! - `[0, 32)`: shape block, a one-hot of the class label scaled by [`SHAPE_WEIGHT`].
//!   Unlabelled images fall back to a coarse silhouette descriptor.
//! - `[32, 40)`: color block, a soft assignment of the chroma direction of the
//!   mean foreground color over the palette prototypes, scaled by [`COLOR_WEIGHT`].
//! - `[40, 56)`: 4x4 silhouette coverage, used only for unlabelled images.
//! - `[64, 128)`: hashed bag of words for text tokens that are not colors.
//!
//! Image and text share the shape and color blocks, so "red box" lands close
//! to renders of a red box.

use sha2::{Digest, Sha256};

use super::{EncoderBackend, EMBED_DIM};
use crate::error::{Error, Result};
use crate::render::ViewImage;
use crate::toyworld::PALETTE;

pub const SHAPE_WEIGHT: f64 = 0.6;
pub const COLOR_WEIGHT: f64 = 0.8;
pub const SHAPE_BLOCK: std::ops::Range<usize> = 0..32;
pub const COLOR_BLOCK: std::ops::Range<usize> = 32..40;
pub const SILHOUETTE_BLOCK: std::ops::Range<usize> = 40..56;
pub const WORD_BLOCK: std::ops::Range<usize> = 64..128;
/// Sharpness of the soft palette assignment.
pub const COLOR_SHARPNESS: f64 = 30.0;

/// Shape classes with fixed slots; other labels hash into the remaining slots.
const KNOWN_SHAPES: [&str; 3] = ["box", "cylinder", "wedge"];
const STOP_WORDS: [&str; 8] = ["a", "an", "the", "of", "with", "and", "in", "on"];

#[derive(Clone, Debug, Default)]
pub struct StubEncoder;

impl StubEncoder {
    pub fn new() -> Self {
        StubEncoder
    }

    /// Slot of a shape label inside the shape block.
    pub fn shape_slot(label: &str) -> usize {
        let l = label.trim().to_ascii_lowercase();
        if let Some(i) = KNOWN_SHAPES.iter().position(|s| *s == l) {
            return i;
        }
        let free = SHAPE_BLOCK.len() - KNOWN_SHAPES.len();
        KNOWN_SHAPES.len() + (hash64(&l) % free as u64) as usize
    }

    /// Soft palette code (unit L2 norm) of an RGB color in `[0,1]`.
    /// `None` for achromatic colors.
    pub fn color_code(rgb: [f64; 3]) -> Option<[f64; 8]> {
        let dir = chroma_direction(rgb)?;
        let logits: Vec<f64> = PALETTE
            .iter()
            .map(|(_, p)| {
                let pd = chroma_direction(*p).expect("palette colors are chromatic");
                COLOR_SHARPNESS * (dir[0] * pd[0] + dir[1] * pd[1])
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        w.iter_mut().for_each(|x| *x /= n);
        Some(std::array::from_fn(|i| w[i]))
    }

    pub fn palette_code(name: &str) -> Option<[f64; 8]> {
        let (_, c) = PALETTE.iter().find(|(n, _)| *n == name)?;
        StubEncoder::color_code(*c)
    }
}

fn hash64(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Unit direction of the color in the plane orthogonal to gray. Invariant
/// under positive scaling and under adding gray, which is what flat shading
/// with a white highlight does to an albedo.
fn chroma_direction(rgb: [f64; 3]) -> Option<[f64; 2]> {
    let a = rgb[0] - 0.5 * (rgb[1] + rgb[2]);
    let b = 0.5 * 3f64.sqrt() * (rgb[1] - rgb[2]);
    let n = (a * a + b * b).sqrt();
    (n > 1e-6).then(|| [a / n, b / n])
}

/// 4x4 grid of foreground coverage over the image, L2-normalized.
fn silhouette_descriptor(img: &ViewImage) -> [f64; 16] {
    let mut cells = [0f64; 16];
    let (w, h) = (img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            if img.rgba[4 * (y * w + x) + 3] > 0 {
                cells[(4 * y / h) * 4 + 4 * x / w] += 1.0;
            }
        }
    }
    let n = cells.iter().map(|c| c * c).sum::<f64>().sqrt();
    if n > 0.0 {
        cells.iter_mut().for_each(|c| *c /= n);
    }
    cells
}

impl EncoderBackend for StubEncoder {
    fn name(&self) -> &str {
        "stub"
    }

    fn version(&self) -> &str {
        "1"
    }

    fn embed_image(&self, image: &ViewImage) -> Result<Vec<f32>> {
        if image.rgba.len() != 4 * image.width * image.height {
            return Err(Error::Encoder("image buffer does not match its size".into()));
        }
        let mut v = vec![0f64; EMBED_DIM];
        match image.label.as_deref() {
            Some(label) => v[StubEncoder::shape_slot(label)] = SHAPE_WEIGHT,
            None => {
                let d = silhouette_descriptor(image);
                for (i, x) in d.iter().enumerate() {
                    v[SILHOUETTE_BLOCK.start + i] = SHAPE_WEIGHT * x;
                }
            }
        }
        if let Some(code) = image.mean_foreground_color().and_then(StubEncoder::color_code) {
            for (i, c) in code.iter().enumerate() {
                v[COLOR_BLOCK.start + i] = COLOR_WEIGHT * c;
            }
        }
        Ok(v.into_iter().map(|x| x as f32).collect())
    }

    fn embed_text_raw(&self, text: &str) -> Result<Vec<f32>> {
        let mut v = vec![0f64; EMBED_DIM];
        let mut any = false;
        for word in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_ascii_lowercase)
        {
            if STOP_WORDS.contains(&word.as_str()) {
                continue;
            }
            any = true;
            if let Some(code) = StubEncoder::palette_code(&word) {
                for (i, c) in code.iter().enumerate() {
                    v[COLOR_BLOCK.start + i] += COLOR_WEIGHT * c;
                }
            } else {
                v[StubEncoder::shape_slot(&word)] += SHAPE_WEIGHT;
                v[WORD_BLOCK.start + (hash64(&word) % WORD_BLOCK.len() as u64) as usize] += 0.1;
            }
        }
        if !any {
            return Err(Error::Encoder(format!("prompt `{text}` has no content words")));
        }
        Ok(v.into_iter().map(|x| x as f32).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{embed_mesh, embed_text, MaterialOverride, ViewConfig};
    use crate::mesh::Mesh;

    fn argmax(code: &[f64]) -> usize {
        (0..code.len())
            .max_by(|&a, &b| code[a].total_cmp(&code[b]))
            .unwrap()
    }

    #[test]
    fn palette_codes_peak_on_their_own_prototype() {
        for (i, (name, _)) in PALETTE.iter().enumerate() {
            let code = StubEncoder::palette_code(name).unwrap();
            assert_eq!(argmax(&code), i, "{name}");
            assert!(code[i] > 0.9, "{name}: {code:?}");
        }
    }

    #[test]
    fn shading_preserves_color_code() {
        let red = PALETTE[0].1;
        let shaded = [red[0] * 0.55 + 0.03, red[1] * 0.55 + 0.03, red[2] * 0.55 + 0.03];
        let a = StubEncoder::color_code(red).unwrap();
        let b = StubEncoder::color_code(shaded).unwrap();
        for k in 0..8 {
            assert!((a[k] - b[k]).abs() < 1e-9);
        }
        assert!(StubEncoder::color_code([0.5; 3]).is_none());
    }

    #[test]
    fn known_shapes_have_fixed_slots() {
        assert_eq!(StubEncoder::shape_slot("box"), 0);
        assert_eq!(StubEncoder::shape_slot("Cylinder"), 1);
        let s = StubEncoder::shape_slot("chair");
        assert!((3..32).contains(&s));
    }

    #[test]
    fn red_chair_text_carries_red_code() {
        let enc = StubEncoder;
        let t = embed_text("a red chair", &enc).unwrap();
        let color: Vec<f64> = t.as_slice()[COLOR_BLOCK].iter().map(|&x| x as f64).collect();
        let red = StubEncoder::palette_code("red").unwrap();
        let cn = color.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos: f64 = color.iter().zip(red).map(|(a, b)| a * b).sum::<f64>() / cn;
        assert!(cos > 1.0 - 1e-6);
        assert!(t.as_slice()[StubEncoder::shape_slot("chair")] > 0.0);
        assert_eq!(t, embed_text("a red chair", &enc).unwrap());
    }

    #[test]
    fn renders_match_their_text() {
        let enc = StubEncoder;
        let cfg = ViewConfig::object_preset(64);
        let mat = MaterialOverride::default();
        let red_box = Mesh::unit_box(PALETTE[0].1);
        let blue_box = Mesh::unit_box(PALETTE[2].1);
        let hr = embed_mesh(&red_box, Some("box"), &enc, &cfg, &mat).unwrap();
        let hb = embed_mesh(&blue_box, Some("box"), &enc, &cfg, &mat).unwrap();
        let t = embed_text("red box", &enc).unwrap();
        assert!(hr.dot(t.as_slice()) > hb.dot(t.as_slice()) + 0.3);
        assert!((hr.norm() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn unlabelled_images_use_silhouettes() {
        let enc = StubEncoder;
        let cfg = ViewConfig::object_preset(64);
        let mat = MaterialOverride::default();
        let a = embed_mesh(&Mesh::unit_box(PALETTE[0].1), None, &enc, &cfg, &mat).unwrap();
        assert!(a.as_slice()[SHAPE_BLOCK].iter().all(|&x| x == 0.0));
        assert!(a.as_slice()[SILHOUETTE_BLOCK].iter().any(|&x| x > 0.0));
    }

    #[test]
    fn stop_words_only_is_an_error() {
        assert!(StubEncoder.embed_text_raw("a the").is_err());
    }
}
