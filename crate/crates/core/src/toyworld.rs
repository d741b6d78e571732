//! Procedural style-consistent toy scenes over a primitive asset library.
//!
//! Every scene is themed by one palette color: all of its instances come from
//! that color family, so "style" has a ground truth that can be checked.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::scene::{FloorPlan, FurnitureInstance, RoomType, Scene, Transform7};

/// Named palette shared by the toy library and the stub text encoder.
pub const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.80, 0.12, 0.12]),
    ("green", [0.15, 0.65, 0.20]),
    ("blue", [0.15, 0.25, 0.80]),
    ("yellow", [0.85, 0.80, 0.15]),
    ("purple", [0.55, 0.20, 0.70]),
    ("orange", [0.90, 0.50, 0.10]),
    ("cyan", [0.15, 0.70, 0.75]),
    ("pink", [0.90, 0.45, 0.65]),
];

/// Per-channel color jitter bound applied to library colors.
pub const COLOR_JITTER: f64 = 0.04;
/// Default distance between an asset color and its scene theme.
pub const THEME_TOLERANCE: f64 = 0.15;
/// Allowed AABB interpenetration between placed instances, meters.
pub const COLLISION_TOLERANCE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Box,
    Cylinder,
    Wedge,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Box, Shape::Cylinder, Shape::Wedge];

    pub fn as_str(&self) -> &'static str {
        match self {
            Shape::Box => "box",
            Shape::Cylinder => "cylinder",
            Shape::Wedge => "wedge",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleClass {
    Small,
    Medium,
    Large,
}

impl ScaleClass {
    const ALL: [ScaleClass; 3] = [ScaleClass::Small, ScaleClass::Medium, ScaleClass::Large];

    /// Nominal half extents (x, y, z) in meters.
    pub fn half_extents(&self) -> [f64; 3] {
        match self {
            ScaleClass::Small => [0.25, 0.3, 0.25],
            ScaleClass::Medium => [0.45, 0.4, 0.45],
            ScaleClass::Large => [0.65, 0.45, 0.7],
        }
    }
}

/// A primitive asset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyAssetSpec {
    pub id: String,
    pub shape: Shape,
    pub color: [f64; 3],
    /// Palette entry the color was jittered from.
    pub color_family: String,
    pub scale_class: ScaleClass,
}

impl ToyAssetSpec {
    pub fn new(shape: Shape, color: [f64; 3], color_family: &str, scale_class: ScaleClass) -> Self {
        let id = Self::hash_id(shape, color, scale_class);
        ToyAssetSpec {
            id,
            shape,
            color,
            color_family: color_family.to_string(),
            scale_class,
        }
    }

    fn hash_id(shape: Shape, color: [f64; 3], scale_class: ScaleClass) -> String {
        let key = format!(
            "{}|{:.6}|{:.6}|{:.6}|{:?}",
            shape, color[0], color[1], color[2], scale_class
        );
        let digest = hex::encode(Sha256::digest(key.as_bytes()));
        format!("toy-{}-{}", shape, &digest[..10])
    }

    pub fn mesh(&self) -> Mesh {
        match self.shape {
            Shape::Box => Mesh::unit_box(self.color),
            Shape::Cylinder => Mesh::unit_cylinder(32, self.color),
            Shape::Wedge => Mesh::unit_wedge(self.color),
        }
    }
}

pub fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn palette_color(name: &str) -> Option<[f64; 3]> {
    PALETTE.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

/// Cross product of the first `n_shapes` shapes and `n_colors` palette colors,
/// with seeded per-channel color jitter.
pub fn generate_library(n_shapes: usize, n_colors: usize, seed: u64) -> Result<Vec<ToyAssetSpec>> {
    if n_shapes == 0 || n_shapes > Shape::ALL.len() {
        return Err(Error::InvalidArgument(format!(
            "n_shapes must be in 1..={}",
            Shape::ALL.len()
        )));
    }
    if n_colors == 0 || n_colors > PALETTE.len() {
        return Err(Error::InvalidArgument(format!(
            "n_colors must be in 1..={}",
            PALETTE.len()
        )));
    }
    if n_shapes * n_colors < 4 {
        return Err(Error::InvalidArgument(
            "library needs at least 4 assets (n_shapes * n_colors >= 4)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_shapes * n_colors);
    for (si, &shape) in Shape::ALL[..n_shapes].iter().enumerate() {
        for (ci, (name, base)) in PALETTE[..n_colors].iter().enumerate() {
            let color: [f64; 3] = std::array::from_fn(|k| {
                (base[k] + rng.random_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0.0, 1.0)
            });
            let scale = ScaleClass::ALL[(si + ci) % 3];
            out.push(ToyAssetSpec::new(shape, color, name, scale));
        }
    }
    Ok(out)
}

/// Placement of one satellite relative to the anchor, in the anchor frame.
///
/// `side` components in `{-1, 0, 1}` select the neighbouring edge; the center
/// distance is the widest half extent already occupying that edge plus the
/// satellite's own half extent plus `gap`, so unjittered layouts
/// never overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SatelliteSpec {
    pub shape: Shape,
    pub side: [f64; 2],
    pub gap: f64,
    pub jitter: f64,
    pub yaw_offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutGrammar {
    pub name: String,
    pub anchor: Shape,
    pub satellites: Vec<SatelliteSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleRule {
    pub theme_color: [f64; 3],
    pub theme_name: String,
    pub max_color_distance: f64,
    pub grammar: LayoutGrammar,
}

impl StyleRule {
    pub fn new(theme_name: &str, grammar: LayoutGrammar) -> Result<Self> {
        let theme_color = palette_color(theme_name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown palette color `{theme_name}`")))?;
        Ok(StyleRule {
            theme_color,
            theme_name: theme_name.to_string(),
            max_color_distance: THEME_TOLERANCE,
            grammar,
        })
    }

    pub fn shapes(&self) -> impl Iterator<Item = Shape> + '_ {
        std::iter::once(self.grammar.anchor).chain(self.grammar.satellites.iter().map(|s| s.shape))
    }
}

fn sat(shape: Shape, side: [f64; 2]) -> SatelliteSpec {
    SatelliteSpec {
        shape,
        side,
        gap: 0.1,
        jitter: 0.05,
        yaw_offset: 0.0,
    }
}

/// Built-in layout templates usable with a library of `n_shapes` shapes.
pub fn default_grammars(n_shapes: usize) -> Vec<LayoutGrammar> {
    let all = vec![
        LayoutGrammar {
            name: "flanked".into(),
            anchor: Shape::Box,
            satellites: vec![sat(Shape::Cylinder, [-1.0, 0.0]), sat(Shape::Cylinder, [1.0, 0.0])],
        },
        LayoutGrammar {
            name: "facing".into(),
            anchor: Shape::Box,
            satellites: vec![sat(Shape::Wedge, [0.0, 1.0])],
        },
        LayoutGrammar {
            name: "lounge".into(),
            anchor: Shape::Cylinder,
            satellites: vec![
                sat(Shape::Wedge, [-1.0, 0.0]),
                sat(Shape::Wedge, [1.0, 0.0]),
                sat(Shape::Box, [0.0, -1.0]),
            ],
        },
        LayoutGrammar {
            name: "corner".into(),
            anchor: Shape::Wedge,
            satellites: vec![sat(Shape::Box, [1.0, 0.0]), sat(Shape::Cylinder, [0.0, 1.0])],
        },
    ];
    let allowed = &Shape::ALL[..n_shapes.min(Shape::ALL.len())];
    all.into_iter()
        .filter(|g| {
            allowed.contains(&g.anchor) && g.satellites.iter().all(|s| allowed.contains(&s.shape))
        })
        .collect()
}

/// Floor and placement parameters for generated scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySceneConfig {
    pub mask_resolution: usize,
    pub floor_extent: f64,
    pub min_side: f64,
    pub max_side: f64,
    pub max_attempts: usize,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        ToySceneConfig {
            mask_resolution: crate::scene::DEFAULT_MASK_RESOLUTION,
            floor_extent: crate::scene::DEFAULT_FLOOR_EXTENT,
            min_side: 3.6,
            max_side: 5.0,
            max_attempts: 100,
        }
    }
}

fn aabb_overlap(a: &Transform7, b: &Transform7) -> bool {
    let (alo, ahi) = a.world_aabb();
    let (blo, bhi) = b.world_aabb();
    (0..3).all(|k| ahi[k].min(bhi[k]) - alo[k].max(blo[k]) > COLLISION_TOLERANCE)
}

fn inside_floor(t: &Transform7, floor: &FloorPlan) -> bool {
    t.footprint()
        .iter()
        .all(|&p| crate::scene::geometry::contains(&floor.polygon, p))
}

/// Generates one themed scene. Assets are drawn from `library`; placement is
/// resampled until collision-free and inside the floor.
pub fn generate_scene(
    library: &[ToyAssetSpec],
    rule: &StyleRule,
    seed: u64,
    cfg: &ToySceneConfig,
) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ce0_e000_0000);
    let mut slots = Vec::new();
    for shape in rule.shapes() {
        let candidates: Vec<&ToyAssetSpec> = library
            .iter()
            .filter(|a| {
                a.shape == shape && color_distance(a.color, rule.theme_color) <= rule.max_color_distance
            })
            .collect();
        if candidates.is_empty() {
            return Err(Error::Generation(format!(
                "no {shape} asset within {} of theme `{}`",
                rule.max_color_distance, rule.theme_name
            )));
        }
        slots.push(candidates);
    }

    for _ in 0..cfg.max_attempts {
        let width = rng.random_range(cfg.min_side..=cfg.max_side);
        let depth = rng.random_range(cfg.min_side..=cfg.max_side);
        let floor = FloorPlan::rectangle(width, depth, cfg.mask_resolution, cfg.floor_extent)?;
        let mut placed: Vec<(String, Transform7)> = Vec::new();
        let anchor_asset = *slots[0].choose(&mut rng).expect("non-empty");
        let anchor_size = jitter_size(anchor_asset.scale_class, &mut rng);
        let quarter = rng.random_range(0..4) as f64 * std::f64::consts::FRAC_PI_2;
        let margin_x = 0.5 * width - anchor_size[0].max(anchor_size[2]);
        let margin_z = 0.5 * depth - anchor_size[0].max(anchor_size[2]);
        if margin_x <= 0.0 || margin_z <= 0.0 {
            continue;
        }
        let ax = rng.random_range(-margin_x..margin_x);
        let az = rng.random_range(-margin_z..margin_z);
        let anchor = Transform7::new([ax, anchor_size[1], az], anchor_size, quarter);
        placed.push((anchor_asset.id.clone(), anchor));

        let (s, c) = anchor.yaw.sin_cos();
        let sats: Vec<(&ToyAssetSpec, [f64; 3])> = slots[1..]
            .iter()
            .map(|cands| {
                let asset = *cands.choose(&mut rng).expect("non-empty");
                (asset, jitter_size(asset.scale_class, &mut rng))
            })
            .collect();
        // Satellites on the x sides clear everything placed along z, and vice versa.
        let mut reach = [anchor_size[0], anchor_size[2]];
        for (spec, (_, size)) in rule.grammar.satellites.iter().zip(&sats) {
            if spec.side[1] != 0.0 {
                reach[0] = reach[0].max(size[0]);
            }
            if spec.side[0] != 0.0 {
                reach[1] = reach[1].max(size[2]);
            }
        }
        for (spec, &(asset, size)) in rule.grammar.satellites.iter().zip(&sats) {
            let lx = spec.side[0] * (reach[0] + size[0] + spec.gap)
                + rng.random_range(-spec.jitter..=spec.jitter);
            let lz = spec.side[1] * (reach[1] + size[2] + spec.gap)
                + rng.random_range(-spec.jitter..=spec.jitter);
            let x = ax + c * lx + s * lz;
            let z = az - s * lx + c * lz;
            let t = Transform7::new([x, size[1], z], size, anchor.yaw + spec.yaw_offset);
            placed.push((asset.id.clone(), t));
        }

        let ok = placed.iter().all(|(_, t)| inside_floor(t, &floor))
            && (0..placed.len())
                .all(|i| (i + 1..placed.len()).all(|j| !aabb_overlap(&placed[i].1, &placed[j].1)));
        if !ok {
            continue;
        }
        let mut scene = Scene::new(format!("toy-{seed:08}"), RoomType::Toy, floor);
        for (k, (asset_id, t)) in placed.into_iter().enumerate() {
            scene
                .instances
                .push(FurnitureInstance::new(format!("i{k}"), asset_id, t));
        }
        scene.extra.insert(
            "style".into(),
            serde_json::json!({
                "theme": rule.theme_name,
                "theme_color": rule.theme_color,
                "grammar": rule.grammar.name,
            }),
        );
        return Ok(scene);
    }
    Err(Error::Generation(format!(
        "layout `{}` unsatisfiable after {} attempts",
        rule.grammar.name, cfg.max_attempts
    )))
}

fn jitter_size(class: ScaleClass, rng: &mut ChaCha8Rng) -> [f64; 3] {
    class
        .half_extents()
        .map(|h| h * rng.random_range(0.9..=1.1))
}

/// Theme recorded by [`generate_scene`], if present.
pub fn scene_theme(scene: &Scene) -> Option<String> {
    scene.extra.get("style")?.get("theme")?.as_str().map(str::to_string)
}

/// Generates scenes for seeds `first_seed..first_seed + n`, drawing theme and
/// grammar from each scene's seed. Ids are derived from the seed, so disjoint
/// seed ranges give disjoint scene sets.
pub fn generate_dataset(
    library: &[ToyAssetSpec],
    n: usize,
    first_seed: u64,
    cfg: &ToySceneConfig,
) -> Result<Vec<Scene>> {
    let mut families: Vec<&str> = library.iter().map(|a| a.color_family.as_str()).collect();
    families.sort();
    families.dedup();
    let n_shapes = {
        let mut s: Vec<Shape> = library.iter().map(|a| a.shape).collect();
        s.sort();
        s.dedup();
        s.len()
    };
    let grammars = default_grammars(n_shapes);
    if grammars.is_empty() || families.is_empty() {
        return Err(Error::Generation("library supports no layout grammar".into()));
    }
    (0..n as u64)
        .map(|k| {
            let seed = first_seed + k;
            let mut pick = ChaCha8Rng::seed_from_u64(seed);
            let theme = families[pick.random_range(0..families.len())];
            let grammar = grammars[pick.random_range(0..grammars.len())].clone();
            let rule = StyleRule::new(theme, grammar)?;
            generate_scene(library, &rule, seed, cfg)
        })
        .collect()
}
