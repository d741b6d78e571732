//! Scene and asset data model.
//!
//! Coordinates are y-up meters. The floor lives in the (x, z) plane and yaw is
//! a right-handed rotation about +y, wrapped to `[-pi, pi)`. Scenes are
//! expected to be centred so the floor centroid sits at the origin; floor
//! masks and rotation augmentation are both defined about the origin.

pub mod augment;
pub mod geometry;
pub mod io;
pub mod normalize;
pub mod raster;

#[cfg(feature = "front3d")]
pub mod front3d;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub use augment::{augment_scene, Augmentation};
pub use geometry::Point2;
pub use normalize::{
    denormalize_transform, normalize_transform, NormalizationBounds, NormalizeMode,
    NormalizedTransform7,
};
pub use raster::{rasterize_floor, FloorMask};

/// Default floor mask side in cells.
pub const DEFAULT_MASK_RESOLUTION: usize = 64;
/// Default side length in meters covered by the floor mask.
pub const DEFAULT_FLOOR_EXTENT: f64 = 6.4;

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let w = a - two_pi * ((a + PI) / two_pi).floor();
    // floating error can land exactly on +pi
    if w >= PI {
        w - two_pi
    } else {
        w
    }
}

/// Smallest absolute difference between two angles.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoomType {
    Bedroom,
    Dining,
    Library,
    Living,
    Toy,
}

impl RoomType {
    pub const ALL: [RoomType; 5] = [
        RoomType::Bedroom,
        RoomType::Dining,
        RoomType::Library,
        RoomType::Living,
        RoomType::Toy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RoomType::Bedroom => "bedroom",
            RoomType::Dining => "dining",
            RoomType::Library => "library",
            RoomType::Living => "living",
            RoomType::Toy => "toy",
        }
    }
}

impl fmt::Display for RoomType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoomType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RoomType::ALL
            .iter()
            .copied()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown room type `{s}`")))
    }
}

/// Floor layout: outline polygon plus its rasterized occupancy mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloorPlan {
    pub polygon: Vec<Point2>,
    pub extent: f64,
    pub mask: FloorMask,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl FloorPlan {
    /// Builds a floor from an outline, orienting it counter-clockwise and
    /// rasterizing the mask.
    pub fn from_polygon(polygon: Vec<Point2>, resolution: usize, extent: f64) -> Result<Self> {
        let mut polygon = polygon;
        if geometry::signed_area(&polygon) < 0.0 {
            polygon.reverse();
        }
        let mask = rasterize_floor(&polygon, resolution, extent)?;
        Ok(FloorPlan {
            polygon,
            extent,
            mask,
            extra: Map::new(),
        })
    }

    /// Axis-aligned rectangle centred on the origin.
    pub fn rectangle(width_x: f64, depth_z: f64, resolution: usize, extent: f64) -> Result<Self> {
        let hx = 0.5 * width_x;
        let hz = 0.5 * depth_z;
        Self::from_polygon(
            vec![[-hx, -hz], [hx, -hz], [hx, hz], [-hx, hz]],
            resolution,
            extent,
        )
    }

    pub fn resolution(&self) -> usize {
        self.mask.resolution
    }

    pub fn area(&self) -> f64 {
        geometry::signed_area(&self.polygon).abs()
    }

    /// Checks the structural invariants. Returns the offending field path on failure.
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        if self.polygon.len() < 3 {
            return Err(("polygon".into(), "needs at least 3 vertices".into()));
        }
        if !geometry::is_simple(&self.polygon) {
            return Err(("polygon".into(), "polygon self-intersects".into()));
        }
        if !(self.extent > 0.0) {
            return Err(("extent".into(), "extent must be positive".into()));
        }
        let half = 0.5 * self.extent + 1e-9;
        if let Some(i) = self
            .polygon
            .iter()
            .position(|p| p[0].abs() > half || p[1].abs() > half)
        {
            log::warn!("floor vertex {i} lies outside the mask extent; the mask clips it");
        }
        let r = self.mask.resolution;
        if self.mask.cells.len() != r * r {
            return Err((
                "mask".into(),
                format!("expected {} cells, found {}", r * r, self.mask.cells.len()),
            ));
        }
        if self.mask.cells.iter().any(|&c| c > 1) {
            return Err(("mask".into(), "mask must be binary".into()));
        }
        Ok(())
    }
}

/// Placement of an instance: translation (bbox center), half-extent size, yaw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform7 {
    pub translation: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Transform7 {
    pub fn new(translation: [f64; 3], size: [f64; 3], yaw: f64) -> Self {
        Transform7 {
            translation,
            size,
            yaw: wrap_angle(yaw),
        }
    }

    /// Flat `[tx, ty, tz, sx, sy, sz, yaw]`.
    pub fn to_array(&self) -> [f64; 7] {
        let [tx, ty, tz] = self.translation;
        let [sx, sy, sz] = self.size;
        [tx, ty, tz, sx, sy, sz, self.yaw]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Transform7 {
            translation: [v[0], v[1], v[2]],
            size: [v[3], v[4], v[5]],
            yaw: v[6],
        }
    }

    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        if let Some(i) = self.size.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err((format!("size[{i}]"), "size must be strictly positive".into()));
        }
        if let Some(i) = self.translation.iter().position(|t| !t.is_finite()) {
            return Err((format!("translation[{i}]"), "translation must be finite".into()));
        }
        if !(self.yaw >= -PI && self.yaw < PI) {
            return Err(("yaw".into(), "yaw must lie in [-pi, pi)".into()));
        }
        Ok(())
    }

    /// Footprint corners on the floor plane, counter-clockwise.
    pub fn footprint(&self) -> [Point2; 4] {
        let (s, c) = self.yaw.sin_cos();
        let [sx, _, sz] = self.size;
        let [tx, _, tz] = self.translation;
        let local = [[-sx, -sz], [sx, -sz], [sx, sz], [-sx, sz]];
        local.map(|[x, z]| [tx + c * x + s * z, tz - s * x + c * z])
    }

    /// World-space axis-aligned bounds `(min, max)` of the oriented box.
    pub fn world_aabb(&self) -> ([f64; 3], [f64; 3]) {
        let fp = self.footprint();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for [x, z] in fp {
            lo[0] = lo[0].min(x);
            hi[0] = hi[0].max(x);
            lo[2] = lo[2].min(z);
            hi[2] = hi[2].max(z);
        }
        lo[1] = self.translation[1] - self.size[1];
        hi[1] = self.translation[1] + self.size[1];
        (lo, hi)
    }
}

/// An asset placed in a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FurnitureInstance {
    pub id: String,
    pub asset_id: String,
    pub transform: Transform7,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl FurnitureInstance {
    pub fn new(id: impl Into<String>, asset_id: impl Into<String>, transform: Transform7) -> Self {
        FurnitureInstance {
            id: id.into(),
            asset_id: asset_id.into(),
            transform,
            extra: Map::new(),
        }
    }
}

/// A floor plan plus an unordered collection of instances.
///
/// The `instances` vector has storage order only; every consumer treats it as a multiset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub room_type: RoomType,
    pub floor: FloorPlan,
    pub instances: Vec<FurnitureInstance>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Scene {
    pub fn new(id: impl Into<String>, room_type: RoomType, floor: FloorPlan) -> Self {
        Scene {
            id: id.into(),
            room_type,
            floor,
            instances: Vec::new(),
            extra: Map::new(),
        }
    }

    pub fn instance(&self, id: &str) -> Option<&FurnitureInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    /// Instance id not yet used in this scene.
    pub fn fresh_instance_id(&self) -> String {
        let mut k = self.instances.len();
        loop {
            let cand = format!("i{k}");
            if self.instance(&cand).is_none() {
                return cand;
            }
            k += 1;
        }
    }

    /// Checks all invariants, reporting the first violation with its field path.
    pub fn validate(&self) -> Result<()> {
        self.floor.validate().map_err(|(p, m)| Error::Parse {
            path: format!("floor.{p}"),
            message: m,
        })?;
        let mut seen = std::collections::HashSet::new();
        for (i, inst) in self.instances.iter().enumerate() {
            inst.transform.validate().map_err(|(p, m)| Error::Parse {
                path: format!("instances[{i}].transform.{p}"),
                message: m,
            })?;
            if inst.asset_id.is_empty() {
                return Err(Error::Parse {
                    path: format!("instances[{i}].asset_id"),
                    message: "empty asset id".into(),
                });
            }
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::Parse {
                    path: format!("instances[{i}].id"),
                    message: format!("duplicate instance id `{}`", inst.id),
                });
            }
        }
        Ok(())
    }

    /// Per-scalar comparison with angle-aware yaw, ignoring instance order.
    pub fn approx_eq(&self, other: &Scene, tol: f64) -> bool {
        if self.id != other.id
            || self.room_type != other.room_type
            || self.instances.len() != other.instances.len()
            || self.floor.polygon.len() != other.floor.polygon.len()
        {
            return false;
        }
        let close = |a: f64, b: f64| (a - b).abs() <= tol;
        let poly_ok = self
            .floor
            .polygon
            .iter()
            .zip(&other.floor.polygon)
            .all(|(a, b)| close(a[0], b[0]) && close(a[1], b[1]));
        if !poly_ok {
            return false;
        }
        let mut used = vec![false; other.instances.len()];
        for a in &self.instances {
            let hit = other.instances.iter().enumerate().position(|(j, b)| {
                !used[j]
                    && a.id == b.id
                    && a.asset_id == b.asset_id
                    && (0..3).all(|k| close(a.transform.translation[k], b.transform.translation[k]))
                    && (0..3).all(|k| close(a.transform.size[k], b.transform.size[k]))
                    && angle_diff(a.transform.yaw, b.transform.yaw) <= tol
            });
            match hit {
                Some(j) => used[j] = true,
                None => return false,
            }
        }
        true
    }
}
