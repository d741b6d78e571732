//! Loader for 3D-FRONT style houses: a house JSON plus a model directory
//! holding `<jid>/raw_model.obj` for every furniture model.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::Deserialize;

use super::geometry::{signed_area, Point2};
use super::{wrap_angle, FloorPlan, FurnitureInstance, RoomType, Scene, Transform7, DEFAULT_FLOOR_EXTENT, DEFAULT_MASK_RESOLUTION};
use crate::error::{Error, Result};
use crate::mesh::Mesh;

#[derive(Deserialize)]
struct House {
    uid: String,
    #[serde(default)]
    furniture: Vec<FurnitureRecord>,
    #[serde(default)]
    mesh: Vec<MeshRecord>,
    scene: SceneRecord,
}

#[derive(Deserialize)]
struct FurnitureRecord {
    uid: String,
    jid: String,
}

#[derive(Deserialize)]
struct MeshRecord {
    uid: String,
    #[serde(rename = "type")]
    kind: String,
    xyz: Vec<f64>,
    faces: Vec<u32>,
}

#[derive(Deserialize)]
struct SceneRecord {
    room: Vec<RoomRecord>,
}

#[derive(Deserialize)]
struct RoomRecord {
    #[serde(rename = "type")]
    kind: String,
    instanceid: String,
    #[serde(default)]
    children: Vec<Child>,
}

#[derive(Deserialize)]
struct Child {
    #[serde(rename = "ref")]
    reference: String,
    pos: [f64; 3],
    /// Quaternion `[x, y, z, w]`.
    rot: [f64; 4],
    scale: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct Front3dOptions {
    pub resolution: usize,
    pub extent: f64,
    /// Skip furniture whose model file is missing instead of failing.
    pub skip_missing_models: bool,
}

impl Default for Front3dOptions {
    fn default() -> Self {
        Front3dOptions {
            resolution: DEFAULT_MASK_RESOLUTION,
            extent: DEFAULT_FLOOR_EXTENT,
            skip_missing_models: false,
        }
    }
}

/// Maps a 3D-FRONT room label such as `MasterBedroom` onto a room type.
pub fn room_type_of(label: &str) -> Option<RoomType> {
    if label.contains("Bedroom") {
        Some(RoomType::Bedroom)
    } else if label.contains("Library") {
        Some(RoomType::Library)
    } else if label.contains("Living") {
        Some(RoomType::Living)
    } else if label.contains("Dining") {
        Some(RoomType::Dining)
    } else {
        None
    }
}

fn yaw_of(q: [f64; 4]) -> f64 {
    let [x, y, z, w] = q;
    wrap_angle((2.0 * (w * y + x * z)).atan2(1.0 - 2.0 * (x * x + y * y)))
}

/// Model bounding box, cached per model id.
fn model_bounds(models: &Path, jid: &str, cache: &mut HashMap<String, Option<([f64; 3], [f64; 3])>>) -> Result<Option<([f64; 3], [f64; 3])>> {
    if let Some(b) = cache.get(jid) {
        return Ok(*b);
    }
    let path = models.join(jid).join("raw_model.obj");
    let b = if path.exists() {
        Some(Mesh::load_obj(&path, [0.7; 3])?.bounds())
    } else {
        None
    };
    cache.insert(jid.to_string(), b);
    Ok(b)
}

type Key = (i64, i64);

fn weld(p: [f64; 2]) -> Key {
    ((p[0] * 1000.0).round() as i64, (p[1] * 1000.0).round() as i64)
}

fn drop_collinear(mut poly: Vec<Point2>) -> Vec<Point2> {
    let mut i = 0;
    while poly.len() > 3 && i < poly.len() {
        let n = poly.len();
        let (a, b, c) = (poly[(i + n - 1) % n], poly[i], poly[(i + 1) % n]);
        let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
        if cross.abs() < 1e-9 {
            poly.remove(i);
        } else {
            i += 1;
        }
    }
    poly
}

/// Largest closed outline formed by edges used by exactly one triangle.
fn floor_outline(triangles: &[[Point2; 3]]) -> Result<Vec<Point2>> {
    let mut edges: BTreeMap<(Key, Key), usize> = BTreeMap::new();
    let mut coords: HashMap<Key, Point2> = HashMap::new();
    for t in triangles {
        for k in 0..3 {
            let (a, b) = (weld(t[k]), weld(t[(k + 1) % 3]));
            coords.entry(a).or_insert(t[k]);
            if a != b {
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
    }
    let mut adj: BTreeMap<Key, Vec<Key>> = BTreeMap::new();
    for (&(a, b), &n) in &edges {
        if n == 1 {
            adj.entry(a).or_default().push(b);
            adj.entry(b).or_default().push(a);
        }
    }
    let mut best: Vec<Point2> = Vec::new();
    while let Some((&start, _)) = adj.iter().find(|(_, v)| !v.is_empty()) {
        let mut ring = vec![start];
        let mut prev = start;
        let mut cur = adj[&start][0];
        let remove = |a: Key, b: Key, adj: &mut BTreeMap<Key, Vec<Key>>| {
            for (x, y) in [(a, b), (b, a)] {
                if let Some(v) = adj.get_mut(&x) {
                    if let Some(i) = v.iter().position(|k| *k == y) {
                        v.swap_remove(i);
                    }
                }
            }
        };
        remove(prev, cur, &mut adj);
        while cur != start {
            ring.push(cur);
            let Some(&next) = adj.get(&cur).and_then(|v| v.first()) else {
                break;
            };
            prev = cur;
            cur = next;
            remove(prev, cur, &mut adj);
        }
        let poly = drop_collinear(ring.iter().map(|k| coords[k]).collect());
        if poly.len() >= 3 && signed_area(&poly).abs() > signed_area(&best).abs() {
            best = poly;
        }
    }
    if best.len() < 3 {
        return Err(Error::Geometry("floor meshes have no closed outline".into()));
    }
    Ok(best)
}

/// Reads every room of a known type from `house` as a centred scene. Asset ids
/// are the 3D-FUTURE model ids.
pub fn load_house(house: impl AsRef<Path>, models: impl AsRef<Path>, opts: &Front3dOptions) -> Result<Vec<Scene>> {
    let house_path = house.as_ref();
    let models = models.as_ref();
    let text = std::fs::read_to_string(house_path).map_err(|e| Error::io(house_path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let house: House = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: house_path.display().to_string(),
        message: format!("{}: {}", e.path(), e.inner()),
    })?;
    let furniture: HashMap<&str, &str> = house.furniture.iter().map(|f| (f.uid.as_str(), f.jid.as_str())).collect();
    let meshes: HashMap<&str, &MeshRecord> = house.mesh.iter().map(|m| (m.uid.as_str(), m)).collect();
    let mut bounds_cache = HashMap::new();
    let mut scenes = Vec::new();
    for room in &house.scene.room {
        let Some(room_type) = room_type_of(&room.kind) else {
            continue;
        };
        let mut tris: Vec<[Point2; 3]> = Vec::new();
        let mut floor_y = Vec::new();
        for child in &room.children {
            let Some(m) = meshes.get(child.reference.as_str()) else {
                continue;
            };
            if !m.kind.contains("Floor") {
                continue;
            }
            let v = |i: u32| -> Result<[f64; 3]> {
                let i = i as usize * 3;
                m.xyz
                    .get(i..i + 3)
                    .map(|s| [s[0], s[1], s[2]])
                    .ok_or_else(|| Error::Geometry(format!("floor mesh {} has a face index out of range", m.uid)))
            };
            for f in m.faces.chunks_exact(3) {
                let p = [v(f[0])?, v(f[1])?, v(f[2])?];
                floor_y.extend(p.iter().map(|q| q[1]));
                tris.push(p.map(|q| [q[0], q[2]]));
            }
        }
        if tris.is_empty() {
            log::warn!("room {} of house {} has no floor; skipped", room.instanceid, house.uid);
            continue;
        }
        let outline = floor_outline(&tris)?;
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &outline {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let centre = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
        let base_y = floor_y.iter().copied().fold(f64::INFINITY, f64::min);
        let polygon: Vec<Point2> = outline.iter().map(|p| [p[0] - centre[0], p[1] - centre[1]]).collect();
        let floor = FloorPlan::from_polygon(polygon, opts.resolution, opts.extent)?;
        let mut scene = Scene::new(format!("{}_{}", house.uid, room.instanceid), room_type, floor);
        for child in &room.children {
            let Some(&jid) = furniture.get(child.reference.as_str()) else {
                continue;
            };
            let Some((mlo, mhi)) = model_bounds(models, jid, &mut bounds_cache)? else {
                if opts.skip_missing_models {
                    log::warn!("model {jid} not found; instance skipped");
                    continue;
                }
                return Err(Error::NotFound(format!("model file for `{jid}` under {}", models.display())));
            };
            let yaw = yaw_of(child.rot);
            let s = child.scale;
            let local: [f64; 3] = std::array::from_fn(|k| 0.5 * (mlo[k] + mhi[k]) * s[k]);
            let size: [f64; 3] = std::array::from_fn(|k| (0.5 * (mhi[k] - mlo[k]) * s[k]).abs().max(1e-4));
            let (sn, cs) = yaw.sin_cos();
            let translation = [
                child.pos[0] + cs * local[0] + sn * local[2] - centre[0],
                child.pos[1] + local[1] - base_y,
                child.pos[2] - sn * local[0] + cs * local[2] - centre[1],
            ];
            let id = scene.fresh_instance_id();
            scene
                .instances
                .push(FurnitureInstance::new(id, jid, Transform7::new(translation, size, yaw)));
        }
        scenes.push(scene);
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;
    use std::path::PathBuf;

    use super::*;

    fn fixture() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/front3d")
    }

    #[test]
    fn fixture_rooms_map_to_scenes() {
        let dir = fixture();
        let scenes = load_house(dir.join("house.json"), dir.join("models"), &Front3dOptions::default()).unwrap();
        // the storage room has no known type
        assert_eq!(scenes.len(), 2);
        let bed = &scenes[0];
        assert_eq!(bed.room_type, RoomType::Bedroom);
        assert_eq!(bed.instances.len(), 3);
        assert_eq!(scenes[1].room_type, RoomType::Living);
        assert_eq!(scenes[1].instances.len(), 1);
        // L-shaped floor keeps its notch
        assert_eq!(bed.floor.polygon.len(), 6);
        assert!((bed.floor.area() - 12.0).abs() < 1e-9);
        let bed_inst = &bed.instances[0];
        assert!((bed_inst.transform.size[0] - 1.0).abs() < 1e-9);
        assert!((bed_inst.transform.translation[1] - 0.5).abs() < 1e-9);
        assert!((bed.instances[1].transform.yaw - PI / 2.0).abs() < 1e-9);
        bed.validate().unwrap();
    }

    #[test]
    fn missing_models_error_or_skip() {
        let dir = fixture();
        let empty = tempfile::tempdir().unwrap();
        assert!(load_house(dir.join("house.json"), empty.path(), &Front3dOptions::default()).is_err());
        let opts = Front3dOptions {
            skip_missing_models: true,
            ..Default::default()
        };
        let scenes = load_house(dir.join("house.json"), empty.path(), &opts).unwrap();
        assert!(scenes.iter().all(|s| s.instances.is_empty()));
    }

    #[test]
    fn labels_and_quaternions() {
        assert_eq!(room_type_of("MasterBedroom"), Some(RoomType::Bedroom));
        assert_eq!(room_type_of("LivingDiningRoom"), Some(RoomType::Living));
        assert_eq!(room_type_of("Kitchen"), None);
        let h = (PI / 6.0).sin();
        assert!((yaw_of([0.0, h, 0.0, (PI / 6.0).cos()]) - PI / 3.0).abs() < 1e-12);
        assert!((yaw_of([0.0, 0.0, 0.0, 1.0])).abs() < 1e-12);
    }
}
