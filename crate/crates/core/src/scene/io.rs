use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::Scene;
use crate::error::{Error, Result};

/// Deserializes JSON, reporting failures with the offending field path.
pub fn from_json_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Parse {
            path,
            message: e.into_inner().to_string(),
        }
    })
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        path: ".".into(),
        message: e.to_string(),
    })
}

pub fn parse_scene(text: &str) -> Result<Scene> {
    let scene: Scene = from_json_str(text)?;
    scene.validate()?;
    Ok(scene)
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), to_json_string(scene)?.as_bytes())
}

/// Writes to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads every `*.json` scene in a directory, sorted by file name.
pub fn load_scene_dir(dir: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(load_scene).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{FloorPlan, FurnitureInstance, RoomType, Transform7};

    fn scene() -> Scene {
        let floor = FloorPlan::rectangle(4.0, 3.0, 16, 6.4).unwrap();
        let mut s = Scene::new("room-1", RoomType::Living, floor);
        s.instances.push(FurnitureInstance::new(
            "i0",
            "sofa-17",
            Transform7::new([0.1234567890123, 0.45, -1.0 / 3.0], [1.1, 0.45, 0.5], 2.0),
        ));
        s
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        let s = scene();
        save_scene(&s, &p).unwrap();
        let back = load_scene(&p).unwrap();
        assert_eq!(back, s);
        save_scene(&back, dir.path().join("t.json")).unwrap();
        assert_eq!(
            fs::read(&p).unwrap(),
            fs::read(dir.path().join("t.json")).unwrap()
        );
    }

    #[test]
    fn unknown_fields_preserved() {
        let mut v = serde_json::to_value(scene()).unwrap();
        v["designer"] = serde_json::json!({"name": "x", "rev": 3});
        v["instances"][0]["material"] = serde_json::json!("oak");
        let text = serde_json::to_string(&v).unwrap();
        let s = parse_scene(&text).unwrap();
        assert_eq!(s.extra["designer"]["rev"], 3);
        assert_eq!(s.instances[0].extra["material"], "oak");
        let again = serde_json::to_value(&s).unwrap();
        assert_eq!(again, v);
    }

    #[test]
    fn missing_instances_names_field() {
        let mut v = serde_json::to_value(scene()).unwrap();
        v.as_object_mut().unwrap().remove("instances");
        let err = parse_scene(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("instances"), "{err}");
    }

    #[test]
    fn bad_size_reports_path() {
        let mut v = serde_json::to_value(scene()).unwrap();
        v["instances"][0]["transform"]["size"][2] = serde_json::json!(-1.0);
        match parse_scene(&v.to_string()).unwrap_err() {
            Error::Parse { path, .. } => assert_eq!(path, "instances[0].transform.size[2]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_type_reports_path() {
        let mut v = serde_json::to_value(scene()).unwrap();
        v["instances"][0]["asset_id"] = serde_json::json!(5);
        match parse_scene(&v.to_string()).unwrap_err() {
            Error::Parse { path, .. } => assert!(path.contains("instances[0]"), "{path}"),
            other => panic!("{other:?}"),
        }
    }
}
