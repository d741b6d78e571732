//! Renderable furniture assets keyed by stable id.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::scene::RoomType;
use crate::toyworld::ToyAssetSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct FurnitureAsset {
    pub id: String,
    /// Coarse class name. Not used by the model; only test-double encoders see it.
    pub label: String,
    pub room_types: Vec<RoomType>,
    pub mesh: Mesh,
}

#[derive(Clone, Debug, Default)]
pub struct AssetLibrary {
    assets: Vec<FurnitureAsset>,
    by_id: HashMap<String, usize>,
}

/// On-disk library description: either toy specs or OBJ meshes in a directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LibraryManifest {
    Toy {
        assets: Vec<ToyAssetSpec>,
    },
    Obj {
        /// Directory holding `<id>.obj` files, relative to the manifest.
        dir: String,
        entries: Vec<ObjEntry>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjEntry {
    pub id: String,
    #[serde(default)]
    pub label: String,
    pub room_types: Vec<RoomType>,
    #[serde(default = "default_gray")]
    pub color: [f64; 3],
}

fn default_gray() -> [f64; 3] {
    [0.7, 0.7, 0.7]
}

impl AssetLibrary {
    pub fn new(assets: Vec<FurnitureAsset>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(assets.len());
        for (i, a) in assets.iter().enumerate() {
            if by_id.insert(a.id.clone(), i).is_some() {
                return Err(Error::Duplicate(a.id.clone()));
            }
        }
        Ok(AssetLibrary { assets, by_id })
    }

    pub fn from_toy_specs(specs: &[ToyAssetSpec]) -> Result<Self> {
        AssetLibrary::new(
            specs
                .iter()
                .map(|s| FurnitureAsset {
                    id: s.id.clone(),
                    label: s.shape.to_string(),
                    room_types: vec![RoomType::Toy],
                    mesh: s.mesh(),
                })
                .collect(),
        )
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: LibraryManifest = crate::scene::io::from_json_str(&text)?;
        match manifest {
            LibraryManifest::Toy { assets } => AssetLibrary::from_toy_specs(&assets),
            LibraryManifest::Obj { dir, entries } => {
                let base = path.parent().unwrap_or(Path::new(".")).join(dir);
                let assets = entries
                    .into_iter()
                    .map(|e| {
                        let mesh = Mesh::load_obj(base.join(format!("{}.obj", e.id)), e.color)?;
                        Ok(FurnitureAsset {
                            id: e.id,
                            label: e.label,
                            room_types: e.room_types,
                            mesh,
                        })
                    })
                    .collect::<Result<_>>()?;
                AssetLibrary::new(assets)
            }
        }
    }

    pub fn get(&self, id: &str) -> Option<&FurnitureAsset> {
        self.by_id.get(id).map(|&i| &self.assets[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &FurnitureAsset> {
        self.assets.iter()
    }

    pub fn len(&self) -> usize {
        self.assets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assets.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_ids_rejected() {
        let m = Mesh::unit_box([1.0; 3]);
        let a = FurnitureAsset {
            id: "x".into(),
            label: "box".into(),
            room_types: vec![],
            mesh: m,
        };
        assert!(matches!(
            AssetLibrary::new(vec![a.clone(), a]),
            Err(Error::Duplicate(_))
        ));
    }

    #[test]
    fn manifest_roundtrip_toy() {
        let specs = crate::toyworld::generate_library(3, 4, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("library.json");
        let text = serde_json::to_string(&LibraryManifest::Toy {
            assets: specs.clone(),
        })
        .unwrap();
        std::fs::write(&p, text).unwrap();
        let lib = AssetLibrary::load(&p).unwrap();
        assert_eq!(lib.len(), 12);
        assert_eq!(lib.get(&specs[3].id).unwrap().label, specs[3].shape.as_str());
    }

    #[test]
    fn manifest_obj_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("meshes")).unwrap();
        std::fs::write(
            dir.path().join("meshes/tri.obj"),
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n",
        )
        .unwrap();
        let manifest = r#"{"kind":"obj","dir":"meshes","entries":[{"id":"tri","room_types":["bedroom"]}]}"#;
        std::fs::write(dir.path().join("lib.json"), manifest).unwrap();
        let lib = AssetLibrary::load(dir.path().join("lib.json")).unwrap();
        assert_eq!(lib.get("tri").unwrap().mesh.faces.len(), 1);
    }
}
