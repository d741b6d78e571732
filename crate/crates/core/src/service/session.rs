//! Editing sessions: a scene, the operations applied to it, and their
//! persistence as JSON-lines event logs.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assets::AssetLibrary;
use crate::embed::{EmbeddingIndex, EncoderBackend};
use crate::error::{Error, Result};
use crate::model::SceneModel;
use crate::scene::Scene;
use crate::synthesizer::{complete_scene, replace_instance_with_prompt, GuidanceConfig, SynthesisOptions, SynthesisTrace};

/// Shared, read-only inference resources.
#[derive(Clone)]
pub struct Engine {
    pub model: Arc<SceneModel>,
    pub index: Arc<EmbeddingIndex>,
    pub library: Arc<AssetLibrary>,
    pub encoder: Arc<dyn EncoderBackend>,
    pub options: SynthesisOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Operation {
    Generate {
        prompt: Option<String>,
        w0: f64,
        decay: f64,
    },
    Replace {
        instance_id: String,
        prompt: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    #[serde(flatten)]
    pub op: Operation,
    pub seed: u64,
    pub timestamp_ms: u64,
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Engine {
    /// Applies one operation with its own seeded stream.
    pub fn apply(&self, scene: &Scene, op: &Operation, seed: u64) -> Result<(Scene, Option<SynthesisTrace>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match op {
            Operation::Generate { prompt, w0, decay } => {
                let guidance = GuidanceConfig {
                    prompt: prompt.clone(),
                    w0: *w0,
                    decay: *decay,
                }
                .resolve(self.encoder.as_ref())?;
                let (s, t) = complete_scene(&self.model, &self.index, scene, &guidance, &self.options, &mut rng)?;
                Ok((s, Some(t)))
            }
            Operation::Replace { instance_id, prompt } => {
                let s = replace_instance_with_prompt(
                    &self.model,
                    &self.index,
                    self.encoder.as_ref(),
                    scene,
                    instance_id,
                    prompt,
                    &self.options,
                    &mut rng,
                )?;
                Ok((s, None))
            }
        }
    }

    /// Re-runs `events` from `initial`.
    pub fn replay(&self, initial: &Scene, events: &[Event]) -> Result<Scene> {
        let mut scene = initial.clone();
        for e in events {
            scene = self.apply(&scene, &e.op, e.seed)?.0;
        }
        Ok(scene)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub initial: Scene,
    pub scene: Scene,
    pub history: Vec<Event>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine {
    Created { id: String, timestamp_ms: u64, scene: Scene },
    Applied {
        #[serde(flatten)]
        event: Event,
        /// Scene after the event, so restarts need not recompute.
        scene: Scene,
    },
}

impl Session {
    pub fn new(id: String, scene: Scene) -> Self {
        Session {
            id,
            initial: scene.clone(),
            scene,
            history: Vec::new(),
        }
    }

    fn log_path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}.jsonl"))
    }

    fn append(dir: &Path, id: &str, line: &LogLine) -> Result<()> {
        let path = Self::log_path(dir, id);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut text = serde_json::to_string(line).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        text.push('\n');
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    /// Writes the creation record.
    pub fn persist_new(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Self::append(
            dir,
            &self.id,
            &LogLine::Created {
                id: self.id.clone(),
                timestamp_ms: now_ms(),
                scene: self.initial.clone(),
            },
        )
    }

    /// Records `event` and the scene it produced.
    pub fn commit(&mut self, event: Event, scene: Scene, dir: Option<&Path>) -> Result<()> {
        if let Some(dir) = dir {
            Self::append(
                dir,
                &self.id,
                &LogLine::Applied {
                    event: event.clone(),
                    scene: scene.clone(),
                },
            )?;
        }
        self.history.push(event);
        self.scene = scene;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut session: Option<Session> = None;
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                message: format!("line {}: {e}", n + 1),
            })?;
            match (parsed, session.as_mut()) {
                (LogLine::Created { id, scene, .. }, None) => session = Some(Session::new(id, scene)),
                (LogLine::Applied { event, scene }, Some(s)) => {
                    s.history.push(event);
                    s.scene = scene;
                }
                _ => {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        message: format!("line {}: out-of-order record", n + 1),
                    })
                }
            }
        }
        session.ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            message: "empty session log".into(),
        })
    }

    /// Every session log in `dir`, sorted by id.
    pub fn load_all(dir: &Path) -> Result<Vec<Session>> {
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        paths.iter().map(|p| Self::load(p)).collect()
    }
}
