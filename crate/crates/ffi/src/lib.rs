//! C bindings for scene synthesis.
//!
//! Scenes cross the boundary as JSON strings. Strings returned through
//! `out` pointers are owned by the caller and released with
//! [`ss_string_free`]. Failures return a non-zero [`SsStatus`] and leave a
//! message readable through [`ss_last_error`] on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scenestyle::embed::{check_encoder, embed_text, EmbeddingIndex, EncoderBackend, StubEncoder};
use scenestyle::model::SceneModel;
use scenestyle::scene::io::{parse_scene, to_json_string};
use scenestyle::scene::{FloorPlan, Point2, RoomType, Scene, DEFAULT_FLOOR_EXTENT};
use scenestyle::synthesizer::{complete_scene, replace_instance_with_prompt, Guidance, SynthesisOptions};
use scenestyle::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    InvalidArgument = 5,
    NotFound = 6,
    Generation = 7,
    Checkpoint = 8,
    Encoder = 9,
    Internal = 10,
    Panic = 11,
}

/// Loaded model, asset index and text encoder.
pub struct SsEngine {
    model: SceneModel,
    index: EmbeddingIndex,
    encoder: StubEncoder,
    options: SynthesisOptions,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

struct Failure(SsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => SsStatus::Io,
            Error::Parse { .. } => SsStatus::Parse,
            Error::Geometry(_) | Error::OutOfRange(_) | Error::Shape(_) | Error::InvalidArgument(_) | Error::Duplicate(_) => {
                SsStatus::InvalidArgument
            }
            Error::NotFound(_) => SsStatus::NotFound,
            Error::Generation(_) => SsStatus::Generation,
            Error::Checkpoint(_) => SsStatus::Checkpoint,
            Error::Encoder(_) => SsStatus::Encoder,
            _ => SsStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

type Outcome<T> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> Outcome<()>) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside scenestyle");
            SsStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Outcome<&'a str> {
    if p.is_null() {
        return Err(Failure(SsStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SsStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn opt_text<'a>(p: *const c_char, what: &str) -> Outcome<Option<&'a str>> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, what).map(Some)
    }
}

unsafe fn engine_ref<'a>(p: *const SsEngine) -> Outcome<&'a SsEngine> {
    p.as_ref().ok_or_else(|| Failure(SsStatus::NullPointer, "engine is null".into()))
}

unsafe fn emit(out: *mut *mut c_char, value: String) -> Outcome<()> {
    let s = CString::new(value).map_err(|_| Failure(SsStatus::Internal, "output contains NUL".into()))?;
    *out = s.into_raw();
    Ok(())
}

fn check_out<T>(out: *mut *mut T) -> Outcome<()> {
    if out.is_null() {
        return Err(Failure(SsStatus::NullPointer, "output pointer is null".into()));
    }
    Ok(())
}

/// Message for the last failure on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn ss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and must not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ss_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint and an embedding index. `max_new` caps the objects
/// added per call, 0 keeps the default.
///
/// # Safety
/// Path arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_engine_open(
    checkpoint_path: *const c_char,
    index_path: *const c_char,
    max_new: u32,
    out: *mut *mut SsEngine,
) -> SsStatus {
    guard(|| {
        check_out(out)?;
        *out = ptr::null_mut();
        let ckpt = text(checkpoint_path, "checkpoint_path")?;
        let idx = text(index_path, "index_path")?;
        let model = SceneModel::load(Path::new(ckpt))?;
        let index = EmbeddingIndex::load(Path::new(idx))?;
        let encoder = StubEncoder::new();
        check_encoder(&index, &encoder)?;
        let mut options = SynthesisOptions::default();
        if max_new > 0 {
            options.max_new = max_new as usize;
        }
        *out = Box::into_raw(Box::new(SsEngine {
            model,
            index,
            encoder,
            options,
        }));
        Ok(())
    })
}

/// Releases an engine. Null is ignored.
///
/// # Safety
/// `engine` must come from [`ss_engine_open`] and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ss_engine_free(engine: *mut SsEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Builds an empty scene JSON from a floor outline of `n_points` (x, z)
/// pairs, rasterised at the model's floor resolution.
///
/// # Safety
/// `xz` must hold `2 * n_points` doubles; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ss_scene_from_floor(
    engine: *const SsEngine,
    xz: *const f64,
    n_points: usize,
    room_type: *const c_char,
    out_json: *mut *mut c_char,
) -> SsStatus {
    guard(|| {
        check_out(out_json)?;
        let eng = engine_ref(engine)?;
        if xz.is_null() {
            return Err(Failure(SsStatus::NullPointer, "xz is null".into()));
        }
        let coords = std::slice::from_raw_parts(xz, 2 * n_points);
        let polygon: Vec<Point2> = coords.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let room: RoomType = text(room_type, "room_type")?
            .parse()
            .map_err(|e: Error| Failure(SsStatus::InvalidArgument, e.to_string()))?;
        let floor = FloorPlan::from_polygon(polygon, eng.model.config().floor.resolution, DEFAULT_FLOOR_EXTENT)?;
        emit(out_json, to_json_string(&Scene::new("scene", room, floor))?)
    })
}

/// Adds objects to a scene until the model stops. `prompt` may be null for
/// unguided completion. Writes the completed scene JSON to `out_json`.
///
/// # Safety
/// Strings must be NUL-terminated (or null where allowed); `out_json`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_complete(
    engine: *const SsEngine,
    scene_json: *const c_char,
    prompt: *const c_char,
    w0: f64,
    decay: f64,
    seed: u64,
    out_json: *mut *mut c_char,
) -> SsStatus {
    guard(|| {
        check_out(out_json)?;
        let eng = engine_ref(engine)?;
        let scene = parse_scene(text(scene_json, "scene_json")?)?;
        let guidance = match opt_text(prompt, "prompt")? {
            Some(p) => Guidance::new(Some(embed_text(p, &eng.encoder)?.as_slice().to_vec()), w0, decay)?,
            None => Guidance::none(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (done, _) = complete_scene(&eng.model, &eng.index, &scene, &guidance, &eng.options, &mut rng)?;
        emit(out_json, to_json_string(&done)?)
    })
}

/// Swaps the asset of one instance for one matching `prompt`.
///
/// # Safety
/// Strings must be NUL-terminated; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_replace(
    engine: *const SsEngine,
    scene_json: *const c_char,
    instance_id: *const c_char,
    prompt: *const c_char,
    seed: u64,
    out_json: *mut *mut c_char,
) -> SsStatus {
    guard(|| {
        check_out(out_json)?;
        let eng = engine_ref(engine)?;
        let scene = parse_scene(text(scene_json, "scene_json")?)?;
        let id = text(instance_id, "instance_id")?;
        let p = text(prompt, "prompt")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let done = replace_instance_with_prompt(
            &eng.model,
            &eng.index,
            &eng.encoder as &dyn EncoderBackend,
            &scene,
            id,
            p,
            &eng.options,
            &mut rng,
        )?;
        emit(out_json, to_json_string(&done)?)
    })
}

/// Ranks assets against a text query. Writes a JSON array of
/// `{asset_id, score}` objects.
///
/// # Safety
/// `query` must be NUL-terminated; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_search(
    engine: *const SsEngine,
    query: *const c_char,
    k: usize,
    out_json: *mut *mut c_char,
) -> SsStatus {
    guard(|| {
        check_out(out_json)?;
        let eng = engine_ref(engine)?;
        let q = embed_text(text(query, "query")?, &eng.encoder)?;
        let hits = eng.index.search(q.as_slice(), k)?;
        emit(out_json, to_json_string(&hits)?)
    })
}
