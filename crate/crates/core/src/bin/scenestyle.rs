use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use scenestyle::assets::{AssetLibrary, LibraryManifest};
use scenestyle::embed::{build_index, check_encoder, embed_text, encoder_from_env, EmbeddingIndex, MaterialOverride, ViewConfig};
use scenestyle::evaluator::{evaluate_completion, CompletionEvalConfig, ConvFeatureExtractor, EncoderFeatureExtractor, ModelCompleter};
use scenestyle::model::{ModelConfig, ModelMeta, SceneModel};
use scenestyle::scene::io::{load_scene, load_scene_dir, save_scene, to_json_string, write_atomic};
use scenestyle::scene::{FloorPlan, NormalizationBounds, Point2, RoomType, Scene, DEFAULT_FLOOR_EXTENT, DEFAULT_MASK_RESOLUTION};
use scenestyle::synthesizer::{
    complete_scene, generate_scene, replace_instance_with_prompt, GuidanceConfig, StopRule, SynthesisOptions, SynthesisTrace,
    DEFAULT_DECAY, DEFAULT_MAX_NEW, DEFAULT_W0,
};
use scenestyle::toyworld::{generate_dataset, generate_library, ToySceneConfig};
use scenestyle::trainer::{TrainConfig, Trainer};
use scenestyle::{Error, Result};

const LIBRARY_FILE: &str = "library.json";
const SCENES_DIR: &str = "scenes";
const INDEX_FILE: &str = "index.json";

#[derive(Parser)]
#[command(name = "scenestyle", version, about = "Furnish rooms with style-consistent furniture")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic themed scenes
    #[command(subcommand)]
    Toyworld(ToyworldCmd),
    /// Asset embedding index
    #[command(subcommand)]
    Embed(EmbedCmd),
    /// Train a scene model
    Train(TrainArgs),
    /// Generate, complete or edit scenes
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Completion metrics on held-out scenes
    Eval(EvalArgs),
    /// Run the HTTP service
    #[cfg(feature = "service")]
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum ToyworldCmd {
    /// Write a toy asset library and themed scenes
    Gen {
        #[arg(long, default_value_t = 500)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        shapes: usize,
        #[arg(long, default_value_t = 8)]
        colors: usize,
        /// Must match the floor resolution of the model that will train on it
        #[arg(long, default_value_t = DEFAULT_MASK_RESOLUTION)]
        mask_resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EmbedCmd {
    /// Render and embed every asset of a library
    Build {
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 224)]
        image_size: usize,
    },
    /// Rank assets against a text query
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(short, long, default_value_t = 5)]
        k: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding scene JSON files, or a toyworld output directory
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    room_type: RoomType,
    /// TOML with optional [model] and [train] tables
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the index next to the data, or one built from its library
    #[arg(long)]
    index: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, env = "SCENESTYLE_CHECKPOINT")]
    checkpoint: PathBuf,
    #[arg(long, env = "SCENESTYLE_INDEX")]
    index: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_NEW)]
    max_new: usize,
    #[arg(long, default_value_t = 0)]
    min_new: usize,
    /// Sample the stop decision instead of taking the more likely outcome
    #[arg(long)]
    sample_stop: bool,
    /// Best asset and heaviest mixture mode instead of sampling
    #[arg(long)]
    greedy: bool,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Write the scene here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the trace here
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Furnish an empty floor
    Generate {
        /// Floor plan JSON, or an object with a `polygon` array
        #[arg(long)]
        floor: PathBuf,
        /// Defaults to the room type the model was trained on
        #[arg(long)]
        room_type: Option<RoomType>,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value_t = DEFAULT_W0)]
        w0: f64,
        #[arg(long, default_value_t = DEFAULT_DECAY)]
        decay: f64,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Add furniture to a partial scene
    Complete {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value_t = DEFAULT_W0)]
        w0: f64,
        #[arg(long, default_value_t = DEFAULT_DECAY)]
        decay: f64,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Swap one instance for the asset matching a prompt
    Replace {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        instance: String,
        #[arg(long)]
        prompt: String,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// Asset library used for rendering
    #[arg(long)]
    library: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    keep: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 512)]
    image_size: usize,
    #[arg(long)]
    greedy: bool,
    #[arg(long)]
    out: PathBuf,
}

#[cfg(feature = "service")]
#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "SCENESTYLE_PORT", default_value_t = scenestyle::service::DEFAULT_PORT)]
    port: u16,
    #[arg(long, env = "SCENESTYLE_CHECKPOINT")]
    checkpoint: PathBuf,
    #[arg(long, env = "SCENESTYLE_INDEX")]
    index: PathBuf,
    #[arg(long, env = "SCENESTYLE_LIBRARY")]
    library: PathBuf,
    #[arg(long, env = "SCENESTYLE_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long, env = "SCENESTYLE_RENDER_SIZE", default_value_t = 512)]
    render_size: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_NEW)]
    max_new: usize,
}

#[derive(Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

/// Writes to stdout; a closed pipe (e.g. `| head`) ends output quietly.
fn print_stdout(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: "<stdout>".into(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = to_json_string(value)?;
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => print_stdout(&format!("{text}\n")),
    }
}

fn toyworld_gen(scenes: usize, seed: u64, shapes: usize, colors: usize, mask_resolution: usize, out: &Path) -> Result<()> {
    let specs = generate_library(shapes, colors, seed)?;
    let cfg = ToySceneConfig {
        mask_resolution,
        ..Default::default()
    };
    let dataset = generate_dataset(&specs, scenes, seed, &cfg)?;
    let dir = out.join(SCENES_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    write_json(&LibraryManifest::Toy { assets: specs }, Some(&out.join(LIBRARY_FILE)))?;
    for s in &dataset {
        save_scene(s, dir.join(format!("{}.json", s.id)))?;
    }
    eprintln!("wrote {} scenes to {}", dataset.len(), dir.display());
    Ok(())
}

fn load_index(path: &Path) -> Result<EmbeddingIndex> {
    let index = EmbeddingIndex::load(path)?;
    check_encoder(&index, encoder_from_env()?.as_ref())?;
    Ok(index)
}

fn embed_build(library: &Path, out: &Path, image_size: usize) -> Result<()> {
    let lib = AssetLibrary::load(library)?;
    let enc = encoder_from_env()?;
    let index = build_index(&lib, enc.as_ref(), &ViewConfig::object_preset(image_size), &MaterialOverride::default())?;
    index.save(out)?;
    eprintln!("indexed {} assets into {}", index.len(), out.display());
    Ok(())
}

fn embed_query(index: &Path, text: &str, k: usize) -> Result<()> {
    let index = load_index(index)?;
    let enc = encoder_from_env()?;
    let q = embed_text(text, enc.as_ref())?;
    let mut text = String::new();
    for hit in index.search(q.as_slice(), k)? {
        text.push_str(&format!("{}\t{:.6}\n", hit.asset_id, hit.score));
    }
    print_stdout(&text)
}

fn scenes_in(data: &Path) -> Result<Vec<Scene>> {
    let nested = data.join(SCENES_DIR);
    load_scene_dir(if nested.is_dir() { nested } else { data.to_path_buf() })
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg: RunConfig = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            toml::from_str(&text).map_err(|e| Error::Parse {
                path: p.display().to_string(),
                message: e.to_string(),
            })?
        }
        None => RunConfig::default(),
    };
    let scenes: Vec<Scene> = scenes_in(&args.data)?
        .into_iter()
        .filter(|s| s.room_type == args.room_type)
        .collect();
    if scenes.is_empty() {
        return Err(Error::InvalidArgument(format!("no {} scenes under {}", args.room_type, args.data.display())));
    }
    let index = match &args.index {
        Some(p) => load_index(p)?,
        None if args.data.join(INDEX_FILE).exists() => load_index(&args.data.join(INDEX_FILE))?,
        None => {
            let lib = AssetLibrary::load(args.data.join(LIBRARY_FILE))?;
            let enc = encoder_from_env()?;
            let index = build_index(&lib, enc.as_ref(), &ViewConfig::object_preset(224), &MaterialOverride::default())?;
            fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
            index.save(args.out.join(INDEX_FILE))?;
            index
        }
    };
    let bounds = NormalizationBounds::from_scenes(&scenes)?;
    let meta = ModelMeta {
        room_type: Some(args.room_type),
        ..Default::default()
    };
    let model = SceneModel::new(cfg.model, bounds, meta)?;
    eprintln!("training on {} scenes for {} steps", scenes.len(), cfg.train.steps);
    let mut trainer = Trainer::new(model, &scenes, &index, cfg.train)?;
    trainer.run(Some(&args.out))
}

fn options(m: &ModelArgs) -> SynthesisOptions {
    SynthesisOptions {
        max_new: m.max_new,
        min_new: m.min_new,
        stop: if m.sample_stop { StopRule::Sample } else { StopRule::Argmax },
        top_k: m.top_k,
        greedy: m.greedy,
        ..Default::default()
    }
}

#[derive(Deserialize)]
struct PolygonFile {
    polygon: Vec<Point2>,
    #[serde(default)]
    resolution: Option<usize>,
    #[serde(default)]
    extent: Option<f64>,
}

fn load_floor(path: &Path, resolution: usize) -> Result<FloorPlan> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    if let Ok(plan) = serde_json::from_str::<FloorPlan>(&text) {
        plan.validate().map_err(|(field, message)| Error::Parse {
            path: path.display().to_string(),
            message: format!("{field}: {message}"),
        })?;
        return Ok(plan);
    }
    let p: PolygonFile = scenestyle::scene::io::from_json_str(&text)?;
    FloorPlan::from_polygon(
        p.polygon,
        p.resolution.unwrap_or(resolution),
        p.extent.unwrap_or(DEFAULT_FLOOR_EXTENT),
    )
}

fn emit(scene: &Scene, trace: Option<&SynthesisTrace>, m: &ModelArgs) -> Result<()> {
    write_json(scene, m.out.as_deref())?;
    if let (Some(t), Some(path)) = (trace, &m.trace) {
        write_json(t, Some(path))?;
    }
    Ok(())
}

fn synth(cmd: &SynthCmd) -> Result<()> {
    let m = match cmd {
        SynthCmd::Generate { model, .. } | SynthCmd::Complete { model, .. } | SynthCmd::Replace { model, .. } => model,
    };
    let model = SceneModel::load(&m.checkpoint)?;
    let index = load_index(&m.index)?;
    let enc = encoder_from_env()?;
    let opts = options(m);
    let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
    match cmd {
        SynthCmd::Generate {
            floor,
            room_type,
            prompt,
            w0,
            decay,
            ..
        } => {
            let room = room_type
                .or(model.meta.room_type)
                .ok_or_else(|| Error::InvalidArgument("pass --room-type; the checkpoint does not record one".into()))?;
            let plan = load_floor(floor, model.config().floor.resolution)?;
            let guidance = GuidanceConfig {
                prompt: prompt.clone(),
                w0: *w0,
                decay: *decay,
            }
            .resolve(enc.as_ref())?;
            let (scene, trace) = generate_scene(&model, &index, &plan, room, &guidance, &opts, &mut rng)?;
            emit(&scene, Some(&trace), m)
        }
        SynthCmd::Complete {
            scene, prompt, w0, decay, ..
        } => {
            let scene = load_scene(scene)?;
            let guidance = GuidanceConfig {
                prompt: prompt.clone(),
                w0: *w0,
                decay: *decay,
            }
            .resolve(enc.as_ref())?;
            let (scene, trace) = complete_scene(&model, &index, &scene, &guidance, &opts, &mut rng)?;
            emit(&scene, Some(&trace), m)
        }
        SynthCmd::Replace {
            scene, instance, prompt, ..
        } => {
            let scene = load_scene(scene)?;
            let out = replace_instance_with_prompt(&model, &index, enc.as_ref(), &scene, instance, prompt, &opts, &mut rng)?;
            emit(&out, None, m)
        }
    }
}

fn eval(args: &EvalArgs) -> Result<()> {
    let model = SceneModel::load(&args.checkpoint)?;
    let index = load_index(&args.index)?;
    let library = AssetLibrary::load(&args.library)?;
    let enc = encoder_from_env()?;
    let test = scenes_in(&args.test)?;
    let completer = ModelCompleter {
        model: &model,
        index: &index,
        options: SynthesisOptions {
            greedy: args.greedy,
            ..Default::default()
        },
    };
    let conv = ConvFeatureExtractor::random(16, 64, 0)?;
    let semantic = EncoderFeatureExtractor(enc.as_ref());
    let cfg = CompletionEvalConfig {
        keep_counts: args.keep.clone(),
        seeds: (0..args.seeds).collect(),
        view: ViewConfig::scene_preset(args.image_size),
        greedy: args.greedy,
    };
    let report = evaluate_completion(&completer, &library, &test, &conv, &semantic, &cfg)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    report.write_csv(args.out.join("completion.csv"))?;
    write_json(&report, Some(&args.out.join("completion.json")))?;
    print_stdout(&report.to_csv())
}

#[cfg(feature = "service")]
fn serve(args: &ServeArgs) -> Result<()> {
    use std::sync::Arc;

    use scenestyle::service::{serve, AppState, Engine};

    let model = SceneModel::load(&args.checkpoint)?;
    let index = load_index(&args.index)?;
    let library = AssetLibrary::load(&args.library)?;
    let engine = Engine {
        model: Arc::new(model),
        index: Arc::new(index),
        library: Arc::new(library),
        encoder: encoder_from_env()?,
        options: SynthesisOptions {
            max_new: args.max_new,
            ..Default::default()
        },
    };
    let state = AppState::new(engine, args.data_dir.clone(), args.render_size)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io {
        path: PathBuf::from("tokio runtime"),
        source: e,
    })?;
    rt.block_on(serve(state, args.port))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Toyworld(ToyworldCmd::Gen {
            scenes,
            seed,
            shapes,
            colors,
            mask_resolution,
            out,
        }) => toyworld_gen(scenes, seed, shapes, colors, mask_resolution, &out),
        Command::Embed(EmbedCmd::Build { library, out, image_size }) => embed_build(&library, &out, image_size),
        Command::Embed(EmbedCmd::Query { index, text, k }) => embed_query(&index, &text, k),
        Command::Train(args) => train(&args),
        Command::Synth(cmd) => synth(&cmd),
        Command::Eval(args) => eval(&args),
        #[cfg(feature = "service")]
        Command::Serve(args) => serve(&args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
