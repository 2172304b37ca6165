//! Command-line pipeline: generate synthetic scenarios, run the windowed
//! localizer or the particle-filter baseline over them, and evaluate
//! trajectories. Every command writes a JSON manifest capturing its full
//! configuration so any output can be reproduced from the manifest alone.
//!
//! Exit codes: 0 success, 2 usage/input error, 3 tracking failure (partial
//! trajectory still written).

use crate::align::AlignmentConfig;
use crate::baseline_pf::{PfConfig, PfTracker};
use crate::eval::{cumulative_distribution, save_cdf, save_frame_errors, summarize, trajectory_errors};
use crate::geom::Pose;
use crate::render::{load_mesh, RenderConfig, SemanticMesh};
use crate::scenegen::{
    default_intrinsics, generate_scene, generate_trajectory, synthesize_frames,
    synthesize_odometry, NoiseModel, SceneSpec, TrajectorySpec,
};
use crate::semantics::{load_labels, load_logits, ClassTable};
use crate::window::{
    load_odometry, load_trajectory, save_odometry, save_trajectory, FrameObservation,
    LocalizationEngine, SemanticNormalization, WindowConfig, WindowError,
};
use clap::{Args, Parser, Subcommand};
use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_TRACKING: i32 = 3;

#[derive(Parser)]
#[command(
    name = "semloc",
    version,
    about = "Semantic map-based localization pipeline on synthetic street scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario: map mesh, label frames, odometry and
    /// ground-truth trajectory.
    Generate(GenerateArgs),
    /// Track a frame sequence against a map with the windowed alignment
    /// engine.
    Localize(LocalizeArgs),
    /// Track the same inputs with the particle-filter baseline.
    Pf(PfArgs),
    /// Compare an estimated trajectory against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Scene preset: urban-street | sparse-rural | markings-only.
    #[arg(long, default_value = "urban-street")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    /// Driving speed in m/s.
    #[arg(long, default_value_t = 10.0)]
    speed: f64,
    /// Frame rate in Hz.
    #[arg(long, default_value_t = 5.0)]
    rate: f64,
    /// Per-pixel probability of relabeling a frame pixel to a random class.
    #[arg(long, default_value_t = 0.0)]
    noise_flip: f64,
    /// Rounds of random label-boundary erosion/dilation (pixels).
    #[arg(long, default_value_t = 0.0)]
    noise_jitter: f64,
    /// Six per-step odometry noise std-devs "sx sy sz srx sry srz"
    /// (meters, radians).
    #[arg(long, default_value = "0 0 0 0 0 0")]
    odom_sigma: String,
    /// Seed of the noise streams; defaults to seed+1.
    #[arg(long)]
    noise_seed: Option<u64>,
    /// Add a marking strip hidden behind a low wall (occlusion ablations).
    #[arg(long, default_value_t = false)]
    occluded_strip: bool,
    /// Manifest path; defaults to <out>/manifest.json.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct TrackingInputs {
    /// Map mesh (.smesh).
    #[arg(long)]
    map: PathBuf,
    /// Directory of label frames (.pgm) or logits frames (.slog).
    #[arg(long)]
    frames: PathBuf,
    /// Per-frame odometry CSV.
    #[arg(long)]
    odometry: PathBuf,
    /// Output trajectory CSV.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth trajectory CSV; its first pose seeds the initial
    /// estimate when --init is not given.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Explicit initial pose "tx ty tz qx qy qz qw".
    #[arg(long)]
    init: Option<String>,
    /// Seeded random initial offset "dt_m dr_deg seed" applied to the
    /// initial pose (translation up to dt_m meters, rotation up to dr_deg
    /// degrees).
    #[arg(long)]
    init_offset: Option<String>,
    /// Comma-separated class names removed from the map before tracking.
    #[arg(long)]
    drop_classes: Option<String>,
    /// Cap the worker thread count.
    #[arg(long)]
    threads: Option<usize>,
    /// Manifest path; defaults to the output path with a .manifest.json
    /// extension.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct LocalizeArgs {
    #[command(flatten)]
    io: TrackingInputs,
    /// Semantic-vs-odometry weight in [0, 1].
    #[arg(long, default_value_t = 0.65)]
    lambda: f64,
    /// Total pyramid levels.
    #[arg(long, default_value_t = 6)]
    levels: usize,
    /// Coarsest levels actually optimized.
    #[arg(long, default_value_t = 3)]
    align_levels: usize,
    /// Gauss-Newton iterations per level.
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Keyframes optimized jointly.
    #[arg(long, default_value_t = 8)]
    window: usize,
    /// Frames between keyframes.
    #[arg(long, default_value_t = 5)]
    keyframe_stride: usize,
    /// Semantic cost normalization: mean | raw.
    #[arg(long, default_value = "mean")]
    normalization: String,
    /// Damping added to the joint normal equations.
    #[arg(long, default_value_t = 30.0)]
    damping: f64,
}

#[derive(Args)]
struct PfArgs {
    #[command(flatten)]
    io: TrackingInputs,
    #[arg(long, default_value_t = 500)]
    particles: usize,
    /// Fraction of highest-weight particles averaged into the estimate.
    #[arg(long, default_value_t = 0.10)]
    best_fraction: f64,
    /// Pyramid halvings before scoring (2 = quarter resolution).
    #[arg(long, default_value_t = 2)]
    score_level: usize,
    #[arg(long, default_value_t = 5)]
    keyframe_stride: usize,
    /// Six per-frame process noise std-devs "sx sy sz srx sry srz".
    #[arg(long, default_value = "0.03 0.03 0.015 0.003 0.003 0.006")]
    process_sigma: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth trajectory CSV.
    #[arg(long)]
    gt: PathBuf,
    /// Estimated trajectory CSV.
    #[arg(long)]
    est: PathBuf,
    /// Output directory for errors.csv, cdf_trans.csv, cdf_rot.csv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Translation CDF threshold spacing (meters).
    #[arg(long, default_value_t = 0.005)]
    resolution: f64,
    /// Rotation CDF threshold spacing (degrees).
    #[arg(long, default_value_t = 0.05)]
    rot_resolution: f64,
    /// Manifest path; defaults to <out-dir>/manifest.json.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

/// Errors carrying the process exit code.
#[derive(Debug)]
enum CmdError {
    Usage(String),
    Tracking(String),
}

impl CmdError {
    fn code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => EXIT_USAGE,
            CmdError::Tracking(_) => EXIT_TRACKING,
        }
    }
    fn message(&self) -> &str {
        match self {
            CmdError::Usage(m) | CmdError::Tracking(m) => m,
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CmdError {
    CmdError::Usage(e.to_string())
}

/// Entry point for the `semloc` binary.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Testable entry point: parses `args` (including the program name) and runs
/// the selected command, returning the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Localize(args) => cmd_localize(args),
        Command::Pf(args) => cmd_pf(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn parse_floats(text: &str, expected: usize, what: &str) -> Result<Vec<f64>, CmdError> {
    let values: Result<Vec<f64>, _> =
        text.split([' ', ',']).filter(|s| !s.is_empty()).map(str::parse).collect();
    match values {
        Ok(v) if v.len() == expected => Ok(v),
        Ok(v) => Err(CmdError::Usage(format!(
            "{what} expects {expected} numbers, got {}",
            v.len()
        ))),
        Err(e) => Err(CmdError::Usage(format!("{what}: {e}"))),
    }
}

fn apply_thread_cap(threads: Option<usize>) {
    if let Some(n) = threads {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn write_manifest(path: &Path, manifest: &serde_json::Value) -> Result<(), CmdError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(usage)?;
    }
    let mut text = serde_json::to_string_pretty(manifest).map_err(usage)?;
    text.push('\n');
    std::fs::write(path, text).map_err(usage)
}

fn manifest_header(command: &str) -> serde_json::Value {
    serde_json::json!({
        "artifact": { "name": "semloc", "version": env!("CARGO_PKG_VERSION") },
        "command": command,
    })
}

fn cmd_generate(args: GenerateArgs) -> Result<(), CmdError> {
    let mut spec = SceneSpec::by_name(&args.preset, args.seed)
        .ok_or_else(|| CmdError::Usage(format!("unknown preset {:?}", args.preset)))?;
    spec.occluded_strip = args.occluded_strip;
    if args.frames == 0 {
        return Err(CmdError::Usage("--frames must be at least 1".into()));
    }
    if !(args.speed > 0.0 && args.rate > 0.0) {
        return Err(CmdError::Usage("--speed and --rate must be positive".into()));
    }
    let sigma = parse_floats(&args.odom_sigma, 6, "--odom-sigma")?;
    let noise = NoiseModel {
        label_flip_prob: args.noise_flip,
        boundary_jitter: args.noise_jitter,
        odom_sigma: [sigma[0], sigma[1], sigma[2], sigma[3], sigma[4], sigma[5]],
        seed: args.noise_seed.unwrap_or(args.seed.wrapping_add(1)),
    };
    if !(0.0..=1.0).contains(&noise.label_flip_prob) {
        return Err(CmdError::Usage("--noise-flip must be in [0, 1]".into()));
    }

    let out = &args.out;
    std::fs::create_dir_all(out.join("frames")).map_err(usage)?;
    let (mesh, table) = generate_scene(&spec);
    crate::render::save_mesh(&out.join("map.smesh"), &mesh, &table).map_err(usage)?;

    let step = args.speed / args.rate;
    let traj_spec =
        TrajectorySpec::street_drive(spec.curve_radius, (args.frames - 1) as f64 * step, args.speed, args.rate);
    let poses = generate_trajectory(&traj_spec);
    let rows: Vec<(usize, Pose)> = poses.iter().copied().enumerate().collect();
    save_trajectory(&out.join("gt.csv"), &rows).map_err(usage)?;

    let odom = synthesize_odometry(&poses, &noise);
    let steps: Vec<Pose> = odom.iter().map(|m| m.rel).collect();
    save_odometry(&out.join("odom.csv"), &steps).map_err(usage)?;

    let k = default_intrinsics();
    let frames = synthesize_frames(&mesh, &table, &k, &poses, &noise, &RenderConfig::default());
    for (i, frame) in frames.iter().enumerate() {
        crate::semantics::save_labels(&out.join(format!("frames/frame_{i:06}.pgm")), frame)
            .map_err(usage)?;
    }

    let mut manifest = manifest_header("generate");
    manifest["scene"] = serde_json::to_value(&spec).map_err(usage)?;
    manifest["trajectory"] = serde_json::to_value(&traj_spec).map_err(usage)?;
    manifest["noise"] = serde_json::to_value(&noise).map_err(usage)?;
    manifest["frames"] = args.frames.into();
    manifest["outputs"] = serde_json::json!({
        "map": out.join("map.smesh"),
        "ground_truth": out.join("gt.csv"),
        "odometry": out.join("odom.csv"),
        "frames_dir": out.join("frames"),
    });
    let manifest_path = args.manifest.unwrap_or_else(|| out.join("manifest.json"));
    write_manifest(&manifest_path, &manifest)?;
    println!(
        "generated {} frames in {} (preset {}, seed {})",
        args.frames,
        out.display(),
        args.preset,
        args.seed
    );
    Ok(())
}

/// Loads all .pgm/.slog frames in a directory in file-name order.
fn load_frames(dir: &Path) -> Result<Vec<FrameObservation>, CmdError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CmdError::Usage(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm") | Some("slog")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CmdError::Usage(format!("no .pgm or .slog frames in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let obs = match p.extension().and_then(|e| e.to_str()) {
                Some("slog") => FrameObservation::Logits(load_logits(p).map_err(usage)?),
                _ => FrameObservation::Labels(load_labels(p).map_err(usage)?),
            };
            Ok(obs)
        })
        .collect()
}

fn parse_init_pose(text: &str) -> Result<Pose, CmdError> {
    let v = parse_floats(text, 7, "--init")?;
    let norm = (v[3] * v[3] + v[4] * v[4] + v[5] * v[5] + v[6] * v[6]).sqrt();
    if !(norm > 0.5 && norm.is_finite()) {
        return Err(CmdError::Usage(format!("--init quaternion norm {norm} is degenerate")));
    }
    Ok(Pose::from_quaternion_coords([v[0], v[1], v[2]], [v[3], v[4], v[5], v[6]]))
}

/// Seeded random pose offset: translation up to `dt` meters in a uniform
/// direction, rotation up to `dr_deg` degrees about a uniform axis.
fn apply_init_offset(base: &Pose, text: &str) -> Result<Pose, CmdError> {
    let v = parse_floats(text, 3, "--init-offset")?;
    let (dt, dr_deg, seed) = (v[0], v[1], v[2] as u64);
    if dt < 0.0 || dr_deg < 0.0 {
        return Err(CmdError::Usage("--init-offset magnitudes must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_direction = || {
        loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n;
            }
        }
    };
    let direction = random_direction();
    let axis = random_direction();
    let mag = rng.gen_range(0.0..=dt);
    let angle = rng.gen_range(0.0..=dr_deg).to_radians();
    let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
    Ok(Pose::new(rot.into_inner() * base.rotation, base.translation + mag * direction))
}

fn resolve_init(io: &TrackingInputs) -> Result<Pose, CmdError> {
    let base = match (&io.init, &io.gt) {
        (Some(text), _) => parse_init_pose(text)?,
        (None, Some(gt)) => {
            let rows = load_trajectory(gt).map_err(usage)?;
            rows.first()
                .ok_or_else(|| CmdError::Usage(format!("{} is empty", gt.display())))?
                .1
        }
        (None, None) => {
            return Err(CmdError::Usage(
                "an initial pose is required: pass --init or --gt".into(),
            ))
        }
    };
    match &io.init_offset {
        Some(text) => apply_init_offset(&base, text),
        None => Ok(base),
    }
}

/// Loads the map, applying --drop-classes, and returns it with its table.
fn load_map(io: &TrackingInputs) -> Result<(SemanticMesh, ClassTable), CmdError> {
    let (mesh, table) = load_mesh(&io.map).map_err(usage)?;
    let Some(spec) = &io.drop_classes else {
        return Ok((mesh, table));
    };
    let mut dropped = Vec::new();
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let id = table
            .id_of(name)
            .ok_or_else(|| CmdError::Usage(format!("unknown class {name:?} in --drop-classes")))?;
        if id == table.background_id() {
            return Err(CmdError::Usage("cannot drop the background class".into()));
        }
        dropped.push(id);
    }
    let keep: Vec<u8> =
        (0..table.num_classes()).filter(|id| !dropped.contains(id)).collect();
    Ok((mesh.filter_classes(&keep), table))
}

fn tracking_io_manifest(io: &TrackingInputs, init: &Pose) -> serde_json::Value {
    serde_json::json!({
        "map": io.map,
        "frames_dir": io.frames,
        "odometry": io.odometry,
        "ground_truth": io.gt,
        "init_flag": io.init,
        "init_offset_flag": io.init_offset,
        "resolved_init": {
            "translation": [init.translation.x, init.translation.y, init.translation.z],
        },
        "drop_classes": io.drop_classes,
        "threads": io.threads,
        "output": io.out,
    })
}

fn default_manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn cmd_localize(args: LocalizeArgs) -> Result<(), CmdError> {
    apply_thread_cap(args.io.threads);
    if args.align_levels == 0 || args.align_levels >= args.levels {
        return Err(CmdError::Usage(
            "--align-levels must be in 1..--levels (level 0 is never optimized)".into(),
        ));
    }
    let normalization = match args.normalization.as_str() {
        "mean" => SemanticNormalization::PerPixelMean,
        "raw" => SemanticNormalization::Raw,
        other => {
            return Err(CmdError::Usage(format!(
                "--normalization must be 'mean' or 'raw', got {other:?}"
            )))
        }
    };
    let config = WindowConfig {
        window_size: args.window,
        lambda: args.lambda,
        keyframe_stride: args.keyframe_stride,
        normalization,
        align: AlignmentConfig {
            levels_total: args.levels,
            levels_used: args.align_levels,
            iters_per_level: args.iters,
            ..AlignmentConfig::default()
        },
        damping: args.damping,
        ..WindowConfig::default()
    };

    let (mesh, table) = load_map(&args.io)?;
    let frames = load_frames(&args.io.frames)?;
    let odometry = load_odometry(&args.io.odometry).map_err(usage)?;
    if odometry.len() != frames.len() {
        return Err(CmdError::Usage(format!(
            "{} odometry rows for {} frames",
            odometry.len(),
            frames.len()
        )));
    }
    let init = resolve_init(&args.io)?;

    let mut manifest = manifest_header("localize");
    manifest["io"] = tracking_io_manifest(&args.io, &init);
    manifest["config"] = serde_json::json!({
        "lambda": args.lambda,
        "levels": args.levels,
        "align_levels": args.align_levels,
        "iters": args.iters,
        "window": args.window,
        "keyframe_stride": args.keyframe_stride,
        "normalization": args.normalization,
        "damping": args.damping,
    });
    let manifest_path =
        args.io.manifest.clone().unwrap_or_else(|| default_manifest_path(&args.io.out));

    let mut engine = LocalizationEngine::new(
        mesh,
        table.num_classes(),
        default_intrinsics(),
        config,
        RenderConfig::default(),
    );
    engine.initialize(init);
    let mut rows: Vec<(usize, Pose)> = Vec::with_capacity(frames.len());
    let mut failure: Option<WindowError> = None;
    for (i, (obs, step)) in frames.into_iter().zip(&odometry).enumerate() {
        match engine.process_frame(obs, step) {
            Ok(pose) => rows.push((i, pose)),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }

    if let Some(dir) = args.io.out.parent() {
        std::fs::create_dir_all(dir).map_err(usage)?;
    }
    save_trajectory(&args.io.out, &rows).map_err(usage)?;
    manifest["frames_tracked"] = rows.len().into();
    write_manifest(&manifest_path, &manifest)?;
    match failure {
        Some(e @ WindowError::LostTracking { .. }) => Err(CmdError::Tracking(format!(
            "{e}; partial trajectory ({} poses) written to {}",
            rows.len(),
            args.io.out.display()
        ))),
        Some(e) => Err(CmdError::Usage(e.to_string())),
        None => {
            println!("tracked {} frames -> {}", rows.len(), args.io.out.display());
            Ok(())
        }
    }
}

fn cmd_pf(args: PfArgs) -> Result<(), CmdError> {
    apply_thread_cap(args.io.threads);
    if args.particles == 0 {
        return Err(CmdError::Usage("--particles must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&args.best_fraction) || args.best_fraction == 0.0 {
        return Err(CmdError::Usage("--best-fraction must be in (0, 1]".into()));
    }
    let sigma = parse_floats(&args.process_sigma, 6, "--process-sigma")?;
    let config = PfConfig {
        particle_count: args.particles,
        best_fraction: args.best_fraction,
        process_sigma: [sigma[0], sigma[1], sigma[2], sigma[3], sigma[4], sigma[5]],
        score_level: args.score_level,
        keyframe_stride: args.keyframe_stride.max(1),
        seed: args.seed,
    };

    let (mesh, table) = load_map(&args.io)?;
    let frames = load_frames(&args.io.frames)?;
    let odometry = load_odometry(&args.io.odometry).map_err(usage)?;
    if odometry.len() != frames.len() {
        return Err(CmdError::Usage(format!(
            "{} odometry rows for {} frames",
            odometry.len(),
            frames.len()
        )));
    }
    let init = resolve_init(&args.io)?;

    let mut manifest = manifest_header("pf");
    manifest["io"] = tracking_io_manifest(&args.io, &init);
    manifest["config"] = serde_json::json!({
        "particles": config.particle_count,
        "best_fraction": config.best_fraction,
        "process_sigma": config.process_sigma,
        "score_level": config.score_level,
        "keyframe_stride": config.keyframe_stride,
        "seed": config.seed,
    });
    let manifest_path =
        args.io.manifest.clone().unwrap_or_else(|| default_manifest_path(&args.io.out));

    let mut tracker =
        PfTracker::new(mesh, default_intrinsics(), table.background_id(), config, init);
    let mut rows: Vec<(usize, Pose)> = Vec::with_capacity(frames.len());
    for (i, (obs, step)) in frames.into_iter().zip(&odometry).enumerate() {
        let labels = match obs {
            FrameObservation::Labels(labels) => labels,
            FrameObservation::Logits(logits) => logits.argmax_labels(),
        };
        rows.push((i, tracker.process_frame(&labels, step)));
    }

    if let Some(dir) = args.io.out.parent() {
        std::fs::create_dir_all(dir).map_err(usage)?;
    }
    save_trajectory(&args.io.out, &rows).map_err(usage)?;
    manifest["frames_tracked"] = rows.len().into();
    write_manifest(&manifest_path, &manifest)?;
    println!("tracked {} frames -> {}", rows.len(), args.io.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CmdError> {
    let gt = load_trajectory(&args.gt).map_err(usage)?;
    let est = load_trajectory(&args.est).map_err(usage)?;
    let errors = trajectory_errors(&gt, &est).map_err(usage)?;
    std::fs::create_dir_all(&args.out_dir).map_err(usage)?;
    save_frame_errors(&args.out_dir.join("errors.csv"), &errors).map_err(usage)?;

    let trans: Vec<f64> = errors.iter().map(|e| e.translational).collect();
    let rot: Vec<f64> = errors.iter().map(|e| e.rotational_deg).collect();
    let cdf_trans = cumulative_distribution(&trans, args.resolution).map_err(usage)?;
    let cdf_rot = cumulative_distribution(&rot, args.rot_resolution).map_err(usage)?;
    save_cdf(&args.out_dir.join("cdf_trans.csv"), &cdf_trans).map_err(usage)?;
    save_cdf(&args.out_dir.join("cdf_rot.csv"), &cdf_rot).map_err(usage)?;

    let ts = summarize(&trans).map_err(usage)?;
    let rs = summarize(&rot).map_err(usage)?;
    println!("frames {}", errors.len());
    println!(
        "trans_median_m {:.6} trans_mean_m {:.6} trans_p90_m {:.6} trans_max_m {:.6}",
        ts.median, ts.mean, ts.p90, ts.max
    );
    println!(
        "rot_median_deg {:.6} rot_mean_deg {:.6} rot_p90_deg {:.6} rot_max_deg {:.6}",
        rs.median, rs.mean, rs.p90, rs.max
    );

    let mut manifest = manifest_header("eval");
    manifest["io"] = serde_json::json!({
        "ground_truth": args.gt,
        "estimate": args.est,
        "out_dir": args.out_dir,
        "resolution": args.resolution,
        "rot_resolution": args.rot_resolution,
    });
    manifest["summary"] = serde_json::json!({
        "frames": errors.len(),
        "trans_median_m": ts.median,
        "trans_mean_m": ts.mean,
        "trans_p90_m": ts.p90,
        "trans_max_m": ts.max,
        "rot_median_deg": rs.median,
        "rot_mean_deg": rs.mean,
        "rot_p90_deg": rs.p90,
        "rot_max_deg": rs.max,
    });
    let manifest_path =
        args.manifest.clone().unwrap_or_else(|| args.out_dir.join("manifest.json"));
    write_manifest(&manifest_path, &manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_list_parsing_accepts_spaces_and_commas() {
        assert_eq!(parse_floats("1 2,3", 3, "x").unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(parse_floats("1 2", 3, "x").is_err());
        assert!(parse_floats("1 two 3", 3, "x").is_err());
    }

    #[test]
    fn init_pose_parsing_validates_quaternions() {
        let pose = parse_init_pose("1 2 3 0 0 0 1").unwrap();
        assert_eq!(pose.translation, Vector3::new(1.0, 2.0, 3.0));
        assert!(parse_init_pose("1 2 3 0 0 0 0").is_err());
        assert!(parse_init_pose("1 2 3").is_err());
    }

    #[test]
    fn init_offset_respects_magnitude_bounds_and_seed() {
        let base = Pose::identity();
        let a = apply_init_offset(&base, "2 10 42").unwrap();
        let b = apply_init_offset(&base, "2 10 42").unwrap();
        assert_eq!(a.translation, b.translation);
        assert_eq!(a.rotation, b.rotation);
        for seed in 0..50 {
            let p = apply_init_offset(&base, &format!("2 10 {seed}")).unwrap();
            assert!(p.translation.norm() <= 2.0 + 1e-12);
            let cos = ((p.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
            assert!(cos.acos().to_degrees() <= 10.0 + 1e-9);
        }
        let c = apply_init_offset(&base, "2 10 43").unwrap();
        assert_ne!(a.translation, c.translation);
    }

    #[test]
    fn unknown_subcommands_and_bad_flags_exit_with_usage_code() {
        assert_eq!(run_from(["semloc", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run_from(["semloc", "generate", "--preset", "urban-street"]), EXIT_USAGE);
        assert_eq!(run_from(["semloc", "--help"]), EXIT_OK);
    }
}
