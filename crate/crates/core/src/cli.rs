//! Command-line front end: `train`, `eval`, `sweep`, `compare`, `match`, `warp`.
//!
//! Exit codes: 0 success, 2 I/O or usage, 3 training infeasible, 4 model/format mismatch.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::dataset::{dump_views, train_model, DatasetSpec, ViewGenerator};
use crate::eval::{
    bench_classify, compare_methods, evaluate_prefixes, sweep_units, write_csv, EvalError, EvalRecord,
    ExperimentConfig, Method,
};
use crate::ferns::{Combination, FernModel, ModelError};
use crate::image::{add_noise, read_pgm, warp_image, write_pgm, AffineDeform, DeformRange, GrayImage};
use crate::keypoints::{detect_keypoints, select_stable_classes, ClassSet, KeypointError};
use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) | CliError::Usage(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Mismatch(_) => 4,
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Csv(c) => CliError::Io(c.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Mismatch(e.to_string()),
        }
    }
}

impl From<KeypointError> for CliError {
    fn from(e: KeypointError) -> Self {
        match e {
            KeypointError::InsufficientKeypoints { .. } => CliError::Infeasible(e.to_string()),
            KeypointError::InvalidArgument(_) => CliError::Usage(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ferns", version, about = "Random-ferns keypoint recognition")]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select classes on a reference image, train a fern model, write it.
    Train(TrainArgs),
    /// Recognition rate of a trained model on noisy synthetic test views.
    Eval(EvalArgs),
    /// Recognition rate against the number of ferns or trees.
    Sweep(SweepArgs),
    /// Ferns vs trees, naive-Bayes vs averaged combination.
    Compare(CompareArgs),
    /// Detect keypoints in a scene and classify each one.
    Match(MatchArgs),
    /// Render one random (or explicitly parameterized) affine view.
    Warp(WarpArgs),
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    /// Reference image (binary PGM).
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Number of classes H.
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    pub classes: u64,
    /// Number of ferns S (also the tree count in comparisons).
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(1..))]
    pub ferns: u64,
    /// Tests per fern M (also the tree depth in comparisons).
    #[arg(long = "fern-size", default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..=20))]
    pub fern_size: u64,
    /// Patch side in pixels (odd).
    #[arg(long, default_value_t = 31)]
    pub patch: usize,
    #[arg(long = "views-per-degree", default_value_t = 2)]
    pub views_per_degree: usize,
    #[arg(long, default_value_t = 360, value_parser = clap::value_parser!(u64).range(1..))]
    pub degrees: u64,
    /// Random views used to select stable class keypoints.
    #[arg(long = "class-views", default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub class_views: u64,
}

#[derive(Debug, Args, Clone)]
pub struct TestArgs {
    /// Number of noisy test views.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub tests: u64,
    /// Gaussian noise sigma for test views.
    #[arg(long, default_value_t = 10.0)]
    pub noise: f64,
    /// Timing repetitions per record.
    #[arg(long = "bench-reps", default_value_t = 5)]
    pub bench_reps: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model_args: ModelArgs,
    /// Output model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Also write every training view and a manifest into this directory.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub test: TestArgs,
    /// CSV output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model_args: ModelArgs,
    #[command(flatten)]
    pub test: TestArgs,
    #[arg(long, default_value = "FernNB")]
    pub method: Method,
    /// Unit counts: comma list and/or inclusive ranges, e.g. `1..50` or `1,5,10`.
    /// Defaults to 1..=--ferns.
    #[arg(long)]
    pub units: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub model_args: ModelArgs,
    #[command(flatten)]
    pub test: TestArgs,
    /// Ferns and trees per method (default: --ferns).
    #[arg(long)]
    pub units: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Scene image (binary PGM).
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Keypoints detected in the scene.
    #[arg(long = "max-keypoints", default_value_t = 1000)]
    pub max_keypoints: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Output PGM.
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest CSV (default: output path with `.csv` appended).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Fixed rotation in radians instead of a random one.
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub phi: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Source point mapped to the output center (default: image center).
    #[arg(long, allow_hyphen_values = true)]
    pub tx: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub ty: Option<f64>,
}

fn read_image(path: &Path) -> Result<GrayImage, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    read_pgm(&bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<FernModel, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    FernModel::load(&bytes).map_err(|e| CliError::Mismatch(format!("{}: {e}", path.display())))
}

/// Writes CSV to `out` (or stdout). File outputs get a `.args` sidecar with the
/// command line that produced them.
fn emit(
    out: Option<&Path>,
    argv: &[String],
    write: impl FnOnce(&mut dyn Write) -> Result<(), CliError>,
) -> Result<(), CliError> {
    match out {
        Some(path) => {
            let mut buf = Vec::new();
            write(&mut buf)?;
            write_file(path, &buf)?;
            let mut sidecar = path.as_os_str().to_owned();
            sidecar.push(".args");
            write_file(Path::new(&sidecar), format!("{}\n", argv.join(" ")).as_bytes())
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)
        }
    }
}

fn dataset_spec(m: &ModelArgs, t: Option<&TestArgs>) -> Result<DatasetSpec, CliError> {
    let noise = t.map_or(0.0, |t| t.noise);
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(CliError::Usage(format!("--noise must be non-negative, got {noise}")));
    }
    Ok(DatasetSpec {
        views_per_degree: m.views_per_degree,
        rotation_degrees: m.degrees as usize,
        test_views: t.map_or(0, |t| t.tests as usize),
        noise_sigma: noise,
        range: DeformRange::default(),
    })
}

fn check_patch(patch: usize) -> Result<(), CliError> {
    if patch < 3 || patch.is_multiple_of(2) {
        return Err(CliError::Usage(format!(
            "--patch must be odd and at least 3, got {patch}"
        )));
    }
    Ok(())
}

fn select_classes(img: &GrayImage, m: &ModelArgs) -> Result<ClassSet, CliError> {
    check_patch(m.patch)?;
    Ok(select_stable_classes(
        img,
        m.patch,
        m.classes as usize,
        m.class_views as usize,
        &DeformRange::default(),
        m.seed,
    )?)
}

fn experiment(m: &ModelArgs, t: &TestArgs) -> Result<ExperimentConfig, CliError> {
    Ok(ExperimentConfig {
        spec: dataset_spec(m, Some(t))?,
        unit_size: m.fern_size as usize,
        seed: m.seed,
        bench_patches: 256,
        bench_repetitions: t.bench_reps.max(1),
    })
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let m = &args.model_args;
    let img = read_image(&m.image)?;
    let spec = dataset_spec(m, None)?;
    if spec.training_views() == 0 {
        return Err(CliError::Usage("--views-per-degree must be at least 1".into()));
    }
    let classes = select_classes(&img, m)?;
    let mut model = FernModel::random(classes.clone(), m.ferns as usize, m.fern_size as usize, m.seed)?;
    let views = ViewGenerator::training(&img, &classes, &spec, m.seed);
    let stats = train_model(&mut model, &views)?;
    write_file(&args.model, &model.save())?;
    if let Some(dir) = &args.dump {
        dump_views(dir, &views).map_err(|e| CliError::Io(format!("cannot dump views to {}: {e}", dir.display())))?;
    }
    println!(
        "classes {} | ferns {} x {} tests | views {} | samples {} | skipped {} | model {}",
        classes.len(),
        model.num_ferns(),
        model.fern_size(),
        stats.views,
        stats.samples,
        stats.skipped,
        args.model.display()
    );
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, argv: &[String]) -> Result<(), CliError> {
    let img = read_image(&args.image)?;
    let model = load_model(&args.model)?;
    model
        .classes()
        .validate(img.width(), img.height())
        .map_err(|e| CliError::Mismatch(format!("model does not fit image {}: {e}", args.image.display())))?;
    if !(args.test.noise >= 0.0) {
        return Err(CliError::Usage(format!(
            "--noise must be non-negative, got {}",
            args.test.noise
        )));
    }
    let spec = DatasetSpec {
        test_views: args.test.tests as usize,
        noise_sigma: args.test.noise,
        ..DatasetSpec::default()
    };
    let test = ViewGenerator::test(&img, model.classes(), &spec, args.seed);
    let units = model.num_ferns();
    let results = evaluate_prefixes(&model, &test, &[units], &[Combination::NaiveBayes])?;
    let bench: Vec<GrayImage> = test.samples().take(256).map(|s| s.patch).collect();
    let ns = if bench.is_empty() {
        0.0
    } else {
        bench_classify(&model, &bench, args.test.bench_reps.max(1))?.ns_per_patch
    };
    let record = EvalRecord {
        method: Method::FernNB,
        units,
        recognition_rate: results.rate(0, 0),
        patches_evaluated: results.total,
        classify_ns_per_patch: ns,
        seed: args.seed,
    };
    emit(args.out.as_deref(), argv, |w| {
        Ok(write_csv(std::slice::from_ref(&record), w)?)
    })?;
    eprintln!("recognition rate: {}", record.recognition_rate);
    Ok(())
}

/// Parses `1,5,10` and inclusive ranges like `1..50`.
pub fn parse_units(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Usage(format!("invalid unit list {s:?}"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() || out.contains(&0) {
        return Err(bad());
    }
    Ok(out)
}

pub fn cmd_sweep(args: &SweepArgs, argv: &[String]) -> Result<(), CliError> {
    let m = &args.model_args;
    let img = read_image(&m.image)?;
    let cfg = experiment(m, &args.test)?;
    let units = match &args.units {
        Some(s) => parse_units(s)?,
        None => (1..=m.ferns as usize).collect(),
    };
    let classes = select_classes(&img, m)?;
    let records = sweep_units(&img, &classes, &cfg, args.method, &units)?;
    emit(args.out.as_deref(), argv, |w| Ok(write_csv(&records, w)?))
}

pub fn cmd_compare(args: &CompareArgs, argv: &[String]) -> Result<(), CliError> {
    let m = &args.model_args;
    let img = read_image(&m.image)?;
    let cfg = experiment(m, &args.test)?;
    let classes = select_classes(&img, m)?;
    let units = args.units.unwrap_or(m.ferns as usize);
    let cmp = compare_methods(&img, &classes, &cfg, units)?;
    emit(args.out.as_deref(), argv, |w| Ok(write_csv(&cmp.records, w)?))
}

/// One classified scene keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMatch {
    pub scene_x: f64,
    pub scene_y: f64,
    pub class_id: usize,
    pub model_x: f64,
    pub model_y: f64,
    pub log_score: f64,
}

/// Detects keypoints in `scene` and classifies each, best score first.
pub fn match_scene(model: &FernModel, scene: &GrayImage, max_keypoints: usize) -> Result<Vec<SceneMatch>, ModelError> {
    let mut out = Vec::new();
    for k in detect_keypoints(scene, model.patch_size(), max_keypoints) {
        let score = model.classify(scene, &k)?;
        let class = model.classes().keypoints[score.class_id];
        out.push(SceneMatch {
            scene_x: k.x,
            scene_y: k.y,
            class_id: score.class_id,
            model_x: class.x,
            model_y: class.y,
            log_score: score.log_score,
        });
    }
    out.sort_by(|a, b| b.log_score.total_cmp(&a.log_score));
    Ok(out)
}

pub fn cmd_match(args: &MatchArgs, argv: &[String]) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let scene = read_image(&args.image)?;
    let matches = match_scene(&model, &scene, args.max_keypoints)?;
    emit(args.out.as_deref(), argv, |w| {
        let mut csv = csv::Writer::from_writer(w);
        let io_err = |e: csv::Error| CliError::Io(e.to_string());
        csv.write_record(["scene_x", "scene_y", "class_id", "model_x", "model_y", "log_score"])
            .map_err(io_err)?;
        for m in &matches {
            csv.serialize((m.scene_x, m.scene_y, m.class_id, m.model_x, m.model_y, m.log_score))
                .map_err(io_err)?;
        }
        csv.flush().map_err(|e| CliError::Io(e.to_string()))
    })?;
    eprintln!("{} keypoints classified", matches.len());
    Ok(())
}

pub fn cmd_warp(args: &WarpArgs) -> Result<(), CliError> {
    let img = read_image(&args.image)?;
    let mut rng = stream_rng(args.seed, "warp", 0);
    let random = DeformRange::default().sample(&mut rng);
    let (cx, cy) = img.center();
    let d = AffineDeform::new(
        args.theta.unwrap_or(random.theta),
        args.phi.unwrap_or(random.phi),
        args.lambda1.unwrap_or(random.lambda1),
        args.lambda2.unwrap_or(random.lambda2),
        args.tx.unwrap_or(cx),
        args.ty.unwrap_or(cy),
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    let view = warp_image(&img, &d, img.width(), img.height());
    let view = add_noise(&view, args.noise, &mut rng).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&args.out, &write_pgm(&view))?;

    let manifest = args.manifest.clone().unwrap_or_else(|| {
        let mut p = args.out.as_os_str().to_owned();
        p.push(".csv");
        PathBuf::from(p)
    });
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| CliError::Io(format!("{}: {e}", manifest.display())))?;
    let io_err = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record([
        "view_id",
        "theta",
        "phi",
        "lambda1",
        "lambda2",
        "tx",
        "ty",
        "noise_sigma",
    ])
    .map_err(io_err)?;
    w.serialize((0, d.theta, d.phi, d.lambda1, d.lambda2, d.tx, d.ty, args.noise))
        .map_err(io_err)?;
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}

/// Runs a parsed command line.
pub fn run(cli: &Cli, argv: &[String]) -> Result<(), CliError> {
    let go = || match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a, argv),
        Command::Sweep(a) => cmd_sweep(a, argv),
        Command::Compare(a) => cmd_compare(a, argv),
        Command::Match(a) => cmd_match(a, argv),
        Command::Warp(a) => cmd_warp(a),
    };
    match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?
            .install(go),
        None => go(),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_lists() {
        assert_eq!(parse_units("1..5").unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_units("1,5, 10").unwrap(), vec![1, 5, 10]);
        assert_eq!(parse_units("1..=3,7").unwrap(), vec![1, 2, 3, 7]);
        assert_eq!(parse_units("1..50").unwrap().len(), 50);
        assert!(parse_units("0,1").is_err());
        assert!(parse_units("5..1").is_err());
        assert!(parse_units("a").is_err());
    }

    #[test]
    fn exit_code_mapping() {
        let e: CliError = KeypointError::InsufficientKeypoints { found: 3, requested: 9 }.into();
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().contains('3'));
        let e: CliError = ModelError::Format("bad magic".into()).into();
        assert_eq!(e.exit_code(), 4);
        assert_eq!(CliError::Io("x".into()).exit_code(), 2);
    }
}
