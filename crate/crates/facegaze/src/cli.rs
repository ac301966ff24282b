//! Command-line front end. Every command emits one JSON document; errors are
//! returned to `main`, which prints them as JSON and maps them to exit codes.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use facegaze_core::pipeline::extract_features;
use facegaze_core::regress::{alr_predict, gaze_error, knn_predict, select_sparse_training, GazeDirection};
use facegaze_core::render::{normalize_pose, render_mesh, sample_texture, EyeFeature};
use facegaze_core::Vec3;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::formats::{self, FeatureRecord, FitRecord, PlyData};
use crate::pipeline::{fit_scan, run_pipeline_with_outcomes, sample_records};
use crate::report::Stats;
use crate::suite::{derive_seed, stream, write_suite, Manifest, SectionKind, Suite};

#[derive(Debug, Parser)]
#[command(name = "facegaze", version, about = "Depth-based face fitting and appearance gaze estimation")]
pub struct Cli {
    /// JSON configuration file; missing keys take defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides one configuration value, e.g. `--set fit.max_iters=50`.
    #[arg(long = "set", global = true, value_name = "K=V")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Suppresses the JSON document on standard output.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SectionArg {
    Static,
    Moving,
}

impl From<SectionArg> for SectionKind {
    fn from(s: SectionArg) -> Self {
        match s {
            SectionArg::Static => SectionKind::Static,
            SectionArg::Moving => SectionKind::Moving,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic suite: model, scans, images and manifest.
    Gen,
    /// Fit the model to one scan.
    Fit {
        #[arg(long)]
        scan: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Suite manifest holding the frame's true pose, for
        /// `fit.init = perturbed_truth`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "static")]
        section: SectionArg,
        #[arg(long)]
        frame: Option<usize>,
        /// Also write the fitted, posed mesh as PLY.
        #[arg(long)]
        mesh: Option<PathBuf>,
    },
    /// Place a fitted shape at the canonical frontal pose; optionally
    /// re-render a sensed image from there.
    Normalize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Eye features of one frame from its fit and sensed image.
    Features {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Sparse grid selection of a training set.
    Train {
        /// Training-set JSON with screen points.
        #[arg(long)]
        samples: PathBuf,
    },
    /// Gaze estimates for query features with kNN and adaptive linear
    /// regression.
    Predict {
        #[arg(long)]
        train: PathBuf,
        /// JSON array of records with a `feature` and optionally a true `gaze`.
        #[arg(long)]
        queries: PathBuf,
    },
    /// Angular-error statistics of a predictions file.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Full evaluation over a suite; without `--suite` (or `paths.suite`)
    /// the suite is synthesized in memory from the configuration.
    Pipeline {
        #[arg(long)]
        suite: Option<PathBuf>,
    },
}

/// Effective configuration: defaults, then the file, then `--seed`, then
/// `--set` overrides.
pub fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let config = config.apply_overrides(&cli.set)?;
    config.validate()?;
    Ok(config)
}

/// Parses arguments and runs the command, writing its JSON to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = write!(stdout, "{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::config(e.to_string().trim_end().to_string())),
    };
    let config = resolve_config(&cli)?;
    let out_dir = cli.out.clone().or_else(|| config.paths.output.clone());
    let doc = execute(&cli, &config, out_dir.as_deref())?;
    if let Some(dir) = &out_dir {
        formats::write_bytes(&dir.join(format!("{}.json", doc.name)), doc.json.as_bytes())?;
    }
    if !cli.quiet {
        stdout.write_all(doc.json.as_bytes()).map_err(|e| Error::io(Path::new("<stdout>"), e))?;
    }
    Ok(())
}

struct Document {
    name: &'static str,
    json: String,
}

impl Document {
    fn new<T: Serialize>(name: &'static str, value: &T) -> Self {
        Self { name, json: formats::to_json_string(value) }
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, "no such file"))
    }
}

fn execute(cli: &Cli, config: &PipelineConfig, out: Option<&Path>) -> Result<Document> {
    match &cli.command {
        Command::Gen => cmd_gen(config, out),
        Command::Fit { scan, model, manifest, section, frame, mesh } => {
            cmd_fit(config, scan, model, manifest.as_deref(), (*section).into(), *frame, mesh.as_deref())
        }
        Command::Normalize { model, fit, image } => cmd_normalize(config, model, fit, image.as_deref(), out),
        Command::Features { model, fit, image } => cmd_features(config, model, fit, image),
        Command::Train { samples } => cmd_train(config, samples),
        Command::Predict { train, queries } => cmd_predict(config, train, queries),
        Command::Eval { predictions } => cmd_eval(predictions),
        Command::Pipeline { suite } => cmd_pipeline(config, suite.as_deref(), out),
    }
}

#[derive(Serialize)]
struct GenSummary {
    manifest: PathBuf,
    files: usize,
    sections: Vec<(SectionKind, usize)>,
}

fn cmd_gen(config: &PipelineConfig, out: Option<&Path>) -> Result<Document> {
    let dir = out.ok_or_else(|| Error::config("gen needs an output directory (--out or paths.output)"))?;
    let manifest = write_suite(config, dir)?;
    Ok(Document::new(
        "gen",
        &GenSummary {
            manifest: dir.join(crate::suite::MANIFEST_FILE),
            files: manifest.files().len() + 1,
            sections: manifest.sections.iter().map(|s| (s.name, s.frames.len())).collect(),
        },
    ))
}

fn cmd_fit(
    config: &PipelineConfig,
    scan: &Path,
    model: &Path,
    manifest: Option<&Path>,
    section: SectionKind,
    frame: Option<usize>,
    mesh: Option<&Path>,
) -> Result<Document> {
    require_file(scan)?;
    require_file(model)?;
    let m = formats::read_model(model)?;
    let cloud = formats::read_point_cloud(scan)?;
    let truth = match (manifest, frame) {
        (Some(p), Some(i)) => {
            let man: Manifest = formats::read_json(p)?;
            let s = man
                .section(section)
                .ok_or_else(|| Error::config(format!("manifest has no {} section", section.name())))?;
            let f = s
                .frames
                .iter()
                .find(|f| f.truth.index == i)
                .ok_or_else(|| Error::config(format!("manifest has no frame {i}")))?;
            Some(f.truth)
        }
        (None, None) => None,
        _ => return Err(Error::config("--manifest and --frame must be given together")),
    };
    let index = truth.map_or(0, |t| t.index as u64);
    let seed = derive_seed(config.seed, &[stream::INIT, section as u64, index]);
    let result = fit_scan(config, &m, cloud, truth.as_ref(), seed)?;
    if let Some(path) = mesh {
        let shape = m.synthesize(&result.coeffs)?.transformed(&result.rotation, &result.translation);
        formats::write_ply(
            path,
            &PlyData { points: shape.vertices().to_vec(), normals: None, faces: m.triangles().to_vec() },
        )?;
    }
    Ok(Document::new("fit", &FitRecord::from_result(&result, config.fit.tukey_threshold)))
}

#[derive(Serialize)]
struct NormalizeSummary {
    mesh: PathBuf,
    image: Option<PathBuf>,
}

fn cmd_normalize(
    config: &PipelineConfig,
    model: &Path,
    fit: &Path,
    image: Option<&Path>,
    out: Option<&Path>,
) -> Result<Document> {
    let dir = out.ok_or_else(|| Error::config("normalize needs an output directory (--out or paths.output)"))?;
    let m = formats::read_model(model)?;
    let record: FitRecord = formats::read_json(fit)?;
    let result = record.to_result();
    let settings = config.render.settings();
    let canonical = normalize_pose(&result, &m, settings.canonical_distance)?;
    let mesh = dir.join("canonical.ply");
    formats::write_ply(
        &mesh,
        &PlyData { points: canonical.vertices().to_vec(), normals: None, faces: m.triangles().to_vec() },
    )?;
    let image_out = match image {
        Some(p) => {
            let sensed = formats::read_pgm(p)?;
            let posed = m.synthesize(&result.coeffs)?.transformed(&result.rotation, &result.translation);
            let texture = sample_texture(&posed, &sensed, &settings.sensed);
            let render = render_mesh(&canonical, m.triangles(), &texture, &settings.canonical)?;
            let path = dir.join("canonical.pgm");
            formats::write_pgm(&path, &render)?;
            Some(path)
        }
        None => None,
    };
    Ok(Document::new("normalize", &NormalizeSummary { mesh, image: image_out }))
}

fn cmd_features(config: &PipelineConfig, model: &Path, fit: &Path, image: &Path) -> Result<Document> {
    let m = formats::read_model(model)?;
    let record: FitRecord = formats::read_json(fit)?;
    let sensed = formats::read_pgm(image)?;
    let (f, _) = extract_features(&m, &record.to_result(), &sensed, &config.render.settings())?;
    Ok(Document::new("features", &FeatureRecord { left: f.left.values().to_vec(), right: f.right.values().to_vec() }))
}

fn cmd_train(config: &PipelineConfig, samples: &Path) -> Result<Document> {
    let set = formats::read_training_set(samples)?;
    if set.is_empty() {
        return Err(Error::config("training samples are empty"));
    }
    let selected = select_sparse_training(&set, config.regress.grid)?;
    Ok(Document::new("train", &formats::records_from_training_set(&selected)?))
}

/// A feature to estimate gaze for, with its true gaze when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub feature: Vec<f64>,
    #[serde(default)]
    pub gaze: Option<[f64; 3]>,
    #[serde(default)]
    pub screen: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub index: usize,
    pub knn: Option<[f64; 3]>,
    pub alr: Option<[f64; 3]>,
    pub truth: Option<[f64; 3]>,
    pub failures: Vec<String>,
}

fn cmd_predict(config: &PipelineConfig, train: &Path, queries: &Path) -> Result<Document> {
    let set = formats::read_training_set(train)?;
    let qs: Vec<QueryRecord> = formats::read_json(queries)?;
    let mut out = Vec::with_capacity(qs.len());
    for (i, q) in qs.iter().enumerate() {
        let feature =
            EyeFeature::from_slice(&q.feature).map_err(|e| Error::parse(queries, format!("query {i}: {e}")))?;
        let mut failures = Vec::new();
        let mut run = |name: &str, r: facegaze_core::Result<GazeDirection>| match r {
            Ok(g) => Some([g.vector().x, g.vector().y, g.vector().z]),
            Err(e) => {
                failures.push(format!("{name}: {e}"));
                None
            }
        };
        let knn = run("knn", knn_predict(&set, &feature, config.regress.k));
        let alr = run("alr", alr_predict(&set, &feature, config.regress.eps));
        out.push(PredictionRecord { index: i, knn, alr, truth: q.gaze, failures });
    }
    Ok(Document::new("predictions", &out))
}

#[derive(Serialize)]
struct EvalSummary {
    knn: Stats,
    alr: Stats,
    /// Predictions lacking an estimate or a true gaze.
    skipped: usize,
}

fn cmd_eval(predictions: &Path) -> Result<Document> {
    let preds: Vec<PredictionRecord> = formats::read_json(predictions)?;
    let mut knn = Vec::new();
    let mut alr = Vec::new();
    let mut skipped = 0;
    for p in &preds {
        let Some(t) = p.truth else {
            skipped += 2;
            continue;
        };
        let truth = GazeDirection::new(Vec3::from(t)).map_err(|e| Error::parse(predictions, e.to_string()))?;
        for (est, acc) in [(p.knn, &mut knn), (p.alr, &mut alr)] {
            match est.map(|g| GazeDirection::new(Vec3::from(g))) {
                Some(Ok(g)) => acc.push(gaze_error(&g, &truth)),
                _ => skipped += 1,
            }
        }
    }
    Ok(Document::new("eval", &EvalSummary { knn: Stats::of(&knn), alr: Stats::of(&alr), skipped }))
}

fn cmd_pipeline(config: &PipelineConfig, suite: Option<&Path>, out: Option<&Path>) -> Result<Document> {
    let suite = match suite.or(config.paths.suite.as_deref()) {
        Some(dir) => Suite::open(dir)?,
        None => Suite::synthetic(config)?,
    };
    let (report, outcomes) = run_pipeline_with_outcomes(config, &suite)?;
    if let Some(dir) = out {
        for (section, o) in report.sections.iter().zip(&outcomes) {
            for (eye, left) in [("left", true), ("right", false)] {
                let path = dir.join(format!("samples_{}_{eye}.json", section.name.name()));
                formats::write_json(&path, &sample_records(o, left))?;
            }
        }
    }
    Ok(Document::new("report", &report))
}
