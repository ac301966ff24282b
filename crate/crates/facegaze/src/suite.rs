//! Synthetic scenario suites: ground truth per frame, frame synthesis, and
//! the on-disk layout written by `gen`.

use std::path::{Path, PathBuf};

use facegaze_core::fitting::rotation::yaw_pitch;
use facegaze_core::model::{MorphableModel, LEFT_EYE, RIGHT_EYE};
use facegaze_core::pipeline::{face_texture, render_sensed};
use facegaze_core::pointcloud::PointSet;
use facegaze_core::regress::GazeDirection;
use facegaze_core::render::Image;
use facegaze_core::synth::{
    generate_eye_appearance, generate_gaze_track, generate_scan, make_test_model, random_coeffs, Scenario,
    ScreenGeometry, MAX_APPEARANCE_ANGLE,
};
use facegaze_core::{Mat3, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::formats::{self, encode_pgm, encode_ply, mat_from_rows, quantize, read_json, rows_of, sha256_hex, PlyData};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.json";
pub const MANIFEST_SCHEMA: &str = "facegaze.manifest/1";

const POSE_ATTEMPTS: usize = 10_000;

/// Head behavior within a section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionKind {
    Static,
    Moving,
}

impl SectionKind {
    pub fn name(self) -> &'static str {
        match self {
            SectionKind::Static => "static",
            SectionKind::Moving => "moving",
        }
    }

    fn tag(self) -> u64 {
        match self {
            SectionKind::Static => 0,
            SectionKind::Moving => 1,
        }
    }
}

/// Seed for one named random stream, mixed from the base seed and a path of
/// integers so that streams are independent of generation order.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(base, |h, &p| ChaCha8Rng::seed_from_u64(h ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15)).random())
}

pub(crate) mod stream {
    pub const MODEL: u64 = 1;
    pub const COEFFS: u64 = 2;
    pub const POSE: u64 = 3;
    pub const EYE: u64 = 4;
    pub const SCAN: u64 = 5;
    pub const INIT: u64 = 6;
}

/// What a frame shows: where the person looks and how the head is posed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub index: usize,
    /// Normalized screen point being looked at.
    pub screen: [f64; 2],
    /// Unit gaze in the camera frame.
    pub gaze: [f64; 3],
    /// Unit gaze in the head frame (`Rᵀ gaze`); drives the eye appearance.
    pub head_gaze: [f64; 3],
    /// Row-major head rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl FrameTruth {
    pub fn rotation(&self) -> Mat3 {
        mat_from_rows(&self.rotation)
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::from(self.translation)
    }

    pub fn gaze(&self) -> GazeDirection {
        GazeDirection::new(Vec3::from(self.gaze)).expect("stored gaze is a unit vector")
    }

    pub fn head_gaze(&self) -> GazeDirection {
        GazeDirection::new(Vec3::from(self.head_gaze)).expect("stored gaze is a unit vector")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SectionTruth {
    pub kind: SectionKind,
    pub frames: Vec<FrameTruth>,
}

/// Model, true shape and per-frame truth of a suite. Cheap to build; the
/// frames themselves are synthesized on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteTruth {
    pub model: MorphableModel,
    pub coeffs: Vec<f64>,
    pub sections: Vec<SectionTruth>,
}

/// Midpoint of the two eye-annotation centroids of a shape.
pub fn eye_midpoint(model: &MorphableModel, coeffs: &[f64]) -> Result<Vec3> {
    let shape = model.synthesize(coeffs)?;
    let mut mid = Vec3::zeros();
    for eye in [LEFT_EYE, RIGHT_EYE] {
        let idx = model.annotation(eye)?;
        let c = idx.iter().fold(Vec3::zeros(), |a, &i| a + shape.vertices()[i]) / idx.len() as f64;
        mid += c * 0.5;
    }
    Ok(mid)
}

fn within_appearance_range(g: &GazeDirection) -> bool {
    g.yaw().abs() <= MAX_APPEARANCE_ANGLE && g.pitch().abs() <= MAX_APPEARANCE_ANGLE
}

/// Builds the suite's model, true coefficients and frame truth.
///
/// The eyes of every frame sit at the screen's viewing position, so the
/// camera-frame gaze is the track's gaze. Static frames keep the head
/// frontal. Moving frames draw yaw and pitch uniformly from the configured
/// range and reject poses that turn the head-frame gaze outside what the
/// eye appearance covers.
pub fn build_truth(config: &PipelineConfig) -> Result<SuiteTruth> {
    config.validate()?;
    let sc = &config.scenario;
    let model = make_test_model(sc.model_vertices, sc.model_modes, derive_seed(config.seed, &[stream::MODEL]))?;
    let coeffs = random_coeffs(&model, sc.coeff_spread, derive_seed(config.seed, &[stream::COEFFS]));
    let eye_local = eye_midpoint(&model, &coeffs)?;
    let geometry: ScreenGeometry = sc.screen.into();
    let eye_world = geometry.eye_position();
    let track = generate_gaze_track(&sc.track.spec(), sc.frames, &geometry)?;

    let mut kinds = vec![SectionKind::Static];
    if sc.moving_head {
        kinds.push(SectionKind::Moving);
    }
    let range = sc.head_range_deg.to_radians();
    let mut sections = Vec::new();
    for kind in kinds {
        let mut frames = Vec::with_capacity(track.len());
        for (i, sample) in track.iter().enumerate() {
            let gaze = sample.gaze;
            let rotation = match kind {
                SectionKind::Static => {
                    if !within_appearance_range(&gaze) {
                        return Err(facegaze_core::Error::DegenerateScenario(format!(
                            "frame {i}: frontal gaze exceeds the ±30° appearance range"
                        ))
                        .into());
                    }
                    Mat3::identity()
                }
                SectionKind::Moving => {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[stream::POSE, kind.tag(), i as u64]));
                    let mut found = None;
                    for _ in 0..POSE_ATTEMPTS {
                        let r = yaw_pitch(rng.random_range(-range..=range), rng.random_range(-range..=range));
                        let hg = GazeDirection::new(r.transpose() * gaze.vector())?;
                        if within_appearance_range(&hg) {
                            found = Some(r);
                            break;
                        }
                    }
                    found.ok_or_else(|| {
                        facegaze_core::Error::DegenerateScenario(format!(
                            "frame {i}: no head pose keeps the gaze inside the appearance range"
                        ))
                    })?
                }
            };
            let translation = eye_world - rotation * eye_local;
            let head = rotation.transpose() * gaze.vector();
            let g = gaze.vector();
            frames.push(FrameTruth {
                index: i,
                screen: sample.screen,
                gaze: [g.x, g.y, g.z],
                head_gaze: [head.x, head.y, head.z],
                rotation: rows_of(&rotation),
                translation: [translation.x, translation.y, translation.z],
            });
        }
        sections.push(SectionTruth { kind, frames });
    }
    Ok(SuiteTruth { model, coeffs, sections })
}

/// Sensor data of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub scan: PointSet,
    /// Grayscale camera image, quantized to 8 bits.
    pub sensed: Image,
    /// Eye appearance textured onto both eyes.
    pub eye: Image,
}

/// Renders and scans one frame of a section.
pub fn synthesize_frame(
    config: &PipelineConfig,
    truth: &SuiteTruth,
    kind: SectionKind,
    t: &FrameTruth,
) -> Result<Frame> {
    let sc = &config.scenario;
    let (rotation, translation) = (t.rotation(), t.translation());
    let i = t.index as u64;
    let eye = generate_eye_appearance(
        &t.head_gaze(),
        sc.appearance_size,
        sc.appearance_size,
        sc.appearance_noise,
        derive_seed(config.seed, &[stream::EYE, kind.tag(), i]),
    )?;
    let texture = face_texture(&truth.model, &eye, &eye, config.render.skin)?;
    let sensed = render_sensed(
        &truth.model,
        &truth.coeffs,
        &rotation,
        &translation,
        &texture,
        &config.render.sensed.into(),
        config.render.background,
    )?;
    let scan = generate_scan(
        &truth.model,
        &Scenario {
            coeffs_true: truth.coeffs.clone(),
            rotation,
            translation,
            gaze_true: vec![t.head_gaze()],
            noise_sigma: sc.scan_noise,
            outlier_fraction: sc.outlier_fraction,
            occlusion: sc.occlusion.map(Into::into),
            scan_size: sc.scan_size,
            seed: derive_seed(config.seed, &[stream::SCAN, kind.tag(), i]),
        },
    )?;
    Ok(Frame { scan: scan.cloud, sensed: quantize(&sensed), eye: quantize(&eye) })
}

/// A file written by `gen`, relative to the suite directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    #[serde(flatten)]
    pub truth: FrameTruth,
    pub scan: FileEntry,
    pub sensed: FileEntry,
    pub eye: FileEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSection {
    pub name: SectionKind,
    pub frames: Vec<ManifestFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub tool_version: String,
    pub config: PipelineConfig,
    pub model: FileEntry,
    pub coeffs_true: Vec<f64>,
    pub sections: Vec<ManifestSection>,
}

impl Manifest {
    /// Every file the manifest lists, model first.
    pub fn files(&self) -> Vec<&FileEntry> {
        let mut out = vec![&self.model];
        for s in &self.sections {
            for f in &s.frames {
                out.extend([&f.scan, &f.sensed, &f.eye]);
            }
        }
        out
    }

    pub fn section(&self, kind: SectionKind) -> Option<&ManifestSection> {
        self.sections.iter().find(|s| s.name == kind)
    }
}

fn write_entry(dir: &Path, rel: String, bytes: &[u8]) -> Result<FileEntry> {
    formats::write_bytes(&dir.join(&rel), bytes)?;
    Ok(FileEntry { path: rel, sha256: sha256_hex(bytes) })
}

/// Writes the model, every frame's scan PLY, sensed-image PGM and eye PGM,
/// and the manifest. Config validation happens before anything is written.
pub fn write_suite(config: &PipelineConfig, dir: &Path) -> Result<Manifest> {
    let truth = build_truth(config)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model_bytes = formats::to_json_string(&formats::ModelFile::from_model(&truth.model));
    let model = write_entry(dir, MODEL_FILE.into(), model_bytes.as_bytes())?;
    let mut sections = Vec::new();
    for section in &truth.sections {
        let kind = section.kind;
        let frames = section
            .frames
            .par_iter()
            .map(|t| -> Result<ManifestFrame> {
                let frame = synthesize_frame(config, &truth, kind, t)?;
                let stem = format!("{}/{:04}", kind.name(), t.index);
                let ply = encode_ply(&PlyData { points: frame.scan.points().to_vec(), ..Default::default() });
                Ok(ManifestFrame {
                    truth: *t,
                    scan: write_entry(dir, format!("{stem}_scan.ply"), ply.as_bytes())?,
                    sensed: write_entry(dir, format!("{stem}_sensed.pgm"), &encode_pgm(&frame.sensed))?,
                    eye: write_entry(dir, format!("{stem}_eye.pgm"), &encode_pgm(&frame.eye))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        sections.push(ManifestSection { name: kind, frames });
    }
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        model,
        coeffs_true: truth.coeffs.clone(),
        sections,
    };
    formats::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Where a suite's frames come from.
#[derive(Debug, Clone)]
pub enum FrameSource {
    /// Synthesized on demand from the generating config.
    Synthetic(Box<PipelineConfig>),
    /// Read from a directory written by [`write_suite`].
    Directory { dir: PathBuf, manifest: Box<Manifest> },
}

/// A suite ready for the pipeline.
#[derive(Debug, Clone)]
pub struct Suite {
    pub truth: SuiteTruth,
    pub source: FrameSource,
}

impl Suite {
    pub fn synthetic(config: &PipelineConfig) -> Result<Self> {
        Ok(Self { truth: build_truth(config)?, source: FrameSource::Synthetic(Box::new(config.clone())) })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(Error::io(&manifest_path, "suite manifest not found"));
        }
        let manifest: Manifest = read_json(&manifest_path)?;
        if manifest.schema != MANIFEST_SCHEMA {
            return Err(Error::parse(&manifest_path, format!("unsupported schema '{}'", manifest.schema)));
        }
        let model = formats::read_model(&dir.join(&manifest.model.path))?;
        if manifest.coeffs_true.len() != model.n_modes() {
            return Err(Error::parse(&manifest_path, "coeffs_true length differs from the model's K"));
        }
        if manifest.sections.iter().all(|s| s.frames.is_empty()) {
            return Err(Error::config("suite has no frames"));
        }
        let sections = manifest
            .sections
            .iter()
            .map(|s| SectionTruth { kind: s.name, frames: s.frames.iter().map(|f| f.truth).collect() })
            .collect();
        let truth = SuiteTruth { model, coeffs: manifest.coeffs_true.clone(), sections };
        Ok(Self { truth, source: FrameSource::Directory { dir: dir.to_path_buf(), manifest: Box::new(manifest) } })
    }

    /// Camera the suite's images were taken with.
    pub fn sensed_camera(&self) -> crate::config::Intrinsics {
        match &self.source {
            FrameSource::Synthetic(c) => c.render.sensed,
            FrameSource::Directory { manifest, .. } => manifest.config.render.sensed,
        }
    }

    pub fn frame(&self, section: usize, position: usize) -> Result<Frame> {
        let s = &self.truth.sections[section];
        match &self.source {
            FrameSource::Synthetic(config) => synthesize_frame(config, &self.truth, s.kind, &s.frames[position]),
            FrameSource::Directory { dir, manifest } => {
                let f = &manifest.sections[section].frames[position];
                Ok(Frame {
                    scan: formats::read_point_cloud(&dir.join(&f.scan.path))?,
                    sensed: formats::read_pgm(&dir.join(&f.sensed.path))?,
                    eye: formats::read_pgm(&dir.join(&f.eye.path))?,
                })
            }
        }
    }
}
