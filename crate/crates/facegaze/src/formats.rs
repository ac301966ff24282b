//! On-disk formats: model JSON, ASCII PLY, binary PGM, fit results and
//! training sets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use facegaze_core::fitting::{EnergyTerms, FitResult, IterationRecord, Stage};
use facegaze_core::model::MorphableModel;
use facegaze_core::pointcloud::PointSet;
use facegaze_core::regress::{GazeDirection, TrainingSet};
use facegaze_core::render::{EyeFeature, Image};
use facegaze_core::{Mat3, Vec3};
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes to JSON");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_json_string(value).as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e.to_string()))
}

/// Serialized morphable model. `basis` is the row-major `3n × k` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub n: usize,
    pub k: usize,
    pub mean_shape: Vec<f64>,
    pub basis: Vec<f64>,
    pub basis_scales: Vec<f64>,
    pub triangles: Vec<[usize; 3]>,
    pub annotations: BTreeMap<String, Vec<usize>>,
}

impl ModelFile {
    pub fn from_model(model: &MorphableModel) -> Self {
        let (n, k) = (model.n_vertices(), model.n_modes());
        let b = model.basis();
        let mut basis = Vec::with_capacity(3 * n * k);
        for r in 0..3 * n {
            for c in 0..k {
                basis.push(b[(r, c)]);
            }
        }
        Self {
            n,
            k,
            mean_shape: model.mean_shape().as_slice().to_vec(),
            basis,
            basis_scales: model.basis_scales().to_vec(),
            triangles: model.triangles().to_vec(),
            annotations: model.annotations().clone(),
        }
    }

    pub fn into_model(self) -> facegaze_core::Result<MorphableModel> {
        let rows = 3 * self.n;
        if self.mean_shape.len() != rows {
            return Err(facegaze_core::Error::Validation(format!(
                "mean_shape has {} entries, expected 3n = {rows}",
                self.mean_shape.len()
            )));
        }
        if self.basis.len() != rows * self.k {
            return Err(facegaze_core::Error::Validation(format!(
                "basis has {} entries, expected 3n*k = {}",
                self.basis.len(),
                rows * self.k
            )));
        }
        MorphableModel::new(
            DVector::from_vec(self.mean_shape),
            DMatrix::from_row_slice(rows, self.k, &self.basis),
            self.basis_scales,
            self.triangles,
            self.annotations,
        )
    }
}

pub fn write_model(path: &Path, model: &MorphableModel) -> Result<()> {
    write_json(path, &ModelFile::from_model(model))
}

pub fn read_model(path: &Path) -> Result<MorphableModel> {
    let file: ModelFile = read_json(path)?;
    Ok(file.into_model()?)
}

/// Vertices, optional normals and optional triangles of a PLY file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlyData {
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
    pub faces: Vec<[usize; 3]>,
}

impl PlyData {
    pub fn into_point_set(self) -> facegaze_core::Result<PointSet> {
        match self.normals {
            Some(n) => PointSet::with_normals(self.points, n),
            None => PointSet::new(self.points),
        }
    }
}

/// ASCII PLY text. Coordinates use the shortest exact decimal form, so a
/// write/read round trip is lossless.
pub fn encode_ply(data: &PlyData) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", data.points.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if data.normals.is_some() {
        s.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    if !data.faces.is_empty() {
        let _ = writeln!(s, "element face {}", data.faces.len());
        s.push_str("property list uchar int vertex_indices\n");
    }
    s.push_str("end_header\n");
    for (i, p) in data.points.iter().enumerate() {
        let _ = write!(s, "{:?} {:?} {:?}", p.x, p.y, p.z);
        if let Some(n) = &data.normals {
            let _ = write!(s, " {:?} {:?} {:?}", n[i].x, n[i].y, n[i].z);
        }
        s.push('\n');
    }
    for f in &data.faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

struct PlyElement {
    name: String,
    count: usize,
    /// Scalar property names; a list property is recorded as `None`.
    properties: Vec<Option<String>>,
}

/// Parses ASCII PLY. Vertex properties other than position and normal are
/// ignored; faces must be triangles.
pub fn decode_ply(text: &str) -> std::result::Result<PlyData, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("missing 'ply' magic".into());
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut ascii = false;
    loop {
        let line = lines.next().ok_or("header has no end_header")?.trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                let fmt = tok.next().unwrap_or("");
                if fmt != "ascii" {
                    return Err(format!("unsupported PLY format '{fmt}', only ascii is read"));
                }
                ascii = true;
            }
            Some("element") => {
                let name = tok.next().ok_or("element without name")?.to_string();
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| format!("element '{name}' has no valid count"))?;
                elements.push(PlyElement { name, count, properties: Vec::new() });
            }
            Some("property") => {
                let el = elements.last_mut().ok_or("property before any element")?;
                match tok.next() {
                    Some("list") => el.properties.push(None),
                    Some(_) => {
                        let name = tok.next().ok_or("property without name")?;
                        el.properties.push(Some(name.to_string()));
                    }
                    None => return Err("empty property line".into()),
                }
            }
            Some("end_header") => break,
            Some("comment") | Some("obj_info") | None => {}
            Some(other) => return Err(format!("unexpected header keyword '{other}'")),
        }
    }
    if !ascii {
        return Err("header declares no format".into());
    }

    let mut body = lines.filter(|l| !l.trim().is_empty());
    let mut data = PlyData::default();
    for el in &elements {
        match el.name.as_str() {
            "vertex" => {
                let col = |name: &str| el.properties.iter().position(|p| p.as_deref() == Some(name));
                let (x, y, z) = match (col("x"), col("y"), col("z")) {
                    (Some(x), Some(y), Some(z)) => (x, y, z),
                    _ => return Err("vertex element lacks x, y or z".into()),
                };
                if el.properties.iter().any(Option::is_none) {
                    return Err("list properties on vertices are not supported".into());
                }
                let nrm = match (col("nx"), col("ny"), col("nz")) {
                    (Some(a), Some(b), Some(c)) => Some((a, b, c)),
                    _ => None,
                };
                let mut normals = nrm.map(|_| Vec::with_capacity(el.count));
                for i in 0..el.count {
                    let line = body.next().ok_or_else(|| format!("missing vertex line {i}"))?;
                    let vals: Vec<f64> = line
                        .split_whitespace()
                        .map(|t| t.parse::<f64>().map_err(|_| format!("vertex {i}: bad number '{t}'")))
                        .collect::<std::result::Result<_, _>>()?;
                    if vals.len() != el.properties.len() {
                        return Err(format!("vertex {i} has {} values, expected {}", vals.len(), el.properties.len()));
                    }
                    let p = Vec3::new(vals[x], vals[y], vals[z]);
                    if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                        return Err(format!("vertex {i} is not finite"));
                    }
                    data.points.push(p);
                    if let (Some(ns), Some((a, b, c))) = (normals.as_mut(), nrm) {
                        ns.push(Vec3::new(vals[a], vals[b], vals[c]));
                    }
                }
                data.normals = normals;
            }
            "face" => {
                for i in 0..el.count {
                    let line = body.next().ok_or_else(|| format!("missing face line {i}"))?;
                    let vals: Vec<usize> = line
                        .split_whitespace()
                        .map(|t| t.parse::<usize>().map_err(|_| format!("face {i}: bad index '{t}'")))
                        .collect::<std::result::Result<_, _>>()?;
                    if vals.len() != 4 || vals[0] != 3 {
                        return Err(format!("face {i} is not a triangle"));
                    }
                    data.faces.push([vals[1], vals[2], vals[3]]);
                }
            }
            other => {
                for i in 0..el.count {
                    body.next().ok_or_else(|| format!("missing {other} line {i}"))?;
                }
            }
        }
    }
    if let Some(&f) = data.faces.iter().flatten().find(|&&i| i >= data.points.len()) {
        return Err(format!("face index {f} out of range"));
    }
    Ok(data)
}

pub fn write_ply(path: &Path, data: &PlyData) -> Result<()> {
    write_bytes(path, encode_ply(data).as_bytes())
}

pub fn read_ply(path: &Path) -> Result<PlyData> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::parse(path, "PLY is not UTF-8 text"))?;
    decode_ply(text).map_err(|m| Error::parse(path, m))
}

pub fn read_point_cloud(path: &Path) -> Result<PointSet> {
    let data = read_ply(path)?;
    if data.points.is_empty() {
        return Err(Error::parse(path, "PLY has no vertices"));
    }
    data.into_point_set().map_err(|e| Error::parse(path, e.to_string()))
}

/// Rounds every intensity to the nearest 8-bit level, background to 0. The
/// result survives a PGM round trip unchanged.
pub fn quantize(image: &Image) -> Image {
    Image::from_fn(image.width(), image.height(), |x, y| image.get(x, y).map_or(0.0, |v| (v * 255.0).round() / 255.0))
}

/// Binary 8-bit PGM (`P5`, maxval 255). Background pixels are written as 0.
pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    for y in 0..image.height() {
        for x in 0..image.width() {
            let v = image.get(x, y).unwrap_or(0.0);
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Binary PGM with maxval up to 65535 (two big-endian bytes per sample
/// above 255). Intensities are scaled to `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0usize;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let mut num =
        |what: &str| -> std::result::Result<usize, String> { token()?.parse().map_err(|_| format!("bad PGM {what}")) };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if w == 0 || h == 0 {
        return Err("PGM has zero size".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("PGM maxval {maxval} outside 1..=65535"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bps = if maxval > 255 { 2 } else { 1 };
    let need = w * h * bps;
    let raster = bytes.get(pos..).filter(|r| r.len() >= need).ok_or("PGM raster is truncated")?;
    let data = (0..w * h)
        .map(|i| {
            let v = if bps == 1 {
                raster[i] as usize
            } else {
                ((raster[2 * i] as usize) << 8) | raster[2 * i + 1] as usize
            };
            (v.min(maxval)) as f64 / maxval as f64
        })
        .collect();
    Image::new(w, h, data).map_err(|e| e.to_string())
}

pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    write_bytes(path, &encode_pgm(image))
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    decode_pgm(&read_bytes(path)?).map_err(|m| Error::parse(path, m))
}

pub fn rows_of(m: &Mat3) -> [[f64; 3]; 3] {
    [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]]
}

pub fn mat_from_rows(r: &[[f64; 3]; 3]) -> Mat3 {
    Mat3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyRecord {
    pub matching: f64,
    pub rigid: f64,
    pub model: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub rigid_only: usize,
    pub ramp: usize,
    pub joint: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    RigidOnly,
    Ramp,
    Joint,
}

impl From<Stage> for StageName {
    fn from(s: Stage) -> Self {
        match s {
            Stage::RigidOnly => StageName::RigidOnly,
            Stage::Ramp => StageName::Ramp,
            Stage::Joint => StageName::Joint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationEntry {
    pub iteration: usize,
    pub stage: StageName,
    pub omega1: f64,
    pub omega2: f64,
    pub threshold: f64,
    pub energy: f64,
}

/// Fit result as written by `fit`. Per-point residuals are summarized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub coeffs: Vec<f64>,
    /// Row-major rotation matrix.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub converged: bool,
    pub iterations: usize,
    pub stage_iterations: StageCounts,
    pub entered_ramp: bool,
    pub energies: EnergyRecord,
    /// Fraction of source samples matched within the robust threshold.
    pub inlier_fraction: f64,
    pub median_residual: f64,
    pub energy_history: Vec<f64>,
    pub log: Vec<IterationEntry>,
}

impl FitRecord {
    pub fn from_result(r: &FitResult, threshold: f64) -> Self {
        let mut res = r.per_point_residuals.clone();
        res.sort_by(f64::total_cmp);
        let inliers = res.iter().filter(|&&d| d <= threshold).count();
        let e = &r.final_energies;
        Self {
            coeffs: r.coeffs.clone(),
            rotation: rows_of(&r.rotation),
            translation: [r.translation.x, r.translation.y, r.translation.z],
            converged: r.converged,
            iterations: r.iterations,
            stage_iterations: StageCounts {
                rigid_only: r.stage_iterations[0],
                ramp: r.stage_iterations[1],
                joint: r.stage_iterations[2],
            },
            entered_ramp: r.entered_ramp,
            energies: EnergyRecord { matching: e.matching, rigid: e.rigid, model: e.model, total: e.total },
            inlier_fraction: if res.is_empty() { 0.0 } else { inliers as f64 / res.len() as f64 },
            median_residual: if res.is_empty() { 0.0 } else { res[res.len() / 2] },
            energy_history: r.energy_history.clone(),
            log: r
                .log
                .iter()
                .map(|l| IterationEntry {
                    iteration: l.iteration,
                    stage: l.stage.into(),
                    omega1: l.omega1,
                    omega2: l.omega2,
                    threshold: l.threshold,
                    energy: l.energy,
                })
                .collect(),
        }
    }

    /// Pose and shape as a core result; residuals are not restored.
    pub fn to_result(&self) -> FitResult {
        let e = self.energies;
        FitResult {
            coeffs: self.coeffs.clone(),
            rotation: mat_from_rows(&self.rotation),
            translation: Vec3::from(self.translation),
            converged: self.converged,
            iterations: self.iterations,
            stage_iterations: [
                self.stage_iterations.rigid_only,
                self.stage_iterations.ramp,
                self.stage_iterations.joint,
            ],
            entered_ramp: self.entered_ramp,
            final_energies: EnergyTerms { matching: e.matching, rigid: e.rigid, model: e.model, total: e.total },
            per_point_residuals: Vec::new(),
            energy_history: self.energy_history.clone(),
            log: self
                .log
                .iter()
                .map(|l| IterationRecord {
                    iteration: l.iteration,
                    stage: match l.stage {
                        StageName::RigidOnly => Stage::RigidOnly,
                        StageName::Ramp => Stage::Ramp,
                        StageName::Joint => Stage::Joint,
                    },
                    omega1: l.omega1,
                    omega2: l.omega2,
                    threshold: l.threshold,
                    energy: l.energy,
                })
                .collect(),
        }
    }
}

/// One training pair as stored in a training-set file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub feature: Vec<f64>,
    pub gaze: [f64; 3],
    pub screen: [f64; 2],
}

pub fn training_set_from_records(records: &[SampleRecord]) -> facegaze_core::Result<TrainingSet> {
    let mut features = Vec::with_capacity(records.len());
    let mut targets = Vec::with_capacity(records.len());
    let mut screens = Vec::with_capacity(records.len());
    for r in records {
        features.push(EyeFeature::from_slice(&r.feature)?);
        targets.push(GazeDirection::new(Vec3::from(r.gaze))?);
        screens.push(r.screen);
    }
    TrainingSet::new(features, targets, Some(screens))
}

/// Fails when the set carries no screen points.
pub fn records_from_training_set(set: &TrainingSet) -> Result<Vec<SampleRecord>> {
    let screens = set.screen_points().ok_or_else(|| Error::config("training set has no screen points to store"))?;
    Ok(set
        .features()
        .iter()
        .zip(set.targets())
        .enumerate()
        .map(|(i, (f, g))| {
            let v = g.vector();
            SampleRecord { feature: f.values().to_vec(), gaze: [v.x, v.y, v.z], screen: screens[i] }
        })
        .collect())
}

pub fn read_training_set(path: &Path) -> Result<TrainingSet> {
    let records: Vec<SampleRecord> = read_json(path)?;
    training_set_from_records(&records).map_err(|e| Error::parse(path, e.to_string()))
}

/// Both eye features of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
