//! Synthetic ground truth: procedural face models, noisy/occluded/outlier
//! scans at known pose and shape, eye appearances at known gaze, and gaze
//! tracks over a screen.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::model::{MorphableModel, LANDMARKS, LEFT_EYE, RIGHT_EYE};
use crate::pointcloud::PointSet;
use crate::regress::GazeDirection;
use crate::render::Image;
use crate::{Error, Mat3, Result, Vec3};

/// Face half-width and half-height covered by the vertex grid, meters.
const GRID_HALF: (f64, f64) = (0.075, 0.095);
/// Eye centers in the model frame (x right, y down, z away from the camera).
pub const EYE_CENTERS: [(f64, f64); 2] = [(0.033, -0.03), (-0.033, -0.03)];
/// Half extents of the annotated eye boxes.
pub const EYE_HALF_EXTENT: (f64, f64) = (0.016, 0.008);

/// Depth profile of the base face: a shallow ellipsoidal cap with a nose,
/// brow ridge, cheekbones, lips, chin and two concave eye sockets. Negative z
/// points at the camera. The relief keeps the surface from sliding along
/// itself under registration.
fn face_depth(x: f64, y: f64) -> f64 {
    let bump = |cx: f64, cy: f64, sx: f64, sy: f64| {
        (-(x - cx).powi(2) / (2.0 * sx * sx) - (y - cy).powi(2) / (2.0 * sy * sy)).exp()
    };
    let (a, b, c) = (0.09, 0.12, 0.05);
    let cap = -c * (1.0 - (x / a).powi(2) - (y / b).powi(2));
    let nose = -0.022 * bump(0.0, 0.005, 0.011, 0.02);
    let brow = -0.008 * bump(0.0, -0.05, 0.04, 0.007);
    let cheeks = -0.006 * (bump(0.045, 0.02, 0.015, 0.015) + bump(-0.045, 0.02, 0.015, 0.015));
    let lips = -0.006 * bump(0.0, 0.05, 0.02, 0.006);
    let chin = -0.01 * bump(0.0, 0.085, 0.02, 0.012);
    let eyes: f64 = EYE_CENTERS.iter().map(|&(ex, ey)| 0.009 * bump(ex, ey, 0.012, 0.01)).sum();
    cap + nose + brow + cheeks + lips + chin + eyes
}

fn grid_dims(n_vertices: usize) -> (usize, usize) {
    let aspect = GRID_HALF.0 / GRID_HALF.1;
    let cols = ((n_vertices as f64 * aspect).sqrt().round() as usize).max(4);
    let rows = n_vertices.div_ceil(cols).max(4);
    (cols, rows)
}

/// Procedural morphable face model on a `cols × rows` vertex grid with
/// roughly `n_vertices` vertices, `k` smooth orthonormal modes, annotated eye
/// regions and landmarks. Deterministic per seed.
pub fn make_test_model(n_vertices: usize, k: usize, seed: u64) -> Result<MorphableModel> {
    if n_vertices < 50 {
        return Err(Error::invalid("test model needs at least 50 vertices"));
    }
    if k == 0 {
        return Err(Error::invalid("test model needs at least one mode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cols, rows) = grid_dims(n_vertices);
    let n = cols * rows;
    if k > 3 * n {
        return Err(Error::invalid("more modes than coordinates"));
    }

    // Small per-seed jitter of the face proportions.
    let sx = 1.0 + 0.06 * (rng.random::<f64>() - 0.5);
    let sz = 1.0 + 0.1 * (rng.random::<f64>() - 0.5);
    let mut xy = Vec::with_capacity(n);
    let mut mean = DVector::zeros(3 * n);
    for r in 0..rows {
        for c in 0..cols {
            let x = -GRID_HALF.0 + 2.0 * GRID_HALF.0 * c as f64 / (cols - 1) as f64;
            let y = -GRID_HALF.1 + 2.0 * GRID_HALF.1 * r as f64 / (rows - 1) as f64;
            let i = r * cols + c;
            xy.push((x, y));
            mean[3 * i] = x * sx;
            mean[3 * i + 1] = y;
            mean[3 * i + 2] = face_depth(x, y) * sz;
        }
    }

    let mut triangles = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            let i = r * cols + c;
            triangles.push([i, i + 1, i + cols]);
            triangles.push([i + 1, i + cols + 1, i + cols]);
        }
    }

    let basis = smooth_basis(&xy, k, &mut rng)?;
    let per_coord = 0.001;
    let basis_scales = (0..k).map(|m| per_coord * ((3 * n) as f64).sqrt() * 0.8f64.powi(m as i32)).collect();

    let mut annotations = BTreeMap::new();
    for (name, &(ex, ey)) in [LEFT_EYE, RIGHT_EYE].iter().zip(EYE_CENTERS.iter()) {
        let ex = ex * sx;
        let mut inside: Vec<usize> = (0..n)
            .filter(|&i| {
                (mean[3 * i] - ex).abs() <= EYE_HALF_EXTENT.0 * sx && (mean[3 * i + 1] - ey).abs() <= EYE_HALF_EXTENT.1
            })
            .collect();
        if inside.len() < 4 {
            inside = nearest_vertices(&mean, ex, ey, 4);
        }
        annotations.insert(String::from(*name), inside);
    }
    let landmark_sites = [
        (0.0, 0.005),
        (0.033, -0.03),
        (-0.033, -0.03),
        (0.017, -0.03),
        (0.049, -0.03),
        (-0.017, -0.03),
        (-0.049, -0.03),
        (0.025, 0.05),
        (-0.025, 0.05),
        (0.0, 0.085),
    ];
    let mut landmarks: Vec<usize> =
        landmark_sites.iter().map(|&(x, y)| nearest_vertices(&mean, x * sx, y, 1)[0]).collect();
    landmarks.dedup();
    annotations.insert(String::from(LANDMARKS), landmarks);

    MorphableModel::new(mean, basis, basis_scales, triangles, annotations)
}

fn nearest_vertices(mean: &DVector<f64>, x: f64, y: f64, count: usize) -> Vec<usize> {
    let n = mean.len() / 3;
    let mut idx: Vec<(f64, usize)> =
        (0..n).map(|i| ((mean[3 * i] - x).powi(2) + (mean[3 * i + 1] - y).powi(2), i)).collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    idx.iter().take(count).map(|e| e.1).collect()
}

/// Random smooth depth displacement fields (sums of Gaussian bumps along z),
/// made orthonormal. Sideways displacements would slide along the surface
/// where no scan can observe them, so none are generated. Two passes of
/// modified Gram–Schmidt make the fields orthonormal.
fn smooth_basis(xy: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let n = xy.len();
    let mut basis = DMatrix::<f64>::zeros(3 * n, k);
    let mut col = 0;
    let mut attempts = 0;
    while col < k {
        attempts += 1;
        if attempts > 20 * k + 20 {
            return Err(Error::DegenerateGeometry("could not build independent modes".into()));
        }
        let mut v = DVector::<f64>::zeros(3 * n);
        for _ in 0..3 {
            let cx = (rng.random::<f64>() * 2.0 - 1.0) * GRID_HALF.0;
            let cy = (rng.random::<f64>() * 2.0 - 1.0) * GRID_HALF.1;
            let width = 0.012 + 0.018 * rng.random::<f64>();
            let amp = rng.random::<f64>() - 0.5;
            for (i, &(x, y)) in xy.iter().enumerate() {
                let g = (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * width * width)).exp();
                v[3 * i + 2] += amp * g;
            }
        }
        let original = v.norm();
        for _ in 0..2 {
            for j in 0..col {
                let dot = basis.column(j).dot(&v);
                v -= basis.column(j) * dot;
            }
        }
        let len = v.norm();
        if len < 1e-6 * original || len == 0.0 {
            continue;
        }
        basis.set_column(col, &(v / len));
        col += 1;
    }
    Ok(basis)
}

/// Coefficients drawn from `N(0, basis_scales²)` scaled by `spread`.
pub fn random_coeffs(model: &MorphableModel, spread: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model
        .basis_scales()
        .iter()
        .map(|&s| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            z * s * spread
        })
        .collect()
}

/// Points with `normal · p > offset` are removed from a scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfSpace {
    pub normal: Vec3,
    pub offset: f64,
}

impl HalfSpace {
    pub fn contains(&self, p: &Vec3) -> bool {
        self.normal.dot(p) > self.offset
    }
}

/// Ground-truth bundle for one synthetic capture.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub coeffs_true: Vec<f64>,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub gaze_true: Vec<GazeDirection>,
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    pub occlusion: Option<HalfSpace>,
    pub scan_size: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Validation("outlier_fraction must lie in [0, 1)".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Validation("noise_sigma must be finite and nonnegative".into()));
        }
        if crate::fitting::orthonormality_residual(&self.rotation) > 1e-6 || self.rotation.determinant() <= 0.0 {
            return Err(Error::Validation("scenario rotation is not orthonormal".into()));
        }
        if self.scan_size == 0 {
            return Err(Error::Validation("scan_size must be positive".into()));
        }
        Ok(())
    }
}

/// A generated scan and which of its points are injected outliers.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub cloud: PointSet,
    pub outliers: Vec<bool>,
}

/// Samples the true surface, poses it, adds Gaussian noise, removes the
/// occluded half-space and replaces each survivor with probability
/// `outlier_fraction` by a uniform point in the survivors' bounding box
/// grown by 50%.
pub fn generate_scan(model: &MorphableModel, scenario: &Scenario) -> Result<Scan> {
    scenario.validate()?;
    let surface = model.sample_surface(&scenario.coeffs_true, scenario.scan_size, scenario.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x005e_ed0f_5ca4);
    let noise = Normal::new(0.0, scenario.noise_sigma.max(0.0)).map_err(|e| Error::invalid(format!("noise: {e}")))?;
    let mut points: Vec<Vec3> = Vec::with_capacity(surface.len());
    for p in surface.points() {
        let mut q = scenario.rotation * p + scenario.translation;
        if scenario.noise_sigma > 0.0 {
            q += Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
        }
        if scenario.occlusion.is_some_and(|h| h.contains(&q)) {
            continue;
        }
        points.push(q);
    }
    if points.is_empty() {
        return Err(Error::DegenerateScenario("occlusion removed every scan point".into()));
    }
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in &points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let center = (lo + hi) * 0.5;
    let half = (hi - lo) * 0.75;
    let mut outliers = vec![false; points.len()];
    if scenario.outlier_fraction > 0.0 {
        for (p, flag) in points.iter_mut().zip(outliers.iter_mut()) {
            if rng.random::<f64>() < scenario.outlier_fraction {
                *p = Vec3::new(
                    center.x + half.x * (2.0 * rng.random::<f64>() - 1.0),
                    center.y + half.y * (2.0 * rng.random::<f64>() - 1.0),
                    center.z + half.z * (2.0 * rng.random::<f64>() - 1.0),
                );
                *flag = true;
            }
        }
    }
    Ok(Scan { cloud: PointSet::new(points)?, outliers })
}

/// Largest gaze angle (yaw or pitch) the appearance model covers.
pub const MAX_APPEARANCE_ANGLE: f64 = 30.0 * PI / 180.0;
pub const SCLERA: f64 = 0.9;
pub const PUPIL: f64 = 0.1;
const SUPERSAMPLE: usize = 4;

/// Pupil-disc center, in pixels, for a gaze on a `width × height` patch.
pub fn pupil_center(gaze: &GazeDirection, width: usize, height: usize) -> (f64, f64) {
    let (hw, hh) = (width as f64 / 2.0, height as f64 / 2.0);
    (
        (width as f64 - 1.0) / 2.0 + gaze.yaw() / MAX_APPEARANCE_ANGLE * 0.4 * hw,
        (height as f64 - 1.0) / 2.0 + gaze.pitch() / MAX_APPEARANCE_ANGLE * 0.4 * hh,
    )
}

pub fn pupil_radius(width: usize, height: usize) -> f64 {
    0.25 * width.min(height) as f64
}

/// Bright sclera with a dark pupil disc displaced linearly with gaze yaw and
/// pitch, antialiased by 4×4 supersampling, plus clamped Gaussian noise.
pub fn generate_eye_appearance(
    gaze: &GazeDirection,
    width: usize,
    height: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Image> {
    let (yaw, pitch) = (gaze.yaw(), gaze.pitch());
    if yaw.abs() > MAX_APPEARANCE_ANGLE + 1e-12 || pitch.abs() > MAX_APPEARANCE_ANGLE + 1e-12 {
        return Err(Error::invalid(format!(
            "gaze yaw {:.1}° / pitch {:.1}° outside ±30°",
            yaw.to_degrees(),
            pitch.to_degrees()
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::invalid("appearance patch must be nonempty"));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::invalid("intensity noise must be nonnegative"));
    }
    let (cx, cy) = pupil_center(gaze, width, height);
    let radius = pupil_radius(width, height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::invalid(format!("noise: {e}")))?;
    let sub = SUPERSAMPLE as f64;
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let mut covered = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / sub - 0.5;
                    let py = y as f64 + (sy as f64 + 0.5) / sub - 0.5;
                    if (px - cx).powi(2) + (py - cy).powi(2) <= radius * radius {
                        covered += 1;
                    }
                }
            }
            let frac = covered as f64 / (sub * sub);
            let mut v = SCLERA + (PUPIL - SCLERA) * frac;
            if noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Image::new(width, height, data)
}

/// Physical screen: `width × height` meters centered on the camera, in the
/// camera plane, viewed from `distance` meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenGeometry {
    pub width: f64,
    pub height: f64,
    pub distance: f64,
}

impl Default for ScreenGeometry {
    fn default() -> Self {
        Self { width: 0.5, height: 0.3, distance: 0.6 }
    }
}

impl ScreenGeometry {
    /// Camera-frame position of a normalized screen point.
    pub fn to_world(&self, screen: [f64; 2]) -> Vec3 {
        Vec3::new((screen[0] - 0.5) * self.width, (screen[1] - 0.5) * self.height, 0.0)
    }

    /// Canonical eye position on the optical axis.
    pub fn eye_position(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.distance)
    }
}

/// Unit direction from `eye` towards a screen point.
pub fn gaze_towards(eye: &Vec3, screen: [f64; 2], geometry: &ScreenGeometry) -> Result<GazeDirection> {
    GazeDirection::new(geometry.to_world(screen) - eye)
}

/// Shape of a synthetic gaze track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrackSpec {
    /// `(½ + ½ sin(2π a s + φ), ½ + ½ sin(2π b s))` for `s` in `[0, 1)`.
    Lissajous { a: f64, b: f64, phase: f64 },
    /// Boustrophedon sweep over `rows` horizontal lines.
    Raster { rows: usize },
    /// Cycles through the nodes of a `g × g` cell-centered grid.
    Grid { g: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSample {
    pub screen: [f64; 2],
    pub gaze: GazeDirection,
}

/// `frames` screen points along `spec` with the gaze from the canonical eye
/// position to each of them.
pub fn generate_gaze_track(spec: &TrackSpec, frames: usize, geometry: &ScreenGeometry) -> Result<Vec<TrackSample>> {
    if frames == 0 {
        return Err(Error::invalid("a gaze track needs at least one frame"));
    }
    let eye = geometry.eye_position();
    (0..frames)
        .map(|i| {
            let s = i as f64 / frames as f64;
            let screen = match *spec {
                TrackSpec::Lissajous { a, b, phase } => {
                    [0.5 + 0.5 * (2.0 * PI * a * s + phase).sin(), 0.5 + 0.5 * (2.0 * PI * b * s).sin()]
                }
                TrackSpec::Raster { rows } => {
                    let rows = rows.max(1);
                    let pos = s * rows as f64;
                    let row = (pos.floor() as usize).min(rows - 1);
                    let along = pos - row as f64;
                    let x = if row.is_multiple_of(2) { along } else { 1.0 - along };
                    let y = if rows == 1 { 0.5 } else { row as f64 / (rows - 1) as f64 };
                    [x, y]
                }
                TrackSpec::Grid { g } => {
                    let g = g.max(1);
                    let node = i % (g * g);
                    [((node % g) as f64 + 0.5) / g as f64, ((node / g) as f64 + 0.5) / g as f64]
                }
            };
            Ok(TrackSample { screen, gaze: gaze_towards(&eye, screen, geometry)? })
        })
        .collect()
}
