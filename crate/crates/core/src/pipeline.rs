//! Frame-level glue: texturing a face with eye appearances, rendering the
//! sensed view, and turning a fit plus a sensed image into eye features.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::fitting::FitResult;
use crate::model::{MorphableModel, LEFT_EYE, RIGHT_EYE};
use crate::pointcloud::CameraIntrinsics;
use crate::render::{
    downsample_to_feature, extract_eye_patch, normalize_pose, render_mesh, sample_texture, EyeFeature, Image,
};
use crate::{Error, Mat3, Result, Vec3};

/// Cameras and crop settings used from sensed frame to eye feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub sensed: CameraIntrinsics,
    pub canonical: CameraIntrinsics,
    /// Depth of the face in the canonical frontal render, meters.
    pub canonical_distance: f64,
    /// Eye-box growth on each side, as a fraction of its size.
    pub margin: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            sensed: CameraIntrinsics::vga(),
            canonical: CameraIntrinsics { fx: 1000.0, fy: 1000.0, cx: 159.5, cy: 159.5, width: 320, height: 320 },
            canonical_distance: 0.6,
            margin: 0.25,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        self.sensed.validate()?;
        self.canonical.validate()?;
        if !(self.canonical_distance > 0.0) || !self.canonical_distance.is_finite() {
            return Err(Error::Validation("canonical distance must be positive".into()));
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::Validation("patch margin must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Intensity of non-eye skin and of pixels the face does not cover.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shading {
    pub skin: f64,
    pub background: f64,
}

impl Default for Shading {
    fn default() -> Self {
        Self { skin: 0.55, background: 0.0 }
    }
}

/// Bounding box `(x0, y0, x1, y1)` of an eye annotation on the mean shape's
/// xy plane. Eye appearances are stretched over this box.
pub fn eye_uv_box(model: &MorphableModel, eye: &str) -> Result<[f64; 4]> {
    let idx = model.annotation(eye)?;
    let mean = model.mean_shape();
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for &i in idx {
        b[0] = b[0].min(mean[3 * i]);
        b[1] = b[1].min(mean[3 * i + 1]);
        b[2] = b[2].max(mean[3 * i]);
        b[3] = b[3].max(mean[3 * i + 1]);
    }
    if !(b[2] > b[0] && b[3] > b[1]) {
        return Err(Error::DegenerateGeometry(alloc::format!("{eye} annotation spans no area")));
    }
    Ok(b)
}

const FOOTPRINT_SAMPLES: usize = 8;

/// Per-vertex grayscale texture: skin everywhere, with each eye appearance
/// mapped onto its eye box. Each vertex takes the mean over a square
/// footprint about the size of the local mesh spacing, so vertex values vary
/// continuously with the appearance rather than point-sampling it.
pub fn face_texture(model: &MorphableModel, left: &Image, right: &Image, skin: f64) -> Result<Vec<f64>> {
    let boxes = [(eye_uv_box(model, LEFT_EYE)?, left), (eye_uv_box(model, RIGHT_EYE)?, right)];
    let mean = model.mean_shape();
    let n = model.n_vertices();
    let mut area = 0.0;
    for t in model.triangles() {
        let p = |i: usize| Vec3::new(mean[3 * i], mean[3 * i + 1], 0.0);
        area += crate::model::triangle_area(&p(t[0]), &p(t[1]), &p(t[2]));
    }
    let half = 0.5 * (2.0 * area / model.triangles().len() as f64).sqrt();

    let lookup = |x: f64, y: f64| -> f64 {
        for (b, img) in &boxes {
            if x >= b[0] && x <= b[2] && y >= b[1] && y <= b[3] {
                let u = (x - b[0]) / (b[2] - b[0]) * img.width() as f64 - 0.5;
                let v = (y - b[1]) / (b[3] - b[1]) * img.height() as f64 - 0.5;
                let u = u.clamp(0.0, (img.width() - 1) as f64);
                let v = v.clamp(0.0, (img.height() - 1) as f64);
                return img.bilinear(u, v).unwrap_or(skin);
            }
        }
        skin
    };

    let s = FOOTPRINT_SAMPLES as f64;
    Ok((0..n)
        .map(|i| {
            let (x, y) = (mean[3 * i], mean[3 * i + 1]);
            let mut sum = 0.0;
            for a in 0..FOOTPRINT_SAMPLES {
                for b in 0..FOOTPRINT_SAMPLES {
                    let dx = ((a as f64 + 0.5) / s * 2.0 - 1.0) * half;
                    let dy = ((b as f64 + 0.5) / s * 2.0 - 1.0) * half;
                    sum += lookup(x + dx, y + dy);
                }
            }
            sum / (s * s)
        })
        .collect())
}

/// Renders the textured face at a pose as the sensing camera sees it.
/// Uncovered pixels get the background intensity.
pub fn render_sensed(
    model: &MorphableModel,
    coeffs: &[f64],
    rotation: &Mat3,
    translation: &Vec3,
    texture: &[f64],
    camera: &CameraIntrinsics,
    background: f64,
) -> Result<Image> {
    if texture.len() != model.n_vertices() {
        return Err(Error::invalid("one texture value per vertex required"));
    }
    let shape = model.synthesize(coeffs)?.transformed(rotation, translation);
    let tex: Vec<Option<f64>> = texture.iter().map(|&t| Some(t)).collect();
    let mut img = render_mesh(&shape, model.triangles(), &tex, camera)?;
    for y in 0..img.height() {
        for x in 0..img.width() {
            if img.is_background(x, y) {
                img.set(x, y, background);
            }
        }
    }
    Ok(img)
}

/// Features of both eyes for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameFeatures {
    pub left: EyeFeature,
    pub right: EyeFeature,
}

/// Transfers the sensed image onto the fitted mesh, re-renders it frontally
/// and reduces both eye regions to features. Returns the canonical render too.
pub fn extract_features(
    model: &MorphableModel,
    fit: &FitResult,
    sensed: &Image,
    settings: &RenderSettings,
) -> Result<(FrameFeatures, Image)> {
    let posed = model.synthesize(&fit.coeffs)?.transformed(&fit.rotation, &fit.translation);
    let texture = sample_texture(&posed, sensed, &settings.sensed);
    let canonical = normalize_pose(fit, model, settings.canonical_distance)?;
    let image = render_mesh(&canonical, model.triangles(), &texture, &settings.canonical)?;
    let feature = |eye: &str| -> Result<EyeFeature> {
        let idx = model.annotation(eye)?;
        let patch = extract_eye_patch(&image, &canonical, idx, &settings.canonical, settings.margin)?;
        if patch.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Extraction(alloc::format!("{eye} patch has untextured pixels")));
        }
        downsample_to_feature(&patch)
    };
    Ok((FrameFeatures { left: feature(LEFT_EYE)?, right: feature(RIGHT_EYE)? }, image))
}
