//! Pose normalization by re-rendering: pinhole projection, per-vertex texture
//! transfer, z-buffered rasterization, eye-patch cropping and 3×5 features.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::fitting::FitResult;
use crate::model::{MorphableModel, Shape};
use crate::pointcloud::CameraIntrinsics;
use crate::{Error, Result, Vec3};

/// Grayscale image, row-major, intensities in `[0, 1]`. Unrendered pixels
/// hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!("image buffer has {} entries, expected {width}x{height}", data.len())));
        }
        if data.iter().any(|v| !v.is_nan() && !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image intensities must lie in [0, 1]"));
        }
        Ok(Self { width, height, data })
    }

    pub fn background(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![f64::NAN; width * height] }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value.clamp(0.0, 1.0); width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Intensity at `(x, y)`, `None` for background.
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let v = self.data[y * self.width + x];
        if v.is_nan() {
            None
        } else {
            Some(v)
        }
    }

    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value.clamp(0.0, 1.0);
    }

    pub fn is_background(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x].is_nan()
    }

    /// Pixels `[x0, x1) × [y0, y1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Image> {
        if x0 >= x1 || y0 >= y1 || x1 > self.width || y1 > self.height {
            return Err(Error::invalid(format!(
                "crop [{x0},{x1})x[{y0},{y1}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity((x1 - x0) * (y1 - y0));
        for y in y0..y1 {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x1]);
        }
        Ok(Image { width: x1 - x0, height: y1 - y0, data })
    }

    /// Bilinear sample at continuous pixel coordinates; `None` outside the
    /// image or when a contributing pixel is background.
    pub fn bilinear(&self, u: f64, v: f64) -> Option<f64> {
        if !(u >= 0.0 && v >= 0.0) || u > (self.width - 1) as f64 || v > (self.height - 1) as f64 {
            return None;
        }
        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let mut acc = 0.0;
        for (x, y, w) in
            [(x0, y0, (1.0 - fx) * (1.0 - fy)), (x1, y0, fx * (1.0 - fy)), (x0, y1, (1.0 - fx) * fy), (x1, y1, fx * fy)]
        {
            if w == 0.0 {
                continue;
            }
            acc += w * self.get(x, y)?;
        }
        Some(acc)
    }
}

/// Luminance of an RGB triple in `[0, 1]`.
pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Pixel coordinates and depth of a camera-frame point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    /// False when the point lies on or behind the camera plane.
    pub in_front: bool,
}

pub fn project_point(p: &Vec3, intr: &CameraIntrinsics) -> Projection {
    if p.z > 0.0 {
        Projection { u: intr.fx * p.x / p.z + intr.cx, v: intr.fy * p.y / p.z + intr.cy, depth: p.z, in_front: true }
    } else {
        Projection { u: f64::NAN, v: f64::NAN, depth: p.z, in_front: false }
    }
}

pub fn project(points: &[Vec3], intr: &CameraIntrinsics) -> Vec<Projection> {
    points.iter().map(|p| project_point(p, intr)).collect()
}

/// Per-vertex intensity sampled bilinearly at each vertex's projection.
/// Vertices behind the camera or outside the image get `None`.
pub fn sample_texture(shape: &Shape, image: &Image, intr: &CameraIntrinsics) -> Vec<Option<f64>> {
    shape
        .vertices()
        .iter()
        .map(|v| {
            let p = project_point(v, intr);
            if !p.in_front {
                return None;
            }
            image.bilinear(p.u, p.v)
        })
        .collect()
}

/// Fitted shape placed at the canonical pose: identity rotation, translation
/// `(0, 0, distance)`.
pub fn normalize_pose(fit: &FitResult, model: &MorphableModel, distance: f64) -> Result<Shape> {
    if !fit.converged {
        return Err(Error::Precondition("pose normalization needs a converged fit".into()));
    }
    canonical_shape(model, &fit.coeffs, distance)
}

pub fn canonical_shape(model: &MorphableModel, coeffs: &[f64], distance: f64) -> Result<Shape> {
    Ok(model.synthesize(coeffs)?.transformed(&crate::Mat3::identity(), &Vec3::new(0.0, 0.0, distance)))
}

#[inline]
fn edge(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> f64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

/// Top-left fill convention so shared edges are covered exactly once.
#[inline]
fn is_top_left(ax: f64, ay: f64, bx: f64, by: f64) -> bool {
    (ay == by && bx < ax) || by < ay
}

/// Z-buffered rasterization of a triangle mesh with per-vertex intensities.
///
/// Pixel centers sit at integer coordinates. Intensities and depth are
/// interpolated perspective-correctly; the nearest covering triangle wins.
/// Triangles touching an untextured vertex or the camera plane are skipped.
pub fn render_mesh(
    shape: &Shape,
    triangles: &[[usize; 3]],
    intensities: &[Option<f64>],
    intr: &CameraIntrinsics,
) -> Result<Image> {
    if intensities.len() != shape.len() {
        return Err(Error::invalid("one intensity per vertex required"));
    }
    let (w, h) = (intr.width, intr.height);
    let mut image = Image::background(w, h);
    let mut zbuf = vec![f64::INFINITY; w * h];
    let proj = project(shape.vertices(), intr);

    for tri in triangles {
        let [i0, i1, i2] = *tri;
        let (Some(c0), Some(c1), Some(c2)) = (intensities[i0], intensities[i1], intensities[i2]) else {
            continue;
        };
        let (p0, mut p1, mut p2) = (proj[i0], proj[i1], proj[i2]);
        if !(p0.in_front && p1.in_front && p2.in_front) {
            continue;
        }
        let (c0, mut c1, mut c2) = (c0, c1, c2);
        let mut area = edge(p0.u, p0.v, p1.u, p1.v, p2.u, p2.v);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            core::mem::swap(&mut p1, &mut p2);
            core::mem::swap(&mut c1, &mut c2);
            area = -area;
        }
        let min_x = p0.u.min(p1.u).min(p2.u).ceil().max(0.0);
        let max_x = p0.u.max(p1.u).max(p2.u).floor().min((w - 1) as f64);
        let min_y = p0.v.min(p1.v).min(p2.v).ceil().max(0.0);
        let max_y = p0.v.max(p1.v).max(p2.v).floor().min((h - 1) as f64);
        if min_x > max_x || min_y > max_y {
            continue;
        }
        let tl12 = is_top_left(p1.u, p1.v, p2.u, p2.v);
        let tl20 = is_top_left(p2.u, p2.v, p0.u, p0.v);
        let tl01 = is_top_left(p0.u, p0.v, p1.u, p1.v);
        let (iz0, iz1, iz2) = (1.0 / p0.depth, 1.0 / p1.depth, 1.0 / p2.depth);
        for y in min_y as usize..=max_y as usize {
            let py = y as f64;
            for x in min_x as usize..=max_x as usize {
                let px = x as f64;
                let w0 = edge(p1.u, p1.v, p2.u, p2.v, px, py);
                let w1 = edge(p2.u, p2.v, p0.u, p0.v, px, py);
                let w2 = edge(p0.u, p0.v, p1.u, p1.v, px, py);
                let inside = |e: f64, tl: bool| e > 0.0 || (e == 0.0 && tl);
                if !(inside(w0, tl12) && inside(w1, tl20) && inside(w2, tl01)) {
                    continue;
                }
                let (b0, b1, b2) = (w0 / area, w1 / area, w2 / area);
                let inv_z = b0 * iz0 + b1 * iz1 + b2 * iz2;
                let z = 1.0 / inv_z;
                let idx = y * w + x;
                if z < zbuf[idx] {
                    zbuf[idx] = z;
                    let value = (b0 * c0 * iz0 + b1 * c1 * iz1 + b2 * c2 * iz2) * z;
                    image.data[idx] = value.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(image)
}

/// Axis-aligned pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Bounding box of the projected `eye` vertices grown by `margin` of its
/// width and height on each side.
pub fn eye_patch_box(shape: &Shape, eye: &[usize], intr: &CameraIntrinsics, margin: f64) -> Result<PixelBox> {
    if eye.is_empty() {
        return Err(Error::Extraction("eye annotation is empty".into()));
    }
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &i in eye {
        let v = shape.vertices().get(i).ok_or_else(|| Error::invalid(format!("eye vertex {i} out of range")))?;
        let p = project_point(v, intr);
        if !p.in_front {
            return Err(Error::Extraction("eye vertex behind the camera".into()));
        }
        lo = (lo.0.min(p.u), lo.1.min(p.v));
        hi = (hi.0.max(p.u), hi.1.max(p.v));
    }
    let (mw, mh) = ((hi.0 - lo.0) * margin, (hi.1 - lo.1) * margin);
    let (u0, v0, u1, v1) = (lo.0 - mw, lo.1 - mh, hi.0 + mw, hi.1 + mh);
    if u0 < 0.0 || v0 < 0.0 || u1 > intr.width as f64 || v1 > intr.height as f64 {
        return Err(Error::Extraction(format!(
            "eye region ({u0:.1},{v0:.1})-({u1:.1},{v1:.1}) leaves the {}x{} image",
            intr.width, intr.height
        )));
    }
    let b = PixelBox {
        x0: u0.floor() as usize,
        y0: v0.floor() as usize,
        x1: (u1.ceil() as usize).max(u0.floor() as usize + 1),
        y1: (v1.ceil() as usize).max(v0.floor() as usize + 1),
    };
    Ok(b)
}

/// Crops the eye region of a canonical render.
pub fn extract_eye_patch(
    image: &Image,
    shape_canonical: &Shape,
    eye: &[usize],
    intr: &CameraIntrinsics,
    margin: f64,
) -> Result<Image> {
    let b = eye_patch_box(shape_canonical, eye, intr, margin)?;
    if b.x1 > image.width() || b.y1 > image.height() {
        return Err(Error::Extraction("eye region leaves the image".into()));
    }
    image.crop(b.x0, b.y0, b.x1, b.y1)
}

pub const FEATURE_ROWS: usize = 3;
pub const FEATURE_COLS: usize = 5;
pub const FEATURE_LEN: usize = FEATURE_ROWS * FEATURE_COLS;

/// 15 intensities of a 3×5 downsampled eye patch, row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EyeFeature(pub [f64; FEATURE_LEN]);

impl EyeFeature {
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; FEATURE_LEN] =
            values.try_into().map_err(|_| Error::invalid(format!("eye feature needs {FEATURE_LEN} values")))?;
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("eye feature values must be finite"));
        }
        Ok(Self(arr))
    }

    pub fn values(&self) -> &[f64; FEATURE_LEN] {
        &self.0
    }

    pub fn distance(&self, other: &EyeFeature) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

/// Mean intensity of each cell of a 3×5 grid of near-equal rectangles.
/// Background pixels are ignored; an all-background cell yields 0.
pub fn cell_means(patch: &Image) -> Result<[f64; FEATURE_LEN]> {
    let (w, h) = (patch.width(), patch.height());
    if w < FEATURE_COLS || h < FEATURE_ROWS {
        return Err(Error::invalid(format!("patch {w}x{h} is smaller than {FEATURE_COLS}x{FEATURE_ROWS}")));
    }
    let mut out = [0.0; FEATURE_LEN];
    for r in 0..FEATURE_ROWS {
        let (y0, y1) = (r * h / FEATURE_ROWS, (r + 1) * h / FEATURE_ROWS);
        for c in 0..FEATURE_COLS {
            let (x0, x1) = (c * w / FEATURE_COLS, (c + 1) * w / FEATURE_COLS);
            let mut sum = 0.0;
            let mut count = 0usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    if let Some(v) = patch.get(x, y) {
                        sum += v;
                        count += 1;
                    }
                }
            }
            out[r * FEATURE_COLS + c] = if count > 0 { sum / count as f64 } else { 0.0 };
        }
    }
    Ok(out)
}

/// Cell means rescaled so the 15 values span `[0, 1]`. A constant patch maps
/// to all zeros.
pub fn downsample_to_feature(patch: &Image) -> Result<EyeFeature> {
    let mut values = cell_means(patch)?;
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 1e-12 {
        values = [0.0; FEATURE_LEN];
    } else {
        for v in &mut values {
            *v = (*v - lo) / span;
        }
    }
    Ok(EyeFeature(values))
}
