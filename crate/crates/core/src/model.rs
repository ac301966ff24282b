//! Linear morphable shape model: `shape(θ) = mean + basis · θ`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pointcloud::PointSet;
use crate::{Error, Mat3, Result, Vec3};

pub const LEFT_EYE: &str = "left_eye";
pub const RIGHT_EYE: &str = "right_eye";
pub const LANDMARKS: &str = "landmarks";

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Mean mesh plus an orthonormal basis of vertex displacement fields.
///
/// Coordinates are stacked `[x0, y0, z0, x1, ...]`, so the basis has `3n` rows
/// and one column per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    mean_shape: DVector<f64>,
    basis: DMatrix<f64>,
    basis_scales: Vec<f64>,
    triangles: Vec<[usize; 3]>,
    annotations: BTreeMap<String, Vec<usize>>,
}

impl MorphableModel {
    /// Builds a model and checks every invariant.
    pub fn new(
        mean_shape: DVector<f64>,
        basis: DMatrix<f64>,
        basis_scales: Vec<f64>,
        triangles: Vec<[usize; 3]>,
        annotations: BTreeMap<String, Vec<usize>>,
    ) -> Result<Self> {
        let model = Self { mean_shape, basis, basis_scales, triangles, annotations };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.mean_shape.len();
        if !len.is_multiple_of(3) {
            return Err(Error::Validation(format!("mean_shape length {len} is not a multiple of 3")));
        }
        let n = len / 3;
        if n < 4 {
            return Err(Error::Validation(format!("model needs n >= 4 vertices (got {n})")));
        }
        if self.mean_shape.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("mean_shape has non-finite entries".into()));
        }
        let k = self.basis.ncols();
        if k == 0 {
            return Err(Error::Validation("model needs K >= 1 basis columns".into()));
        }
        if self.basis.nrows() != len {
            return Err(Error::Validation(format!("basis has {} rows, expected 3n = {len}", self.basis.nrows())));
        }
        if self.basis_scales.len() != k {
            return Err(Error::Validation(format!("{} basis_scales for K = {k}", self.basis_scales.len())));
        }
        if let Some(s) = self.basis_scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Validation(format!("basis_scales must be strictly positive (found {s})")));
        }
        let gram = self.basis.tr_mul(&self.basis);
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in 0..k {
                let target = if i == j { 1.0 } else { 0.0 };
                let dev = (gram[(i, j)] - target).abs();
                if !dev.is_finite() {
                    worst = f64::INFINITY;
                } else {
                    worst = worst.max(dev);
                }
            }
        }
        if worst > ORTHONORMAL_TOL {
            return Err(Error::Validation(format!(
                "basis columns are not orthonormal (max Gram deviation {worst:.3e})"
            )));
        }
        if self.triangles.is_empty() {
            return Err(Error::Validation("triangle list is empty".into()));
        }
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::Validation(format!("triangle {t:?} indexes past n = {n}")));
        }
        for name in [LEFT_EYE, RIGHT_EYE, LANDMARKS] {
            if !self.annotations.contains_key(name) {
                return Err(Error::Validation(format!("missing annotation `{name}`")));
            }
        }
        for (name, idx) in &self.annotations {
            if let Some(i) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::Validation(format!("annotation `{name}` index {i} >= n = {n}")));
            }
        }
        Ok(())
    }

    pub fn n_vertices(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn n_modes(&self) -> usize {
        self.basis.ncols()
    }

    pub fn mean_shape(&self) -> &DVector<f64> {
        &self.mean_shape
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn basis_scales(&self) -> &[f64] {
        &self.basis_scales
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn annotations(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.annotations
    }

    pub fn annotation(&self, name: &str) -> Result<&[usize]> {
        self.annotations
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("model has no annotation `{name}`")))
    }

    fn check_coeffs(&self, coeffs: &[f64]) -> Result<()> {
        if coeffs.len() != self.n_modes() {
            return Err(Error::invalid(format!(
                "{} coefficients for a model with K = {}",
                coeffs.len(),
                self.n_modes()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("coefficients must be finite"));
        }
        Ok(())
    }

    /// `mean_shape + basis · coeffs`, reshaped into vertices.
    pub fn synthesize(&self, coeffs: &[f64]) -> Result<Shape> {
        self.check_coeffs(coeffs)?;
        let stacked = &self.mean_shape + &self.basis * DVector::from_column_slice(coeffs);
        Ok(Shape::from_stacked(stacked.as_slice()))
    }

    /// Least-squares coefficients of `shape`; with an orthonormal basis this is
    /// `basisᵀ · (shape − mean)`.
    pub fn project_to_subspace(&self, shape: &Shape) -> Result<Vec<f64>> {
        if shape.len() != self.n_vertices() {
            return Err(Error::invalid(format!("shape has {} vertices, model has {}", shape.len(), self.n_vertices())));
        }
        let diff = DVector::from_vec(shape.stacked()) - &self.mean_shape;
        Ok(self.basis.tr_mul(&diff).as_slice().to_vec())
    }

    /// Area-weighted random surface samples of `synthesize(coeffs)`, each
    /// remembering its triangle and barycentric coordinates.
    pub fn sample_surface_barycentric(&self, coeffs: &[f64], count: usize, seed: u64) -> Result<Vec<SurfaceSample>> {
        if count == 0 {
            return Err(Error::invalid("sample count must be positive"));
        }
        let shape = self.synthesize(coeffs)?;
        let v = shape.vertices();
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for t in &self.triangles {
            total += triangle_area(&v[t[0]], &v[t[1]], &v[t[2]]);
            cumulative.push(total);
        }
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateGeometry("mesh has zero total area".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let r = rng.random::<f64>() * total;
            let tri = cumulative.partition_point(|&c| c <= r).min(cumulative.len() - 1);
            let s = rng.random::<f64>().sqrt();
            let r2 = rng.random::<f64>();
            let bary = [1.0 - s, s * (1.0 - r2), s * r2];
            samples.push(SurfaceSample { triangle: tri, barycentric: bary });
        }
        Ok(samples)
    }

    /// `count` surface points of `synthesize(coeffs)`; deterministic per seed.
    pub fn sample_surface(&self, coeffs: &[f64], count: usize, seed: u64) -> Result<PointSet> {
        let samples = self.sample_surface_barycentric(coeffs, count, seed)?;
        let shape = self.synthesize(coeffs)?;
        PointSet::new(samples.iter().map(|s| shape.surface_point(&self.triangles, s)).collect())
    }

    /// Mean position and 3×K basis block of a surface sample: the barycentric
    /// blend of its triangle's vertex rows.
    pub fn sample_basis(&self, sample: &SurfaceSample) -> (Vec3, DMatrix<f64>) {
        let tri = self.triangles[sample.triangle];
        let k = self.n_modes();
        let mut mean = Vec3::zeros();
        let mut block = DMatrix::zeros(3, k);
        for (corner, &w) in tri.iter().zip(sample.barycentric.iter()) {
            for axis in 0..3 {
                let row = 3 * corner + axis;
                mean[axis] += w * self.mean_shape[row];
                for c in 0..k {
                    block[(axis, c)] += w * self.basis[(row, c)];
                }
            }
        }
        (mean, block)
    }
}

/// A point on the mesh given by triangle index and barycentric weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub triangle: usize,
    pub barycentric: [f64; 3],
}

/// Vertex positions sharing a model's triangulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    vertices: Vec<Vec3>,
}

impl Shape {
    pub fn new(vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.iter().any(|v| !crate::pointcloud::is_finite(v)) {
            return Err(Error::invalid("shape has non-finite vertices"));
        }
        Ok(Self { vertices })
    }

    fn from_stacked(stacked: &[f64]) -> Self {
        Self { vertices: stacked.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect() }
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn stacked(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
    }

    pub fn transformed(&self, rotation: &Mat3, translation: &Vec3) -> Shape {
        Shape { vertices: self.vertices.iter().map(|v| rotation * v + translation).collect() }
    }

    pub fn surface_point(&self, triangles: &[[usize; 3]], sample: &SurfaceSample) -> Vec3 {
        let t = triangles[sample.triangle];
        let [a, b, c] = sample.barycentric;
        self.vertices[t[0]] * a + self.vertices[t[1]] * b + self.vertices[t[2]] * c
    }
}

pub(crate) fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}
