use alloc::vec::Vec;

use super::robust::RobustKernel;
use super::{FitConfig, FitProblem, FitState};
use crate::pointcloud::KdTree;
use crate::{Error, Result, Vec3};

/// One source point's match against the target scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub target_index: usize,
    pub target_point: Vec3,
    pub normal: Vec3,
    /// Signed distance `nᵀ(z − c)` to the target tangent plane.
    pub plane_residual: f64,
    /// Euclidean distance `‖z − c‖`.
    pub point_residual: f64,
    pub plane_weight: f64,
    pub point_weight: f64,
}

impl Correspondence {
    pub fn is_rejected(&self) -> bool {
        self.plane_weight == 0.0 && self.point_weight == 0.0
    }
}

/// Closest target point, residuals and robust weights for every point of `z`.
/// The point-to-point weight is further scaled by `point_scale`.
pub fn match_residuals(
    z: &[Vec3],
    index: &KdTree,
    normals: Option<&[Vec3]>,
    threshold: f64,
    kernel: RobustKernel,
    point_scale: f64,
) -> Result<Vec<Correspondence>> {
    let normals = normals.ok_or_else(|| Error::invalid("target point cloud has no normals"))?;
    if normals.len() != index.len() {
        return Err(Error::invalid("normal count differs from indexed point count"));
    }
    z.iter()
        .map(|zi| {
            let nb = index.nearest(zi)?;
            let normal = normals[nb.index];
            let diff = zi - nb.point;
            let plane_residual = normal.dot(&diff);
            let point_residual = nb.distance;
            Ok(Correspondence {
                target_index: nb.index,
                target_point: nb.point,
                normal,
                plane_residual,
                point_residual,
                plane_weight: kernel.weight(plane_residual.abs(), threshold)?,
                point_weight: point_scale * kernel.weight(point_residual, threshold)?,
            })
        })
        .collect()
}

/// The three objective terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyTerms {
    pub matching: f64,
    pub rigid: f64,
    pub model: f64,
    pub total: f64,
}

/// Objective value of `state`.
///
/// With `frozen` correspondences the matched target points, normals and
/// robust weights are taken as given and only the residuals are re-evaluated
/// at the current `z`. Without them, matches are recomputed at the state's
/// robust threshold.
pub fn energy(
    state: &FitState,
    problem: &FitProblem<'_>,
    config: &FitConfig,
    frozen: Option<&[Correspondence]>,
) -> Result<EnergyTerms> {
    let fresh;
    let corr = match frozen {
        Some(c) => c,
        None => {
            fresh = match_residuals(
                &state.z,
                problem.target.index(),
                problem.target.cloud().normals(),
                state.threshold,
                config.kernel,
                config.point_weight,
            )?;
            &fresh
        }
    };
    if corr.len() != state.z.len() {
        return Err(Error::invalid("correspondence count differs from source point count"));
    }
    Ok(energy_with(state, problem, corr))
}

pub(crate) fn energy_with(state: &FitState, problem: &FitProblem<'_>, corr: &[Correspondence]) -> EnergyTerms {
    let mut matching = 0.0;
    for (z, c) in state.z.iter().zip(corr) {
        let diff = z - c.target_point;
        let plane = c.normal.dot(&diff);
        matching += c.plane_weight * plane * plane + c.point_weight * diff.norm_squared();
    }
    let (rigid, model) = deformation_terms(state, problem);
    EnergyTerms { matching, rigid, model, total: matching + state.omega1 * rigid + state.omega2 * model }
}

/// Rigidity and model-subspace terms.
pub(crate) fn deformation_terms(state: &FitState, problem: &FitProblem<'_>) -> (f64, f64) {
    let model_points = problem.model_points(&state.coeffs);
    let mut rigid = 0.0;
    let mut model = 0.0;
    for ((z, x), q) in state.z.iter().zip(&problem.source).zip(&model_points) {
        rigid += (z - (state.rotation * x + state.translation)).norm_squared();
        model += (z - (state.rotation * q + state.translation)).norm_squared();
    }
    (rigid, model)
}
