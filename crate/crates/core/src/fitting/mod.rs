//! Robust registration of a morphable model to a depth scan.
//!
//! The source cloud `X` is sampled from the model surface and deformed into
//! `Z`, which is pulled towards the scan by point-to-plane and point-to-point
//! matching terms, towards a rigid copy of `X` by a rigidity term and towards
//! the model subspace by a model term. Each outer iteration freezes the
//! closest-point matches and robust weights, then updates the pose, the shape
//! coefficients and `Z` in turn. The pose and coefficient blocks minimize
//! jointly with `Z`, which is eliminated in closed form per point.

mod energy;
pub mod robust;
pub mod rotation;
mod schedule;
mod solver;

use alloc::vec::Vec;

use nalgebra::DMatrix;

pub use energy::{energy, match_residuals, Correspondence, EnergyTerms};
pub use robust::{tukey_weight, RobustKernel};
pub use rotation::{orthonormality_residual, orthonormalize, small_angle_rotation};
pub use schedule::{detect_convergence, detect_stage_transition, update_weights};
pub use solver::{block_sweep, solve_iteration};

use crate::model::{MorphableModel, SurfaceSample};
use crate::pointcloud::{estimate_normals, remove_statistical_outliers, KdTree, OutlierFilter, PointSet};
use crate::{Error, Mat3, Result, Vec3};

/// Robust threshold used for the final stages, meters.
pub const DEFAULT_TUKEY_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub omega1_init: f64,
    pub omega1_final: f64,
    pub omega2_final: f64,
    /// Robust threshold `d_t` in meters.
    pub tukey_threshold: f64,
    /// Starting robust threshold. Each iteration multiplies it by
    /// `threshold_decay` until it reaches `tukey_threshold`. Set it equal to
    /// `tukey_threshold` to disable annealing.
    pub threshold_init: f64,
    pub threshold_decay: f64,
    pub kernel: RobustKernel,
    /// Weight of the point-to-point matching term relative to the
    /// point-to-plane term. Matching against discrete scan samples makes the
    /// point term resist sliding along the surface, which stalls convergence
    /// when it is weighted fully.
    pub point_weight: f64,
    pub ramp_iters: usize,
    pub stage_tol: f64,
    pub conv_tol: f64,
    pub window: usize,
    pub max_iters: usize,
    pub source_samples: usize,
    pub sample_seed: u64,
    /// `false` runs every iteration at the final weights.
    pub adaptive: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            omega1_init: 10.0,
            omega1_final: 0.001,
            omega2_final: 1.0,
            tukey_threshold: DEFAULT_TUKEY_THRESHOLD,
            threshold_init: 0.08,
            threshold_decay: 0.8,
            kernel: RobustKernel::Tukey,
            point_weight: 0.003,
            ramp_iters: 10,
            stage_tol: 1e-3,
            conv_tol: 1e-5,
            window: 5,
            max_iters: 200,
            source_samples: 2000,
            sample_seed: 0,
            adaptive: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.omega1_init) || !nonneg(self.omega1_final) || !nonneg(self.omega2_final) {
            return Err(Error::Validation("fit weights must be finite and nonnegative".into()));
        }
        if self.omega1_final > self.omega1_init {
            return Err(Error::Validation("omega1_final must not exceed omega1_init".into()));
        }
        if !nonneg(self.point_weight) {
            return Err(Error::Validation("point_weight must be finite and nonnegative".into()));
        }
        if !(self.tukey_threshold > 0.0) || !self.tukey_threshold.is_finite() {
            return Err(Error::Validation("tukey_threshold must be positive".into()));
        }
        if !(self.threshold_init >= self.tukey_threshold) || !self.threshold_init.is_finite() {
            return Err(Error::Validation("threshold_init must be >= tukey_threshold".into()));
        }
        if !(self.threshold_decay > 0.0 && self.threshold_decay < 1.0) {
            return Err(Error::Validation("threshold_decay must lie in (0, 1)".into()));
        }
        if !(self.stage_tol > 0.0) || !(self.conv_tol > 0.0) {
            return Err(Error::Validation("tolerances must be positive".into()));
        }
        if self.ramp_iters == 0 || self.max_iters == 0 || self.window == 0 {
            return Err(Error::Validation("ramp_iters, max_iters and window must be positive".into()));
        }
        if self.source_samples == 0 {
            return Err(Error::Validation("source_samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    RigidOnly,
    Ramp,
    Joint,
}

/// Evolving registration state.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    /// Deformed source points.
    pub z: Vec<Vec3>,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub coeffs: Vec<f64>,
    pub omega1: f64,
    pub omega2: f64,
    pub stage: Stage,
    /// Ramp step `j` used for the next Ramp-stage iteration (1-based).
    pub ramp_step: usize,
    pub threshold: f64,
    pub iteration: usize,
    pub energy_history: Vec<f64>,
    /// Start of the history segment inspected by the stage and convergence tests.
    pub segment_start: usize,
}

impl FitState {
    /// State with `z = R x + t` for every source sample.
    pub fn initial(problem: &FitProblem<'_>, init: &FitInit, config: &FitConfig) -> Self {
        let stage = if config.adaptive { Stage::RigidOnly } else { Stage::Joint };
        Self {
            z: problem.source.iter().map(|x| init.rotation * x + init.translation).collect(),
            rotation: init.rotation,
            translation: init.translation,
            coeffs: init.coeffs.clone(),
            omega1: config.omega1_init,
            omega2: 0.0,
            stage,
            ramp_step: 0,
            threshold: config.threshold_init,
            iteration: 0,
            energy_history: Vec::new(),
            segment_start: 0,
        }
    }

    #[cfg(test)]
    pub(crate) fn blank(k: usize) -> Self {
        Self {
            z: Vec::new(),
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            coeffs: alloc::vec![0.0; k],
            omega1: 0.0,
            omega2: 0.0,
            stage: Stage::RigidOnly,
            ramp_step: 0,
            threshold: DEFAULT_TUKEY_THRESHOLD,
            iteration: 0,
            energy_history: Vec::new(),
            segment_start: 0,
        }
    }

    fn segment(&self) -> &[f64] {
        &self.energy_history[self.segment_start..]
    }
}

/// Target scan with normals and its nearest-neighbor index.
#[derive(Debug, Clone)]
pub struct TargetScan {
    cloud: PointSet,
    index: KdTree,
}

impl TargetScan {
    pub fn new(cloud: PointSet) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::invalid("target point cloud is empty"));
        }
        if cloud.normals().is_none() {
            return Err(Error::invalid("target point cloud has no normals"));
        }
        let index = KdTree::build(&cloud)?;
        Ok(Self { cloud, index })
    }

    /// Optionally drops isolated points, then keeps existing normals or
    /// estimates them from `k` neighbors oriented towards `viewpoint`.
    pub fn prepare(cloud: PointSet, k: usize, viewpoint: &Vec3, filter: Option<&OutlierFilter>) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::invalid("target point cloud is empty"));
        }
        let cloud = match filter {
            Some(f) => remove_statistical_outliers(&cloud, f)?.0,
            None => cloud,
        };
        if cloud.normals().is_some() {
            return Self::new(cloud);
        }
        Self::new(estimate_normals(&cloud, k.min(cloud.len()), viewpoint)?)
    }

    pub fn cloud(&self) -> &PointSet {
        &self.cloud
    }

    pub fn index(&self) -> &KdTree {
        &self.index
    }
}

/// Source samples and the per-sample model blocks they induce.
#[derive(Debug, Clone)]
pub struct FitProblem<'a> {
    pub model: &'a MorphableModel,
    pub target: &'a TargetScan,
    pub samples: Vec<SurfaceSample>,
    /// `x_i`: samples of the model surface at the initial coefficients.
    pub source: Vec<Vec3>,
    /// `m_i`: barycentric blend of the mean shape.
    pub sample_means: Vec<Vec3>,
    /// `P_i` stacked: rows `3i..3i+3` belong to sample `i`.
    pub sample_bases: DMatrix<f64>,
}

impl<'a> FitProblem<'a> {
    pub fn new(
        model: &'a MorphableModel,
        target: &'a TargetScan,
        coeffs: &[f64],
        count: usize,
        seed: u64,
    ) -> Result<Self> {
        let samples = model.sample_surface_barycentric(coeffs, count, seed)?;
        let k = model.n_modes();
        let mut sample_means = Vec::with_capacity(count);
        let mut sample_bases = DMatrix::zeros(3 * count, k);
        for (i, s) in samples.iter().enumerate() {
            let (m, p) = model.sample_basis(s);
            sample_means.push(m);
            sample_bases.view_mut((3 * i, 0), (3, k)).copy_from(&p);
        }
        let shape = model.synthesize(coeffs)?;
        let source = samples.iter().map(|s| shape.surface_point(model.triangles(), s)).collect();
        Ok(Self { model, target, samples, source, sample_means, sample_bases })
    }

    /// `m_i + P_i d` for every sample, model frame.
    pub fn model_points(&self, coeffs: &[f64]) -> Vec<Vec3> {
        let d = nalgebra::DVectorView::from_slice(coeffs, coeffs.len());
        let offsets = &self.sample_bases * d;
        self.sample_means
            .iter()
            .enumerate()
            .map(|(i, m)| m + Vec3::new(offsets[3 * i], offsets[3 * i + 1], offsets[3 * i + 2]))
            .collect()
    }
}

/// Starting pose and shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FitInit {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub coeffs: Vec<f64>,
}

impl FitInit {
    /// Identity rotation, zero coefficients, translation aligning the mean
    /// shape's sample centroid with the target centroid.
    pub fn centroid(model: &MorphableModel, target: &PointSet, config: &FitConfig) -> Result<Self> {
        let coeffs = alloc::vec![0.0; model.n_modes()];
        let target_c = target.centroid().ok_or_else(|| Error::invalid("target point cloud is empty"))?;
        let samples = model.sample_surface(&coeffs, config.source_samples, config.sample_seed)?;
        let source_c = samples.centroid().expect("nonempty sample set");
        Ok(Self { rotation: Mat3::identity(), translation: target_c - source_c, coeffs })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub stage: Stage,
    pub omega1: f64,
    pub omega2: f64,
    pub threshold: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coeffs: Vec<f64>,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub converged: bool,
    pub iterations: usize,
    /// Iterations spent in RigidOnly, Ramp and Joint.
    pub stage_iterations: [usize; 3],
    pub entered_ramp: bool,
    pub final_energies: EnergyTerms,
    /// `‖z_i − C_Y(z_i)‖` at the final state.
    pub per_point_residuals: Vec<f64>,
    pub energy_history: Vec<f64>,
    pub log: Vec<IterationRecord>,
}

/// Runs the staged robust registration until convergence or `max_iters`.
pub fn fit(model: &MorphableModel, target: &TargetScan, init: &FitInit, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if init.coeffs.len() != model.n_modes() {
        return Err(Error::invalid("initial coefficient count differs from model K"));
    }
    if orthonormality_residual(&init.rotation) > 1e-6 || init.rotation.determinant() <= 0.0 {
        return Err(Error::invalid("initial rotation is not a proper rotation"));
    }
    if !crate::pointcloud::is_finite(&init.translation) {
        return Err(Error::invalid("initial translation is not finite"));
    }
    let problem = FitProblem::new(model, target, &init.coeffs, config.source_samples, config.sample_seed)?;
    let mut state = FitState::initial(&problem, init, config);
    let mut log = Vec::new();
    let mut stage_iterations = [0usize; 3];
    let mut entered_ramp = false;
    let mut converged = false;

    while state.iteration < config.max_iters {
        let (w1, w2) = update_weights(&state, config);
        state.omega1 = w1;
        state.omega2 = w2;
        let stage = state.stage;
        state = solve_iteration(&state, &problem, config)?;
        log.push(IterationRecord {
            iteration: state.iteration,
            stage,
            omega1: w1,
            omega2: w2,
            threshold: state.threshold,
            energy: *state.energy_history.last().expect("iteration appended energy"),
        });
        stage_iterations[stage as usize] += 1;

        if state.threshold > config.tukey_threshold {
            state.threshold = (state.threshold * config.threshold_decay).max(config.tukey_threshold);
            state.segment_start = state.energy_history.len();
            continue;
        }
        match state.stage {
            Stage::RigidOnly => {
                if detect_stage_transition(state.segment(), config.stage_tol, config.window) {
                    state.stage = Stage::Ramp;
                    state.ramp_step = 1;
                    entered_ramp = true;
                    state.segment_start = state.energy_history.len();
                }
            }
            Stage::Ramp => {
                if state.ramp_step >= config.ramp_iters {
                    state.stage = Stage::Joint;
                    state.segment_start = state.energy_history.len();
                } else {
                    state.ramp_step += 1;
                }
            }
            Stage::Joint => {
                if detect_convergence(state.segment(), config.conv_tol, config.window) {
                    converged = true;
                    break;
                }
            }
        }
    }

    let corr = match_residuals(
        &state.z,
        target.index(),
        target.cloud().normals(),
        state.threshold,
        config.kernel,
        config.point_weight,
    )?;
    let final_energies = energy(&state, &problem, config, Some(&corr))?;
    Ok(FitResult {
        coeffs: state.coeffs,
        rotation: state.rotation,
        translation: state.translation,
        converged,
        iterations: state.iteration,
        stage_iterations,
        entered_ramp,
        final_energies,
        per_point_residuals: corr.iter().map(|c| c.point_residual).collect(),
        energy_history: state.energy_history,
        log,
    })
}
