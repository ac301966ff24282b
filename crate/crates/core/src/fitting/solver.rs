//! One outer iteration: freeze matches and weights, then run a single
//! block-coordinate sweep over (R, t), the shape coefficients and Z.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};

use super::energy::{energy_with, match_residuals, Correspondence};
use super::rotation::{orthonormalize, small_angle_rotation};
use super::{FitConfig, FitProblem, FitState};
use crate::{Error, Mat3, Result, Vec3};

const MAX_BACKTRACKS: usize = 12;

pub fn solve_iteration(state: &FitState, problem: &FitProblem<'_>, config: &FitConfig) -> Result<FitState> {
    let corr = match_residuals(
        &state.z,
        problem.target.index(),
        problem.target.cloud().normals(),
        state.threshold,
        config.kernel,
        config.point_weight,
    )?;
    if corr.iter().all(Correspondence::is_rejected) {
        return Err(Error::NoCorrespondence { iteration: state.iteration });
    }
    let mut next = state.clone();
    block_sweep(&mut next, problem, &corr)?;
    next.iteration += 1;
    let e = energy_with(&next, problem, &corr);
    if !e.total.is_finite() {
        return Err(Error::numerical(next.iteration, "objective is not finite"));
    }
    next.energy_history.push(e.total);
    Ok(next)
}

/// Pose, then coefficients, then Z, all against frozen matches.
///
/// The pose and coefficient blocks minimize over their own variables and `Z`
/// together; `Z` enters each point's cost quadratically and is eliminated in
/// closed form (see [`PointMetric`]). The pose block falls back to the
/// current pose if no trial step lowers its cost, so the objective never
/// increases across a sweep.
pub fn block_sweep(state: &mut FitState, problem: &FitProblem<'_>, corr: &[Correspondence]) -> Result<()> {
    if corr.len() != state.z.len() {
        return Err(Error::invalid("correspondence count differs from source point count"));
    }
    rigid_update(state, problem, corr)?;
    if state.omega2 > 0.0 {
        coefficient_update(state, problem, corr);
    }
    z_update(state, problem, corr);
    Ok(())
}

/// `min_z (z−c)ᵀW(z−c) + ω‖z−s‖²` for `W = w_pl nnᵀ + w_pt I` equals
/// `(c−s)ᵀ M (c−s)` with `M = α nnᵀ + β (I − nnᵀ)`.
#[derive(Debug, Clone, Copy)]
struct PointMetric {
    n: Vec3,
    alpha: f64,
    beta: f64,
}

impl PointMetric {
    fn new(c: &Correspondence, omega: f64) -> Self {
        let series = |w: f64| if w + omega > 0.0 { w * omega / (w + omega) } else { 0.0 };
        Self { n: c.normal, alpha: series(c.plane_weight + c.point_weight), beta: series(c.point_weight) }
    }

    fn apply(&self, v: &Vec3) -> Vec3 {
        let vn = self.n * self.n.dot(v);
        vn * self.alpha + (v - vn) * self.beta
    }

    fn matrix(&self) -> Mat3 {
        let nn = self.n * self.n.transpose();
        nn * self.alpha + (Mat3::identity() - nn) * self.beta
    }

    fn quad(&self, v: &Vec3) -> f64 {
        v.dot(&self.apply(v))
    }
}

/// Pose block with `Z` eliminated. The rigidity and model springs share the
/// pose, so they merge into one spring of stiffness `ω₁+ω₂` anchored at the
/// weighted mean `s_i` of `x_i` and `m_i + P_i d`; the cost is then
/// `Σ (c_i − R s_i − t)ᵀ M_i (c_i − R s_i − t)` up to a pose-free constant.
struct RigidBlock<'s> {
    targets: Vec<Vec3>,
    anchors: Vec<Vec3>,
    metrics: Vec<PointMetric>,
    _z: core::marker::PhantomData<&'s ()>,
}

impl RigidBlock<'_> {
    fn cost(&self, r: &Mat3, t: &Vec3) -> f64 {
        let mut sum = 0.0;
        for ((c, s), m) in self.targets.iter().zip(&self.anchors).zip(&self.metrics) {
            sum += m.quad(&(c - (r * s + t)));
        }
        sum
    }

    /// Best translation for a fixed rotation, if the metrics determine one.
    fn translation_for(&self, r: &Mat3) -> Option<Vec3> {
        let mut a = Mat3::zeros();
        let mut b = Vec3::zeros();
        for ((c, s), m) in self.targets.iter().zip(&self.anchors).zip(&self.metrics) {
            a += m.matrix();
            b += m.apply(&(c - r * s));
        }
        a.cholesky().map(|ch| ch.solve(&b))
    }
}

fn rigid_update(state: &mut FitState, problem: &FitProblem<'_>, corr: &[Correspondence]) -> Result<()> {
    let (w1, w2) = (state.omega1, state.omega2);
    let omega = w1 + w2;
    if !(omega > 0.0) {
        return Ok(());
    }
    let anchors: Vec<Vec3> = if w2 > 0.0 {
        problem
            .model_points(&state.coeffs)
            .iter()
            .zip(&problem.source)
            .map(|(q, x)| (x * w1 + q * w2) / omega)
            .collect()
    } else {
        problem.source.clone()
    };
    let block = RigidBlock {
        targets: corr.iter().map(|c| c.target_point).collect(),
        anchors,
        metrics: corr.iter().map(|c| PointMetric::new(c, omega)).collect(),
        _z: core::marker::PhantomData,
    };

    // Linearized step about the current pose: R̃ (R s + t) + t̃.
    let mut h = Matrix6::<f64>::zeros();
    let mut g = Vector6::<f64>::zeros();
    for ((c, s), m) in block.targets.iter().zip(&block.anchors).zip(&block.metrics) {
        if m.alpha == 0.0 && m.beta == 0.0 {
            continue;
        }
        let p = state.rotation * s + state.translation;
        let r = c - p;
        // ∂(R̃p)/∂(a, b, c)
        let j = Mat3::new(p.y, p.z, 0.0, -p.x, 0.0, p.z, 0.0, -p.x, -p.y);
        let mut a = nalgebra::Matrix3x6::<f64>::zeros();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
        a.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
        let ma = m.matrix() * a;
        h += a.transpose() * ma;
        g += ma.transpose() * r;
    }

    let mut best_r = state.rotation;
    let mut best_t = state.translation;
    let mut best_cost = block.cost(&best_r, &best_t);
    if let Some(t) = block.translation_for(&state.rotation) {
        let cost = block.cost(&state.rotation, &t);
        if cost <= best_cost {
            best_t = t;
            best_cost = cost;
        }
    }

    if let Some(chol) = h.cholesky() {
        let step = chol.solve(&g);
        let mut scale = 1.0;
        for _ in 0..MAX_BACKTRACKS {
            let update = small_angle_rotation(step[0] * scale, step[1] * scale, step[2] * scale);
            if let Ok(r) = orthonormalize(&(update * state.rotation)) {
                if let Some(t) = block.translation_for(&r) {
                    let cost = block.cost(&r, &t);
                    if cost.is_finite() && cost <= best_cost {
                        best_r = r;
                        best_t = t;
                        break;
                    }
                }
            }
            scale *= 0.5;
        }
    }
    state.rotation = best_r;
    state.translation = best_t;
    Ok(())
}

/// Coefficient block with `Z` eliminated. The match and rigidity springs on
/// each point combine into one anchored at `a_i`; in series with the model
/// spring this leaves `Σ (q_i(d) − a_i)ᵀ N_i (q_i(d) − a_i)`, quadratic in `d`.
fn coefficient_update(state: &mut FitState, problem: &FitProblem<'_>, corr: &[Correspondence]) {
    let k = problem.model.n_modes();
    let (w1, w2) = (state.omega1, state.omega2);
    let r = state.rotation;
    let rt = r.transpose();
    let mut lhs = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    for (i, c) in corr.iter().enumerate() {
        let p = r * problem.source[i] + state.translation;
        // Parallel springs towards c (W) and p (ω₁ I), per eigen-direction.
        let n = c.normal;
        let (sa, sb) = (c.plane_weight + c.point_weight + w1, c.point_weight + w1);
        if sa == 0.0 && sb == 0.0 {
            continue;
        }
        let pull = |w: f64, cv: f64, pv: f64, s: f64| if s > 0.0 { (w * cv + w1 * pv) / s } else { pv };
        let (cn, pn) = (n.dot(&c.target_point), n.dot(&p));
        let anchor_n = pull(c.plane_weight + c.point_weight, cn, pn, sa);
        let ct = c.target_point - n * cn;
        let pt = p - n * pn;
        let anchor_t = if sb > 0.0 { (ct * c.point_weight + pt * w1) / sb } else { pt };
        let anchor = n * anchor_n + anchor_t;
        let (alpha, beta) = (sa * w2 / (sa + w2), sb * w2 / (sb + w2));

        // In the model frame: N' = Rᵀ N R, target u = Rᵀ(a − t) − m.
        let nm = rt * n;
        let u = rt * (anchor - state.translation) - problem.sample_means[i];
        let block = problem.sample_bases.fixed_rows::<3>(3 * i);
        let ptn = block.tr_mul(&nm);
        lhs += block.tr_mul(&block) * beta + &ptn * ptn.transpose() * (alpha - beta);
        let un = nm * nm.dot(&u);
        let nu = un * alpha + (u - un) * beta;
        rhs += block.tr_mul(&nu);
    }
    if let Some(chol) = lhs.clone().cholesky() {
        state.coeffs = chol.solve(&rhs).as_slice().to_vec();
    } else if let Ok(pinv) = lhs.pseudo_inverse(1e-12) {
        state.coeffs = (pinv * rhs).as_slice().to_vec();
    }
}

/// Closed-form per-point minimizer of the four quadratic terms.
fn z_update(state: &mut FitState, problem: &FitProblem<'_>, corr: &[Correspondence]) {
    let model_points = problem.model_points(&state.coeffs);
    let (w1, w2) = (state.omega1, state.omega2);
    for (i, z) in state.z.iter_mut().enumerate() {
        let c = &corr[i];
        let p = state.rotation * problem.source[i] + state.translation;
        let q = state.rotation * model_points[i] + state.translation;
        *z = solve_point(z, c, &p, &q, w1, w2);
    }
}

/// Minimizes `w_pl (nᵀ(z−c))² + w_pt‖z−c‖² + ω₁‖z−p‖² + ω₂‖z−q‖²`.
///
/// The system matrix is `w_pl n nᵀ + s I` with `s = w_pt + ω₁ + ω₂`, inverted
/// with Sherman–Morrison. When `s = 0` only the plane term remains and `z` is
/// projected onto the target plane.
pub(crate) fn solve_point(z: &Vec3, c: &Correspondence, p: &Vec3, q: &Vec3, w1: f64, w2: f64) -> Vec3 {
    let n = c.normal;
    let wpl = c.plane_weight;
    let s = c.point_weight + w1 + w2;
    if s <= 0.0 {
        if wpl > 0.0 {
            return z - n * n.dot(&(z - c.target_point));
        }
        return *z;
    }
    let b = n * (wpl * n.dot(&c.target_point)) + c.target_point * c.point_weight + p * w1 + q * w2;
    (b - n * (wpl * n.dot(&b) / (s + wpl))) / s
}
