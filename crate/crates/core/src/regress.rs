//! Eye-feature → gaze regression: inverse-distance kNN, adaptive linear
//! regression by ℓ₁-minimal reconstruction, sparse training-set selection and
//! angular error statistics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::render::{EyeFeature, FEATURE_LEN};
use crate::{Error, Result, Vec3};

/// Unit gaze vector in the canonical camera frame. Looking straight at the
/// camera is `(0, 0, −1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeDirection(Vec3);

impl GazeDirection {
    /// Normalizes `v`; fails for zero or non-finite vectors.
    pub fn new(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !(n > 1e-300) || !n.is_finite() {
            return Err(Error::invalid("gaze vector must be finite and nonzero"));
        }
        Ok(Self(v / n))
    }

    /// Wraps `v` as-is; it must already have unit length within 1e-6.
    pub fn from_unit(v: Vec3) -> Result<Self> {
        if !((v.norm() - 1.0).abs() <= 1e-6) {
            return Err(Error::invalid("gaze vector is not unit length"));
        }
        Ok(Self(v))
    }

    /// Yaw turns towards +x, pitch towards +y (image down).
    pub fn from_yaw_pitch(yaw: f64, pitch: f64) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        Self(Vec3::new(sy * cp, sp, -cy * cp))
    }

    pub fn vector(&self) -> &Vec3 {
        &self.0
    }

    pub fn yaw(&self) -> f64 {
        self.0.x.atan2(-self.0.z)
    }

    pub fn pitch(&self) -> f64 {
        self.0.y.atan2((self.0.x * self.0.x + self.0.z * self.0.z).sqrt())
    }
}

/// Training pairs, optionally with the normalized screen point each was
/// recorded at.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    features: Vec<EyeFeature>,
    targets: Vec<GazeDirection>,
    screen_points: Option<Vec<[f64; 2]>>,
}

impl TrainingSet {
    pub fn new(
        features: Vec<EyeFeature>,
        targets: Vec<GazeDirection>,
        screen_points: Option<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        if features.len() != targets.len() {
            return Err(Error::invalid(format!("{} features but {} targets", features.len(), targets.len())));
        }
        if let Some(s) = &screen_points {
            if s.len() != features.len() {
                return Err(Error::invalid("screen point count differs from feature count"));
            }
        }
        Ok(Self { features, targets, screen_points })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[EyeFeature] {
        &self.features
    }

    pub fn targets(&self) -> &[GazeDirection] {
        &self.targets
    }

    pub fn screen_points(&self) -> Option<&[[f64; 2]]> {
        self.screen_points.as_deref()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: indices.iter().map(|&i| self.features[i]).collect(),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            screen_points: self.screen_points.as_ref().map(|s| indices.iter().map(|&i| s[i]).collect()),
        }
    }
}

/// Below this feature distance a training sample is treated as an exact match.
pub const EXACT_MATCH_DISTANCE: f64 = 1e-12;

/// `(index, distance)` of the `k` nearest training features, ties by index.
pub fn nearest_features(train: &TrainingSet, x: &EyeFeature, k: usize) -> Result<Vec<(usize, f64)>> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if k == 0 || k > train.len() {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", train.len())));
    }
    let mut all: Vec<(usize, f64)> = train.features.iter().enumerate().map(|(i, f)| (i, x.distance(f))).collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    Ok(all)
}

/// Inverse-distance weighted sum of the `k` nearest targets, without any
/// normalization of weights or result.
pub fn knn_regress_raw(train: &TrainingSet, x: &EyeFeature, k: usize) -> Result<Vec3> {
    let nn = nearest_features(train, x, k)?;
    if let Some(&(i, _)) = nn.iter().find(|(_, d)| *d < EXACT_MATCH_DISTANCE) {
        return Ok(train.targets[i].0);
    }
    Ok(nn.iter().fold(Vec3::zeros(), |acc, &(i, d)| acc + train.targets[i].0 / d))
}

/// kNN gaze estimate: weights `1/‖x − x_j‖` normalized to sum 1, output
/// re-normalized to unit length. An exact feature match returns its target.
pub fn knn_predict(train: &TrainingSet, x: &EyeFeature, k: usize) -> Result<GazeDirection> {
    let nn = nearest_features(train, x, k)?;
    if let Some(&(i, _)) = nn.iter().find(|(_, d)| *d < EXACT_MATCH_DISTANCE) {
        return Ok(train.targets[i]);
    }
    if let [(i, _)] = nn[..] {
        return Ok(train.targets[i]);
    }
    let total: f64 = nn.iter().map(|(_, d)| 1.0 / d).sum();
    let sum = nn.iter().fold(Vec3::zeros(), |acc, &(i, d)| acc + train.targets[i].0 * ((1.0 / d) / total));
    GazeDirection::new(sum).map_err(|_| Error::numerical(0, "kNN targets cancel to a zero vector"))
}

/// Feasibility slack allowed on `‖x − Fw‖ ≤ eps`.
pub const ALR_FEASIBILITY_TOL: f64 = 1e-8;
const ALR_MAX_STEPS: usize = 2000;

/// Sparse reconstruction weights and the estimate they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct AlrSolution {
    pub weights: Vec<f64>,
    pub residual: f64,
    pub gaze: GazeDirection,
}

/// Adaptive linear regression: `w = argmin ‖w‖₁ s.t. ‖x − F w‖₂ ≤ eps`,
/// estimate `normalize(G w)`.
pub fn alr_predict(train: &TrainingSet, x: &EyeFeature, eps: f64) -> Result<GazeDirection> {
    alr_solve(train, x, eps).map(|s| s.gaze)
}

pub fn alr_solve(train: &TrainingSet, x: &EyeFeature, eps: f64) -> Result<AlrSolution> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let f = DMatrix::from_fn(FEATURE_LEN, train.len(), |r, c| train.features[c].0[r]);
    let xv = DVector::from_column_slice(&x.0);
    let weights = l1_min_within_ball(&f, &xv, eps)?;
    let residual = (&xv - &f * DVector::from_column_slice(&weights)).norm();
    if residual > eps + ALR_FEASIBILITY_TOL {
        return Err(Error::numerical(0, format!("ALR residual {residual:.3e} exceeds eps {eps:.3e}")));
    }
    let g = weights.iter().zip(&train.targets).fold(Vec3::zeros(), |acc, (w, t)| acc + t.0 * *w);
    let gaze = GazeDirection::new(g).map_err(|_| Error::numerical(0, "ALR weights map to a zero gaze vector"))?;
    Ok(AlrSolution { weights, residual, gaze })
}

/// Minimum-ℓ₁ `w` with `‖x − F w‖₂ ≤ eps`, by following the lasso
/// regularization path (homotopy) from `w = 0` until the residual norm
/// reaches `eps`. The path is piecewise linear, so every segment is solved
/// exactly.
pub fn l1_min_within_ball(f: &DMatrix<f64>, x: &DVector<f64>, eps: f64) -> Result<Vec<f64>> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::invalid("eps must be finite and nonnegative"));
    }
    if f.nrows() != x.len() {
        return Err(Error::invalid("feature dimension mismatch"));
    }
    let n = f.ncols();
    let mut w = DVector::<f64>::zeros(n);
    let mut r = x.clone();
    if r.norm() <= eps {
        return Ok(w.as_slice().to_vec());
    }
    let scale = f.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(x.amax()).max(1.0);
    let tiny = 1e-13 * scale;

    let mut corr = f.tr_mul(&r);
    let first = corr.iamax();
    let mut lambda = corr[first].abs();
    let mut active: Vec<usize> = vec![first];
    let mut excluded = vec![false; n];

    for _ in 0..ALR_MAX_STEPS {
        let signs =
            DVector::from_iterator(active.len(), active.iter().map(|&j| if corr[j] >= 0.0 { 1.0 } else { -1.0 }));
        let fa = f.select_columns(active.iter());
        let gram = fa.tr_mul(&fa);
        let Some(chol) = gram.clone().cholesky() else {
            // newest column is linearly dependent on the others
            let j = active.pop().expect("active set nonempty");
            excluded[j] = true;
            if active.is_empty() {
                break;
            }
            continue;
        };
        let dir = chol.solve(&signs);
        let fd = &fa * &dir;
        let a = f.tr_mul(&fd);

        // Next breakpoint along decreasing lambda.
        let mut gamma = lambda;
        let mut event: Option<(bool, usize)> = None;
        for j in 0..n {
            if excluded[j] || active.contains(&j) {
                continue;
            }
            for (num, den) in [(lambda - corr[j], 1.0 - a[j]), (lambda + corr[j], 1.0 + a[j])] {
                if den > 1e-15 {
                    let g = num / den;
                    if g > tiny && g < gamma {
                        gamma = g;
                        event = Some((true, j));
                    }
                }
            }
        }
        for (pos, &j) in active.iter().enumerate() {
            if dir[pos] != 0.0 {
                let g = -w[j] / dir[pos];
                if g > tiny && g < gamma {
                    gamma = g;
                    event = Some((false, j));
                }
            }
        }

        // Does the residual norm hit eps on this segment?  r(g) = r − g·fd.
        let qa = fd.norm_squared();
        let qb = -2.0 * r.dot(&fd);
        let qc = r.norm_squared() - eps * eps;
        let mut hit = None;
        if qa > 0.0 {
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                // smaller root, computed stably
                let root = if qb < 0.0 { (2.0 * qc) / (-qb + sq) } else { (-qb - sq) / (2.0 * qa) };
                if root >= 0.0 && root <= gamma {
                    hit = Some(root);
                }
            }
        }

        let step = hit.unwrap_or(gamma);
        for (pos, &j) in active.iter().enumerate() {
            w[j] += step * dir[pos];
        }
        r = x - f * &w;
        if hit.is_some() {
            return Ok(w.as_slice().to_vec());
        }
        lambda -= step;
        corr = f.tr_mul(&r);

        match event {
            Some((true, j)) => active.push(j),
            Some((false, j)) => {
                active.retain(|&a| a != j);
                w[j] = 0.0;
                if active.is_empty() {
                    return Err(Error::numerical(0, "lasso path lost every active column"));
                }
            }
            None => {
                // lambda reached zero: least-squares fit on the active set
                let residual = r.norm();
                if residual <= eps + ALR_FEASIBILITY_TOL {
                    return Ok(w.as_slice().to_vec());
                }
                return Err(Error::Infeasible { residual, eps });
            }
        }
        if lambda <= tiny {
            let residual = r.norm();
            if residual <= eps + ALR_FEASIBILITY_TOL {
                return Ok(w.as_slice().to_vec());
            }
            return Err(Error::Infeasible { residual, eps });
        }
    }
    let residual = r.norm();
    if residual <= eps + ALR_FEASIBILITY_TOL {
        return Ok(w.as_slice().to_vec());
    }
    if active.is_empty() {
        return Err(Error::Infeasible { residual, eps });
    }
    Err(Error::numerical(ALR_MAX_STEPS, "lasso homotopy did not reach the eps ball"))
}

/// Grid nodes at cell centers of a `grid × grid` partition of the unit square.
pub fn screen_grid(grid: usize) -> Vec<[f64; 2]> {
    let mut nodes = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            nodes.push([(c as f64 + 0.5) / grid as f64, (r as f64 + 0.5) / grid as f64]);
        }
    }
    nodes
}

/// Indices of the track samples closest to each node of a uniform screen
/// grid, ties by lowest index, duplicates collapsed, in ascending order.
pub fn select_sparse_indices(screen_points: &[[f64; 2]], grid: usize) -> Result<Vec<usize>> {
    if screen_points.is_empty() {
        return Err(Error::invalid("gaze track is empty"));
    }
    if grid == 0 {
        return Err(Error::invalid("grid size must be positive"));
    }
    let mut picked = Vec::new();
    for node in screen_grid(grid) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in screen_points.iter().enumerate() {
            let d = (p[0] - node[0]).powi(2) + (p[1] - node[1]).powi(2);
            if d < best.1 {
                best = (i, d);
            }
        }
        picked.push(best.0);
    }
    picked.sort_unstable();
    picked.dedup();
    Ok(picked)
}

/// Sparse training subset chosen by uniform screen sampling.
pub fn select_sparse_training(track: &TrainingSet, grid: usize) -> Result<TrainingSet> {
    let screen = track.screen_points().ok_or_else(|| Error::invalid("training track has no screen points"))?;
    let idx = select_sparse_indices(screen, grid)?;
    Ok(track.subset(&idx))
}

/// Angle between two unit gaze vectors, degrees.
pub fn angular_error(estimate: &Vec3, truth: &Vec3) -> Result<f64> {
    for v in [estimate, truth] {
        if !((v.norm() - 1.0).abs() <= 1e-6) {
            return Err(Error::invalid("angular error needs unit vectors"));
        }
    }
    Ok(estimate.dot(truth).clamp(-1.0, 1.0).acos().to_degrees())
}

pub fn gaze_error(estimate: &GazeDirection, truth: &GazeDirection) -> f64 {
    estimate.0.dot(&truth.0).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Mean, median and 90th percentile of a set of errors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
}

impl ErrorStats {
    pub fn from_errors(errors: &[f64]) -> Self {
        if errors.is_empty() {
            return Self::default();
        }
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            count: errors.len(),
            mean: errors.iter().sum::<f64>() / errors.len() as f64,
            median: quantile(&sorted, 0.5),
            p90: quantile(&sorted, 0.9),
        }
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}
