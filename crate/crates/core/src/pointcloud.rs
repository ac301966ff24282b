//! Target scans: point sets with optional normals, exact nearest-neighbor
//! search, PCA normal estimation and depth-map back-projection.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use nalgebra::SymmetricEigen;
#[allow(unused_imports)]
use num_traits::Float;

use crate::{Error, Mat3, Result, Vec3};

/// A cloud of 3D points in meters, optionally carrying one unit normal per point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
}

impl PointSet {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !is_finite(p)) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points, normals: None })
    }

    pub fn with_normals(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        let mut set = Self::new(points)?;
        set.set_normals(normals)?;
        Ok(set)
    }

    pub fn set_normals(&mut self, normals: Vec<Vec3>) -> Result<()> {
        if normals.len() != self.points.len() {
            return Err(Error::invalid(format!("{} normals for {} points", normals.len(), self.points.len())));
        }
        for (i, n) in normals.iter().enumerate() {
            if !is_finite(n) || (n.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("normal {i} is not a unit vector")));
            }
        }
        self.normals = Some(normals);
        Ok(())
    }

    pub fn empty() -> Self {
        Self { points: Vec::new(), normals: None }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
        Some(sum / self.points.len() as f64)
    }

    /// Applies `p ↦ R p + t` to points and `n ↦ R n` to normals.
    pub fn transformed(&self, rotation: &Mat3, translation: &Vec3) -> Self {
        Self {
            points: self.points.iter().map(|p| rotation * p + translation).collect(),
            normals: self.normals.as_ref().map(|ns| ns.iter().map(|n| (rotation * n).normalize()).collect()),
        }
    }
}

pub(crate) fn is_finite(p: &Vec3) -> bool {
    p.iter().all(|c| c.is_finite())
}

#[inline]
fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// Result of a nearest-neighbor query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub point: Vec3,
    pub distance: f64,
}

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Exact kd-tree over a fixed point set.
///
/// Queries return the same answer as a linear scan, including the tie rule:
/// among equidistant points the lowest index wins.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(cloud: &PointSet) -> Result<Self> {
        Self::from_points(cloud.points().to_vec())
    }

    pub fn from_points(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("cannot index an empty point cloud"));
        }
        let mut tree = Self { order: (0..points.len()).collect(), points, nodes: Vec::new() };
        let n = tree.points.len();
        tree.build_node(0, n);
        Ok(tree)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let extent = hi - lo;
        let axis = extent.imax();
        if extent[axis] <= 0.0 {
            // all points coincide
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].partial_cmp(&points[b][axis]).unwrap_or(Ordering::Equal)
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Nearest indexed point to `query`; ties go to the lowest index.
    pub fn nearest(&self, query: &Vec3) -> Result<Neighbor> {
        if !is_finite(query) {
            return Err(Error::invalid("nearest-neighbor query is not finite"));
        }
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_in(0, query, &mut best);
        Ok(Neighbor { index: best.1, point: self.points[best.1], distance: best.0.sqrt() })
    }

    fn nearest_in(&self, node: usize, q: &Vec3, best: &mut (f64, usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(&self.points[i], q);
                    if d < best.0 || (d == best.0 && i < best.1) {
                        *best = (d, i);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_in(near, q, best);
                if diff * diff <= best.0 {
                    self.nearest_in(far, q, best);
                }
            }
        }
    }

    /// The `k` nearest points ordered by (distance, index).
    pub fn k_nearest(&self, query: &Vec3, k: usize) -> Result<Vec<Neighbor>> {
        if !is_finite(query) {
            return Err(Error::invalid("nearest-neighbor query is not finite"));
        }
        if k == 0 || k > self.points.len() {
            return Err(Error::invalid(format!("k = {k} outside 1..={}", self.points.len())));
        }
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.k_nearest_in(0, query, k, &mut heap);
        Ok(heap.into_iter().map(|(d, i)| Neighbor { index: i, point: self.points[i], distance: d.sqrt() }).collect())
    }

    fn k_nearest_in(&self, node: usize, q: &Vec3, k: usize, found: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = (dist2(&self.points[i], q), i);
                    if found.len() == k && !precedes(cand, found[k - 1]) {
                        continue;
                    }
                    let pos = found.partition_point(|&e| precedes(e, cand));
                    found.insert(pos, cand);
                    found.truncate(k);
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.k_nearest_in(near, q, k, found);
                if found.len() < k || diff * diff <= found[k - 1].0 {
                    self.k_nearest_in(far, q, k, found);
                }
            }
        }
    }
}

#[inline]
fn precedes(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Per-point normals from the covariance of each point's `k` nearest neighbors
/// (the point itself included), oriented towards `viewpoint`.
///
/// Rank-deficient neighborhoods (collinear points) do not fail: the result is
/// some unit vector orthogonal to the line.
pub fn estimate_normals(cloud: &PointSet, k: usize, viewpoint: &Vec3) -> Result<PointSet> {
    if k < 3 || k > cloud.len() {
        return Err(Error::invalid(format!("normal estimation needs 3 <= k <= {} (got {k})", cloud.len())));
    }
    let index = KdTree::build(cloud)?;
    let mut normals = Vec::with_capacity(cloud.len());
    for p in cloud.points() {
        let neighbors = index.k_nearest(p, k)?;
        let mean = neighbors.iter().fold(Vec3::zeros(), |acc, nb| acc + nb.point) / k as f64;
        let mut cov = Mat3::zeros();
        for nb in &neighbors {
            let d = nb.point - mean;
            cov += d * d.transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let smallest = eig.eigenvalues.imin();
        let mut n: Vec3 = eig.eigenvectors.column(smallest).into_owned();
        let len = n.norm();
        if !(len > 0.0) || !len.is_finite() {
            return Err(Error::DegenerateGeometry("normal eigenvector vanished".into()));
        }
        n /= len;
        if n.dot(&(viewpoint - p)) < 0.0 {
            n = -n;
        }
        normals.push(n);
    }
    PointSet::with_normals(cloud.points().to_vec(), normals)
}

/// Settings for dropping isolated points before fitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierFilter {
    /// Neighbors averaged per point.
    pub k: usize,
    /// Points whose mean neighbor distance exceeds the cloud mean by more
    /// than this many standard deviations are dropped.
    pub std_ratio: f64,
}

impl Default for OutlierFilter {
    fn default() -> Self {
        Self { k: 8, std_ratio: 1.0 }
    }
}

/// Statistical outlier removal: keeps points whose mean distance to their
/// `k` nearest neighbors is at most `mean + std_ratio * std` over the cloud.
/// Returns the kept subset (normals follow) and a keep mask.
pub fn remove_statistical_outliers(cloud: &PointSet, filter: &OutlierFilter) -> Result<(PointSet, Vec<bool>)> {
    if filter.k == 0 || !filter.std_ratio.is_finite() {
        return Err(Error::invalid("outlier filter needs k >= 1 and a finite std_ratio"));
    }
    if cloud.len() <= filter.k {
        return Ok((cloud.clone(), alloc::vec![true; cloud.len()]));
    }
    let index = KdTree::build(cloud)?;
    let mut scores = Vec::with_capacity(cloud.len());
    for p in cloud.points() {
        // the point itself comes back first at distance zero
        let nb = index.k_nearest(p, filter.k + 1)?;
        scores.push(nb.iter().skip(1).map(|n| n.distance).sum::<f64>() / filter.k as f64);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let limit = mean + filter.std_ratio * var.sqrt();
    let keep: Vec<bool> = scores.iter().map(|&s| s <= limit).collect();
    let pick = |v: &[Vec3]| -> Vec<Vec3> { v.iter().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| *p).collect() };
    let kept = match cloud.normals() {
        Some(ns) => PointSet::with_normals(pick(cloud.points()), pick(ns))?,
        None => PointSet::new(pick(cloud.points()))?,
    };
    Ok((kept, keep))
}

/// Pinhole camera intrinsics in pixels. Pixel centers sit at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self { fx, fy, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::Validation("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::Validation("principal point cx outside [0, width)".into()));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::Validation("principal point cy outside [0, height)".into()));
        }
        Ok(())
    }

    /// VGA depth-sensor geometry (640×480).
    pub fn vga() -> Self {
        Self { fx: 525.0, fy: 525.0, cx: 319.5, cy: 239.5, width: 640, height: 480 }
    }
}

/// Row-major depth image in meters. NaN or non-positive entries are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!("depth buffer has {} entries, expected {width}x{height}", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, z: f64) {
        self.data[v * self.width + u] = z;
    }
}

/// Back-projects every valid depth pixel to a camera-frame point.
pub fn depth_to_points(depth: &DepthMap, intr: &CameraIntrinsics) -> Result<PointSet> {
    if depth.width != intr.width || depth.height != intr.height {
        return Err(Error::invalid(format!(
            "depth map is {}x{} but intrinsics describe {}x{}",
            depth.width, depth.height, intr.width, intr.height
        )));
    }
    let mut points = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let z = depth.get(u, v);
            if !(z > 0.0) || !z.is_finite() {
                continue;
            }
            points.push(Vec3::new((u as f64 - intr.cx) * z / intr.fx, (v as f64 - intr.cy) * z / intr.fy, z));
        }
    }
    PointSet::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_nearest(points: &[Vec3], q: &Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, q);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| Vec3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>())).collect()
    }

    #[test]
    fn single_point_cloud_answers_every_query() {
        let tree = KdTree::from_points(vec![Vec3::new(1.0, 2.0, 3.0)]).unwrap();
        for q in [Vec3::zeros(), Vec3::new(-5.0, 9.0, 1.0)] {
            let nb = tree.nearest(&q).unwrap();
            assert_eq!(nb.index, 0);
            assert_eq!(nb.distance, (q - Vec3::new(1.0, 2.0, 3.0)).norm());
        }
    }

    #[test]
    fn empty_cloud_is_rejected() {
        assert!(matches!(KdTree::build(&PointSet::empty()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn matches_brute_force_on_random_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let points = random_points(&mut rng, 1000);
        let tree = KdTree::from_points(points.clone()).unwrap();
        for q in random_points(&mut rng, 100) {
            let nb = tree.nearest(&q).unwrap();
            let (i, d2) = brute_nearest(&points, &q);
            assert_eq!(nb.index, i);
            assert_eq!(nb.distance, d2.sqrt());
        }
    }

    #[test]
    fn query_on_cloud_point_has_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let points = random_points(&mut rng, 50);
        let tree = KdTree::from_points(points.clone()).unwrap();
        let nb = tree.nearest(&points[17]).unwrap();
        assert_eq!(nb.index, 17);
        assert_eq!(nb.distance, 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let tree = KdTree::from_points(vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)]).unwrap();
        assert_eq!(tree.nearest(&Vec3::zeros()).unwrap().index, 0);

        let dup = vec![Vec3::new(0.3, 0.3, 0.3); 20];
        let mut pts = random_points(&mut ChaCha8Rng::seed_from_u64(3), 30);
        pts.extend(dup);
        let tree = KdTree::from_points(pts.clone()).unwrap();
        let q = Vec3::new(0.3, 0.3, 0.31);
        let nb = tree.nearest(&q).unwrap();
        let (i, d2) = brute_nearest(&pts, &q);
        assert_eq!(nb.distance, d2.sqrt());
        assert_eq!(nb.index, i);
    }

    #[test]
    fn non_finite_query_is_rejected() {
        let tree = KdTree::from_points(vec![Vec3::zeros()]).unwrap();
        assert!(tree.nearest(&Vec3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn k_nearest_matches_sorted_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points = random_points(&mut rng, 300);
        let tree = KdTree::from_points(points.clone()).unwrap();
        for q in random_points(&mut rng, 20) {
            let mut all: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (dist2(p, &q), i)).collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let got = tree.k_nearest(&q, 12).unwrap();
            let got: Vec<usize> = got.iter().map(|n| n.index).collect();
            let want: Vec<usize> = all[..12].iter().map(|e| e.1).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn planar_normals_face_the_viewpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> =
            (0..200).map(|_| Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, 0.5)).collect();
        let cloud = estimate_normals(&PointSet::new(pts).unwrap(), 12, &Vec3::zeros()).unwrap();
        for n in cloud.normals().unwrap() {
            assert!((n - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-6, "{n:?}");
        }
    }

    #[test]
    fn sphere_normals_are_anti_radial() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = (0..2000)
            .map(|_| {
                let v = Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                v.normalize()
            })
            .collect();
        let cloud = estimate_normals(&PointSet::new(pts).unwrap(), 12, &Vec3::zeros()).unwrap();
        for (p, n) in cloud.points().iter().zip(cloud.normals().unwrap()) {
            let inward = -p / p.norm();
            assert!((n.dot(&inward) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn collinear_points_give_an_orthogonal_unit_normal() {
        let dir = Vec3::new(1.0, 2.0, 0.5).normalize();
        let pts = vec![dir * 0.0, dir * 1.0, dir * 2.0];
        let cloud = estimate_normals(&PointSet::new(pts).unwrap(), 3, &Vec3::new(0.0, 0.0, -5.0)).unwrap();
        for n in cloud.normals().unwrap() {
            assert!((n.norm() - 1.0).abs() < 1e-9);
            assert!(n.dot(&dir).abs() < 1e-9);
        }
    }

    #[test]
    fn normal_estimation_rejects_bad_k() {
        let cloud = PointSet::new(vec![Vec3::zeros(); 5]).unwrap();
        assert!(estimate_normals(&cloud, 2, &Vec3::zeros()).is_err());
        assert!(estimate_normals(&cloud, 6, &Vec3::zeros()).is_err());
    }

    #[test]
    fn principal_point_maps_to_optical_axis() {
        let intr = CameraIntrinsics::new(500.0, 500.0, 2.0, 1.0, 5, 3).unwrap();
        let mut depth = DepthMap::filled(5, 3, f64::NAN);
        depth.set(2, 1, 0.8);
        let cloud = depth_to_points(&depth, &intr).unwrap();
        assert_eq!(cloud.points(), &[Vec3::new(0.0, 0.0, 0.8)]);
    }

    #[test]
    fn invalid_depths_are_skipped() {
        let intr = CameraIntrinsics::new(500.0, 500.0, 2.0, 1.0, 5, 3).unwrap();
        assert!(depth_to_points(&DepthMap::filled(5, 3, f64::NAN), &intr).unwrap().is_empty());
        assert!(depth_to_points(&DepthMap::filled(5, 3, -1.0), &intr).unwrap().is_empty());
        assert!(depth_to_points(&DepthMap::filled(4, 3, 1.0), &intr).is_err());
    }

    #[test]
    fn plane_depth_map_round_trips_onto_the_plane() {
        // plane n·p = d with n = (0.1, -0.2, 1) normalized
        let intr = CameraIntrinsics::new(300.0, 310.0, 31.5, 23.5, 64, 48).unwrap();
        let n = Vec3::new(0.1, -0.2, 1.0).normalize();
        let d = 0.9;
        let mut depth = DepthMap::filled(64, 48, 0.0);
        for v in 0..48 {
            for u in 0..64 {
                let ray = Vec3::new((u as f64 - intr.cx) / intr.fx, (v as f64 - intr.cy) / intr.fy, 1.0);
                depth.set(u, v, d / n.dot(&ray));
            }
        }
        let cloud = depth_to_points(&depth, &intr).unwrap();
        assert_eq!(cloud.len(), 64 * 48);
        for p in cloud.points() {
            assert!((n.dot(p) - d).abs() < 1e-9);
        }
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::vga().validate().is_ok());
    }

    #[test]
    fn normals_must_be_unit() {
        let r = PointSet::with_normals(vec![Vec3::zeros()], vec![Vec3::new(0.0, 0.0, 2.0)]);
        assert!(r.is_err());
        assert!(PointSet::new(vec![Vec3::new(f64::INFINITY, 0.0, 0.0)]).is_err());
    }
}
