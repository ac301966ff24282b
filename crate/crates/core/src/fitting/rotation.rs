//! Small-angle rotation updates and projection back onto SO(3).

use nalgebra::SVD;

use crate::{Error, Mat3, Result};

/// First-order rotation update: every cosine replaced by 1 and every sine by
/// its angle.
///
/// ```text
/// [  1   a   b ]
/// [ -a   1   c ]
/// [ -b  -c   1 ]
/// ```
pub fn small_angle_rotation(a: f64, b: f64, c: f64) -> Mat3 {
    Mat3::new(1.0, a, b, -a, 1.0, c, -b, -c, 1.0)
}

/// Nearest rotation to `m` in Frobenius norm (polar factor via SVD), with
/// determinant +1.
pub fn orthonormalize(m: &Mat3) -> Result<Mat3> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateGeometry("matrix has non-finite entries".into()));
    }
    let svd = SVD::new(*m, true, true);
    let sv = svd.singular_values;
    let largest = sv.max();
    if !(largest > 0.0) || sv.min() <= 1e-12 * largest {
        return Err(Error::DegenerateGeometry("cannot orthonormalize a singular matrix".into()));
    }
    let mut u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // flip the axis of the smallest singular value
        let i = sv.imin();
        let mut col = u.column_mut(i);
        col.neg_mut();
        r = u * v_t;
    }
    Ok(r)
}

/// `‖RᵀR − I‖_F`.
pub fn orthonormality_residual(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).norm()
}

/// Angle in radians of the relative rotation `R₁ᵀ R₂`.
pub fn rotation_angle_between(r1: &Mat3, r2: &Mat3) -> f64 {
    let rel = r1.transpose() * r2;
    let cos = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    num_traits::Float::acos(cos)
}

/// Rotation about the unit `axis` by `angle` radians (Rodrigues).
pub fn axis_angle(axis: &crate::Vec3, angle: f64) -> Mat3 {
    let k = axis.normalize();
    let kx = Mat3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    let (s, c) = num_traits::Float::sin_cos(angle);
    Mat3::identity() + kx * s + kx * kx * (1.0 - c)
}

/// Head rotation from yaw (about y) then pitch (about x), radians.
pub fn yaw_pitch(yaw: f64, pitch: f64) -> Mat3 {
    axis_angle(&crate::Vec3::y(), yaw) * axis_angle(&crate::Vec3::x(), pitch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// exp of an antisymmetric matrix by truncated power series
    fn expm(w: &Mat3) -> Mat3 {
        let mut term = Mat3::identity();
        let mut sum = Mat3::identity();
        for k in 1..30 {
            term = term * w / k as f64;
            sum += term;
        }
        sum
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
        let axis = Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        axis_angle(&axis, rng.random::<f64>() * 3.0)
    }

    #[test]
    fn zero_angles_give_identity() {
        assert_eq!(small_angle_rotation(0.0, 0.0, 0.0), Mat3::identity());
    }

    #[test]
    fn sign_pattern() {
        let r = small_angle_rotation(0.01, 0.0, 0.0);
        assert_eq!(r, Mat3::new(1.0, 0.01, 0.0, -0.01, 1.0, 0.0, 0.0, 0.0, 1.0));
        let r = small_angle_rotation(0.1, 0.2, 0.3);
        assert_eq!(r, Mat3::new(1.0, 0.1, 0.2, -0.1, 1.0, 0.3, -0.2, -0.3, 1.0));
    }

    #[test]
    fn linearization_error_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let v = Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            let v = v.normalize() * 0.1 * rng.random::<f64>();
            let lin = small_angle_rotation(v.x, v.y, v.z);
            let exact = expm(&(lin - Mat3::identity()));
            assert!((lin - exact).norm() <= 0.02);
        }
    }

    #[test]
    fn rotations_are_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let r = random_rotation(&mut rng);
            assert!((orthonormalize(&r).unwrap() - r).norm() < 1e-12);
        }
    }

    #[test]
    fn linearized_update_becomes_proper_rotation() {
        let r = orthonormalize(&small_angle_rotation(0.1, 0.0, 0.0)).unwrap();
        assert!(orthonormality_residual(&r) < 1e-12);
        assert!(r.determinant() > 0.0);
    }

    #[test]
    fn perturbed_rotation_projects_near_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let r = random_rotation(&mut rng);
            let e = Mat3::from_fn(|_, _| rng.random::<f64>() * 2.0 - 1.0);
            let m = r * (Mat3::identity() + e * 0.01);
            let out = orthonormalize(&m).unwrap();
            assert!((out - r).norm() < 0.02);
            assert!(out.determinant() > 0.0);
        }
    }

    #[test]
    fn reflections_are_turned_into_rotations() {
        let m = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        let r = orthonormalize(&m).unwrap();
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let m = Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(orthonormalize(&m), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn angle_between_matches_construction() {
        let r = axis_angle(&Vec3::new(0.3, -1.0, 0.2), 0.25);
        assert!((rotation_angle_between(&Mat3::identity(), &r) - 0.25).abs() < 1e-12);
    }
}
