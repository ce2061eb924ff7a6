//! Rotation-group primitives.
//!
//! Rotation matrices are plain `Matrix3` values. Quaternions use the
//! component order `(w, x, y, z)` everywhere.

use nalgebra::{Matrix3, RealField, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Norm threshold below which a 6D input cannot be orthonormalized.
pub const ROT6D_EPS: f64 = 1e-8;

/// Continuous 6D rotation parameterization: the first two (unnormalized)
/// columns of a rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot6D<T: RealField + Copy> {
    pub a1: Vector3<T>,
    pub a2: Vector3<T>,
}

impl<T: RealField + Copy> Rot6D<T> {
    pub fn new(a1: Vector3<T>, a2: Vector3<T>) -> Self {
        Self { a1, a2 }
    }

    pub fn from_slice(v: &[T]) -> Self {
        Self { a1: Vector3::new(v[0], v[1], v[2]), a2: Vector3::new(v[3], v[4], v[5]) }
    }
}

/// Gram-Schmidt map (orthogonalized twice) from the 6D representation to a rotation with columns
/// `[x̂ ŷ ẑ]`.
pub fn rot_from_6d<T: RealField + Copy>(r: &Rot6D<T>) -> Result<Matrix3<T>> {
    let eps: T = nalgebra::convert(ROT6D_EPS);
    let n1 = r.a1.norm();
    if !(n1 > eps) {
        return Err(Error::Degenerate6d);
    }
    let x = r.a1 / n1;
    let y_raw = r.a2 - x * r.a2.dot(&x);
    let n2 = y_raw.norm();
    if !(n2 > eps) {
        return Err(Error::Degenerate6d);
    }
    // A second pass restores orthogonality lost to cancellation when a1 ∥ a2.
    let y1 = y_raw / n2;
    let y2 = y1 - x * y1.dot(&x);
    let y = y2 / y2.norm();
    let z = x.cross(&y);
    Ok(Matrix3::from_columns(&[x, y, z]))
}

/// The first two columns of `m`.
pub fn matrix_to_6d<T: RealField + Copy>(m: &Matrix3<T>) -> Rot6D<T> {
    Rot6D { a1: m.column(0).into_owned(), a2: m.column(1).into_owned() }
}

/// `(R - Rᵀ)^∨ / 2`, which equals `sin θ · axis` for a rotation.
fn vee_antisym(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// Angle of the relative rotation `aᵀb`, in `[0, π]`.
///
/// Evaluated as `atan2(‖vee‖, (tr − 1)/2)`, which equals the clamped
/// `arccos((tr(aᵀb) − 1)/2)` on SO(3) and stays accurate near 0 and π.
pub fn geodesic(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let s = vee_antisym(&rel).norm();
    s.atan2(c)
}

/// Plain arccos form of the geodesic distance with argument clamping.
pub fn geodesic_acos(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let tr = (a.transpose() * b).trace();
    ((tr - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues formula.
pub fn axis_angle_to_matrix(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let k = skew(axis);
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

/// Exponential map of a rotation vector `angle · axis`.
pub fn exp_map(v: &Vector3<f64>) -> Matrix3<f64> {
    let angle = v.norm();
    if angle < 1e-300 {
        return Matrix3::identity();
    }
    axis_angle_to_matrix(&(v / angle), angle)
}

/// Inverse of [`axis_angle_to_matrix`]. Angle 0 yields axis `(1, 0, 0)`.
pub fn matrix_to_axis_angle(m: &Matrix3<f64>) -> (Vector3<f64>, f64) {
    let c = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sv = vee_antisym(m);
    let s = sv.norm();
    let angle = s.atan2(c);
    if angle == 0.0 {
        return (Vector3::x(), 0.0);
    }
    if c > -0.5 {
        return (sv / s, angle);
    }
    // Near π the antisymmetric part vanishes; read the axis from the
    // symmetric part (R + Rᵀ)/2 = cos θ·I + (1 − cos θ)·n nᵀ.
    let sym = (m + m.transpose()) * 0.5;
    let outer = (sym - Matrix3::identity() * c) / (1.0 - c);
    let k = (0..3).max_by(|&i, &j| outer[(i, i)].total_cmp(&outer[(j, j)])).unwrap();
    let mut axis = outer.column(k).into_owned();
    axis /= axis.norm();
    if axis.dot(&sv) < 0.0 {
        axis = -axis;
    }
    (axis, angle)
}

/// Rotation vector `angle · axis` of `m`.
pub fn log_map(m: &Matrix3<f64>) -> Vector3<f64> {
    let (axis, angle) = matrix_to_axis_angle(m);
    axis * angle
}

/// Unit quaternion `(w, x, y, z)` to matrix; the input is normalized first.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Matrix to unit quaternion `(w, x, y, z)` with `w ≥ 0`.
pub fn matrix_to_quat(m: &Matrix3<f64>) -> [f64; 4] {
    let tr = m.trace();
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[(2, 1)] - m[(1, 2)]) / s, (m[(0, 2)] - m[(2, 0)]) / s, (m[(1, 0)] - m[(0, 1)]) / s]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [(m[(2, 1)] - m[(1, 2)]) / s, 0.25 * s, (m[(0, 1)] + m[(1, 0)]) / s, (m[(0, 2)] + m[(2, 0)]) / s]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [(m[(0, 2)] - m[(2, 0)]) / s, (m[(0, 1)] + m[(1, 0)]) / s, 0.25 * s, (m[(1, 2)] + m[(2, 1)]) / s]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [(m[(1, 0)] - m[(0, 1)]) / s, (m[(0, 2)] + m[(2, 0)]) / s, (m[(1, 2)] + m[(2, 1)]) / s, 0.25 * s]
    };
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    [sign * q[0] / n, sign * q[1] / n, sign * q[2] / n, sign * q[3] / n]
}

/// Swing and twist errors between two bone-aligned frames: the angles
/// between their first columns and between their second columns.
pub fn axis_errors(pred: &Matrix3<f64>, gt: &Matrix3<f64>) -> (f64, f64) {
    (column_angle(pred, gt, 0), column_angle(pred, gt, 1))
}

fn column_angle(a: &Matrix3<f64>, b: &Matrix3<f64>, c: usize) -> f64 {
    let u = a.column(c);
    let v = b.column(c);
    let d = u.dot(&v) / (u.norm() * v.norm());
    d.clamp(-1.0, 1.0).acos()
}

/// Uniform random unit vector.
pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Rotation about a uniformly random axis by an angle uniform in `[0, max_angle]`.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R, max_angle: f64) -> Matrix3<f64> {
    axis_angle_to_matrix(&random_unit_vector(rng), random_angle(rng, max_angle))
}

/// Random rotation vector with the same distribution as [`random_rotation`].
pub fn random_rotation_vector<R: Rng + ?Sized>(rng: &mut R, max_angle: f64) -> Vector3<f64> {
    random_unit_vector(rng) * random_angle(rng, max_angle)
}

fn random_angle<R: Rng + ?Sized>(rng: &mut R, max_angle: f64) -> f64 {
    rng.random::<f64>() * max_angle
}

/// Largest deviation of `mᵀm` from identity (max-abs entry) and `det m`.
pub fn orthonormality_error<T: RealField + Copy>(m: &Matrix3<T>) -> (T, T) {
    let d = m.transpose() * m - Matrix3::identity();
    (d.amax(), m.determinant())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rz(a: f64) -> Matrix3<f64> {
        axis_angle_to_matrix(&Vector3::z(), a)
    }

    #[test]
    fn six_d_examples() {
        let id = rot_from_6d(&Rot6D::<f64>::new(Vector3::x(), Vector3::y())).unwrap();
        assert_eq!(id, Matrix3::identity());
        let sheared = rot_from_6d(&Rot6D::<f64>::new(Vector3::new(2.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 0.0))).unwrap();
        assert!((sheared - Matrix3::identity()).amax() < 1e-15);
        assert!(rot_from_6d(&Rot6D::<f64>::new(Vector3::zeros(), Vector3::y())).is_err());
        assert!(rot_from_6d(&Rot6D::<f64>::new(Vector3::x(), Vector3::new(3.0, 0.0, 0.0))).is_err());
    }

    #[test]
    fn six_d_random_inputs_are_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100_000 {
            let v: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
            let m = rot_from_6d(&Rot6D::from_slice(&v)).unwrap();
            let (orth, det) = orthonormality_error(&m);
            assert!(orth < 1e-12 && (det - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn six_d_invariances() {
        let a1 = Vector3::new(0.3, -1.2, 0.5);
        let a2 = Vector3::new(0.9, 0.1, -0.4);
        let base = rot_from_6d(&Rot6D::<f64>::new(a1, a2)).unwrap();
        let scaled = rot_from_6d(&Rot6D::<f64>::new(a1 * 7.5, a2 + a1 * -2.0)).unwrap();
        assert!((base - scaled).amax() < 1e-14);
    }

    #[test]
    fn geodesic_examples() {
        assert_eq!(geodesic(&Matrix3::identity(), &Matrix3::identity()), 0.0);
        let rx = axis_angle_to_matrix(&Vector3::x(), PI);
        assert!((geodesic(&Matrix3::identity(), &rx) - PI).abs() < 1e-15);
        let d = geodesic(&rz(30f64.to_radians()), &rz(75f64.to_radians()));
        assert!((d - 45f64.to_radians()).abs() < 1e-14);
        assert!((geodesic_acos(&rz(0.3), &rz(1.0)) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn quarter_turn_about_z() {
        let m = axis_angle_to_matrix(&Vector3::z(), FRAC_PI_2);
        let expect = Matrix3::from_columns(&[Vector3::y(), -Vector3::x(), Vector3::z()]);
        assert!((m - expect).amax() < 1e-15);
        assert_eq!(matrix_to_axis_angle(&Matrix3::identity()), (Vector3::x(), 0.0));
    }

    #[test]
    fn axis_angle_round_trip_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 0..100_000 {
            let axis = random_unit_vector(&mut rng);
            // Exercise the near-π branch heavily as well.
            let angle = if k % 4 == 0 {
                PI - 1e-6 - rng.random::<f64>() * 1e-3
            } else {
                1e-9 + rng.random::<f64>() * (PI - 1e-6 - 1e-9)
            };
            let m = axis_angle_to_matrix(&axis, angle);
            let (a2, t2) = matrix_to_axis_angle(&m);
            let back = axis_angle_to_matrix(&a2, t2);
            assert!(geodesic(&m, &back) < 1e-10, "angle {angle}");
        }
    }

    #[test]
    fn quaternion_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let m = random_rotation(&mut rng, PI);
            let q = matrix_to_quat(&m);
            assert!(q[0] >= 0.0);
            assert!(geodesic(&m, &quat_to_matrix(q)) < 1e-12);
        }
        let q = matrix_to_quat(&axis_angle_to_matrix(&Vector3::z(), FRAC_PI_2));
        let h = FRAC_PI_2 / 2.0;
        assert!((q[0] - h.cos()).abs() < 1e-15 && (q[3] - h.sin()).abs() < 1e-15);
    }

    #[test]
    fn axis_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_rotation(&mut rng, PI);
        assert_eq!(axis_errors(&gt, &gt), (0.0, 0.0));
        let theta = 0.4;
        let (s, t) = axis_errors(&(gt * axis_angle_to_matrix(&Vector3::x(), theta)), &gt);
        assert!(s < 1e-7 && (t - theta).abs() < 1e-12);
        let (s, t) = axis_errors(&(gt * axis_angle_to_matrix(&Vector3::z(), theta)), &gt);
        assert!((s - theta).abs() < 1e-12 && (t - theta).abs() < 1e-12);
    }

    #[test]
    fn random_rotation_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| geodesic(&Matrix3::identity(), &random_rotation(&mut rng, PI)))
            .sum::<f64>()
            / n as f64;
        assert!((mean - FRAC_PI_2).abs() / FRAC_PI_2 < 0.01, "mean {mean}");

        for _ in 0..1000 {
            assert!(geodesic(&Matrix3::identity(), &random_rotation(&mut rng, 0.01)) <= 0.01 + 1e-15);
        }

        let a: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(4);
            (0..10).map(|_| random_rotation(&mut r, 1.0)).collect()
        };
        let b: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(4);
            (0..10).map(|_| random_rotation(&mut r, 1.0)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn geodesic_metric_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let a = random_rotation(&mut rng, PI);
            let b = random_rotation(&mut rng, PI);
            let c = random_rotation(&mut rng, PI);
            assert_eq!(geodesic(&a, &b), geodesic(&b, &a));
            assert!(geodesic(&a, &a) < 1e-9);
            assert!(geodesic(&a, &c) <= geodesic(&a, &b) + geodesic(&b, &c) + 1e-9);
            assert!((geodesic(&(c * a), &(c * b)) - geodesic(&a, &b)).abs() < 1e-9);
        }
    }
}
