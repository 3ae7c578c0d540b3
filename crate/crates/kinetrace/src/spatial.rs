//! Rigid placements and 6D spatial vectors.
//!
//! Conventions, fixed across the whole crate:
//! - A [`Placement`] `X` is the pose of a frame B expressed in a frame A
//!   ("A from B"): it maps points given in B to points given in A.
//! - Rotations are unit quaternions stored in canonical form (`w >= 0`).
//! - 6D motion vectors store `(angular, linear)`; the linear part is the
//!   velocity of the body-fixed point currently at the frame origin.
//! - 6D force vectors store `(angular, linear)` where `angular` is the
//!   moment about the frame origin and `linear` the force.
//! - The pairing `force.linear . motion.linear + force.angular . motion.angular`
//!   is the mechanical power and is invariant under a change of frame.
//!
//! Everything is generic over [`Real`] so the recursive kernels can be run
//! with dual numbers for differentiation.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// 3-vector over a generic scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3<T = f64> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Vec3 { x, y, z }
    }

    pub fn zero() -> Self {
        Vec3::new(T::zero(), T::zero(), T::zero())
    }

    pub fn from_f64(v: [f64; 3]) -> Self {
        Vec3::new(T::from_f64(v[0]), T::from_f64(v[1]), T::from_f64(v[2]))
    }

    pub fn to_f64(self) -> [f64; 3] {
        [self.x.value(), self.y.value(), self.z.value()]
    }

    pub fn add(self, o: Self) -> Self {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Self) -> Self {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn neg(self) -> Self {
        Vec3::new(-self.x, -self.y, -self.z)
    }

    pub fn scale(self, s: T) -> Self {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    /// Index 0/1/2 -> x/y/z. Panics on anything else.
    pub fn get(self, i: usize) -> T {
        match i {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("Vec3 index out of range: {i}"),
        }
    }
}

impl Vec3<f64> {
    pub fn from_na(v: &nalgebra::Vector3<f64>) -> Self {
        Vec3::new(v.x, v.y, v.z)
    }

    pub fn to_na(self) -> nalgebra::Vector3<f64> {
        nalgebra::Vector3::new(self.x, self.y, self.z)
    }
}

/// Row-major 3x3 matrix over a generic scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3<T = f64> {
    pub rows: [[T; 3]; 3],
}

impl<T: Real> Mat3<T> {
    pub fn from_rows(rows: [[T; 3]; 3]) -> Self {
        Mat3 { rows }
    }

    pub fn from_f64(m: [[f64; 3]; 3]) -> Self {
        let c = |r: usize, k: usize| T::from_f64(m[r][k]);
        Mat3::from_rows([
            [c(0, 0), c(0, 1), c(0, 2)],
            [c(1, 0), c(1, 1), c(1, 2)],
            [c(2, 0), c(2, 1), c(2, 2)],
        ])
    }

    pub fn identity() -> Self {
        let o = T::one();
        let z = T::zero();
        Mat3::from_rows([[o, z, z], [z, o, z], [z, z, o]])
    }

    pub fn mul_vec(&self, v: Vec3<T>) -> Vec3<T> {
        let r = &self.rows;
        Vec3::new(
            r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z,
            r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
            r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z,
        )
    }

    pub fn transpose(&self) -> Self {
        let r = &self.rows;
        Mat3::from_rows([
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ])
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut out = [[T::zero(); 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = self.rows[i][0] * o.rows[0][j]
                    + self.rows[i][1] * o.rows[1][j]
                    + self.rows[i][2] * o.rows[2][j];
            }
        }
        Mat3 { rows: out }
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut out = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = self.rows[i][j] + o.rows[i][j];
            }
        }
        Mat3 { rows: out }
    }

    pub fn scale(&self, s: T) -> Self {
        let mut out = self.rows;
        for row in &mut out {
            for v in row {
                *v = *v * s;
            }
        }
        Mat3 { rows: out }
    }

    /// Skew-symmetric matrix such that `skew(a).mul_vec(b) == a.cross(b)`.
    pub fn skew(a: Vec3<T>) -> Self {
        let z = T::zero();
        Mat3::from_rows([[z, -a.z, a.y], [a.z, z, -a.x], [-a.y, a.x, z]])
    }
}

impl Mat3<f64> {
    pub fn to_na(&self) -> nalgebra::Matrix3<f64> {
        nalgebra::Matrix3::from_fn(|i, j| self.rows[i][j])
    }
}

/// Quaternion `w + xi + yj + zk`; unit-norm when used as a rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat<T = f64> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Quat<T> {
    pub fn new(w: T, x: T, y: T, z: T) -> Self {
        Quat { w, x, y, z }
    }

    pub fn identity() -> Self {
        Quat::new(T::one(), T::zero(), T::zero(), T::zero())
    }

    pub fn mul(self, o: Self) -> Self {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    pub fn conjugate(self) -> Self {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn norm(self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn scale(self, s: T) -> Self {
        Quat::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    /// Rotate a vector: `q v q*`, expanded without building the matrix.
    pub fn rotate(self, v: Vec3<T>) -> Vec3<T> {
        let u = Vec3::new(self.x, self.y, self.z);
        let two = T::from_f64(2.0);
        let t = u.cross(v).scale(two);
        v.add(t.scale(self.w)).add(u.cross(t))
    }

    /// Exponential map: rotation vector (axis * angle, radians) to quaternion.
    pub fn exp(a: Vec3<T>) -> Self {
        let theta2 = a.norm_squared();
        let theta = theta2.sqrt();
        // sin(t/2)/t and cos(t/2), with series fallbacks around zero.
        let (s, c) = if theta.value() > 1e-8 {
            let half = theta * T::from_f64(0.5);
            (half.sin() / theta, half.cos())
        } else {
            (
                T::from_f64(0.5) - theta2 * T::from_f64(1.0 / 48.0),
                T::one() - theta2 * T::from_f64(0.125),
            )
        };
        Quat::new(c, a.x * s, a.y * s, a.z * s)
    }

    /// Logarithm map: unit quaternion to rotation vector.
    ///
    /// Uses `theta = 2 atan2(|xyz|, w)`. For canonical quaternions (`w >= 0`)
    /// the returned angle lies in `[0, pi]`. Accuracy degrades to roughly
    /// 1e-8 radians for rotations within 1e-8 of a half turn, where the axis
    /// becomes ill-conditioned.
    pub fn log(self) -> Vec3<T> {
        let v = Vec3::new(self.x, self.y, self.z);
        let n2 = v.norm_squared();
        let n = n2.sqrt();
        let scale = if n.value() > 1e-10 {
            let theta = T::from_f64(2.0) * n.atan2(self.w);
            theta / n
        } else {
            // theta/n for small n: 2/w - 2 n^2 / (3 w^3)
            let w = self.w;
            T::from_f64(2.0) / w - n2 * T::from_f64(2.0 / 3.0) / (w * w * w)
        };
        v.scale(scale)
    }

    pub fn to_mat3(self) -> Mat3<T> {
        let Quat { w, x, y, z } = self;
        let two = T::from_f64(2.0);
        let one = T::one();
        Mat3::from_rows([
            [
                one - two * (y * y + z * z),
                two * (x * y - w * z),
                two * (x * z + w * y),
            ],
            [
                two * (x * y + w * z),
                one - two * (x * x + z * z),
                two * (y * z - w * x),
            ],
            [
                two * (x * z - w * y),
                two * (y * z + w * x),
                one - two * (x * x + y * y),
            ],
        ])
    }
}

/// Unit quaternion kept in canonical form: unit norm, `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation<T = f64> {
    q: Quat<T>,
}

impl<T: Real> Rotation<T> {
    pub fn identity() -> Self {
        Rotation { q: Quat::identity() }
    }

    /// Normalizes and canonicalizes. Errors on (near-)zero quaternions are the
    /// caller's concern; a zero quaternion produces NaNs downstream.
    pub fn from_quat(q: Quat<T>) -> Self {
        let inv = T::one() / q.norm();
        let mut q = q.scale(inv);
        if q.w.value() < 0.0 {
            q = q.scale(-T::one());
        }
        Rotation { q }
    }

    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        Rotation::from_quat(Quat::new(
            T::from_f64(w),
            T::from_f64(x),
            T::from_f64(y),
            T::from_f64(z),
        ))
    }

    /// Rotation about `axis` (need not be unit) by `|axis| * 1.0` radians,
    /// i.e. the exponential of the rotation vector.
    pub fn from_rotation_vector(a: Vec3<T>) -> Self {
        Rotation::from_quat(Quat::exp(a))
    }

    pub fn quat(&self) -> Quat<T> {
        self.q
    }

    pub fn rotate(&self, v: Vec3<T>) -> Vec3<T> {
        self.q.rotate(v)
    }

    pub fn inverse_rotate(&self, v: Vec3<T>) -> Vec3<T> {
        self.q.conjugate().rotate(v)
    }

    pub fn compose(&self, o: &Rotation<T>) -> Rotation<T> {
        Rotation::from_quat(self.q.mul(o.q))
    }

    pub fn inverse(&self) -> Rotation<T> {
        Rotation { q: self.q.conjugate() }
    }

    pub fn to_mat3(&self) -> Mat3<T> {
        self.q.to_mat3()
    }

    /// Rotation whose frame axes, expressed in the reference frame, are the
    /// given (assumed orthonormal, right-handed) columns.
    pub fn from_columns(x: Vec3<T>, y: Vec3<T>, z: Vec3<T>) -> Self {
        let m = [[x.x, y.x, z.x], [x.y, y.y, z.y], [x.z, y.z, z.z]];
        let trace = m[0][0] + m[1][1] + m[2][2];
        let quarter = T::from_f64(0.25);
        let two = T::from_f64(2.0);
        // Shepperd's method: branch on the largest of w^2, x^2, y^2, z^2.
        let q = if trace.value() > 0.0 {
            let s = (trace + T::one()).sqrt() * two;
            Quat::new(
                s * quarter,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0].value() > m[1][1].value() && m[0][0].value() > m[2][2].value() {
            let s = (T::one() + m[0][0] - m[1][1] - m[2][2]).sqrt() * two;
            Quat::new(
                (m[2][1] - m[1][2]) / s,
                s * quarter,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1].value() > m[2][2].value() {
            let s = (T::one() + m[1][1] - m[0][0] - m[2][2]).sqrt() * two;
            Quat::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                s * quarter,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (T::one() + m[2][2] - m[0][0] - m[1][1]).sqrt() * two;
            Quat::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                s * quarter,
            )
        };
        Rotation::from_quat(q)
    }
}

/// Integrate a body-frame angular displacement: `r * exp(omega_dt)`.
pub fn integrate_rotation<T: Real>(r: &Rotation<T>, omega_dt: Vec3<T>) -> Rotation<T> {
    r.compose(&Rotation::from_rotation_vector(omega_dt))
}

/// Rotation vector `d` such that `integrate_rotation(a, d) == b`.
pub fn rotation_difference<T: Real>(a: &Rotation<T>, b: &Rotation<T>) -> Vec3<T> {
    let mut rel = a.q.conjugate().mul(b.q);
    // Canonical sign so the difference stays in [0, pi].
    if rel.w.value() < 0.0 {
        rel = rel.scale(-T::one());
    }
    rel.log()
}

/// Pose of a frame B expressed in a frame A.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement<T = f64> {
    pub rotation: Rotation<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> Placement<T> {
    pub fn identity() -> Self {
        Placement {
            rotation: Rotation::identity(),
            translation: Vec3::zero(),
        }
    }

    pub fn new(rotation: Rotation<T>, translation: Vec3<T>) -> Self {
        Placement { rotation, translation }
    }

    pub fn from_translation(t: Vec3<T>) -> Self {
        Placement {
            rotation: Rotation::identity(),
            translation: t,
        }
    }

    /// `self` places B in A, `o` places C in B; result places C in A.
    pub fn compose(&self, o: &Placement<T>) -> Placement<T> {
        Placement {
            rotation: self.rotation.compose(&o.rotation),
            translation: self.translation.add(self.rotation.rotate(o.translation)),
        }
    }

    pub fn inverse(&self) -> Placement<T> {
        let rot = self.rotation.inverse();
        Placement {
            translation: rot.rotate(self.translation.neg()),
            rotation: rot,
        }
    }

    /// Map a point expressed in B to the same point expressed in A.
    pub fn act_on_point(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation.rotate(p).add(self.translation)
    }

    /// `self.inverse().act_on_point(p)` without building the inverse.
    pub fn inverse_act_on_point(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation.inverse_rotate(p.sub(self.translation))
    }
}

/// 6D motion vector `(angular, linear)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionVector<T = f64> {
    pub angular: Vec3<T>,
    pub linear: Vec3<T>,
}

impl<T: Real> MotionVector<T> {
    pub fn new(angular: Vec3<T>, linear: Vec3<T>) -> Self {
        MotionVector { angular, linear }
    }

    pub fn zero() -> Self {
        MotionVector::new(Vec3::zero(), Vec3::zero())
    }

    pub fn add(self, o: Self) -> Self {
        MotionVector::new(self.angular.add(o.angular), self.linear.add(o.linear))
    }

    pub fn sub(self, o: Self) -> Self {
        MotionVector::new(self.angular.sub(o.angular), self.linear.sub(o.linear))
    }

    pub fn scale(self, s: T) -> Self {
        MotionVector::new(self.angular.scale(s), self.linear.scale(s))
    }
}

/// 6D force vector: `angular` is the moment about the frame origin,
/// `linear` the force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceVector<T = f64> {
    pub angular: Vec3<T>,
    pub linear: Vec3<T>,
}

impl<T: Real> ForceVector<T> {
    pub fn new(angular: Vec3<T>, linear: Vec3<T>) -> Self {
        ForceVector { angular, linear }
    }

    pub fn zero() -> Self {
        ForceVector::new(Vec3::zero(), Vec3::zero())
    }

    pub fn add(self, o: Self) -> Self {
        ForceVector::new(self.angular.add(o.angular), self.linear.add(o.linear))
    }

    pub fn sub(self, o: Self) -> Self {
        ForceVector::new(self.angular.sub(o.angular), self.linear.sub(o.linear))
    }

    pub fn scale(self, s: T) -> Self {
        ForceVector::new(self.angular.scale(s), self.linear.scale(s))
    }
}

/// Mechanical power of a force acting on a body moving with `v`, both
/// expressed in the same frame. Invariant under change of frame.
pub fn power_pairing<T: Real>(f: &ForceVector<T>, v: &MotionVector<T>) -> T {
    f.angular.dot(v.angular) + f.linear.dot(v.linear)
}

/// Change of frame for a motion vector. `x` places B in A and `v` is
/// expressed in B; the result is the same motion expressed in A.
pub fn transform_motion<T: Real>(x: &Placement<T>, v: &MotionVector<T>) -> MotionVector<T> {
    let ang = x.rotation.rotate(v.angular);
    let lin = x.rotation.rotate(v.linear).add(x.translation.cross(ang));
    MotionVector::new(ang, lin)
}

/// Change of frame for a force vector (dual transform of
/// [`transform_motion`]; preserves [`power_pairing`]).
pub fn transform_force<T: Real>(x: &Placement<T>, f: &ForceVector<T>) -> ForceVector<T> {
    let lin = x.rotation.rotate(f.linear);
    let ang = x.rotation.rotate(f.angular).add(x.translation.cross(lin));
    ForceVector::new(ang, lin)
}

/// Motion expressed in A mapped to B where `x` places B in A.
pub fn inverse_transform_motion<T: Real>(
    x: &Placement<T>,
    v: &MotionVector<T>,
) -> MotionVector<T> {
    let ang = x.rotation.inverse_rotate(v.angular);
    let lin = x
        .rotation
        .inverse_rotate(v.linear.sub(x.translation.cross(v.angular)));
    MotionVector::new(ang, lin)
}

/// Force expressed in A mapped to B where `x` places B in A.
pub fn inverse_transform_force<T: Real>(x: &Placement<T>, f: &ForceVector<T>) -> ForceVector<T> {
    let lin = x.rotation.inverse_rotate(f.linear);
    let ang = x
        .rotation
        .inverse_rotate(f.angular.sub(x.translation.cross(f.linear)));
    ForceVector::new(ang, lin)
}

/// Spatial cross product of two motion vectors (`v x m`).
pub fn cross_motion<T: Real>(v: &MotionVector<T>, m: &MotionVector<T>) -> MotionVector<T> {
    MotionVector::new(
        v.angular.cross(m.angular),
        v.angular.cross(m.linear).add(v.linear.cross(m.angular)),
    )
}

/// Spatial cross product of a motion and a force vector (`v x* f`).
pub fn cross_force<T: Real>(v: &MotionVector<T>, f: &ForceVector<T>) -> ForceVector<T> {
    ForceVector::new(
        v.angular.cross(f.angular).add(v.linear.cross(f.linear)),
        v.angular.cross(f.linear),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Vector4};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_rotation(rng: &mut StdRng) -> Rotation {
        Rotation::from_quat(Quat::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ))
    }

    fn random_vec3(rng: &mut StdRng) -> Vec3 {
        Vec3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        )
    }

    fn random_placement(rng: &mut StdRng) -> Placement {
        Placement::new(random_rotation(rng), random_vec3(rng))
    }

    /// Independent representation: 4x4 homogeneous matrix.
    fn to_homogeneous(x: &Placement) -> Matrix4<f64> {
        let r = x.rotation.to_mat3();
        let mut m = Matrix4::identity();
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] = r.rows[i][j];
            }
        }
        m[(0, 3)] = x.translation.x;
        m[(1, 3)] = x.translation.y;
        m[(2, 3)] = x.translation.z;
        m
    }

    #[test]
    fn compose_matches_homogeneous_matrix_product() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..100 {
            let a = random_placement(&mut rng);
            let b = random_placement(&mut rng);
            let c = a.compose(&b);
            let m = to_homogeneous(&a) * to_homogeneous(&b);
            let mc = to_homogeneous(&c);
            assert!((m - mc).abs().max() < 1e-12, "compose disagrees with 4x4 product");
        }
    }

    #[test]
    fn act_on_point_matches_homogeneous_matrix() {
        let mut rng = StdRng::seed_from_u64(12);
        for _ in 0..100 {
            let x = random_placement(&mut rng);
            let p = random_vec3(&mut rng);
            let q = x.act_on_point(p);
            let hq = to_homogeneous(&x) * Vector4::new(p.x, p.y, p.z, 1.0);
            assert!((q.x - hq.x).abs() < 1e-12);
            assert!((q.y - hq.y).abs() < 1e-12);
            assert!((q.z - hq.z).abs() < 1e-12);

            let back = x.inverse_act_on_point(q);
            assert!((back.x - p.x).abs() < 1e-12);
            assert!((back.y - p.y).abs() < 1e-12);
            assert!((back.z - p.z).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_composes_to_identity() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..100 {
            let x = random_placement(&mut rng);
            let i = x.compose(&x.inverse());
            assert!((i.rotation.quat().w - 1.0).abs() < 1e-12);
            assert!(i.translation.norm() < 1e-12);
        }
    }

    #[test]
    fn motion_and_force_transforms_preserve_power() {
        let mut rng = StdRng::seed_from_u64(14);
        for _ in 0..100 {
            let x = random_placement(&mut rng);
            let v = MotionVector::new(random_vec3(&mut rng), random_vec3(&mut rng));
            let f = ForceVector::new(random_vec3(&mut rng), random_vec3(&mut rng));
            let p0 = power_pairing(&f, &v);
            let p1 = power_pairing(&transform_force(&x, &f), &transform_motion(&x, &v));
            assert!((p0 - p1).abs() < 1e-12, "power changed under frame change");

            // Inverse transforms undo the forward ones.
            let v2 = inverse_transform_motion(&x, &transform_motion(&x, &v));
            let f2 = inverse_transform_force(&x, &transform_force(&x, &f));
            assert!(v2.angular.sub(v.angular).norm() < 1e-12);
            assert!(v2.linear.sub(v.linear).norm() < 1e-12);
            assert!(f2.angular.sub(f.angular).norm() < 1e-12);
            assert!(f2.linear.sub(f.linear).norm() < 1e-12);
        }
    }

    #[test]
    fn from_columns_inverts_to_mat3() {
        let mut rng = StdRng::seed_from_u64(19);
        for _ in 0..500 {
            let r = random_rotation(&mut rng);
            let m = r.to_mat3();
            let col = |c: usize| Vec3::new(m.rows[0][c], m.rows[1][c], m.rows[2][c]);
            let back = Rotation::from_columns(col(0), col(1), col(2));
            let d = rotation_difference(&r, &back);
            assert!(d.norm() < 1e-12, "round trip error {}", d.norm());
        }
        // Exercise every Shepperd branch with half-turns.
        for axis in [
            Vec3::new(std::f64::consts::PI, 0.0, 0.0),
            Vec3::new(0.0, std::f64::consts::PI, 0.0),
            Vec3::new(0.0, 0.0, std::f64::consts::PI),
        ] {
            let r = Rotation::from_rotation_vector(axis);
            let m = r.to_mat3();
            let col = |c: usize| Vec3::new(m.rows[0][c], m.rows[1][c], m.rows[2][c]);
            let back = Rotation::from_columns(col(0), col(1), col(2));
            assert!(rotation_difference(&r, &back).norm() < 1e-12);
        }
    }

    #[test]
    fn quarter_turn_round_trip() {
        let half_pi = std::f64::consts::FRAC_PI_2;
        let r = integrate_rotation(&Rotation::identity(), Vec3::new(0.0, 0.0, half_pi));
        let d = rotation_difference(&Rotation::identity(), &r);
        assert!((d.x - 0.0).abs() < 1e-12);
        assert!((d.y - 0.0).abs() < 1e-12);
        assert!((d.z - half_pi).abs() < 1e-12);
    }

    #[test]
    fn integrate_then_difference_round_trips() {
        let mut rng = StdRng::seed_from_u64(15);
        for _ in 0..200 {
            let r = random_rotation(&mut rng);
            // Keep |d| < pi so the log is unambiguous.
            let d = random_vec3(&mut rng).scale(0.5);
            let r2 = integrate_rotation(&r, d);
            let back = rotation_difference(&r, &r2);
            assert!(back.sub(d).norm() < 1e-10, "round trip failed: {:?} vs {:?}", d, back);
        }
    }

    #[test]
    fn rotation_stays_canonical_and_unit_over_many_ops() {
        let mut rng = StdRng::seed_from_u64(16);
        let mut r = Rotation::identity();
        for _ in 0..10_000 {
            r = r.compose(&random_rotation(&mut rng));
            assert!(r.quat().w >= 0.0, "canonical form lost");
        }
        assert!((r.quat().norm() - 1.0).abs() < 1e-9, "unit norm drifted");
    }

    #[test]
    fn log_map_small_angle_and_near_half_turn() {
        // Small angle: series branch.
        let tiny = Vec3::new(1e-12, -2e-12, 0.5e-12);
        let q = Quat::exp(tiny);
        let back = q.log();
        assert!(back.sub(tiny).norm() < 1e-18);

        // Near pi: angle is still accurate even though the axis direction
        // is poorly conditioned.
        let a = Vec3::new(0.0, 1.0, 0.0).scale(std::f64::consts::PI - 1e-9);
        let q = Quat::exp(a);
        let back = q.log();
        assert!((back.norm() - (std::f64::consts::PI - 1e-9)).abs() < 1e-8);
    }

    #[test]
    fn rotate_matches_matrix_form() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let v = random_vec3(&mut rng);
            let by_quat = r.rotate(v);
            let by_mat = r.to_mat3().mul_vec(v);
            assert!(by_quat.sub(by_mat).norm() < 1e-12);
            let back = r.inverse_rotate(by_quat);
            assert!(back.sub(v).norm() < 1e-12);
        }
    }

    #[test]
    fn cross_products_match_componentwise_definitions() {
        let mut rng = StdRng::seed_from_u64(18);
        for _ in 0..100 {
            let v = MotionVector::new(random_vec3(&mut rng), random_vec3(&mut rng));
            let m = MotionVector::new(random_vec3(&mut rng), random_vec3(&mut rng));
            let f = ForceVector::new(random_vec3(&mut rng), random_vec3(&mut rng));

            let vm = cross_motion(&v, &m);
            assert!(vm.angular.sub(v.angular.cross(m.angular)).norm() < 1e-14);
            assert!(vm
                .linear
                .sub(v.angular.cross(m.linear).add(v.linear.cross(m.angular)))
                .norm()
                < 1e-14);

            // d/dt <f, m> = <f, v x m> + <v x* f, m> = 0 for constant pairing:
            // check the defining duality identity instead.
            let lhs = power_pairing(&f, &cross_motion(&v, &m));
            let rhs = -power_pairing(&cross_force(&v, &f), &m);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
