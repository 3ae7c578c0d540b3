//! Forward kinematics, frame motion, Jacobians, and rigid-body dynamics
//! (recursive Newton-Euler inverse dynamics, composite-rigid-body mass
//! matrix) on a [`KinematicModel`].
//!
//! The recursions are generic over the scalar so they can run on dual
//! numbers; the public API instantiates them with `f64`.

use nalgebra::{DMatrix, DVector};

use crate::model::{joint_pose_from_config, Configuration, JointKind, KinematicModel, TangentVector};
use crate::scalar::Real;
use crate::spatial::{
    cross_force, cross_motion, inverse_transform_motion, transform_force, ForceVector, Mat3,
    MotionVector, Placement, Vec3,
};

/// Spatial inertia in a body frame: mass, center of mass, and rotational
/// inertia about the center of mass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SpatialInertia<T> {
    pub mass: T,
    pub com: Vec3<T>,
    pub i_com: Mat3<T>,
}

impl<T: Real> SpatialInertia<T> {
    fn from_link(l: &crate::model::LinkInertia) -> Self {
        SpatialInertia {
            mass: T::from_f64(l.mass),
            com: Vec3::from_f64([l.com.x, l.com.y, l.com.z]),
            i_com: Mat3::from_f64(l.moment.rows.map(|r| r)),
        }
    }

    /// Momentum `I v`: angular about the frame origin, then linear.
    fn apply(&self, v: &MotionVector<T>) -> ForceVector<T> {
        let v_com = v.linear.add(v.angular.cross(self.com));
        let lin = v_com.scale(self.mass);
        let ang = self.i_com.mul_vec(v.angular).add(self.com.cross(lin));
        ForceVector::new(ang, lin)
    }

    /// Express this inertia in the parent frame, `x` placing the body frame
    /// in the parent frame.
    fn transformed(&self, x: &Placement<T>) -> Self {
        let r = x.rotation.to_mat3();
        SpatialInertia {
            mass: self.mass,
            com: x.act_on_point(self.com),
            i_com: r.mul_mat(&self.i_com).mul_mat(&r.transpose()),
        }
    }

    fn add(&self, o: &Self) -> Self {
        let m = self.mass + o.mass;
        let com = if m.value() > 0.0 {
            self.com
                .scale(self.mass)
                .add(o.com.scale(o.mass))
                .scale(T::one() / m)
        } else {
            Vec3::zero()
        };
        let shift = |i: &Mat3<T>, mass: T, c: Vec3<T>| -> Mat3<T> {
            let d = c.sub(com);
            let d2 = d.norm_squared();
            // parallel axis: I + m (|d|^2 E - d d^T)
            let mut rows = i.rows;
            for (r, row) in rows.iter_mut().enumerate() {
                for (k, cell) in row.iter_mut().enumerate() {
                    let e = if r == k { d2 } else { T::zero() };
                    *cell = *cell + mass * (e - d.get(r) * d.get(k));
                }
            }
            Mat3 { rows }
        };
        SpatialInertia {
            mass: m,
            com,
            i_com: shift(&self.i_com, self.mass, self.com).add(&shift(&o.i_com, o.mass, o.com)),
        }
    }
}

/// Motion subspace contribution of one joint: `S * q_dot` in the joint frame.
fn joint_motion<T: Real>(kind: &JointKind, v: &[T], vo: usize) -> MotionVector<T> {
    match kind {
        JointKind::FreeFloating => MotionVector::new(
            Vec3::new(v[vo + 3], v[vo + 4], v[vo + 5]),
            Vec3::new(v[vo], v[vo + 1], v[vo + 2]),
        ),
        JointKind::Spherical => {
            MotionVector::new(Vec3::new(v[vo], v[vo + 1], v[vo + 2]), Vec3::zero())
        }
        JointKind::Prismatic(axis) => MotionVector::new(
            Vec3::zero(),
            Vec3::<T>::from_f64([axis.x, axis.y, axis.z]).scale(v[vo]),
        ),
    }
}

/// Project a force in the joint frame onto the joint's motion subspace,
/// writing the joint's tangent rows.
fn project_force<T: Real>(kind: &JointKind, f: &ForceVector<T>, out: &mut [T], vo: usize) {
    match kind {
        JointKind::FreeFloating => {
            out[vo] = f.linear.x;
            out[vo + 1] = f.linear.y;
            out[vo + 2] = f.linear.z;
            out[vo + 3] = f.angular.x;
            out[vo + 4] = f.angular.y;
            out[vo + 5] = f.angular.z;
        }
        JointKind::Spherical => {
            out[vo] = f.angular.x;
            out[vo + 1] = f.angular.y;
            out[vo + 2] = f.angular.z;
        }
        JointKind::Prismatic(axis) => {
            out[vo] = f.linear.x * T::from_f64(axis.x)
                + f.linear.y * T::from_f64(axis.y)
                + f.linear.z * T::from_f64(axis.z);
        }
    }
}

/// World placements of every joint frame.
pub fn joint_placements<T: Real>(model: &KinematicModel, q: &[T]) -> Vec<Placement<T>> {
    assert_eq!(q.len(), model.nq(), "configuration length");
    let mut out: Vec<Placement<T>> = Vec::with_capacity(model.n_joints());
    for (i, j) in model.joints.iter().enumerate() {
        let local = lift_placement(&j.local);
        let pose = joint_pose_from_config(&j.kind, q, model.q_offset(i));
        let in_parent = local.compose(&pose);
        let world = match j.parent {
            Some(p) => out[p].compose(&in_parent),
            None => in_parent,
        };
        out.push(world);
    }
    out
}

pub(crate) fn lift_placement<T: Real>(p: &Placement<f64>) -> Placement<T> {
    let q = p.rotation.quat();
    Placement::new(
        crate::spatial::Rotation::from_quat(crate::spatial::Quat::new(
            T::from_f64(q.w),
            T::from_f64(q.x),
            T::from_f64(q.y),
            T::from_f64(q.z),
        )),
        Vec3::from_f64([p.translation.x, p.translation.y, p.translation.z]),
    )
}

/// Per-body state produced by the forward propagation.
pub(crate) struct BodyMotion<T> {
    /// Placement of body i in its parent's frame.
    pub in_parent: Placement<T>,
    /// Placement of body i in the world.
    pub world: Placement<T>,
    /// Spatial velocity in body frame.
    pub vel: MotionVector<T>,
    /// Spatial acceleration in body frame (excluding any gravity offset).
    pub acc: MotionVector<T>,
}

/// Forward pass: placements, body-frame velocities and accelerations.
/// `accel_offset_world` is added to the root acceleration (used by RNEA to
/// emulate gravity); pass zero for kinematic accelerations.
pub(crate) fn propagate_motion<T: Real>(
    model: &KinematicModel,
    q: &[T],
    v: &[T],
    a: &[T],
    accel_offset_world: Vec3<T>,
) -> Vec<BodyMotion<T>> {
    assert_eq!(q.len(), model.nq());
    assert_eq!(v.len(), model.nv());
    assert_eq!(a.len(), model.nv());
    let mut out: Vec<BodyMotion<T>> = Vec::with_capacity(model.n_joints());
    for (i, j) in model.joints.iter().enumerate() {
        let local = lift_placement(&j.local);
        let pose = joint_pose_from_config(&j.kind, q, model.q_offset(i));
        let in_parent = local.compose(&pose);
        let vo = model.v_offset(i);
        let v_j = joint_motion(&j.kind, v, vo);
        let a_j = joint_motion(&j.kind, a, vo);
        let (world, vel, acc) = match j.parent {
            Some(p) => {
                let parent = &out[p];
                let world = parent.world.compose(&in_parent);
                let vel = inverse_transform_motion(&in_parent, &parent.vel).add(v_j);
                let acc = inverse_transform_motion(&in_parent, &parent.acc)
                    .add(a_j)
                    .add(cross_motion(&vel, &v_j));
                (world, vel, acc)
            }
            None => {
                let world = in_parent;
                let vel = v_j;
                let base_acc = inverse_transform_motion(
                    &world,
                    &MotionVector::new(Vec3::zero(), accel_offset_world),
                );
                let acc = base_acc.add(a_j).add(cross_motion(&vel, &v_j));
                (world, vel, acc)
            }
        };
        out.push(BodyMotion {
            in_parent,
            world,
            vel,
            acc,
        });
    }
    out
}

/// Recursive Newton-Euler inverse dynamics.
///
/// Returns the generalized force vector `tau` (length `nv`) satisfying
/// `M(q) qddot + b(q, qdot) = g(q) + tau_total`, i.e. `tau` is what the
/// joints must supply on top of gravity and the optional external wrenches.
/// `ext` holds, per joint, the wrench applied to that joint's link, expressed
/// about the joint origin in world axes.
pub(crate) fn rnea_kernel<T: Real>(
    model: &KinematicModel,
    q: &[T],
    v: &[T],
    a: &[T],
    gravity: Vec3<T>,
    ext: Option<&[ForceVector<T>]>,
) -> Vec<T> {
    let bodies = propagate_motion(model, q, v, a, gravity.neg());
    let mut forces: Vec<ForceVector<T>> = Vec::with_capacity(model.n_joints());
    for (i, _) in model.joints.iter().enumerate() {
        let inertia = SpatialInertia::from_link(&model.inertias[i]);
        let momentum = inertia.apply(&bodies[i].vel);
        let mut f = inertia
            .apply(&bodies[i].acc)
            .add(cross_force(&bodies[i].vel, &momentum));
        if let Some(ext) = ext {
            // World-axes wrench about the joint origin -> body axes.
            let rot = &bodies[i].world.rotation;
            let local = ForceVector::new(
                rot.inverse_rotate(ext[i].angular),
                rot.inverse_rotate(ext[i].linear),
            );
            f = f.sub(local);
        }
        forces.push(f);
    }
    let mut tau = vec![T::zero(); model.nv()];
    for i in (0..model.n_joints()).rev() {
        let j = &model.joints[i];
        project_force(&j.kind, &forces[i], &mut tau, model.v_offset(i));
        if let Some(p) = j.parent {
            let into_parent = transform_force(&bodies[i].in_parent, &forces[i]);
            forces[p] = forces[p].add(into_parent);
        }
    }
    tau
}

/// Forward kinematics result: joint placements and marker positions.
#[derive(Debug, Clone)]
pub struct FramesResult {
    pub joint_placements: Vec<Placement<f64>>,
    pub marker_positions: Vec<Vec3<f64>>,
}

pub fn forward_kinematics(model: &KinematicModel, q: &Configuration) -> FramesResult {
    let placements = joint_placements(model, q.as_slice());
    let markers = model
        .markers
        .iter()
        .map(|m| placements[m.joint].act_on_point(m.offset))
        .collect();
    FramesResult {
        joint_placements: placements,
        marker_positions: markers,
    }
}

/// Spatial velocity of a joint frame, expressed in that frame.
pub fn frame_velocity(
    model: &KinematicModel,
    q: &Configuration,
    v: &TangentVector,
    joint: usize,
) -> MotionVector<f64> {
    let zero = vec![0.0; model.nv()];
    let bodies = propagate_motion(model, q.as_slice(), v.as_slice(), &zero, Vec3::zero());
    bodies[joint].vel
}

/// Spatial acceleration of a joint frame, expressed in that frame
/// (kinematic, no gravity offset).
pub fn frame_acceleration(
    model: &KinematicModel,
    q: &Configuration,
    v: &TangentVector,
    a: &TangentVector,
    joint: usize,
) -> MotionVector<f64> {
    let bodies = propagate_motion(model, q.as_slice(), v.as_slice(), a.as_slice(), Vec3::zero());
    bodies[joint].acc
}

/// Jacobian of the world position of a point rigidly attached to `joint`
/// (at `offset` in the joint frame) with respect to the configuration
/// tangent: a `3 x nv` matrix, world axes.
pub fn point_jacobian(
    model: &KinematicModel,
    placements: &[Placement<f64>],
    joint: usize,
    offset: Vec3<f64>,
) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(3, model.nv());
    let p_world = placements[joint].act_on_point(offset);
    fill_point_jacobian(model, placements, joint, p_world, &mut jac, 0);
    jac
}

/// Spatial Jacobian of a frame at `offset` on `joint`, world-aligned axes:
/// rows `0..3` angular velocity, rows `3..6` linear velocity of the point.
pub fn frame_jacobian(
    model: &KinematicModel,
    placements: &[Placement<f64>],
    joint: usize,
    offset: Vec3<f64>,
) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(6, model.nv());
    let p_world = placements[joint].act_on_point(offset);
    fill_point_jacobian(model, placements, joint, p_world, &mut jac, 3);
    // Angular rows.
    let mut k = Some(joint);
    while let Some(i) = k {
        let j = &model.joints[i];
        let vo = model.v_offset(i);
        let rot = &placements[i].rotation;
        match j.kind {
            JointKind::FreeFloating => {
                for axis in 0..3 {
                    let w = rot.rotate(unit(axis));
                    jac[(0, vo + 3 + axis)] = w.x;
                    jac[(1, vo + 3 + axis)] = w.y;
                    jac[(2, vo + 3 + axis)] = w.z;
                }
            }
            JointKind::Spherical => {
                for axis in 0..3 {
                    let w = rot.rotate(unit(axis));
                    jac[(0, vo + axis)] = w.x;
                    jac[(1, vo + axis)] = w.y;
                    jac[(2, vo + axis)] = w.z;
                }
            }
            JointKind::Prismatic(_) => {}
        }
        k = j.parent;
    }
    jac
}

fn unit(axis: usize) -> Vec3<f64> {
    match axis {
        0 => Vec3::new(1.0, 0.0, 0.0),
        1 => Vec3::new(0.0, 1.0, 0.0),
        _ => Vec3::new(0.0, 0.0, 1.0),
    }
}

fn fill_point_jacobian(
    model: &KinematicModel,
    placements: &[Placement<f64>],
    joint: usize,
    p_world: Vec3<f64>,
    jac: &mut DMatrix<f64>,
    row0: usize,
) {
    let mut k = Some(joint);
    while let Some(i) = k {
        let j = &model.joints[i];
        let vo = model.v_offset(i);
        let rot = &placements[i].rotation;
        let origin = placements[i].translation;
        let lever = p_world.sub(origin);
        match &j.kind {
            JointKind::FreeFloating => {
                for axis in 0..3 {
                    let dir = rot.rotate(unit(axis));
                    jac[(row0, vo + axis)] = dir.x;
                    jac[(row0 + 1, vo + axis)] = dir.y;
                    jac[(row0 + 2, vo + axis)] = dir.z;
                    let w = rot.rotate(unit(axis));
                    let lin = w.cross(lever);
                    jac[(row0, vo + 3 + axis)] = lin.x;
                    jac[(row0 + 1, vo + 3 + axis)] = lin.y;
                    jac[(row0 + 2, vo + 3 + axis)] = lin.z;
                }
            }
            JointKind::Spherical => {
                for axis in 0..3 {
                    let w = rot.rotate(unit(axis));
                    let lin = w.cross(lever);
                    jac[(row0, vo + axis)] = lin.x;
                    jac[(row0 + 1, vo + axis)] = lin.y;
                    jac[(row0 + 2, vo + axis)] = lin.z;
                }
            }
            JointKind::Prismatic(axis) => {
                let dir = rot.rotate(*axis);
                jac[(row0, vo)] = dir.x;
                jac[(row0 + 1, vo)] = dir.y;
                jac[(row0 + 2, vo)] = dir.z;
            }
        }
        k = j.parent;
    }
}

/// Inverse dynamics, `f64` front end over [`rnea_kernel`].
pub fn inverse_dynamics(
    model: &KinematicModel,
    q: &Configuration,
    v: &TangentVector,
    a: &TangentVector,
    gravity: Vec3<f64>,
    ext: Option<&[ForceVector<f64>]>,
) -> DVector<f64> {
    let tau = rnea_kernel(model, q.as_slice(), v.as_slice(), a.as_slice(), gravity, ext);
    DVector::from_vec(tau)
}

/// Joint-space mass matrix via the composite-rigid-body algorithm.
pub fn mass_matrix(model: &KinematicModel, q: &Configuration) -> DMatrix<f64> {
    let placements_rel: Vec<Placement<f64>> = model
        .joints
        .iter()
        .enumerate()
        .map(|(i, j)| {
            j.local
                .compose(&joint_pose_from_config(&j.kind, q.as_slice(), model.q_offset(i)))
        })
        .collect();
    let mut composite: Vec<SpatialInertia<f64>> = model
        .inertias
        .iter()
        .map(SpatialInertia::from_link)
        .collect();
    let nv = model.nv();
    let mut m = DMatrix::zeros(nv, nv);

    for i in (0..model.n_joints()).rev() {
        let ji = &model.joints[i];
        let vo_i = model.v_offset(i);
        let nv_i = ji.kind.nv();
        // Force columns F = Ic_i * S_i, then walk up the tree.
        let mut cols: Vec<ForceVector<f64>> = (0..nv_i)
            .map(|d| {
                let mut e = vec![0.0; nv];
                e[vo_i + d] = 1.0;
                composite[i].apply(&joint_motion(&ji.kind, &e, vo_i))
            })
            .collect();
        // Diagonal block.
        for (d, f) in cols.iter().enumerate() {
            let mut rows = vec![0.0; nv];
            project_force(&ji.kind, f, &mut rows, vo_i);
            for dd in 0..nv_i {
                m[(vo_i + dd, vo_i + d)] = rows[vo_i + dd];
            }
        }
        // Off-diagonal blocks with every ancestor.
        let mut anc = ji.parent;
        let mut cur = i;
        while let Some(p) = anc {
            for f in cols.iter_mut() {
                *f = transform_force(&placements_rel[cur], f);
            }
            let jp = &model.joints[p];
            let vo_p = model.v_offset(p);
            for (d, f) in cols.iter().enumerate() {
                let mut rows = vec![0.0; nv];
                project_force(&jp.kind, f, &mut rows, vo_p);
                for dd in 0..jp.kind.nv() {
                    m[(vo_p + dd, vo_i + d)] = rows[vo_p + dd];
                    m[(vo_i + d, vo_p + dd)] = rows[vo_p + dd];
                }
            }
            cur = p;
            anc = jp.parent;
        }
        // Fold the composite inertia into the parent.
        if let Some(p) = ji.parent {
            let folded = composite[i].transformed(&placements_rel[i]);
            composite[p] = composite[p].add(&folded);
        }
    }
    m
}

/// Mass matrix, bias (Coriolis/centrifugal) and generalized gravity, so that
/// `M qddot + bias = gravity_torque + tau_applied`.
#[derive(Debug, Clone)]
pub struct DynamicsTerms {
    pub mass: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub gravity_torque: DVector<f64>,
}

pub fn dynamics_terms(
    model: &KinematicModel,
    q: &Configuration,
    v: &TangentVector,
    gravity: Vec3<f64>,
) -> DynamicsTerms {
    let zero = TangentVector::zeros(model.nv());
    let with_vel = inverse_dynamics(model, q, v, &zero, gravity, None);
    let at_rest = inverse_dynamics(model, q, &zero, &zero, gravity, None);
    DynamicsTerms {
        mass: mass_matrix(model, q),
        bias: with_vel - &at_rest,
        gravity_torque: -at_rest,
    }
}

/// Inverse-dynamics residual with backward-difference acceleration:
/// `rnea(q, v, (v - v_prev)/dt, ext) - selection(tau)`.
///
/// For the person model (`tau` on every dof past the 6 base dofs) the full
/// `nv` rows are returned. For an object model only the 6 base rows are
/// meaningful (head and contact joints are virtual); callers slice.
pub fn dynamics_residual(
    model: &KinematicModel,
    q: &Configuration,
    v_prev: &TangentVector,
    v: &TangentVector,
    dt: f64,
    gravity: Vec3<f64>,
    tau: Option<&DVector<f64>>,
    ext: Option<&[ForceVector<f64>]>,
) -> DVector<f64> {
    let a = TangentVector((&v.0 - &v_prev.0) / dt);
    let mut r = inverse_dynamics(model, q, v, &a, gravity, ext);
    if let Some(tau) = tau {
        assert_eq!(tau.len() + 6, model.nv(), "actuation on non-base dofs");
        for (k, t) in tau.iter().enumerate() {
            r[6 + k] -= t;
        }
    }
    r
}
