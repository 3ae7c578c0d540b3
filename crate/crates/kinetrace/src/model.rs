//! Kinematic tree models of the person and the manipulated object.
//!
//! A model is a list of joints in topological order (parent before child),
//! each carrying the inertia of its child link, plus virtual markers and,
//! for the person, the sole rectangles used for ground contact. Configurations
//! live on a product manifold (free-floating base, unit-quaternion spherical
//! joints, scalar prismatic joints); [`KinematicModel::integrate`] and
//! [`KinematicModel::difference`] are the blockwise retraction and its
//! inverse.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::scalar::{Dual, Real};
use crate::spatial::{Mat3, Placement, Quat, Rotation, Vec3};

/// Joint type. Configuration / tangent widths: free 7/6, spherical 4/3,
/// prismatic 1/1.
#[derive(Debug, Clone, PartialEq)]
pub enum JointKind {
    /// `[tx ty tz, qw qx qy qz]`; tangent `[v_local(3), omega_local(3)]`.
    FreeFloating,
    /// `[qw qx qy qz]`; tangent is the local angular velocity.
    Spherical,
    /// Translation along `axis` (unit, in the joint's parent-fixed frame).
    Prismatic(Vec3<f64>),
}

impl JointKind {
    pub fn nq(&self) -> usize {
        match self {
            JointKind::FreeFloating => 7,
            JointKind::Spherical => 4,
            JointKind::Prismatic(_) => 1,
        }
    }

    pub fn nv(&self) -> usize {
        match self {
            JointKind::FreeFloating => 6,
            JointKind::Spherical => 3,
            JointKind::Prismatic(_) => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    /// `None` only for joint 0 (the root).
    pub parent: Option<usize>,
    /// Fixed placement of this joint's zero-configuration frame in the
    /// parent joint's frame.
    pub local: Placement<f64>,
    /// Configuration bounds for prismatic joints (`[lo, hi]` on the scalar).
    pub limits: Option<(f64, f64)>,
}

/// Inertia of the link attached to (distal of) a joint, in the joint frame.
#[derive(Debug, Clone)]
pub struct LinkInertia {
    pub mass: f64,
    /// Center of mass in the joint frame.
    pub com: Vec3<f64>,
    /// Rotational inertia about the center of mass, in the joint frame.
    pub moment: Mat3<f64>,
}

impl LinkInertia {
    pub fn zero() -> Self {
        LinkInertia {
            mass: 0.0,
            com: Vec3::zero(),
            moment: Mat3::from_f64([[0.0; 3]; 3]),
        }
    }
}

/// Virtual marker rigidly attached to a joint frame.
#[derive(Debug, Clone)]
pub struct Marker {
    pub name: String,
    pub joint: usize,
    pub offset: Vec3<f64>,
}

/// Ground-contact rectangle under one ankle, in the ankle joint frame.
#[derive(Debug, Clone)]
pub struct SoleGeometry {
    pub ankle_joint: usize,
    pub vertices: [Vec3<f64>; 4],
}

/// Object-specific bookkeeping: which joints are the prismatic head and the
/// prismatic contact slots along the handle.
#[derive(Debug, Clone)]
pub struct ObjectInfo {
    pub handle_length: f64,
    pub head_joint: usize,
    pub contact_joints: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct KinematicModel {
    pub name: String,
    pub joints: Vec<Joint>,
    pub inertias: Vec<LinkInertia>,
    pub markers: Vec<Marker>,
    pub soles: Vec<SoleGeometry>,
    pub object: Option<ObjectInfo>,
    q_offsets: Vec<usize>,
    v_offsets: Vec<usize>,
    nq: usize,
    nv: usize,
}

/// Configuration vector of one model (manifold point).
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration(pub DVector<f64>);

/// Tangent vector of one model (velocity, or a scaled update step).
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector(pub DVector<f64>);

impl Configuration {
    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }
}

impl TangentVector {
    pub fn zeros(n: usize) -> Self {
        TangentVector(DVector::zeros(n))
    }
    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("duplicate joint name `{0}`")]
    DuplicateJoint(String),
    #[error("joint `{joint}` references unknown parent `{parent}`")]
    UnknownParent { joint: String, parent: String },
    #[error("joint `{joint}` must come after its parent `{parent}`")]
    ParentOrder { joint: String, parent: String },
    #[error("joint 0 must be the free-floating root, found `{0}`")]
    BadRoot(String),
    #[error("human joints after the root must be spherical, `{0}` is not")]
    NonSphericalHuman(String),
    #[error("link entry references unknown joint `{0}`")]
    UnknownLinkJoint(String),
    #[error("marker `{marker}` references unknown joint `{joint}`")]
    UnknownMarkerJoint { marker: String, joint: String },
    #[error("mass fractions sum to {0}, expected 1")]
    MassFractionSum(f64),
    #[error("non-positive value for `{field}`: {value}")]
    NonPositive { field: &'static str, value: f64 },
    #[error("missing link parameters for joint `{0}`")]
    MissingLink(String),
    #[error("sole references unknown ankle joint `{0}`")]
    UnknownAnkle(String),
    #[error("configuration length {got}, model expects {expected}")]
    ConfigurationLength { got: usize, expected: usize },
    #[error("tangent length {got}, model expects {expected}")]
    TangentLength { got: usize, expected: usize },
    #[error("joint `{joint}` quaternion norm {norm} too far from 1")]
    QuaternionNorm { joint: String, norm: f64 },
    #[error("joint `{joint}` value {value} outside [{lo}, {hi}]")]
    OutOfRange {
        joint: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("prismatic axis must be non-zero")]
    ZeroAxis,
}

impl KinematicModel {
    pub fn new(
        name: &str,
        joints: Vec<Joint>,
        inertias: Vec<LinkInertia>,
        markers: Vec<Marker>,
        soles: Vec<SoleGeometry>,
        object: Option<ObjectInfo>,
    ) -> Result<Self, ModelError> {
        assert_eq!(joints.len(), inertias.len(), "one link inertia per joint");
        let mut seen = std::collections::HashSet::new();
        for j in &joints {
            if !seen.insert(j.name.clone()) {
                return Err(ModelError::DuplicateJoint(j.name.clone()));
            }
        }
        for (i, j) in joints.iter().enumerate() {
            match j.parent {
                None => {
                    if i != 0 {
                        return Err(ModelError::UnknownParent {
                            joint: j.name.clone(),
                            parent: "<none>".into(),
                        });
                    }
                }
                Some(p) => {
                    if p >= i {
                        return Err(ModelError::ParentOrder {
                            joint: j.name.clone(),
                            parent: joints[p].name.clone(),
                        });
                    }
                }
            }
        }
        let mut q_offsets = Vec::with_capacity(joints.len());
        let mut v_offsets = Vec::with_capacity(joints.len());
        let (mut nq, mut nv) = (0, 0);
        for j in &joints {
            q_offsets.push(nq);
            v_offsets.push(nv);
            nq += j.kind.nq();
            nv += j.kind.nv();
        }
        Ok(KinematicModel {
            name: name.to_string(),
            joints,
            inertias,
            markers,
            soles,
            object,
            q_offsets,
            v_offsets,
            nq,
            nv,
        })
    }

    pub fn nq(&self) -> usize {
        self.nq
    }

    pub fn nv(&self) -> usize {
        self.nv
    }

    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn q_offset(&self, joint: usize) -> usize {
        self.q_offsets[joint]
    }

    pub fn v_offset(&self, joint: usize) -> usize {
        self.v_offsets[joint]
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn marker_index(&self, name: &str) -> Option<usize> {
        self.markers.iter().position(|m| m.name == name)
    }

    /// Identity rotations, zero translations; object head extended to the
    /// handle end, contact slots at zero.
    pub fn neutral_configuration(&self) -> Configuration {
        let mut q = DVector::zeros(self.nq);
        for (i, j) in self.joints.iter().enumerate() {
            let o = self.q_offsets[i];
            match j.kind {
                JointKind::FreeFloating => q[o + 3] = 1.0,
                JointKind::Spherical => q[o] = 1.0,
                JointKind::Prismatic(_) => {
                    if let Some(obj) = &self.object {
                        if obj.head_joint == i {
                            q[o] = obj.handle_length;
                        }
                    }
                }
            }
        }
        Configuration(q)
    }

    /// Blockwise retraction: free joints translate in the base frame and
    /// rotate locally, spherical joints rotate locally, prismatic joints add.
    /// `d` is a tangent step (velocity times dt, or a solver update).
    pub fn integrate(&self, q: &Configuration, d: &TangentVector) -> Result<Configuration, ModelError> {
        self.check_q(q)?;
        self.check_v(d)?;
        let mut out = q.0.clone();
        for (i, j) in self.joints.iter().enumerate() {
            let qo = self.q_offsets[i];
            let vo = self.v_offsets[i];
            match j.kind {
                JointKind::FreeFloating => {
                    let rot = quat_at(&q.0, qo + 3);
                    let v = Vec3::new(d.0[vo], d.0[vo + 1], d.0[vo + 2]);
                    let w = Vec3::new(d.0[vo + 3], d.0[vo + 4], d.0[vo + 5]);
                    let t = rot.rotate(v);
                    out[qo] += t.x;
                    out[qo + 1] += t.y;
                    out[qo + 2] += t.z;
                    let r2 = integrate_quat(rot, w);
                    write_quat(&mut out, qo + 3, r2);
                }
                JointKind::Spherical => {
                    let rot = quat_at(&q.0, qo);
                    let w = Vec3::new(d.0[vo], d.0[vo + 1], d.0[vo + 2]);
                    let r2 = integrate_quat(rot, w);
                    write_quat(&mut out, qo, r2);
                }
                JointKind::Prismatic(_) => out[qo] += d.0[vo],
            }
        }
        Ok(Configuration(out))
    }

    /// Inverse of [`KinematicModel::integrate`]:
    /// `integrate(a, difference(a, b)) == b` (up to the quaternion sign).
    pub fn difference(&self, a: &Configuration, b: &Configuration) -> Result<TangentVector, ModelError> {
        self.check_q(a)?;
        self.check_q(b)?;
        let mut out = DVector::zeros(self.nv);
        difference_kernel(self, a.0.as_slice(), b.0.as_slice(), out.as_mut_slice());
        Ok(TangentVector(out))
    }

    /// Checks lengths, quaternion norms (1e-6) and prismatic limits.
    pub fn validate_configuration(&self, q: &Configuration) -> Result<(), ModelError> {
        self.check_q(q)?;
        for (i, j) in self.joints.iter().enumerate() {
            let qo = self.q_offsets[i];
            let quat_off = match j.kind {
                JointKind::FreeFloating => Some(qo + 3),
                JointKind::Spherical => Some(qo),
                JointKind::Prismatic(_) => None,
            };
            if let Some(o) = quat_off {
                let n = (q.0[o] * q.0[o]
                    + q.0[o + 1] * q.0[o + 1]
                    + q.0[o + 2] * q.0[o + 2]
                    + q.0[o + 3] * q.0[o + 3])
                    .sqrt();
                if (n - 1.0).abs() > 1e-6 {
                    return Err(ModelError::QuaternionNorm {
                        joint: j.name.clone(),
                        norm: n,
                    });
                }
            }
            if let Some((lo, hi)) = j.limits {
                let v = q.0[qo];
                if v < lo - 1e-12 || v > hi + 1e-12 {
                    return Err(ModelError::OutOfRange {
                        joint: j.name.clone(),
                        value: v,
                        lo,
                        hi,
                    });
                }
            }
        }
        Ok(())
    }

    /// World positions of all markers; thin wrapper over forward kinematics.
    pub fn marker_positions(&self, q: &Configuration) -> Result<Vec<Vec3<f64>>, ModelError> {
        self.check_q(q)?;
        let placements = crate::dynamics::joint_placements(self, q.as_slice());
        Ok(self
            .markers
            .iter()
            .map(|m| placements[m.joint].act_on_point(m.offset))
            .collect())
    }

    pub fn check_q(&self, q: &Configuration) -> Result<(), ModelError> {
        if q.len() != self.nq {
            return Err(ModelError::ConfigurationLength {
                got: q.len(),
                expected: self.nq,
            });
        }
        Ok(())
    }

    pub fn check_v(&self, v: &TangentVector) -> Result<(), ModelError> {
        if v.len() != self.nv {
            return Err(ModelError::TangentLength {
                got: v.len(),
                expected: self.nv,
            });
        }
        Ok(())
    }

    /// Lift a configuration to dual numbers with all derivatives zero.
    pub fn lift_config(&self, q: &Configuration) -> Vec<Dual> {
        q.as_slice().iter().map(|&x| Dual::constant(x)).collect()
    }

    /// Seed the derivative channel of `qd` with tangent direction `dir`
    /// of the retraction at `q`: `qd = d/de integrate(q, e * e_dir)`.
    /// Clears previously seeded directions first.
    pub fn seed_config_direction(&self, q: &Configuration, dir: usize, qd: &mut [Dual]) {
        for (slot, &x) in qd.iter_mut().zip(q.as_slice()) {
            *slot = Dual::constant(x);
        }
        let joint = match self
            .joints
            .iter()
            .enumerate()
            .find(|(i, j)| dir >= self.v_offsets[*i] && dir < self.v_offsets[*i] + j.kind.nv())
        {
            Some((i, _)) => i,
            None => panic!("tangent direction {dir} out of range"),
        };
        let qo = self.q_offsets[joint];
        let vo = self.v_offsets[joint];
        let local = dir - vo;
        match self.joints[joint].kind {
            JointKind::FreeFloating => {
                if local < 3 {
                    // Translation moves along the base rotation's column.
                    let rot = quat_at(&q.0, qo + 3);
                    let mut e = Vec3::zero();
                    match local {
                        0 => e.x = 1.0,
                        1 => e.y = 1.0,
                        _ => e.z = 1.0,
                    }
                    let col = rot.rotate(e);
                    qd[qo].eps = col.x;
                    qd[qo + 1].eps = col.y;
                    qd[qo + 2].eps = col.z;
                } else {
                    seed_quat_direction(&q.0, qo + 3, local - 3, qd);
                }
            }
            JointKind::Spherical => seed_quat_direction(&q.0, qo, local, qd),
            JointKind::Prismatic(_) => qd[qo].eps = 1.0,
        }
    }
}

fn quat_at(q: &DVector<f64>, o: usize) -> Rotation<f64> {
    Rotation::from_wxyz(q[o], q[o + 1], q[o + 2], q[o + 3])
}

fn integrate_quat(r: Rotation<f64>, w: Vec3<f64>) -> Rotation<f64> {
    crate::spatial::integrate_rotation(&r, w)
}

fn write_quat(q: &mut DVector<f64>, o: usize, r: Rotation<f64>) {
    let quat = r.quat();
    q[o] = quat.w;
    q[o + 1] = quat.x;
    q[o + 2] = quat.y;
    q[o + 3] = quat.z;
}

/// `d/de [q * exp(e * e_axis)]` at `e = 0` is `0.5 * q * (0, e_axis)`.
fn seed_quat_direction(q: &DVector<f64>, o: usize, axis: usize, qd: &mut [Dual]) {
    let (w, x, y, z) = (q[o], q[o + 1], q[o + 2], q[o + 3]);
    let mut a = [0.0; 3];
    a[axis] = 0.5;
    // (w, v) * (0, a) = (-v.a, w a + v x a)
    qd[o].eps = -(x * a[0] + y * a[1] + z * a[2]);
    qd[o + 1].eps = w * a[0] + y * a[2] - z * a[1];
    qd[o + 2].eps = w * a[1] + z * a[0] - x * a[2];
    qd[o + 3].eps = w * a[2] + x * a[1] - y * a[0];
}

/// Read one joint's pose out of a configuration slice, generically.
pub(crate) fn joint_pose_from_config<T: Real>(
    kind: &JointKind,
    q: &[T],
    qo: usize,
) -> Placement<T> {
    match kind {
        JointKind::FreeFloating => {
            let t = Vec3::new(q[qo], q[qo + 1], q[qo + 2]);
            let r = Rotation::from_quat(Quat::new(q[qo + 3], q[qo + 4], q[qo + 5], q[qo + 6]));
            Placement::new(r, t)
        }
        JointKind::Spherical => {
            let r = Rotation::from_quat(Quat::new(q[qo], q[qo + 1], q[qo + 2], q[qo + 3]));
            Placement::new(r, Vec3::zero())
        }
        JointKind::Prismatic(axis) => {
            Placement::from_translation(Vec3::<T>::from_f64([axis.x, axis.y, axis.z]).scale(q[qo]))
        }
    }
}

/// Tangent step from configuration `a` to `b`, generic over the scalar so
/// residuals built on it can be differentiated with dual numbers.
pub(crate) fn difference_kernel<T: Real>(
    model: &KinematicModel,
    a: &[T],
    b: &[T],
    out: &mut [T],
) {
    for (i, j) in model.joints.iter().enumerate() {
        let qo = model.q_offsets[i];
        let vo = model.v_offsets[i];
        match j.kind {
            JointKind::FreeFloating => {
                let ra = Rotation::from_quat(Quat::new(a[qo + 3], a[qo + 4], a[qo + 5], a[qo + 6]));
                let rb = Rotation::from_quat(Quat::new(b[qo + 3], b[qo + 4], b[qo + 5], b[qo + 6]));
                let dt = Vec3::new(b[qo] - a[qo], b[qo + 1] - a[qo + 1], b[qo + 2] - a[qo + 2]);
                let v = ra.inverse_rotate(dt);
                let w = crate::spatial::rotation_difference(&ra, &rb);
                out[vo] = v.x;
                out[vo + 1] = v.y;
                out[vo + 2] = v.z;
                out[vo + 3] = w.x;
                out[vo + 4] = w.y;
                out[vo + 5] = w.z;
            }
            JointKind::Spherical => {
                let ra = Rotation::from_quat(Quat::new(a[qo], a[qo + 1], a[qo + 2], a[qo + 3]));
                let rb = Rotation::from_quat(Quat::new(b[qo], b[qo + 1], b[qo + 2], b[qo + 3]));
                let w = crate::spatial::rotation_difference(&ra, &rb);
                out[vo] = w.x;
                out[vo + 1] = w.y;
                out[vo + 2] = w.z;
            }
            JointKind::Prismatic(_) => out[vo] = b[qo] - a[qo],
        }
    }
}

// ---------------------------------------------------------------------------
// Model spec files and the default person / object parameters.
// ---------------------------------------------------------------------------

/// One joint entry of a model spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    /// Parent joint name; omitted for the root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// Translation of the joint frame in the parent frame, meters.
    pub offset: [f64; 3],
}

/// Shape primitive a link's rotational inertia is derived from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Primitive {
    /// Full edge lengths.
    Box { dims: [f64; 3] },
    /// Axis is a unit-ish direction in the link frame.
    Cylinder { radius: f64, length: f64, axis: [f64; 3] },
    Sphere { radius: f64 },
}

/// One link entry of a model spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkSpec {
    pub joint: String,
    /// Fraction of the total body mass; fractions must sum to 1.
    pub mass_fraction: f64,
    /// Center of mass in the joint frame.
    pub com: [f64; 3],
    pub primitive: Primitive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkerSpec {
    pub name: String,
    pub joint: String,
    pub offset: [f64; 3],
}

/// Sole rectangle attached below each ankle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoleSpec {
    /// Ankle joint names, typically the left and right ankle.
    pub ankles: Vec<String>,
    /// Fore-aft extent, meters.
    pub length: f64,
    /// Lateral extent, meters.
    pub width: f64,
    /// Distance from the ankle joint down to the sole plane, meters.
    pub vertical_offset: f64,
}

/// Person model description as stored in model files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HumanSpec {
    pub total_mass: f64,
    pub joints: Vec<JointSpec>,
    pub links: Vec<LinkSpec>,
    pub markers: Vec<MarkerSpec>,
    pub sole: SoleSpec,
}

/// Manipulated-object description: a rigid handle along the base frame's
/// `+x` with a prismatic head joint at the far end and prismatic contact
/// slots that carry the moving contact coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub handle_length: f64,
    pub mass: f64,
    /// Center of mass in the base (handle-end) frame.
    pub com: [f64; 3],
    /// Rotational inertia about the center of mass, row-major.
    pub inertia: [[f64; 3]; 3],
    /// Number of prismatic contact slots to build.
    pub contact_slots: usize,
}

/// Build the person model: free-floating pelvis plus spherical joints,
/// link inertias from mass fractions and shape primitives, markers, soles.
pub fn build_human_model(spec: &HumanSpec) -> Result<KinematicModel, ModelError> {
    if spec.total_mass <= 0.0 {
        return Err(ModelError::NonPositive {
            field: "total_mass",
            value: spec.total_mass,
        });
    }
    let fraction_sum: f64 = spec.links.iter().map(|l| l.mass_fraction).sum();
    if (fraction_sum - 1.0).abs() > 1e-6 {
        return Err(ModelError::MassFractionSum(fraction_sum));
    }

    let mut joints = Vec::with_capacity(spec.joints.len());
    for (i, js) in spec.joints.iter().enumerate() {
        let parent = match (&js.parent, i) {
            (None, 0) => None,
            (None, _) => return Err(ModelError::BadRoot(js.name.clone())),
            (Some(p), _) => {
                let idx = spec.joints[..i]
                    .iter()
                    .position(|o| &o.name == p)
                    .ok_or_else(|| {
                        if spec.joints.iter().any(|o| &o.name == p) {
                            ModelError::ParentOrder {
                                joint: js.name.clone(),
                                parent: p.clone(),
                            }
                        } else {
                            ModelError::UnknownParent {
                                joint: js.name.clone(),
                                parent: p.clone(),
                            }
                        }
                    })?;
                Some(idx)
            }
        };
        let kind = if i == 0 {
            JointKind::FreeFloating
        } else {
            JointKind::Spherical
        };
        joints.push(Joint {
            name: js.name.clone(),
            kind,
            parent,
            local: Placement::from_translation(Vec3::from_f64(js.offset)),
            limits: None,
        });
    }

    let mut inertias = vec![LinkInertia::zero(); joints.len()];
    let mut seen = vec![false; joints.len()];
    for link in &spec.links {
        let idx = joints
            .iter()
            .position(|j| j.name == link.joint)
            .ok_or_else(|| ModelError::UnknownLinkJoint(link.joint.clone()))?;
        let mass = link.mass_fraction * spec.total_mass;
        inertias[idx] = LinkInertia {
            mass,
            com: Vec3::from_f64(link.com),
            moment: primitive_moment(&link.primitive, mass)?,
        };
        seen[idx] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(ModelError::MissingLink(joints[i].name.clone()));
    }

    let mut markers = Vec::with_capacity(spec.markers.len());
    for ms in &spec.markers {
        let joint = joints
            .iter()
            .position(|j| j.name == ms.joint)
            .ok_or_else(|| ModelError::UnknownMarkerJoint {
                marker: ms.name.clone(),
                joint: ms.joint.clone(),
            })?;
        markers.push(Marker {
            name: ms.name.clone(),
            joint,
            offset: Vec3::from_f64(ms.offset),
        });
    }

    let mut soles = Vec::new();
    let (hl, hw, hv) = (
        spec.sole.length * 0.5,
        spec.sole.width * 0.5,
        spec.sole.vertical_offset,
    );
    if spec.sole.length <= 0.0 || spec.sole.width <= 0.0 {
        return Err(ModelError::NonPositive {
            field: "sole dimensions",
            value: spec.sole.length.min(spec.sole.width),
        });
    }
    for ankle in &spec.sole.ankles {
        let ankle_joint = joints
            .iter()
            .position(|j| &j.name == ankle)
            .ok_or_else(|| ModelError::UnknownAnkle(ankle.clone()))?;
        soles.push(SoleGeometry {
            ankle_joint,
            vertices: [
                Vec3::new(-hw, -hv, -hl),
                Vec3::new(hw, -hv, -hl),
                Vec3::new(hw, -hv, hl),
                Vec3::new(-hw, -hv, hl),
            ],
        });
    }

    KinematicModel::new("human", joints, inertias, markers, soles, None)
}

/// Build the object model: free-floating handle-end base, one prismatic head
/// joint along `+x`, and `contact_slots` prismatic contact joints along `+x`,
/// each bounded to `[0, handle_length]`. All handle mass sits on the base
/// link; head and contact links are virtual (massless).
pub fn build_object_model(spec: &ObjectSpec) -> Result<KinematicModel, ModelError> {
    if spec.handle_length <= 0.0 {
        return Err(ModelError::NonPositive {
            field: "handle_length",
            value: spec.handle_length,
        });
    }
    if spec.mass <= 0.0 {
        return Err(ModelError::NonPositive {
            field: "mass",
            value: spec.mass,
        });
    }
    let axis = Vec3::new(1.0, 0.0, 0.0);
    let mut joints = vec![Joint {
        name: "base".into(),
        kind: JointKind::FreeFloating,
        parent: None,
        local: Placement::identity(),
        limits: None,
    }];
    let mut inertias = vec![LinkInertia {
        mass: spec.mass,
        com: Vec3::from_f64(spec.com),
        moment: Mat3::from_f64(spec.inertia),
    }];
    joints.push(Joint {
        name: "head".into(),
        kind: JointKind::Prismatic(axis),
        parent: Some(0),
        local: Placement::identity(),
        limits: Some((0.0, spec.handle_length)),
    });
    inertias.push(LinkInertia::zero());
    let mut contact_joints = Vec::with_capacity(spec.contact_slots);
    for k in 0..spec.contact_slots {
        contact_joints.push(joints.len());
        joints.push(Joint {
            name: format!("contact_{k}"),
            kind: JointKind::Prismatic(axis),
            parent: Some(0),
            local: Placement::identity(),
            limits: Some((0.0, spec.handle_length)),
        });
        inertias.push(LinkInertia::zero());
    }
    let markers = vec![
        Marker {
            name: "handle_end".into(),
            joint: 0,
            offset: Vec3::zero(),
        },
        Marker {
            name: "head".into(),
            joint: 1,
            offset: Vec3::zero(),
        },
    ];
    KinematicModel::new(
        "object",
        joints,
        inertias,
        markers,
        Vec::new(),
        Some(ObjectInfo {
            handle_length: spec.handle_length,
            head_joint: 1,
            contact_joints,
        }),
    )
}

fn primitive_moment(p: &Primitive, mass: f64) -> Result<Mat3<f64>, ModelError> {
    let diag = |a: f64, b: f64, c: f64| {
        Mat3::from_f64([[a, 0.0, 0.0], [0.0, b, 0.0], [0.0, 0.0, c]])
    };
    match *p {
        Primitive::Box { dims } => {
            if dims.iter().any(|&d| d <= 0.0) {
                return Err(ModelError::NonPositive {
                    field: "box dims",
                    value: dims[0].min(dims[1]).min(dims[2]),
                });
            }
            let k = mass / 12.0;
            let [x, y, z] = dims;
            Ok(diag(
                k * (y * y + z * z),
                k * (x * x + z * z),
                k * (x * x + y * y),
            ))
        }
        Primitive::Cylinder { radius, length, axis } => {
            if radius <= 0.0 || length <= 0.0 {
                return Err(ModelError::NonPositive {
                    field: "cylinder dims",
                    value: radius.min(length),
                });
            }
            let a: Vec3<f64> = Vec3::from_f64(axis);
            let n = a.norm();
            if n < 1e-12 {
                return Err(ModelError::ZeroAxis);
            }
            let a = a.scale(1.0 / n);
            let i_axis = 0.5 * mass * radius * radius;
            let i_perp = mass * (3.0 * radius * radius + length * length) / 12.0;
            // i_perp * I + (i_axis - i_perp) * a a^T
            let mut m = Mat3::identity().scale(i_perp);
            let aat = Mat3::from_rows([
                [a.x * a.x, a.x * a.y, a.x * a.z],
                [a.y * a.x, a.y * a.y, a.y * a.z],
                [a.z * a.x, a.z * a.y, a.z * a.z],
            ]);
            m = m.add(&aat.scale(i_axis - i_perp));
            Ok(m)
        }
        Primitive::Sphere { radius } => {
            if radius <= 0.0 {
                return Err(ModelError::NonPositive {
                    field: "sphere radius",
                    value: radius,
                });
            }
            let i = 0.4 * mass * radius * radius;
            Ok(diag(i, i, i))
        }
    }
}

/// Default person parameters: 24 joints (free-floating pelvis plus 23
/// spherical joints), 18 virtual markers matching common 2D keypoint
/// detectors, 74.6 kg distributed over the links, and a 0.2 m x 0.08 m sole
/// rectangle under each ankle. Rest pose faces `-z` with `+y` up.
pub fn default_human_spec() -> HumanSpec {
    // (name, parent, offset, mass fraction, com, primitive)
    struct Row(
        &'static str,
        Option<&'static str>,
        [f64; 3],
        f64,
        [f64; 3],
        Primitive,
    );
    use Primitive::*;
    let cyl = |radius: f64, length: f64, axis: [f64; 3]| Cylinder { radius, length, axis };
    let rows = vec![
        Row("pelvis", None, [0.0, 0.0, 0.0], 0.2000, [0.0, 0.03, 0.0], Box { dims: [0.28, 0.18, 0.18] }),
        Row("left_hip", Some("pelvis"), [0.09, -0.07, 0.0], 0.1000, [0.0, -0.21, 0.0], cyl(0.07, 0.42, [0.0, 1.0, 0.0])),
        Row("right_hip", Some("pelvis"), [-0.09, -0.07, 0.0], 0.1000, [0.0, -0.21, 0.0], cyl(0.07, 0.42, [0.0, 1.0, 0.0])),
        Row("spine1", Some("pelvis"), [0.0, 0.11, 0.0], 0.0870, [0.0, 0.06, 0.0], Box { dims: [0.26, 0.13, 0.16] }),
        Row("left_knee", Some("left_hip"), [0.0, -0.42, 0.0], 0.0433, [0.0, -0.215, 0.0], cyl(0.05, 0.43, [0.0, 1.0, 0.0])),
        Row("right_knee", Some("right_hip"), [0.0, -0.42, 0.0], 0.0433, [0.0, -0.215, 0.0], cyl(0.05, 0.43, [0.0, 1.0, 0.0])),
        Row("spine2", Some("spine1"), [0.0, 0.13, 0.0], 0.1100, [0.0, 0.05, 0.0], Box { dims: [0.28, 0.15, 0.17] }),
        Row("left_ankle", Some("left_knee"), [0.0, -0.43, 0.0], 0.0100, [0.0, -0.03, -0.05], Box { dims: [0.08, 0.07, 0.12] }),
        Row("right_ankle", Some("right_knee"), [0.0, -0.43, 0.0], 0.0100, [0.0, -0.03, -0.05], Box { dims: [0.08, 0.07, 0.12] }),
        Row("spine3", Some("spine2"), [0.0, 0.06, 0.0], 0.0720, [0.0, 0.12, 0.0], Box { dims: [0.30, 0.12, 0.17] }),
        Row("left_foot", Some("left_ankle"), [0.0, -0.06, -0.13], 0.0037, [0.0, 0.0, -0.04], Box { dims: [0.08, 0.04, 0.08] }),
        Row("right_foot", Some("right_ankle"), [0.0, -0.06, -0.13], 0.0037, [0.0, 0.0, -0.04], Box { dims: [0.08, 0.04, 0.08] }),
        Row("neck", Some("spine3"), [0.0, 0.22, 0.0], 0.0120, [0.0, 0.04, 0.0], cyl(0.05, 0.09, [0.0, 1.0, 0.0])),
        Row("left_collar", Some("spine3"), [0.03, 0.19, 0.0], 0.0200, [0.08, 0.01, 0.0], cyl(0.03, 0.16, [1.0, 0.0, 0.0])),
        Row("right_collar", Some("spine3"), [-0.03, 0.19, 0.0], 0.0200, [-0.08, 0.01, 0.0], cyl(0.03, 0.16, [1.0, 0.0, 0.0])),
        Row("head", Some("neck"), [0.0, 0.07, 0.0], 0.0668, [0.0, 0.09, 0.0], Sphere { radius: 0.10 }),
        Row("left_shoulder", Some("left_collar"), [0.13, 0.02, 0.0], 0.0270, [0.13, 0.0, 0.0], cyl(0.04, 0.26, [1.0, 0.0, 0.0])),
        Row("right_shoulder", Some("right_collar"), [-0.13, 0.02, 0.0], 0.0270, [-0.13, 0.0, 0.0], cyl(0.04, 0.26, [1.0, 0.0, 0.0])),
        Row("left_elbow", Some("left_shoulder"), [0.26, 0.0, 0.0], 0.0160, [0.12, 0.0, 0.0], cyl(0.035, 0.25, [1.0, 0.0, 0.0])),
        Row("right_elbow", Some("right_shoulder"), [-0.26, 0.0, 0.0], 0.0160, [-0.12, 0.0, 0.0], cyl(0.035, 0.25, [1.0, 0.0, 0.0])),
        Row("left_wrist", Some("left_elbow"), [0.25, 0.0, 0.0], 0.0050, [0.04, 0.0, 0.0], Box { dims: [0.09, 0.025, 0.08] }),
        Row("right_wrist", Some("right_elbow"), [-0.25, 0.0, 0.0], 0.0050, [-0.04, 0.0, 0.0], Box { dims: [0.09, 0.025, 0.08] }),
        Row("left_hand", Some("left_wrist"), [0.08, 0.0, 0.0], 0.0011, [0.03, 0.0, 0.0], Box { dims: [0.06, 0.02, 0.07] }),
        Row("right_hand", Some("right_wrist"), [-0.08, 0.0, 0.0], 0.0011, [-0.03, 0.0, 0.0], Box { dims: [0.06, 0.02, 0.07] }),
    ];

    let joints = rows
        .iter()
        .map(|r| JointSpec {
            name: r.0.to_string(),
            parent: r.1.map(str::to_string),
            offset: r.2,
        })
        .collect();
    let links = rows
        .iter()
        .map(|r| LinkSpec {
            joint: r.0.to_string(),
            mass_fraction: r.3,
            com: r.4,
            primitive: r.5.clone(),
        })
        .collect();

    let m = |name: &str, joint: &str, offset: [f64; 3]| MarkerSpec {
        name: name.to_string(),
        joint: joint.to_string(),
        offset,
    };
    let markers = vec![
        m("nose", "head", [0.0, 0.07, -0.09]),
        m("neck", "neck", [0.0, 0.0, 0.0]),
        m("right_shoulder", "right_shoulder", [0.0, 0.0, 0.0]),
        m("right_elbow", "right_elbow", [0.0, 0.0, 0.0]),
        m("right_wrist", "right_wrist", [0.0, 0.0, 0.0]),
        m("left_shoulder", "left_shoulder", [0.0, 0.0, 0.0]),
        m("left_elbow", "left_elbow", [0.0, 0.0, 0.0]),
        m("left_wrist", "left_wrist", [0.0, 0.0, 0.0]),
        m("right_hip", "right_hip", [0.0, 0.0, 0.0]),
        m("right_knee", "right_knee", [0.0, 0.0, 0.0]),
        m("right_ankle", "right_ankle", [0.0, 0.0, 0.0]),
        m("left_hip", "left_hip", [0.0, 0.0, 0.0]),
        m("left_knee", "left_knee", [0.0, 0.0, 0.0]),
        m("left_ankle", "left_ankle", [0.0, 0.0, 0.0]),
        m("right_eye", "head", [-0.03, 0.09, -0.08]),
        m("left_eye", "head", [0.03, 0.09, -0.08]),
        m("right_ear", "head", [-0.07, 0.08, -0.01]),
        m("left_ear", "head", [0.07, 0.08, -0.01]),
    ];

    HumanSpec {
        total_mass: 74.6,
        joints,
        links,
        markers,
        sole: SoleSpec {
            ankles: vec!["left_ankle".into(), "right_ankle".into()],
            length: 0.2,
            width: 0.08,
            vertical_offset: 0.05,
        },
    }
}

/// Default handled object: a 1 m, 3 kg rigid stick (uniform cylinder) with
/// two contact slots.
pub fn default_object_spec() -> ObjectSpec {
    let mass = 3.0f64;
    let length = 1.0f64;
    let radius = 0.025f64;
    let i_axis = 0.5 * mass * radius * radius;
    let i_perp = mass * (3.0 * radius * radius + length * length) / 12.0;
    ObjectSpec {
        handle_length: length,
        mass,
        com: [0.5 * length, 0.0, 0.0],
        inertia: [
            [i_axis, 0.0, 0.0],
            [0.0, i_perp, 0.0],
            [0.0, 0.0, i_perp],
        ],
        contact_slots: 2,
    }
}

/// Full configuration of the object model given the 7 base coordinates and
/// per-slot contact coordinates; the head joint sits at the handle length.
pub fn object_full_config(
    model: &KinematicModel,
    base: &[f64],
    contacts: &[f64],
) -> Configuration {
    let info = model.object.as_ref().expect("object model");
    assert_eq!(base.len(), 7, "object base configuration is 7 values");
    assert_eq!(contacts.len(), info.contact_joints.len());
    let mut q = DVector::zeros(model.nq());
    q.as_mut_slice()[..7].copy_from_slice(base);
    q[model.q_offset(info.head_joint)] = info.handle_length;
    for (k, &j) in info.contact_joints.iter().enumerate() {
        q[model.q_offset(j)] = contacts[k];
    }
    Configuration(q)
}
