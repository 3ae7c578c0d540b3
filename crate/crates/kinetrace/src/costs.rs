//! The cost model: camera projection, robust reprojection terms, pose
//! prior, temporal-consistency and physics residuals, and their assembly
//! into a sparse nonlinear least-squares problem over whole trajectories.
//!
//! Every term is written as a residual vector `r(x)` with cost `0.5 |r|^2`;
//! robust losses and the mixture prior are folded into `r` so a standard
//! Gauss-Newton/Levenberg-Marquardt solver applies.

use nalgebra::{DMatrix, DVector};

use crate::io::{CameraSpec, GmmSpec, IoError};
use crate::scalar::{Dual, Real};
use crate::spatial::{Placement, Quat, Rotation, Vec3};

/// Pinhole camera. Frame convention: x right, y down, z along the optical
/// axis; `world_from_camera` poses that frame in the world.
#[derive(Debug, Clone)]
pub struct Camera {
    pub world_from_camera: Placement<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// Points closer than this to the camera plane are treated as unprojectable.
pub const NEAR_PLANE: f64 = 1e-3;

impl Camera {
    pub fn from_spec(spec: &CameraSpec) -> Self {
        Camera {
            world_from_camera: spec.world_from_camera(),
            fx: spec.fx,
            fy: spec.fy,
            cx: spec.cx,
            cy: spec.cy,
            width: spec.width,
            height: spec.height,
        }
    }

    /// Pixel coordinates of a world point, `None` behind the near plane.
    pub fn project(&self, p_world: Vec3<f64>) -> Option<[f64; 2]> {
        let p = self.world_from_camera.inverse_act_on_point(p_world);
        if p.z <= NEAR_PLANE {
            return None;
        }
        Some([
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ])
    }

    /// Projection with the depth clamped to the near plane, so residuals
    /// stay defined (with zero depth-gradient) if an iterate strays behind
    /// the camera; `clamped` reports whether that happened.
    pub fn project_clamped_with_jacobian(
        &self,
        p_world: Vec3<f64>,
    ) -> ([f64; 2], [[f64; 3]; 2], bool) {
        let p = self.world_from_camera.inverse_act_on_point(p_world);
        let clamped = p.z <= NEAR_PLANE;
        let z = if clamped { NEAR_PLANE } else { p.z };
        let uv = [self.fx * p.x / z + self.cx, self.fy * p.y / z + self.cy];
        // d(uv)/d(p_cam), with the depth column zeroed when clamped.
        let (dz_u, dz_v) = if clamped {
            (0.0, 0.0)
        } else {
            (-self.fx * p.x / (z * z), -self.fy * p.y / (z * z))
        };
        let k = [[self.fx / z, 0.0, dz_u], [0.0, self.fy / z, dz_v]];
        // p_cam = R^T (p_world - t): d(p_cam)/d(p_world) = R^T.
        let rt = self
            .world_from_camera
            .rotation
            .to_mat3()
            .transpose();
        let mut jac = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                jac[r][c] = (0..3).map(|i| k[r][i] * rt.rows[i][c]).sum();
            }
        }
        (uv, jac, clamped)
    }

    /// World point at pixel `uv` and camera-frame depth `z`.
    pub fn back_project(&self, uv: [f64; 2], depth: f64) -> Vec3<f64> {
        let p = Vec3::new(
            (uv[0] - self.cx) / self.fx * depth,
            (uv[1] - self.cy) / self.fy * depth,
            depth,
        );
        self.world_from_camera.act_on_point(p)
    }
}

/// Huber loss value `rho(s)` for the residual norm `s`.
pub fn huber_rho(s: f64, delta: f64) -> f64 {
    if s.abs() <= delta {
        0.5 * s * s
    } else {
        delta * (s.abs() - 0.5 * delta)
    }
}

/// Scale factors embedding the Huber loss into a least-squares residual:
/// `r~ = g(s) r` satisfies `|r~|^2 = 2 rho(s)`. Returns `(g, dg/ds)`;
/// both are continuous, with `g = 1, g' = 0` inside the quadratic region.
pub fn huber_scale(s: f64, delta: f64) -> (f64, f64) {
    if s <= delta {
        (1.0, 0.0)
    } else {
        let m = (2.0 * delta * s - delta * delta).sqrt();
        let g = m / s;
        let gp = delta * (delta - s) / (s * s * m);
        (g, gp)
    }
}

/// Robustified 2D residual and its Jacobian with respect to the raw
/// residual: `r~ = g(|r|) r`, `d r~ / d r = g I + (g'/|r|) r r^T`.
pub fn huber_embed2(r: [f64; 2], delta: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let s = (r[0] * r[0] + r[1] * r[1]).sqrt();
    if s < 1e-12 {
        return (r, [[1.0, 0.0], [0.0, 1.0]]);
    }
    let (g, gp) = huber_scale(s, delta);
    let out = [g * r[0], g * r[1]];
    let k = gp / s;
    let jac = [
        [g + k * r[0] * r[0], k * r[0] * r[1]],
        [k * r[1] * r[0], g + k * r[1] * r[1]],
    ];
    (out, jac)
}

/// Diagonal-covariance Gaussian mixture prior over pose tangent
/// coordinates, embedded as the 1D residual `sqrt(2 (nll - floor))`.
#[derive(Debug, Clone)]
pub struct PosePrior {
    dim: usize,
    means: Vec<DVector<f64>>,
    inv_var: Vec<DVector<f64>>,
    /// `ln w_k - 0.5 (d ln 2pi + sum ln var)` per component.
    log_norm: Vec<f64>,
    /// Lower bound of the negative log-likelihood over all inputs.
    nll_floor: f64,
}

/// Keeps the prior residual differentiable at its floor.
const PRIOR_RESIDUAL_EPS: f64 = 1e-9;

impl PosePrior {
    pub fn from_spec(spec: &GmmSpec) -> Result<Self, IoError> {
        spec.validate()?;
        let d = spec.dim as f64;
        let mut log_norm = Vec::with_capacity(spec.weights.len());
        for (w, var) in spec.weights.iter().zip(&spec.variances) {
            let log_det: f64 = var.iter().map(|v| v.ln()).sum();
            log_norm.push(w.ln() - 0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det));
        }
        // density <= sum_k w_k peak_k, so nll >= -lse(log_norm).
        let m = log_norm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let nll_floor = -(m + log_norm.iter().map(|l| (l - m).exp()).sum::<f64>().ln());
        Ok(PosePrior {
            dim: spec.dim,
            means: spec.means.iter().map(|m| DVector::from_vec(m.clone())).collect(),
            inv_var: spec
                .variances
                .iter()
                .map(|v| DVector::from_vec(v.iter().map(|x| 1.0 / x).collect()))
                .collect(),
            log_norm,
            nll_floor,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nll_floor(&self) -> f64 {
        self.nll_floor
    }

    /// Negative log-likelihood, generic so it can run on dual numbers.
    pub fn nll<T: Real>(&self, theta: &[T]) -> T {
        assert_eq!(theta.len(), self.dim);
        // log-sum-exp over components of log_norm_k - 0.5 * quad_k.
        let mut args: Vec<T> = Vec::with_capacity(self.means.len());
        for ((mean, ivar), log_norm) in
            self.means.iter().zip(&self.inv_var).zip(&self.log_norm)
        {
            let mut quad = T::zero();
            for i in 0..self.dim {
                let d = theta[i] - T::from_f64(mean[i]);
                quad = quad + d * d * T::from_f64(ivar[i]);
            }
            args.push(T::from_f64(*log_norm) - T::from_f64(0.5) * quad);
        }
        let m = args
            .iter()
            .map(|a| a.value())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = T::zero();
        for a in args {
            sum = sum + (a - T::from_f64(m)).exp();
        }
        -(T::from_f64(m) + sum.ln())
    }

    /// The least-squares embedding `sqrt(2 (nll - floor) + eps)`.
    pub fn residual<T: Real>(&self, theta: &[T]) -> T {
        let gap = self.nll(theta) - T::from_f64(self.nll_floor);
        let gap = if gap.value() < 0.0 { T::zero() } else { gap };
        (T::from_f64(2.0) * gap + T::from_f64(PRIOR_RESIDUAL_EPS)).sqrt()
    }

    /// Deterministic synthetic mixture for testing and the bundled asset:
    /// one component at the neutral pose plus `k - 1` perturbed ones.
    pub fn synthetic_spec(dim: usize, k: usize, seed: u64) -> GmmSpec {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut weights = vec![0.0; k];
        let mut means = Vec::with_capacity(k);
        let mut variances = Vec::with_capacity(k);
        for c in 0..k {
            weights[c] = if c == 0 { 2.0 } else { 1.0 };
            let mean: Vec<f64> = if c == 0 {
                vec![0.0; dim]
            } else {
                (0..dim).map(|_| rng.gen_range(-0.35..0.35)).collect()
            };
            let var: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.05..0.25)).collect();
            means.push(mean);
            variances.push(var);
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        GmmSpec {
            schema_version: crate::io::SCHEMA_VERSION.into(),
            dim,
            weights,
            means,
            variances,
        }
    }
}

/// Relative weights of the cost terms. Data terms are per pixel of
/// reprojection error; the physics and contact terms are scaled so their
/// residuals are commensurate at typical magnitudes.
#[derive(Debug, Clone)]
pub struct CostWeights {
    /// Person 2D keypoint reprojection (multiplied by detector confidence).
    pub data: f64,
    /// Object endpoint reprojection.
    pub data_object: f64,
    /// Pose prior strength.
    pub pose_prior: f64,
    /// Velocity/finite-difference consistency (defines v from q).
    pub collocation: f64,
    /// Person acceleration smoothing `|v_t - v_{t-1}|`.
    pub accel_smooth: f64,
    /// Object acceleration smoothing.
    pub accel_smooth_object: f64,
    /// Damping of the object's spin rate about its own handle axis.  Both
    /// endpoint markers lie on that axis, so the spin is invisible to the
    /// data terms; without a preference the per-frame orientations drift
    /// apart until consecutive frames approach a half-turn, where the
    /// rotation log flips sign and the collocation residual cliffs.
    pub roll_rate_object: f64,
    /// Multiplier on the acceleration smoothing while the dynamics terms
    /// are switched off (the kinematics-only stage).  Reprojection cannot
    /// see a joint's twist about the bone axis, so without this the twists
    /// jitter from frame to frame and hand the dynamics stage velocities it
    /// can only balance with enormous phantom forces.
    pub accel_smooth_boost: f64,
    /// Sliding-rate damping of the grasp position along the handle.
    pub slide_smooth: f64,
    /// No-slip penalty on active ground contact points.
    pub contact_slip: f64,
    /// Active contact points must lie on the ground plane.
    pub contact_plane: f64,
    /// Grasp attachment (hand coincides with its point on the handle).
    pub attach: f64,
    /// Newton-Euler consistency.
    pub dynamics: f64,
    /// Joint torque magnitude.
    pub torque: f64,
    /// Contact force magnitude (keeps indeterminate force splits unique).
    pub force_reg: f64,
    /// Contact force smoothing across frames.
    pub force_smooth: f64,
    /// Huber width for reprojection residuals, pixels.
    pub huber_px: f64,
    /// Detections below this confidence are ignored.
    pub min_confidence: f64,
    /// Friction half-angle in radians (tan of it is the friction
    /// coefficient).
    pub friction_angle: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            data: 1.0,
            data_object: 1.0,
            pose_prior: 2e-3,
            collocation: 1e2,
            accel_smooth: 1e-2,
            accel_smooth_object: 1e-2,
            roll_rate_object: 1e-1,
            accel_smooth_boost: 1e2,
            slide_smooth: 1e-2,
            contact_slip: 1e3,
            contact_plane: 1e3,
            attach: 1e3,
            dynamics: 1e2,
            torque: 1e-5,
            force_reg: 1e-6,
            force_smooth: 1e-4,
            huber_px: 10.0,
            min_confidence: 0.1,
            friction_angle: 0.8_f64.atan(),
        }
    }
}

impl CostWeights {
    /// Effective weight of an actuated Newton-Euler row once the muscle
    /// torque paying for it (at the torque regularizer's price) is
    /// minimized out in closed form.
    pub fn actuated_dynamics(&self) -> f64 {
        let (w, wt) = (self.dynamics, self.torque);
        w * wt / (w * w + wt * wt).sqrt()
    }

    /// Fraction of an actuated row's imbalance carried by the recovered
    /// muscle torque (the rest shows up as residual).
    pub fn torque_recovery_gain(&self) -> f64 {
        let (w, wt) = (self.dynamics, self.torque);
        w * w / (w * w + wt * wt)
    }
}

/// Pose tangent coordinates the prior is evaluated on: the rotation vector
/// of every non-base joint, generic over the scalar.
pub(crate) fn pose_tangent<T: Real>(
    model: &crate::model::KinematicModel,
    q: &[T],
    out: &mut Vec<T>,
) {
    out.clear();
    for (i, j) in model.joints.iter().enumerate() {
        if let crate::model::JointKind::Spherical = j.kind {
            let qo = model.q_offset(i);
            let rot = Rotation::from_quat(Quat::new(q[qo], q[qo + 1], q[qo + 2], q[qo + 3]));
            let w = rot.quat().log();
            out.push(w.x);
            out.push(w.y);
            out.push(w.z);
        }
    }
}

/// Optimization stages: fit kinematics first, then solve the (linear)
/// force problem with kinematics frozen, then polish everything jointly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Kinematics,
    Forces,
    Full,
}

impl Stage {
    pub fn label(&self) -> &'static str {
        match self {
            Stage::Kinematics => "kinematics",
            Stage::Forces => "forces",
            Stage::Full => "full",
        }
    }

    /// Variable groups held fixed during this stage.
    pub fn frozen_groups(&self) -> &'static [VarGroup] {
        match self {
            Stage::Kinematics => &[VarGroup::Cone, VarGroup::Wrench],
            Stage::Forces => &[
                VarGroup::PersonQ,
                VarGroup::PersonV,
                VarGroup::ObjectQ,
                VarGroup::ObjectV,
                VarGroup::Plane,
            ],
            Stage::Full => &[],
        }
    }
}

/// The kinds of decision variables, one instance per frame (except the
/// shared ground plane).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarGroup {
    /// Person configuration (tangent dimension `person.nv()`).
    PersonQ,
    /// Person generalized velocity.
    PersonV,
    /// Object configuration including handle-slot coordinates.
    ObjectQ,
    /// Object base twist (6).
    ObjectV,
    /// Friction-cone weights, 4 per ground contact point.
    Cone,
    /// Grasp wrenches, 6 per handle grasp (moment then force, world axes,
    /// about the grasping joint's origin, acting on the person).
    Wrench,
    /// Ground plane (2 normal tilts + offset).
    Plane,
}

pub const ALL_VAR_GROUPS: [VarGroup; 7] = [
    VarGroup::PersonQ,
    VarGroup::PersonV,
    VarGroup::ObjectQ,
    VarGroup::ObjectV,
    VarGroup::Cone,
    VarGroup::Wrench,
    VarGroup::Plane,
];

/// A specific variable block: `group` at `frame` (frame 0 for the plane).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarRef {
    pub group: VarGroup,
    pub frame: usize,
}

impl VarRef {
    pub fn new(group: VarGroup, frame: usize) -> Self {
        VarRef { group, frame }
    }
}

/// One 2D observation resolved against the model: which joint frame the
/// marker sits on, its local offset, the pixel measurement, and the weight
/// (term weight times detector confidence).
#[derive(Debug, Clone)]
pub struct Observation {
    pub marker: usize,
    pub joint: usize,
    pub offset: Vec3<f64>,
    pub uv: [f64; 2],
    pub weight: f64,
}

/// The full trajectory estimation problem: models, camera, measurements
/// resolved to model frames, contact schedule, and weights.
#[derive(Debug, Clone)]
pub struct Problem {
    pub person: crate::model::KinematicModel,
    pub object: Option<crate::model::KinematicModel>,
    pub camera: Camera,
    pub weights: CostWeights,
    pub prior: Option<PosePrior>,
    pub schedule: crate::contact::ContactSchedule,
    pub dt: f64,
    pub gravity: Vec3<f64>,
    /// Plane used to initialize the state (hint or ground default).
    pub plane_init: crate::contact::GroundPlane,
    /// Per frame, the usable person observations.
    pub person_obs: Vec<Vec<Observation>>,
    /// Per frame, the usable object observations.
    pub object_obs: Vec<Vec<Observation>>,
    /// Indices into `schedule.contacts` that carry friction-cone forces.
    pub cone_contacts: Vec<usize>,
    /// Indices into `schedule.contacts` that are handle grasps.
    pub grasp_contacts: Vec<usize>,
}

impl Problem {
    pub fn from_measurements(
        seq: &crate::io::MeasurementSequence,
        prior: Option<PosePrior>,
        weights: CostWeights,
    ) -> Result<Problem, crate::io::IoError> {
        let person = crate::model::build_human_model(&crate::model::default_human_spec())
            .expect("default human model is well-formed");
        let object = if seq.has_object() {
            Some(
                crate::model::build_object_model(&crate::model::default_object_spec())
                    .expect("default object model is well-formed"),
            )
        } else {
            None
        };
        seq.validate(&person, object.as_ref())?;
        let person_bind = seq.marker_bindings(&person)?;
        let object_bind = match &object {
            Some(o) => seq.object_marker_bindings(o)?,
            None => Vec::new(),
        };

        let mut person_obs = Vec::with_capacity(seq.n_frames());
        let mut object_obs = Vec::with_capacity(seq.n_frames());
        for frame in &seq.frames {
            person_obs.push(resolve_observations(
                &frame.person,
                &person_bind,
                &person,
                weights.data,
                weights.min_confidence,
            ));
            match (&frame.object, &object) {
                (Some(obs), Some(model)) => object_obs.push(resolve_observations(
                    obs,
                    &object_bind,
                    model,
                    weights.data_object,
                    weights.min_confidence,
                )),
                _ => object_obs.push(Vec::new()),
            }
        }

        let schedule = seq.to_schedule();
        let (cone_contacts, grasp_contacts) = classify_contacts(&schedule);

        let plane_init = match &seq.plane_hint {
            Some(hint) => crate::contact::GroundPlane::new(
                Vec3::new(hint.normal[0], hint.normal[1], hint.normal[2]),
                hint.offset,
            )
            .map_err(|e| crate::io::IoError::BadValue {
                field: "plane_hint",
                frame: None,
                message: e.to_string(),
            })?,
            None => crate::contact::GroundPlane::new(Vec3::new(0.0, 1.0, 0.0), 0.0).unwrap(),
        };

        Ok(Problem {
            person,
            object,
            camera: Camera::from_spec(&seq.camera),
            weights,
            prior,
            schedule,
            dt: 1.0 / seq.fps,
            gravity: Vec3::new(0.0, -9.81, 0.0),
            plane_init,
            person_obs,
            object_obs,
            cone_contacts,
            grasp_contacts,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.person_obs.len()
    }

    pub fn mu(&self) -> f64 {
        self.weights.friction_angle
    }

    /// Tangent dimension of one instance of a variable group.
    pub fn var_dim(&self, group: VarGroup) -> usize {
        match group {
            VarGroup::PersonQ | VarGroup::PersonV => self.person.nv(),
            VarGroup::ObjectQ => self.object.as_ref().map_or(0, |o| o.nv()),
            VarGroup::ObjectV => {
                if self.object.is_some() {
                    6
                } else {
                    0
                }
            }
            VarGroup::Cone => 4 * self.cone_contacts.len(),
            VarGroup::Wrench => 6 * self.grasp_contacts.len(),
            VarGroup::Plane => 3,
        }
    }

    /// Ground contacts (by cone slot) on the given body active at `frame`:
    /// `(cone_slot, joint, offset)`.
    pub(crate) fn active_cones(
        &self,
        body: crate::contact::ContactBody,
        frame: usize,
    ) -> Vec<(usize, usize, Vec3<f64>)> {
        let mut out = Vec::new();
        for (slot, &k) in self.cone_contacts.iter().enumerate() {
            if !self.schedule.is_active(k, frame) {
                continue;
            }
            if let crate::contact::ContactGeometry::GroundPoint {
                body: b,
                joint,
                offset,
            } = &self.schedule.contacts[k].geometry
            {
                if *b == body {
                    out.push((slot, *joint, *offset));
                }
            }
        }
        out
    }

    /// Handle grasps active at `frame`: `(wrench_slot, person_joint, slot_joint)`.
    pub(crate) fn active_grasps(&self, frame: usize) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (slot, &k) in self.grasp_contacts.iter().enumerate() {
            if !self.schedule.is_active(k, frame) {
                continue;
            }
            if let crate::contact::ContactGeometry::HandleGrasp {
                person_joint,
                slot: obj_slot,
            } = &self.schedule.contacts[k].geometry
            {
                let info = self
                    .object
                    .as_ref()
                    .and_then(|o| o.object.as_ref())
                    .expect("grasp contacts require an object model");
                out.push((slot, *person_joint, info.contact_joints[*obj_slot]));
            }
        }
        out
    }
}

/// Indices of schedule contacts split by kind: ground (friction-cone)
/// contacts first, handle grasps second, each in schedule order.
pub fn classify_contacts(
    schedule: &crate::contact::ContactSchedule,
) -> (Vec<usize>, Vec<usize>) {
    let mut cone = Vec::new();
    let mut grasp = Vec::new();
    for (k, c) in schedule.contacts.iter().enumerate() {
        match c.geometry {
            crate::contact::ContactGeometry::GroundPoint { .. } => cone.push(k),
            crate::contact::ContactGeometry::HandleGrasp { .. } => grasp.push(k),
        }
    }
    (cone, grasp)
}

fn resolve_observations(
    keypoints: &[Option<crate::io::Keypoint>],
    bindings: &[usize],
    model: &crate::model::KinematicModel,
    weight: f64,
    min_confidence: f64,
) -> Vec<Observation> {
    let mut out = Vec::new();
    for (i, kp) in keypoints.iter().enumerate() {
        if let Some(kp) = kp {
            if kp.confidence < min_confidence {
                continue;
            }
            let marker = bindings[i];
            let m = &model.markers[marker];
            out.push(Observation {
                marker,
                joint: m.joint,
                offset: m.offset,
                uv: [kp.u, kp.v],
                weight: weight * kp.confidence,
            });
        }
    }
    out
}

/// All decision variables of the trajectory problem.
#[derive(Debug, Clone)]
pub struct TrajectoryState {
    pub person_q: Vec<crate::model::Configuration>,
    pub person_v: Vec<crate::model::TangentVector>,
    pub object_q: Vec<crate::model::Configuration>,
    pub object_v: Vec<DVector<f64>>,
    /// Actuated joint torques (`person.nv() - 6` per frame). Not decision
    /// variables: the dynamics residual is quadratic in the torque, so the
    /// optimal torque has a closed form and is recovered after each solve.
    pub torque: Vec<DVector<f64>>,
    pub cone: Vec<DVector<f64>>,
    pub wrench: Vec<DVector<f64>>,
    pub plane: crate::contact::GroundPlane,
}

impl TrajectoryState {
    /// Everything at rest: neutral poses at the origin, zero velocities,
    /// zero forces, the problem's initial plane.
    pub fn neutral(problem: &Problem) -> Self {
        let t = problem.n_frames();
        let pq = problem.person.neutral_configuration();
        let oq = problem
            .object
            .as_ref()
            .map(|o| o.neutral_configuration());
        TrajectoryState {
            person_q: vec![pq; t],
            person_v: vec![crate::model::TangentVector::zeros(problem.person.nv()); t],
            object_q: match &oq {
                Some(q) => vec![q.clone(); t],
                None => Vec::new(),
            },
            object_v: if problem.object.is_some() {
                vec![DVector::zeros(6); t]
            } else {
                Vec::new()
            },
            torque: vec![DVector::zeros(problem.person.nv() - 6); t],
            cone: vec![DVector::zeros(problem.var_dim(VarGroup::Cone)); t],
            wrench: vec![DVector::zeros(problem.var_dim(VarGroup::Wrench)); t],
            plane: problem.plane_init.clone(),
        }
    }

    /// Apply a tangent step to one variable block (in place). Configuration
    /// groups go through the model retraction, the plane through its own,
    /// everything else adds.
    pub fn apply_step(&mut self, problem: &Problem, var: VarRef, delta: &[f64]) {
        assert_eq!(delta.len(), problem.var_dim(var.group));
        let t = var.frame;
        match var.group {
            VarGroup::PersonQ => {
                let d = crate::model::TangentVector(DVector::from_column_slice(delta));
                self.person_q[t] = problem
                    .person
                    .integrate(&self.person_q[t], &d)
                    .expect("person step");
            }
            VarGroup::PersonV => {
                self.person_v[t].0 += DVector::from_column_slice(delta);
            }
            VarGroup::ObjectQ => {
                let object = problem.object.as_ref().expect("object step");
                let d = crate::model::TangentVector(DVector::from_column_slice(delta));
                self.object_q[t] = object
                    .integrate(&self.object_q[t], &d)
                    .expect("object step");
            }
            VarGroup::ObjectV => self.object_v[t] += DVector::from_column_slice(delta),
            VarGroup::Cone => self.cone[t] += DVector::from_column_slice(delta),
            VarGroup::Wrench => self.wrench[t] += DVector::from_column_slice(delta),
            VarGroup::Plane => {
                self.plane = self.plane.retract([delta[0], delta[1], delta[2]]);
            }
        }
    }

    /// Clamp variables to their feasible set: cone weights stay
    /// non-negative, limited prismatic coordinates stay inside their range.
    pub fn project_bounds(&mut self, problem: &Problem) {
        for lam in &mut self.cone {
            for x in lam.iter_mut() {
                if *x < 0.0 {
                    *x = 0.0;
                }
            }
        }
        if let Some(object) = &problem.object {
            for q in &mut self.object_q {
                for (i, j) in object.joints.iter().enumerate() {
                    if let Some((lo, hi)) = j.limits {
                        let qi = &mut q.0[object.q_offset(i)];
                        *qi = qi.clamp(lo, hi);
                    }
                }
            }
        }
    }
}

/// Per-frame forward-kinematics results shared by all residual blocks.
#[derive(Debug, Clone)]
pub struct FrameCache {
    pub person: Vec<Placement<f64>>,
    pub object: Vec<Placement<f64>>,
}

pub fn build_caches(problem: &Problem, state: &TrajectoryState) -> Vec<FrameCache> {
    (0..problem.n_frames())
        .map(|t| FrameCache {
            person: crate::dynamics::joint_placements(
                &problem.person,
                state.person_q[t].as_slice(),
            ),
            object: match &problem.object {
                Some(o) => crate::dynamics::joint_placements(o, state.object_q[t].as_slice()),
                None => Vec::new(),
            },
        })
        .collect()
}

/// Everything a residual block sees during evaluation.
pub struct EvalContext<'a> {
    pub problem: &'a Problem,
    pub state: &'a TrajectoryState,
    pub caches: &'a [FrameCache],
}

/// One differentiable residual block `r(x)` contributing `0.5 |r|^2`.
///
/// `eval_jac` fills the residual and one Jacobian matrix per entry of
/// `vars()`, each of shape `rows() x var_dim(group)`; Jacobians are taken
/// in the tangent chart of `TrajectoryState::apply_step` at the current
/// state.
pub trait ResidualBlock {
    fn label(&self) -> &'static str;
    fn rows(&self) -> usize;
    fn vars(&self) -> &[VarRef];
    fn eval(&self, ctx: &EvalContext, out: &mut [f64]);
    fn eval_jac(&self, ctx: &EvalContext, out: &mut [f64], jac: &mut [DMatrix<f64>]);
}

/// Total cost of a block set at a state: `0.5 sum |r_b|^2`.
pub fn total_cost(
    problem: &Problem,
    blocks: &[Box<dyn ResidualBlock>],
    state: &TrajectoryState,
) -> f64 {
    let caches = build_caches(problem, state);
    let ctx = EvalContext {
        problem,
        state,
        caches: &caches,
    };
    let mut cost = 0.0;
    let mut buf = Vec::new();
    for b in blocks {
        buf.resize(b.rows(), 0.0);
        b.eval(&ctx, &mut buf);
        cost += 0.5 * buf.iter().map(|r| r * r).sum::<f64>();
    }
    cost
}

// ---------------------------------------------------------------------------
// Reprojection data terms
// ---------------------------------------------------------------------------

/// Robust reprojection residual of one frame's observations against one
/// body (person or object).
struct DataBlock {
    label: &'static str,
    frame: usize,
    person: bool,
    entries: Vec<Observation>,
    vars: [VarRef; 1],
}

impl DataBlock {
    fn placements<'c>(&self, ctx: &'c EvalContext) -> &'c [Placement<f64>] {
        if self.person {
            &ctx.caches[self.frame].person
        } else {
            &ctx.caches[self.frame].object
        }
    }

    fn model<'c>(&self, ctx: &'c EvalContext) -> &'c crate::model::KinematicModel {
        if self.person {
            &ctx.problem.person
        } else {
            ctx.problem.object.as_ref().expect("object data block")
        }
    }
}

impl ResidualBlock for DataBlock {
    fn label(&self) -> &'static str {
        self.label
    }

    fn rows(&self) -> usize {
        2 * self.entries.len()
    }

    fn vars(&self) -> &[VarRef] {
        &self.vars
    }

    fn eval(&self, ctx: &EvalContext, out: &mut [f64]) {
        let placements = self.placements(ctx);
        let delta = ctx.problem.weights.huber_px;
        for (e, obs) in self.entries.iter().enumerate() {
            let p = placements[obs.joint].act_on_point(obs.offset);
            let (uv, _, _) = ctx.problem.camera.project_clamped_with_jacobian(p);
            let raw = [uv[0] - obs.uv[0], uv[1] - obs.uv[1]];
            let (robust, _) = huber_embed2(raw, delta);
            let s = obs.weight.sqrt();
            out[2 * e] = s * robust[0];
            out[2 * e + 1] = s * robust[1];
        }
    }

    fn eval_jac(&self, ctx: &EvalContext, out: &mut [f64], jac: &mut [DMatrix<f64>]) {
        let placements = self.placements(ctx);
        let model = self.model(ctx);
        let delta = ctx.problem.weights.huber_px;
        jac[0].fill(0.0);
        for (e, obs) in self.entries.iter().enumerate() {
            let p = placements[obs.joint].act_on_point(obs.offset);
            let (uv, proj_jac, _) = ctx.problem.camera.project_clamped_with_jacobian(p);
            let raw = [uv[0] - obs.uv[0], uv[1] - obs.uv[1]];
            let (robust, dr) = huber_embed2(raw, delta);
            let s = obs.weight.sqrt();
            out[2 * e] = s * robust[0];
            out[2 * e + 1] = s * robust[1];
            let jp = crate::dynamics::point_jacobian(model, placements, obs.joint, obs.offset);
            // s * dr (2x2) * proj_jac (2x3) * jp (3xnv)
            for col in 0..model.nv() {
                let mut pj = [0.0; 2];
                for r in 0..2 {
                    pj[r] = (0..3).map(|i| proj_jac[r][i] * jp[(i, col)]).sum();
                }
                for r in 0..2 {
                    jac[0][(2 * e + r, col)] =
                        s * (dr[r][0] * pj[0] + dr[r][1] * pj[1]);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pose prior
// ---------------------------------------------------------------------------

struct PosePriorBlock {
    frame: usize,
    vars: [VarRef; 1],
}

impl ResidualBlock for PosePriorBlock {
    fn label(&self) -> &'static str {
        "pose_prior"
    }

    fn rows(&self) -> usize {
        1
    }

    fn vars(&self) -> &[VarRef] {
        &self.vars
    }

    fn eval(&self, ctx: &EvalContext, out: &mut [f64]) {
        let prior = ctx.problem.prior.as_ref().expect("prior block");
        let mut theta = Vec::new();
        pose_tangent(
            &ctx.problem.person,
            ctx.state.person_q[self.frame].as_slice(),
            &mut theta,
        );
        out[0] = ctx.problem.weights.pose_prior.sqrt() * prior.residual(theta.as_slice());
    }

    fn eval_jac(&self, ctx: &EvalContext, out: &mut [f64], jac: &mut [DMatrix<f64>]) {
        self.eval(ctx, out);
        let prior = ctx.problem.prior.as_ref().expect("prior block");
        let person = &ctx.problem.person;
        let q = &ctx.state.person_q[self.frame];
        let s = ctx.problem.weights.pose_prior.sqrt();
        jac[0].fill(0.0);
        let mut theta: Vec<Dual> = Vec::new();
        // Base placement does not move joint angles: only dirs 6.. matter.
        for dir in 6..person.nv() {
            let mut qd = person.lift_config(q);
            person.seed_config_direction(q, dir, &mut qd);
            pose_tangent(person, &qd, &mut theta);
            jac[0][(0, dir)] = s * prior.residual(theta.as_slice()).eps;
        }
    }
}

// ---------------------------------------------------------------------------
// Temporal consistency
// ---------------------------------------------------------------------------

/// Velocity defined by finite differences of the configuration:
/// `w (diff(q_{t-1}, q_t)/dt - v_t)`, either the person's full tangent or
/// the object's 6 base rows.
struct CollocationBlock {
    label: &'static str,
    frame: usize,
    person: bool,
    rows: usize,
    vars: [VarRef; 3],
}

impl CollocationBlock {
    fn model<'c>(&self, ctx: &'c EvalContext) -> &'c crate::model::KinematicModel {
        if self.person {
            &ctx.problem.person
        } else {
            ctx.problem.object.as_ref().expect("object collocation")
        }
    }

    fn configs<'c>(
        &self,
        ctx: &'c EvalContext,
    ) -> (&'c crate::model::Configuration, &'c crate::model::Configuration) {
        if self.person {
            (
                &ctx.state.person_q[self.frame - 1],
                &ctx.state.person_q[self.frame],
            )
        } else {
            (
                &ctx.state.object_q[self.frame - 1],
                &ctx.state.object_q[self.frame],
            )
        }
    }

    fn velocity_row(&self, ctx: &EvalContext, row: usize) -> f64 {
        if self.person {
            ctx.state.person_v[self.frame].0[row]
        } else {
            ctx.state.object_v[self.frame][row]
        }
    }
}

impl ResidualBlock for CollocationBlock {
    fn label(&self) -> &'static str {
        self.label
    }

    fn rows(&self) -> usize {
        self.rows
    }

    fn vars(&self) -> &[VarRef] {
        &self.vars
    }

    fn eval(&self, ctx: &EvalContext, out: &mut [f64]) {
        let model = self.model(ctx);
        let (qa, qb) = self.configs(ctx);
        let w = ctx.problem.weights.collocation;
        let dt = ctx.problem.dt;
        let mut diff = vec![0.0; model.nv()];
        crate::model::difference_kernel(model, qa.as_slice(), qb.as_slice(), &mut diff);
        for row in 0..self.rows {
            out[row] = w * (diff[row] / dt - self.velocity_row(ctx, row));
        }
    }

    fn eval_jac(&self, ctx: &EvalContext, out: &mut [f64], jac: &mut [DMatrix<f64>]) {
        self.eval(ctx, out);
        let model = self.model(ctx);
        let (qa, qb) = self.configs(ctx);
        let w = ctx.problem.weights.collocation;
        let dt = ctx.problem.dt;
        let mut diff = vec![Dual::from_f64(0.0); model.nv()];
        for side in 0..2 {
            jac[side].fill(0.0);
            for dir in 0..model.nv() {
                let (a, b) = if side == 0 {
                    let mut ad = model.lift_config(qa);
                    model.seed_config_direction(qa, dir, &mut ad);
                    (ad, model.lift_config(qb))
                } else {
                    let mut bd = model.lift_config(qb);
                    model.seed_config_direction(qb, dir, &mut bd);
                    (model.lift_config(qa), bd)
                };
                crate::model::difference_kernel(model, &a, &b, &mut diff);
                for row in 0..self.rows {
                    jac[side][(row, dir)] = w * diff[row].eps / dt;
                }
            }
        }
        jac[2].fill(0.0);
        for row in 0..self.rows {
            jac[2][(row, row)] = -w;
        }
    }
}

/// `w (x_t - x_{t-1})` over a linear variable group (velocity smoothing,
/// force smoothing over always-active coordinates is a separate block).
struct SmoothBlock {
    label: &'static str,
    weight_of: fn(&CostWeights) -> f64,
    /// Stage-dependent multiplier on the weight (see
    /// [`CostWeights::accel_smooth_boost`]).
    scale: f64,
    rows: usize,
    vars: [VarRef; 2],
}

impl SmoothBlock {
    fn value(&self, ctx: &EvalContext, var: VarRef, row: usize) -> f64 {
        match var.group {
            VarGroup::PersonV => ctx.state.person_v[var.frame].0[row],
            VarGroup::ObjectV => ctx.state.object_v[var.frame][row],
            _ => unreachable!("smooth block over a nonlinear group"),
        }
    }
}

impl ResidualBlock for SmoothBlock {
    fn label(&self) -> &'static str {
        self.label
    }

    fn rows(&self) -> usize {
        self.rows
    }

    fn vars(&self) -> &[VarRef] {
        &self.vars
    }

    fn eval(&self, ctx: &EvalContext, out: &mut [f64]) {
        let w = self.scale * (self.weight_of)(&ctx.problem.weights);
        for row in 0..self.rows {
            out[row] =
                w * (self.value(ctx, self.vars[1], row) - self.value(ctx, self.vars[0], row));
        }
    }

    fn eval_jac(&self, ctx: &EvalContext, out: &mut [f64], jac: &mut [DMatrix<f64>]) {
        self.eval(ctx, out);
        let w = self.scale * (self.weight_of)(&ctx.problem.weights);
        jac[0].fill(0.0);
        jac[1].fill(0.0);
        for row in 0..self.rows {
            jac[0][(row, row)] = -w;
            jac[1][(row, row)] = w;
        }
    }
}

/// Damps the object's angular-velocity component about its own handle axis
/// (body x).  See [`CostWeights::roll_rate_object`].
struct RollRateBlock {
    frame: usize,
    vars: [VarRef; 1],
}

impl ResidualBlock for RollRateBlock {
    fn label(&self) -> &'static str {
        "object_roll_rate"
    }

    fn rows(&self) -> usize {
        1
    }

    fn vars(&self) -> &[VarRef] {
        &self.vars
    }

    fn eval(&self, ctx: &EvalContext, out: &mut [f64]) {
        let w = ctx.problem.weights.roll_rate_object;
        out[0] = w * ctx.state.object_v[self.frame][3];
    }

    fn eval_jac(&self, ctx: &EvalContext, out: &mut [f64], jac: &mut [DMatrix<f64>]) {
        self.eval(ctx, out);
        jac[0].fill(0.0);
        jac[0][(0, 3)] = ctx.problem.weights.roll_rate_object;
    }
}

/// Damps the sliding rate of a grasp along the handle:
/// `w (c_t - c_{t-1})` on one slot coordinate (a prismatic object dof).
struct SlideSmoothBlock {
    /// Configuration row of the slot coordinate.
    q_row: usize,
    /// Tangent row of the slot coordinate.
    v_row: usize,
    vars: [VarRef; 2],
}

impl ResidualBlock for SlideSmoothBlock {
    fn label(&self) -> &'static str {
        "slide_smooth"
    }

    fn rows(&self) -> usize {
        1
    }

    fn vars(&self) -> &[VarRef] {
        &self.vars
    }

    fn eval(&self, ctx: &EvalContext, out: &mut [f64]) {
        let w = ctx.problem.weights.slide_smooth;
        let a = ctx.state.object_q[self.vars[0].frame].0[self.q_row];
        let b = ctx.state.object_q[self.vars[1].frame].0[self.q_row];
        out[0] = w * (b - a);
    }

    fn eval_jac(&self, ctx: &EvalContext, out: &mut [f64], jac: &mut [DMatrix<f64>]) {
        self.eval(ctx, out);
        let w = ctx.problem.weights.slide_smooth;
        jac[0].fill(0.0);
        jac[1].fill(0.0);
        jac[0][(0, self.v_row)] = -w;
        jac[1][(0, self.v_row)] = w;
    }
}

// ---------------------------------------------------------------------------
// Contact kinematics
// ---------------------------------------------------------------------------

/// An active ground contact point must lie on the plane (1 row) and, while
/// the contact persists, must not slide (3 rows against the previous frame).
struct GroundContactBlock {
    frame: usize,
    person: bool,
    joint: usize,
    offset: Vec3<f64>,
    slip: bool,
    vars: Vec<VarRef>,
}

impl GroundContactBlock {
    fn placements<'c>(&self, ctx: &'c EvalContext, frame: usize) -> &'c [Placement<f64>] {
        if self.person {
            &ctx.caches[frame].person
        } else {
            &ctx.caches[frame].object
        }
    }

    fn model<'c>(&self, ctx: &'c EvalContext) -> &'c crate::model::KinematicModel {
        if self.person {
            &ctx.problem.person
        } else {
            ctx.problem.object.as_ref().expect("object contact")
        }
    }
}

impl ResidualBlock for GroundContactBlock {
    fn label(&self) -> &'static str {
        "ground_contact"
    }

    fn rows(&self) -> usize {
        if self.slip {
            4
        } else {
            1
        }
    }

    fn vars(&self) -> &[VarRef] {
        &self.vars
    }

    fn eval(&self, ctx: &EvalContext, out: &mut [f64]) {
        let w = &ctx.problem.weights;
        let p = self.placements(ctx, self.frame)[self.joint].act_on_point(self.offset);
        out[0] = w.contact_plane * ctx.state.plane.signed_distance(p);
        if self.slip {
            let prev = self.placements(ctx, self.frame - 1)[self.joint].act_on_point(self.offset);
            let d = p.sub(prev);
            out[1] = w.contact_slip * d.x;
            out[2] = w.contact_slip * d.y;
            out[3] = w.contact_slip * d.z;
        }
    }

    fn eval_jac(&self, ctx: &EvalContext, out: &mut [f64], jac: &mut [DMatrix<f64>]) {
        self.eval(ctx, out);
        let w = &ctx.problem.weights;
        let model = self.model(ctx);
        let n = ctx.state.plane.normal;
        let p = self.placements(ctx, self.frame)[self.joint].act_on_point(self.offset);
        for j in jac.iter_mut() {
            j.fill(0.0);
        }
        // vars[0]: configuration at `frame`.
        let jp = crate::dynamics::point_jacobian(
            model,
            self.placements(ctx, self.frame),
            self.joint,
            self.offset,
        );
        for col in 0..model.nv() {
            jac[0][(0, col)] =
                w.contact_plane * (n.x * jp[(0, col)] + n.y * jp[(1, col)] + n.z * jp[(2, col)]);
            if self.slip {
                for r in 0..3 {
                    jac[0][(1 + r, col)] = w.contact_slip * jp[(r, col)];
                }
            }
        }
        let mut k = 1;
        if self.slip {
            let jprev = crate::dynamics::point_jacobian(
                model,
                self.placements(ctx, self.frame - 1),
                self.joint,
                self.offset,
            );
            for col in 0..model.nv() {
                for r in 0..3 {
                    jac[k][(1 + r, col)] = -w.contact_slip * jprev[(r, col)];
                }
            }
            k += 1;
        }
        // Plane chart: two normal tilts move the plane row by (b_i x n) . p,
        // the offset shift enters with -1; the slip rows never see the plane.
        let (b1, b2) = ctx.state.plane.tangent_basis();
        jac[k][(0, 0)] = w.contact_plane * b1.cross(n).dot(p);
        jac[k][(0, 1)] = w.contact_plane * b2.cross(n).dot(p);
        jac[k][(0, 2)] = -w.contact_plane;
    }
}

/// The grasping joint's origin must coincide with its point on the handle.
struct AttachBlock {
    frame: usize,
    person_joint: usize,
    slot_joint: usize,
    vars: [VarRef; 2],
}

impl ResidualBlock for AttachBlock {
    fn label(&self) -> &'static str {
        "attach"
    }

    fn rows(&self) -> usize {
        3
    }

    fn vars(&self) -> &[VarRef] {
        &self.vars
    }

    fn eval(&self, ctx: &EvalContext, out: &mut [f64]) {
        let w = ctx.problem.weights.attach;
        let hand = ctx.caches[self.frame].person[self.person_joint].translation;
        let slot = ctx.caches[self.frame].object[self.slot_joint].translation;
        let d = hand.sub(slot);
        out[0] = w * d.x;
        out[1] = w * d.y;
        out[2] = w * d.z;
    }

    fn eval_jac(&self, ctx: &EvalContext, out: &mut [f64], jac: &mut [DMatrix<f64>]) {
        self.eval(ctx, out);
        let w = ctx.problem.weights.attach;
        let problem = ctx.problem;
        let object = problem.object.as_ref().expect("attach block");
        let jh = crate::dynamics::point_jacobian(
            &problem.person,
            &ctx.caches[self.frame].person,
            self.person_joint,
            Vec3::zero(),
        );
        let js = crate::dynamics::point_jacobian(
            object,
            &ctx.caches[self.frame].object,
            self.slot_joint,
            Vec3::zero(),
        );
        jac[0].fill(0.0);
        jac[1].fill(0.0);
        for r in 0..3 {
            for col in 0..problem.person.nv() {
                jac[0][(r, col)] = w * jh[(r, col)];
            }
            for col in 0..object.nv() {
                jac[1][(r, col)] = -w * js[(r, col)];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dynamics
// ---------------------------------------------------------------------------

/// World-axes external wrenches per joint from point contact forces and
/// joint-origin wrenches, generic so configuration directions can be
/// differentiated with dual numbers while forces stay constant.
fn assemble_ext<T: Real>(
    n_joints: usize,
    placements: &[Placement<T>],
    point_forces: &[(usize, Vec3<f64>, Vec3<f64>)],
    joint_wrenches: &[(usize, Vec3<f64>, Vec3<f64>)],
) -> Vec<crate::spatial::ForceVector<T>> {
    let mut ext = vec![crate::spatial::ForceVector::<T>::zero(); n_joints];
    for (joint, offset, force) in point_forces {
        let f = Vec3::<T>::from_f64([force.x, force.y, force.z]);
        let o = Vec3::<T>::from_f64([offset.x, offset.y, offset.z]);
        let p = placements[*joint].act_on_point(o);
        let lever = p.sub(placements[*joint].translation);
        ext[*joint] = ext[*joint].add(crate::spatial::ForceVector::new(lever.cross(f), f));
    }
    for (joint, moment, force) in joint_wrenches {
        ext[*joint] = ext[*joint].add(crate::spatial::ForceVector::new(
            Vec3::from_f64([moment.x, moment.y, moment.z]),
            Vec3::from_f64([force.x, force.y, force.z]),
        ));
    }
    ext
}

/// Newton-Euler consistency of one frame transition for either body:
/// `w (rnea(q_t, v_t, (v_t - v_{t-1})/dt, ext_t) - selection * tau_t)`,
/// person over all rows, object over its 6 base rows.
struct DynamicsBlock {
    label: &'static str,
    frame: usize,
    person: bool,
    rows: usize,
    /// `(cone_slot, joint, offset)` contacts pressing this body down.
    cones: Vec<(usize, usize, Vec3<f64>)>,
    /// `(wrench_slot, joint)`: joint receiving each grasp wrench on this
    /// body (hand joint for the person, slot joint for the object).
    grasps: Vec<(usize, usize)>,
    vars: Vec<VarRef>,
    cone_var: Option<usize>,
    wrench_var: Option<usize>,
    plane_var: Option<usize>,
}

impl DynamicsBlock {
    fn model<'c>(&self, ctx: &'c EvalContext) -> &'c crate::model::KinematicModel {
        if self.person {
            &ctx.problem.person
        } else {
            ctx.problem.object.as_ref().expect("object dynamics")
        }
    }

    /// Sign of grasp wrenches on this body: the stored wrench acts on the
    /// person; the object receives the reaction.
    fn grasp_sign(&self) -> f64 {
        if self.person {
            1.0
        } else {
            -1.0
        }
    }

    /// Full-width configuration/velocity/acceleration slices for this body
    /// at the block's frame.
    fn pull_qva(&self, ctx: &EvalContext) -> (crate::model::Configuration, Vec<f64>, Vec<f64>) {
        let dt = ctx.problem.dt;
        if self.person {
            let q = ctx.state.person_q[self.frame].clone();
            let v = ctx.state.person_v[self.frame].0.as_slice().to_vec();
            let vp = &ctx.state.person_v[self.frame - 1].0;
            let a: Vec<f64> = (0..v.len()).map(|i| (v[i] - vp[i]) / dt).collect();
            (q, v, a)
        } else {
            let model = self.model(ctx);
            let q = ctx.state.object_q[self.frame].clone();
            let mut v = vec![0.0; model.nv()];
            let mut a = vec![0.0; model.nv()];
            let vt = &ctx.state.object_v[self.frame];
            let vp = &ctx.state.object_v[self.frame - 1];
            for i in 0..6 {
                v[i] = vt[i];
                a[i] = (vt[i] - vp[i]) / dt;
            }
            (q, v, a)
        }
    }

    /// Constant world-axes force data at the current state.
    fn force_tables(
        &self,
        ctx: &EvalContext,
    ) -> (
        Vec<(usize, Vec3<f64>, Vec3<f64>)>,
        Vec<(usize, Vec3<f64>, Vec3<f64>)>,
    ) {
        let lam = &ctx.state.cone[self.frame];
        let wr = &ctx.state.wrench[self.frame];
        let frame_rot = ctx.state.plane.contact_frame();
        let mu = ctx.problem.mu();
        let sign = self.grasp_sign();
        let points: Vec<_> = self
            .cones
            .iter()
            .map(|(slot, joint, offset)| {
                let l = &lam.as_slice()[4 * slot..4 * slot + 4];
                (*joint, *offset, crate::contact::cone_force_world(&frame_rot, mu, l))
            })
            .collect();
        let wrenches: Vec<_> = self
            .grasps
            .iter()
            .map(|(slot, joint)| {
                let wv = &wr.as_slice()[6 * slot..6 * slot + 6];
                (
                    *joint,
                    Vec3::new(sign * wv[0], sign * wv[1], sign * wv[2]),
                    Vec3::new(sign * wv[3], sign * wv[4], sign * wv[5]),
                )
            })
            .collect();
        (points, wrenches)
    }

    /// Weighted Newton-Euler residual.  Actuated person rows can be paid
    /// off by a muscle torque `tau_m` at the price of the torque
    /// regularizer; minimizing `0.5 w^2 (b - tau_m)^2 + 0.5 wt^2 tau_m^2`
    /// over `tau_m` in closed form leaves `0.5 w_eff^2 b^2` with
    /// `w_eff = w wt / sqrt(w^2 + wt^2)`, so torques never need to be
    /// solver variables; they are recovered afterwards.
    fn residual_from_tau<T: Real>(&self, ctx: &EvalContext, tau: &[T], out: &mut [T]) {
        let w = T::from_f64(ctx.problem.weights.dynamics);
        let w_act = T::from_f64(ctx.problem.weights.actuated_dynamics());
        for row in 0..self.rows {
            let scale = if self.person && row >= 6 { w_act } else { w };
            out[row] = scale * tau[row];
        }
    }
}

impl ResidualBlock for DynamicsBlock {
    fn label(&self) -> &'static str {
        self.label
    }

    fn rows(&self) -> usize {
        self.rows
    }

    fn vars(&self) -> &[VarRef] {
        &self.vars
    }

    fn eval(&self, ctx: &EvalContext, out: &mut [f64]) {
        let model = self.model(ctx);
        let (q, v, a) = self.pull_qva(ctx);
        let (points, wrenches) = self.force_tables(ctx);
        let placements = if self.person {
            &ctx.caches[self.frame].person
        } else {
            &ctx.caches[self.frame].object
        };
        let ext = assemble_ext(model.n_joints(), placements, &points, &wrenches);
        let tau = crate::dynamics::rnea_kernel(
            model,
            q.as_slice(),
            &v,
            &a,
            ctx.problem.gravity,
            Some(&ext),
        );
        self.residual_from_tau(ctx, &tau, out);
    }

    fn eval_jac(&self, ctx: &EvalContext, out: &mut [f64], jac: &mut [DMatrix<f64>]) {
        self.eval(ctx, out);
        let model = self.model(ctx);
        let problem = ctx.problem;
        let w = problem.weights.dynamics;
        let w_act = problem.weights.actuated_dynamics();
        let row_w = |row: usize| if self.person && row >= 6 { w_act } else { w };
        let dt = problem.dt;
        let nv = model.nv();
        let (q, v, a) = self.pull_qva(ctx);
        let (points, wrenches) = self.force_tables(ctx);
        let placements = if self.person {
            &ctx.caches[self.frame].person
        } else {
            &ctx.caches[self.frame].object
        };
        for j in jac.iter_mut() {
            j.fill(0.0);
        }

        // Configuration directions: dual forward pass with forces constant.
        {
            let gravity = Vec3::<Dual>::from_f64([
                problem.gravity.x,
                problem.gravity.y,
                problem.gravity.z,
            ]);
            let vd: Vec<Dual> = v.iter().map(|&x| Dual::from_f64(x)).collect();
            let ad: Vec<Dual> = a.iter().map(|&x| Dual::from_f64(x)).collect();
            let mut res = vec![Dual::from_f64(0.0); self.rows];
            for dir in 0..nv {
                let mut qd = model.lift_config(&q);
                model.seed_config_direction(&q, dir, &mut qd);
                let pl = crate::dynamics::joint_placements(model, &qd);
                let ext = assemble_ext(model.n_joints(), &pl, &points, &wrenches);
                let tau = crate::dynamics::rnea_kernel(model, &qd, &vd, &ad, gravity, Some(&ext));
                self.residual_from_tau(ctx, &tau, &mut res);
                for row in 0..self.rows {
                    jac[0][(row, dir)] = res[row].eps;
                }
            }
        }

        // v_{t-1} enters only through the acceleration: -w/dt * M (sliced to
        // the velocity variable's width).
        let mass = crate::dynamics::mass_matrix(model, &q);
        let v_dim = if self.person { nv } else { 6 };
        for col in 0..v_dim {
            for row in 0..self.rows {
                jac[1][(row, col)] = -row_w(row) / dt * mass[(row, col)];
            }
        }

        // v_t directions: dual pass with the matched acceleration seed.
        {
            let gravity = Vec3::<Dual>::from_f64([
                problem.gravity.x,
                problem.gravity.y,
                problem.gravity.z,
            ]);
            let qd = model.lift_config(&q);
            let pl = crate::dynamics::joint_placements(model, &qd);
            let ext = assemble_ext(model.n_joints(), &pl, &points, &wrenches);
            let mut res = vec![Dual::from_f64(0.0); self.rows];
            for dir in 0..v_dim {
                let mut vd: Vec<Dual> = v.iter().map(|&x| Dual::from_f64(x)).collect();
                let mut ad: Vec<Dual> = a.iter().map(|&x| Dual::from_f64(x)).collect();
                vd[dir] = Dual::new(v[dir], 1.0);
                ad[dir] = Dual::new(a[dir], 1.0 / dt);
                let tau = crate::dynamics::rnea_kernel(model, &qd, &vd, &ad, gravity, Some(&ext));
                self.residual_from_tau(ctx, &tau, &mut res);
                for row in 0..self.rows {
                    jac[2][(row, dir)] = res[row].eps;
                }
            }
        }

        // Force channels: a unit force at a point enters the torque rows as
        // -J_point^T, a unit joint-origin wrench as -J_frame^T.
        if let Some(k) = self.cone_var {
            let frame_rot = ctx.state.plane.contact_frame();
            let gens = crate::contact::cone_generators::<f64>(problem.mu());
            for (slot, joint, offset) in &self.cones {
                let jp = crate::dynamics::point_jacobian(model, placements, *joint, *offset);
                for (g, gen) in gens.iter().enumerate() {
                    let dir_world = frame_rot.rotate(*gen);
                    for row in 0..self.rows {
                        let jtf = jp[(0, row)] * dir_world.x
                            + jp[(1, row)] * dir_world.y
                            + jp[(2, row)] * dir_world.z;
                        jac[k][(row, 4 * slot + g)] = -row_w(row) * jtf;
                    }
                }
            }
        }
        if let Some(k) = self.wrench_var {
            let sign = self.grasp_sign();
            for (slot, joint) in &self.grasps {
                let jf = crate::dynamics::frame_jacobian(model, placements, *joint, Vec3::zero());
                for c in 0..6 {
                    for row in 0..self.rows {
                        jac[k][(row, 6 * slot + c)] = -row_w(row) * sign * jf[(c, row)];
                    }
                }
            }
        }

        // Plane tilts change the cone force directions; the offset does not
        // enter the dynamics at all.
        if let Some(k) = self.plane_var {
            let (b1, b2) = ctx.state.plane.tangent_basis();
            let lam = &ctx.state.cone[self.frame];
            for dir in 0..2 {
                let delta = [
                    Dual::new(0.0, if dir == 0 { 1.0 } else { 0.0 }),
                    Dual::new(0.0, if dir == 1 { 1.0 } else { 0.0 }),
                    Dual::from_f64(0.0),
                ];
                let (n, _) = crate::contact::retract_plane(&ctx.state.plane, [b1, b2], delta);
                let frame_rot = crate::contact::frame_with_y_axis(n.neg());
                for (slot, joint, offset) in &self.cones {
                    let l = &lam.as_slice()[4 * slot..4 * slot + 4];
                    let ld: Vec<Dual> = l.iter().map(|&x| Dual::from_f64(x)).collect();
                    let f = crate::contact::cone_force_world(&frame_rot, problem.mu(), &ld);
                    let df = Vec3::new(f.x.eps, f.y.eps, f.z.eps);
                    let jp = crate::dynamics::point_jacobian(model, placements, *joint, *offset);
                    for row in 0..self.rows {
                        let jtf = jp[(0, row)] * df.x
                            + jp[(1, row)] * df.y
                            + jp[(2, row)] * df.z;
                        jac[k][(row, dir)] -= row_w(row) * jtf;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Regularizers over force variables
// ---------------------------------------------------------------------------

/// `w x` over selected coordinates of a linear per-frame group.
struct SelectRegBlock {
    label: &'static str,
    weight_of: fn(&CostWeights) -> f64,
    cols: Vec<usize>,
    vars: [VarRef; 1],
}

impl SelectRegBlock {
    fn values<'c>(&self, ctx: &'c EvalContext) -> &'c DVector<f64> {
        match self.vars[0].group {
            VarGroup::Cone => &ctx.state.cone[self.vars[0].frame],
            VarGroup::Wrench => &ctx.state.wrench[self.vars[0].frame],
            _ => unreachable!("selection over a nonlinear group"),
        }
    }
}

impl ResidualBlock for SelectRegBlock {
    fn label(&self) -> &'static str {
        self.label
    }

    fn rows(&self) -> usize {
        self.cols.len()
    }

    fn vars(&self) -> &[VarRef] {
        &self.vars
    }

    fn eval(&self, ctx: &EvalContext, out: &mut [f64]) {
        let w = (self.weight_of)(&ctx.problem.weights);
        let x = self.values(ctx);
        for (row, &c) in self.cols.iter().enumerate() {
            out[row] = w * x[c];
        }
    }

    fn eval_jac(&self, ctx: &EvalContext, out: &mut [f64], jac: &mut [DMatrix<f64>]) {
        self.eval(ctx, out);
        let w = (self.weight_of)(&ctx.problem.weights);
        jac[0].fill(0.0);
        for (row, &c) in self.cols.iter().enumerate() {
            jac[0][(row, c)] = w;
        }
    }
}

/// `w (x_t - x_{t-1})` over selected coordinates (force smoothing across
/// frames where the contact stays active).
struct SelectSmoothBlock {
    label: &'static str,
    weight_of: fn(&CostWeights) -> f64,
    cols: Vec<usize>,
    vars: [VarRef; 2],
}

impl SelectSmoothBlock {
    fn values<'c>(&self, ctx: &'c EvalContext, var: VarRef) -> &'c DVector<f64> {
        match var.group {
            VarGroup::Cone => &ctx.state.cone[var.frame],
            VarGroup::Wrench => &ctx.state.wrench[var.frame],
            _ => unreachable!("smoothing over a nonlinear group"),
        }
    }
}

impl ResidualBlock for SelectSmoothBlock {
    fn label(&self) -> &'static str {
        self.label
    }

    fn rows(&self) -> usize {
        self.cols.len()
    }

    fn vars(&self) -> &[VarRef] {
        &self.vars
    }

    fn eval(&self, ctx: &EvalContext, out: &mut [f64]) {
        let w = (self.weight_of)(&ctx.problem.weights);
        let a = self.values(ctx, self.vars[0]);
        let b = self.values(ctx, self.vars[1]);
        for (row, &c) in self.cols.iter().enumerate() {
            out[row] = w * (b[c] - a[c]);
        }
    }

    fn eval_jac(&self, ctx: &EvalContext, out: &mut [f64], jac: &mut [DMatrix<f64>]) {
        self.eval(ctx, out);
        let w = (self.weight_of)(&ctx.problem.weights);
        jac[0].fill(0.0);
        jac[1].fill(0.0);
        for (row, &c) in self.cols.iter().enumerate() {
            jac[0][(row, c)] = -w;
            jac[1][(row, c)] = w;
        }
    }
}

// ---------------------------------------------------------------------------
// Problem assembly
// ---------------------------------------------------------------------------

impl Problem {
    /// All residual blocks of a stage, in a fixed deterministic order.
    pub fn build_blocks(&self, stage: Stage) -> Vec<Box<dyn ResidualBlock>> {
        let kin = matches!(stage, Stage::Kinematics | Stage::Full);
        let dynamic = matches!(stage, Stage::Forces | Stage::Full);
        // Without dynamics terms, smoothing is the only thing anchoring the
        // joint rates the cameras cannot observe; boost it so the later
        // stages start from physically plausible velocities.
        let smooth_scale = if dynamic {
            1.0
        } else {
            self.weights.accel_smooth_boost
        };
        let t_count = self.n_frames();
        let nv = self.person.nv();
        let mut blocks: Vec<Box<dyn ResidualBlock>> = Vec::new();

        for t in 0..t_count {
            if kin {
                self.push_kinematic_blocks(t, nv, smooth_scale, &mut blocks);
            }
            if dynamic && t >= 1 {
                self.push_dynamic_blocks(t, &mut blocks);
            }
        }
        blocks
    }

    fn push_kinematic_blocks(
        &self,
        t: usize,
        nv: usize,
        smooth_scale: f64,
        blocks: &mut Vec<Box<dyn ResidualBlock>>,
    ) {
        if !self.person_obs[t].is_empty() {
            blocks.push(Box::new(DataBlock {
                label: "person_data",
                frame: t,
                person: true,
                entries: self.person_obs[t].clone(),
                vars: [VarRef::new(VarGroup::PersonQ, t)],
            }));
        }
        if !self.object_obs[t].is_empty() {
            blocks.push(Box::new(DataBlock {
                label: "object_data",
                frame: t,
                person: false,
                entries: self.object_obs[t].clone(),
                vars: [VarRef::new(VarGroup::ObjectQ, t)],
            }));
        }
        if self.prior.is_some() {
            blocks.push(Box::new(PosePriorBlock {
                frame: t,
                vars: [VarRef::new(VarGroup::PersonQ, t)],
            }));
        }
        if self.object.is_some() {
            blocks.push(Box::new(RollRateBlock {
                frame: t,
                vars: [VarRef::new(VarGroup::ObjectV, t)],
            }));
        }
        if t >= 1 {
            blocks.push(Box::new(CollocationBlock {
                label: "person_collocation",
                frame: t,
                person: true,
                rows: nv,
                vars: [
                    VarRef::new(VarGroup::PersonQ, t - 1),
                    VarRef::new(VarGroup::PersonQ, t),
                    VarRef::new(VarGroup::PersonV, t),
                ],
            }));
            blocks.push(Box::new(SmoothBlock {
                label: "person_accel_smooth",
                weight_of: |w| w.accel_smooth,
                scale: smooth_scale,
                rows: nv,
                vars: [
                    VarRef::new(VarGroup::PersonV, t - 1),
                    VarRef::new(VarGroup::PersonV, t),
                ],
            }));
            if self.object.is_some() {
                blocks.push(Box::new(CollocationBlock {
                    label: "object_collocation",
                    frame: t,
                    person: false,
                    rows: 6,
                    vars: [
                        VarRef::new(VarGroup::ObjectQ, t - 1),
                        VarRef::new(VarGroup::ObjectQ, t),
                        VarRef::new(VarGroup::ObjectV, t),
                    ],
                }));
                blocks.push(Box::new(SmoothBlock {
                    label: "object_accel_smooth",
                    weight_of: |w| w.accel_smooth_object,
                    scale: smooth_scale,
                    rows: 6,
                    vars: [
                        VarRef::new(VarGroup::ObjectV, t - 1),
                        VarRef::new(VarGroup::ObjectV, t),
                    ],
                }));
            }
        }
        // Ground contacts: plane adherence always, no-slip once persisting.
        for &k in &self.cone_contacts {
            if !self.schedule.is_active(k, t) {
                continue;
            }
            if let crate::contact::ContactGeometry::GroundPoint {
                body,
                joint,
                offset,
            } = &self.schedule.contacts[k].geometry
            {
                let person = *body == crate::contact::ContactBody::Person;
                let qgroup = if person {
                    VarGroup::PersonQ
                } else {
                    VarGroup::ObjectQ
                };
                let slip = t >= 1 && self.schedule.is_active(k, t - 1);
                let mut vars = vec![VarRef::new(qgroup, t)];
                if slip {
                    vars.push(VarRef::new(qgroup, t - 1));
                }
                vars.push(VarRef::new(VarGroup::Plane, 0));
                blocks.push(Box::new(GroundContactBlock {
                    frame: t,
                    person,
                    joint: *joint,
                    offset: *offset,
                    slip,
                    vars,
                }));
            }
        }
        // Grasps: attachment every active frame, slide damping while held.
        for &k in &self.grasp_contacts {
            if !self.schedule.is_active(k, t) {
                continue;
            }
            if let crate::contact::ContactGeometry::HandleGrasp { person_joint, slot } =
                &self.schedule.contacts[k].geometry
            {
                let object = self.object.as_ref().expect("grasp without object");
                let info = object.object.as_ref().expect("object info");
                let slot_joint = info.contact_joints[*slot];
                blocks.push(Box::new(AttachBlock {
                    frame: t,
                    person_joint: *person_joint,
                    slot_joint,
                    vars: [
                        VarRef::new(VarGroup::PersonQ, t),
                        VarRef::new(VarGroup::ObjectQ, t),
                    ],
                }));
                if t >= 1 && self.schedule.is_active(k, t - 1) {
                    blocks.push(Box::new(SlideSmoothBlock {
                        q_row: object.q_offset(slot_joint),
                        v_row: object.v_offset(slot_joint),
                        vars: [
                            VarRef::new(VarGroup::ObjectQ, t - 1),
                            VarRef::new(VarGroup::ObjectQ, t),
                        ],
                    }));
                }
            }
        }
    }

    fn push_dynamic_blocks(&self, t: usize, blocks: &mut Vec<Box<dyn ResidualBlock>>) {
        use crate::contact::ContactBody;

        // Person Newton-Euler.
        {
            let cones = self.active_cones(ContactBody::Person, t);
            let grasps: Vec<(usize, usize)> = self
                .active_grasps(t)
                .into_iter()
                .map(|(slot, person_joint, _)| (slot, person_joint))
                .collect();
            let mut vars = vec![
                VarRef::new(VarGroup::PersonQ, t),
                VarRef::new(VarGroup::PersonV, t - 1),
                VarRef::new(VarGroup::PersonV, t),
            ];
            let cone_var = (!cones.is_empty()).then(|| {
                vars.push(VarRef::new(VarGroup::Cone, t));
                vars.len() - 1
            });
            let wrench_var = (!grasps.is_empty()).then(|| {
                vars.push(VarRef::new(VarGroup::Wrench, t));
                vars.len() - 1
            });
            let plane_var = (!cones.is_empty()).then(|| {
                vars.push(VarRef::new(VarGroup::Plane, 0));
                vars.len() - 1
            });
            blocks.push(Box::new(DynamicsBlock {
                label: "person_dynamics",
                frame: t,
                person: true,
                rows: self.person.nv(),
                cones,
                grasps,
                vars,
                cone_var,
                wrench_var,
                plane_var,
            }));
        }

        // Object Newton-Euler over the base rows.
        if self.object.is_some() {
            let cones = self.active_cones(ContactBody::Object, t);
            let grasps: Vec<(usize, usize)> = self
                .active_grasps(t)
                .into_iter()
                .map(|(slot, _, slot_joint)| (slot, slot_joint))
                .collect();
            let mut vars = vec![
                VarRef::new(VarGroup::ObjectQ, t),
                VarRef::new(VarGroup::ObjectV, t - 1),
                VarRef::new(VarGroup::ObjectV, t),
            ];
            let cone_var = (!cones.is_empty()).then(|| {
                vars.push(VarRef::new(VarGroup::Cone, t));
                vars.len() - 1
            });
            let wrench_var = (!grasps.is_empty()).then(|| {
                vars.push(VarRef::new(VarGroup::Wrench, t));
                vars.len() - 1
            });
            let plane_var = (!cones.is_empty()).then(|| {
                vars.push(VarRef::new(VarGroup::Plane, 0));
                vars.len() - 1
            });
            blocks.push(Box::new(DynamicsBlock {
                label: "object_dynamics",
                frame: t,
                person: false,
                rows: 6,
                cones,
                grasps,
                vars,
                cone_var,
                wrench_var,
                plane_var,
            }));
        }

        // Force regularization; force smoothing while active.
        let active_cone_cols: Vec<usize> = self
            .cone_contacts
            .iter()
            .enumerate()
            .filter(|(_, &k)| self.schedule.is_active(k, t))
            .flat_map(|(slot, _)| (4 * slot..4 * slot + 4).collect::<Vec<_>>())
            .collect();
        if !active_cone_cols.is_empty() {
            blocks.push(Box::new(SelectRegBlock {
                label: "cone_reg",
                weight_of: |w| w.force_reg,
                cols: active_cone_cols,
                vars: [VarRef::new(VarGroup::Cone, t)],
            }));
        }
        let active_wrench_cols: Vec<usize> = self
            .grasp_contacts
            .iter()
            .enumerate()
            .filter(|(_, &k)| self.schedule.is_active(k, t))
            .flat_map(|(slot, _)| (6 * slot..6 * slot + 6).collect::<Vec<_>>())
            .collect();
        if !active_wrench_cols.is_empty() {
            blocks.push(Box::new(SelectRegBlock {
                label: "wrench_reg",
                weight_of: |w| w.force_reg,
                cols: active_wrench_cols,
                vars: [VarRef::new(VarGroup::Wrench, t)],
            }));
        }
        if t >= 2 {
            let persist_cone: Vec<usize> = self
                .cone_contacts
                .iter()
                .enumerate()
                .filter(|(_, &k)| {
                    self.schedule.is_active(k, t) && self.schedule.is_active(k, t - 1)
                })
                .flat_map(|(slot, _)| (4 * slot..4 * slot + 4).collect::<Vec<_>>())
                .collect();
            if !persist_cone.is_empty() {
                blocks.push(Box::new(SelectSmoothBlock {
                    label: "cone_smooth",
                    weight_of: |w| w.force_smooth,
                    cols: persist_cone,
                    vars: [
                        VarRef::new(VarGroup::Cone, t - 1),
                        VarRef::new(VarGroup::Cone, t),
                    ],
                }));
            }
            let persist_wrench: Vec<usize> = self
                .grasp_contacts
                .iter()
                .enumerate()
                .filter(|(_, &k)| {
                    self.schedule.is_active(k, t) && self.schedule.is_active(k, t - 1)
                })
                .flat_map(|(slot, _)| (6 * slot..6 * slot + 6).collect::<Vec<_>>())
                .collect();
            if !persist_wrench.is_empty() {
                blocks.push(Box::new(SelectSmoothBlock {
                    label: "wrench_smooth",
                    weight_of: |w| w.force_smooth,
                    cols: persist_wrench,
                    vars: [
                        VarRef::new(VarGroup::Wrench, t - 1),
                        VarRef::new(VarGroup::Wrench, t),
                    ],
                }));
            }
        }
    }
}

#[cfg(test)]
mod block_tests {
    use super::*;
    use crate::contact::{
        ContactBody, ContactGeometry, ContactPoint, ContactSchedule, Phase,
    };
    use crate::model::{
        build_human_model, build_object_model, default_human_spec, default_object_spec,
        object_full_config, TangentVector,
    };
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn fixture_camera() -> Camera {
        Camera {
            world_from_camera: Placement::new(
                Rotation::from_wxyz(0.0, 0.0, 0.0, 1.0),
                Vec3::new(0.0, 1.0, -3.0),
            ),
            fx: 600.0,
            fy: 600.0,
            cx: 300.0,
            cy: 200.0,
            width: 600,
            height: 400,
        }
    }

    fn random_tangent(nv: usize, span: f64, rng: &mut StdRng) -> TangentVector {
        TangentVector(DVector::from_fn(nv, |_, _| rng.gen_range(-span..span)))
    }

    /// A small but fully featured problem: person on both feet, object tip
    /// on the ground early, a right-hand grasp from frame 1 on, noisy
    /// observations of a state that does not satisfy any term exactly.
    fn fixture(huber_px: f64, obs_noise: f64, seed: u64) -> (Problem, TrajectoryState) {
        let person = build_human_model(&default_human_spec()).unwrap();
        let object = build_object_model(&default_object_spec()).unwrap();
        let t_count = 4;
        let mut rng = StdRng::seed_from_u64(seed);

        let mut schedule = ContactSchedule::empty(t_count);
        schedule.add_sole_contacts(
            &person,
            vec![Phase {
                start: 0,
                end: t_count,
            }],
        );
        let info = object.object.clone().unwrap();
        schedule.add(
            ContactPoint {
                name: "tip".into(),
                geometry: ContactGeometry::GroundPoint {
                    body: ContactBody::Object,
                    joint: info.head_joint,
                    offset: Vec3::zero(),
                },
            },
            vec![Phase { start: 0, end: 2 }],
        );
        let wrist = person.joint_index("right_wrist").unwrap();
        schedule.add(
            ContactPoint {
                name: "grasp".into(),
                geometry: ContactGeometry::HandleGrasp {
                    person_joint: wrist,
                    slot: 0,
                },
            },
            vec![Phase {
                start: 1,
                end: t_count,
            }],
        );
        let (cone_contacts, grasp_contacts) = classify_contacts(&schedule);

        let mut person_q = Vec::new();
        let mut object_q = Vec::new();
        for _ in 0..t_count {
            let d = random_tangent(person.nv(), 0.12, &mut rng);
            person_q.push(
                person
                    .integrate(&person.neutral_configuration(), &d)
                    .unwrap(),
            );
            let base = [
                0.3 + rng.gen_range(-0.05..0.05),
                1.0 + rng.gen_range(-0.05..0.05),
                0.2 + rng.gen_range(-0.05..0.05),
                1.0,
                0.0,
                0.0,
                0.0,
            ];
            let q0 = object_full_config(&object, &base, &[0.35, 0.6]);
            // Random step keeping the limited coordinates strictly interior.
            let mut d = random_tangent(object.nv(), 0.12, &mut rng);
            d.0[object.v_offset(info.head_joint)] = -rng.gen_range(0.02..0.08);
            for &cj in &info.contact_joints {
                d.0[object.v_offset(cj)] = rng.gen_range(-0.1..0.1);
            }
            object_q.push(object.integrate(&q0, &d).unwrap());
        }

        let camera = fixture_camera();
        let mut weights = CostWeights::default();
        weights.huber_px = huber_px;
        let mut person_obs = Vec::new();
        let mut object_obs = Vec::new();
        for t in 0..t_count {
            let fk = crate::dynamics::forward_kinematics(&person, &person_q[t]);
            let mut frame_obs = Vec::new();
            for (m, marker) in person.markers.iter().enumerate() {
                if !rng.gen_bool(0.9) {
                    continue;
                }
                let uv = camera.project(fk.marker_positions[m]).unwrap();
                let conf = if rng.gen_bool(0.5) { 1.0 } else { 0.7 };
                frame_obs.push(Observation {
                    marker: m,
                    joint: marker.joint,
                    offset: marker.offset,
                    uv: [
                        uv[0] + rng.gen_range(-obs_noise..obs_noise),
                        uv[1] + rng.gen_range(-obs_noise..obs_noise),
                    ],
                    weight: weights.data * conf,
                });
            }
            person_obs.push(frame_obs);
            let fk = crate::dynamics::forward_kinematics(&object, &object_q[t]);
            let mut frame_obs = Vec::new();
            for (m, marker) in object.markers.iter().enumerate() {
                let uv = camera.project(fk.marker_positions[m]).unwrap();
                frame_obs.push(Observation {
                    marker: m,
                    joint: marker.joint,
                    offset: marker.offset,
                    uv: [
                        uv[0] + rng.gen_range(-obs_noise..obs_noise),
                        uv[1] + rng.gen_range(-obs_noise..obs_noise),
                    ],
                    weight: weights.data_object,
                });
            }
            object_obs.push(frame_obs);
        }

        let prior =
            PosePrior::from_spec(&PosePrior::synthetic_spec(person.nv() - 6, 3, 11)).unwrap();
        let plane_init = crate::contact::GroundPlane::new(Vec3::new(0.0, 1.0, 0.0), 0.0).unwrap();
        let problem = Problem {
            person,
            object: Some(object),
            camera,
            weights,
            prior: Some(prior),
            schedule,
            dt: 0.1,
            gravity: Vec3::new(0.0, -9.81, 0.0),
            plane_init,
            person_obs,
            object_obs,
            cone_contacts,
            grasp_contacts,
        };

        let t_count = problem.n_frames();
        let state = TrajectoryState {
            person_q,
            person_v: (0..t_count)
                .map(|_| random_tangent(problem.person.nv(), 0.4, &mut rng))
                .collect(),
            object_q,
            object_v: (0..t_count)
                .map(|_| DVector::from_fn(6, |_, _| rng.gen_range(-0.4..0.4)))
                .collect(),
            torque: (0..t_count)
                .map(|_| {
                    DVector::from_fn(problem.var_dim(VarGroup::Torque), |_, _| {
                        rng.gen_range(-20.0..20.0)
                    })
                })
                .collect(),
            cone: (0..t_count)
                .map(|_| {
                    DVector::from_fn(problem.var_dim(VarGroup::Cone), |_, _| {
                        rng.gen_range(0.05..30.0)
                    })
                })
                .collect(),
            wrench: (0..t_count)
                .map(|_| {
                    DVector::from_fn(problem.var_dim(VarGroup::Wrench), |_, _| {
                        rng.gen_range(-15.0..15.0)
                    })
                })
                .collect(),
            plane: problem.plane_init.retract([0.03, -0.02, 0.01]),
        };
        (problem, state)
    }

    fn block_residual(
        problem: &Problem,
        state: &TrajectoryState,
        block: &dyn ResidualBlock,
    ) -> Vec<f64> {
        let caches = build_caches(problem, state);
        let ctx = EvalContext {
            problem,
            state,
            caches: &caches,
        };
        let mut r = vec![0.0; block.rows()];
        block.eval(&ctx, &mut r);
        r
    }

    fn check_jacobians(
        problem: &Problem,
        state: &TrajectoryState,
        blocks: &[Box<dyn ResidualBlock>],
        filter: Option<&str>,
        tol_abs: f64,
        tol_rel: f64,
    ) {
        let caches = build_caches(problem, state);
        let ctx = EvalContext {
            problem,
            state,
            caches: &caches,
        };
        let h = 1e-6;
        for block in blocks {
            if let Some(f) = filter {
                if block.label() != f {
                    continue;
                }
            }
            let rows = block.rows();
            assert!(rows > 0, "{} has no rows", block.label());
            let mut r = vec![0.0; rows];
            let mut jacs: Vec<DMatrix<f64>> = block
                .vars()
                .iter()
                .map(|v| DMatrix::zeros(rows, problem.var_dim(v.group)))
                .collect();
            block.eval_jac(&ctx, &mut r, &mut jacs);
            let r_plain = block_residual(problem, state, block.as_ref());
            for (a, b) in r.iter().zip(&r_plain) {
                assert!(
                    (a - b).abs() < 1e-13,
                    "{}: eval and eval_jac disagree",
                    block.label()
                );
            }
            for (k, var) in block.vars().iter().enumerate() {
                let dim = problem.var_dim(var.group);
                for col in 0..dim {
                    let mut delta = vec![0.0; dim];
                    delta[col] = h;
                    let mut sp = state.clone();
                    sp.apply_step(problem, *var, &delta);
                    delta[col] = -h;
                    let mut sm = state.clone();
                    sm.apply_step(problem, *var, &delta);
                    let rp = block_residual(problem, &sp, block.as_ref());
                    let rm = block_residual(problem, &sm, block.as_ref());
                    for row in 0..rows {
                        let fd = (rp[row] - rm[row]) / (2.0 * h);
                        let d = (jacs[k][(row, col)] - fd).abs();
                        assert!(
                            d < tol_abs + tol_rel * fd.abs(),
                            "{} {:?} col {col} row {row}: jac {} vs fd {}",
                            block.label(),
                            var,
                            jacs[k][(row, col)],
                            fd
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn every_block_jacobian_matches_finite_differences() {
        let (problem, state) = fixture(1e9, 4.0, 31);
        let blocks = problem.build_blocks(Stage::Full);
        check_jacobians(&problem, &state, &blocks, None, 1e-4, 2e-5);
        let seen: std::collections::BTreeSet<&'static str> =
            blocks.iter().map(|b| b.label()).collect();
        for label in [
            "person_data",
            "object_data",
            "pose_prior",
            "person_collocation",
            "object_collocation",
            "person_accel_smooth",
            "object_accel_smooth",
            "slide_smooth",
            "ground_contact",
            "attach",
            "person_dynamics",
            "object_dynamics",
            "torque_reg",
            "cone_reg",
            "wrench_reg",
            "cone_smooth",
            "wrench_smooth",
        ] {
            assert!(seen.contains(label), "fixture never built a {label} block");
        }
    }

    #[test]
    fn robust_data_jacobian_matches_in_the_linear_tail() {
        // Large errors against a 10 px Huber width: most residuals live in
        // the rescaled tail, which must still differentiate cleanly.
        let (problem, state) = fixture(10.0, 45.0, 77);
        let blocks = problem.build_blocks(Stage::Kinematics);
        check_jacobians(&problem, &state, &blocks, Some("person_data"), 1e-3, 1e-4);
        check_jacobians(&problem, &state, &blocks, Some("object_data"), 1e-3, 1e-4);
    }

    #[test]
    fn stages_partition_the_full_problem() {
        let (problem, state) = fixture(1e9, 4.0, 31);
        let full = problem.build_blocks(Stage::Full);
        let kin = problem.build_blocks(Stage::Kinematics);
        let forces = problem.build_blocks(Stage::Forces);
        assert_eq!(kin.len() + forces.len(), full.len());
        let c_full = total_cost(&problem, &full, &state);
        let c_split =
            total_cost(&problem, &kin, &state) + total_cost(&problem, &forces, &state);
        assert!((c_full - c_split).abs() < 1e-9 * c_full.max(1.0));
        assert!(c_full > 0.0);

        // In the force stage, every free variable is a force variable; the
        // rest are frozen, making that stage's residuals linear.
        let frozen = Stage::Forces.frozen_groups();
        for block in &forces {
            for var in block.vars() {
                let free = !frozen.contains(&var.group);
                if free {
                    assert!(matches!(
                        var.group,
                        VarGroup::Torque | VarGroup::Cone | VarGroup::Wrench
                    ));
                }
            }
        }
    }

    #[test]
    fn problem_resolves_measurements_and_schedule() {
        let person = build_human_model(&default_human_spec()).unwrap();
        let q = person.neutral_configuration();
        let fk = crate::dynamics::forward_kinematics(&person, &q);
        let camera = fixture_camera();
        let n_frames = 3;
        let person_markers: Vec<String> =
            person.markers.iter().map(|m| m.name.clone()).collect();
        let frames: Vec<crate::io::FrameMeasurements> = (0..n_frames)
            .map(|_| crate::io::FrameMeasurements {
                person: person
                    .markers
                    .iter()
                    .enumerate()
                    .map(|(m, _)| {
                        let uv = camera.project(fk.marker_positions[m]).unwrap();
                        let confidence = match m {
                            0 => return None,
                            1 => 0.05,
                            _ => 0.9,
                        };
                        Some(crate::io::Keypoint {
                            u: uv[0],
                            v: uv[1],
                            confidence,
                        })
                    })
                    .collect(),
                object: None,
            })
            .collect();
        let ankle = person.joint_index("left_ankle").unwrap();
        let seq = crate::io::MeasurementSequence {
            schema_version: crate::io::SCHEMA_VERSION.into(),
            fps: 30.0,
            camera: crate::io::CameraSpec {
                fx: 600.0,
                fy: 600.0,
                cx: 300.0,
                cy: 200.0,
                width: 600,
                height: 400,
                rotation_wxyz: [0.0, 0.0, 0.0, 1.0],
                translation: [0.0, 1.0, -3.0],
            },
            person_markers,
            object_markers: Vec::new(),
            frames,
            contacts: vec![crate::io::ContactTimeline {
                name: "left_heel".into(),
                geometry: ContactGeometry::GroundPoint {
                    body: ContactBody::Person,
                    joint: ankle,
                    offset: Vec3::new(0.0, -0.05, -0.05),
                },
                phases: vec![Phase { start: 0, end: 3 }],
            }],
            plane_hint: Some(crate::io::PlaneSpec {
                normal: [0.0, 1.0, 0.0],
                offset: 0.02,
            }),
        };
        let problem =
            Problem::from_measurements(&seq, None, CostWeights::default()).unwrap();
        assert_eq!(problem.n_frames(), 3);
        assert!(problem.object.is_none());
        assert!((problem.dt - 1.0 / 30.0).abs() < 1e-15);
        assert_eq!(problem.cone_contacts.len(), 1);
        assert!(problem.grasp_contacts.is_empty());
        assert!((problem.plane_init.offset - 0.02).abs() < 1e-15);
        // Marker 0 was unobserved and marker 1 below the confidence floor.
        assert_eq!(problem.person_obs[0].len(), person.markers.len() - 2);
        assert!(problem.person_obs[0].iter().all(|o| o.marker >= 2));
        // The resolved problem builds a consistent block set around the
        // neutral state.
        let state = TrajectoryState::neutral(&problem);
        let blocks = problem.build_blocks(Stage::Full);
        let cost = total_cost(&problem, &blocks, &state);
        assert!(cost.is_finite());
    }
}
