//! Synthetic ground truth and reconstruction metrics.
//!
//! The generator builds scripted motions (standing, lifting a stick off the
//! ground, swinging it, taking two walking steps) whose contact forces and
//! joint torques are recovered by a constrained minimum-norm inverse
//! dynamics solve, so every sample satisfies the same discrete equations of
//! motion the estimator enforces. Metrics compare an estimated solution
//! against such a reference: rigid-aligned mean joint error, relative
//! contact force / torque error, and object endpoint reprojection accuracy.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::contact::{
    cone_force_world, ContactBody, ContactGeometry, ContactPoint, ContactSchedule, GroundPlane,
    Phase,
};
use crate::costs::{Camera, CostWeights, Problem, TrajectoryState};
use crate::dynamics::{frame_jacobian, inverse_dynamics, joint_placements, point_jacobian};
use crate::io::{
    CameraSpec, ContactTimeline, FrameMeasurements, Keypoint, MeasurementSequence, PlaneSpec,
    Solution, SolveStats,
};
use crate::model::{
    build_human_model, build_object_model, default_human_spec, default_object_spec,
    object_full_config, Configuration, KinematicModel, TangentVector,
};
use crate::spatial::{Placement, Rotation, Vec3};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Quaternion of a (proper) rotation matrix, largest-pivot branch.
fn rotation_from_matrix(m: &nalgebra::Matrix3<f64>) -> Rotation<f64> {
    let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let (w, x, y, z);
    if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        w = 0.25 * s;
        x = (m[(2, 1)] - m[(1, 2)]) / s;
        y = (m[(0, 2)] - m[(2, 0)]) / s;
        z = (m[(1, 0)] - m[(0, 1)]) / s;
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        w = (m[(2, 1)] - m[(1, 2)]) / s;
        x = 0.25 * s;
        y = (m[(0, 1)] + m[(1, 0)]) / s;
        z = (m[(0, 2)] + m[(2, 0)]) / s;
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        w = (m[(0, 2)] - m[(2, 0)]) / s;
        x = (m[(0, 1)] + m[(1, 0)]) / s;
        y = 0.25 * s;
        z = (m[(1, 2)] + m[(2, 1)]) / s;
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        w = (m[(1, 0)] - m[(0, 1)]) / s;
        x = (m[(0, 2)] + m[(2, 0)]) / s;
        y = (m[(1, 2)] + m[(2, 1)]) / s;
        z = 0.25 * s;
    }
    let n = (w * w + x * x + y * y + z * z).sqrt();
    Rotation::from_wxyz(w / n, x / n, y / n, z / n)
}

/// Least-squares rigid transform taking `src` onto `dst` (orthogonal
/// Procrustes with a proper-rotation correction).
pub fn rigid_align(src: &[Vec3<f64>], dst: &[Vec3<f64>]) -> Placement<f64> {
    assert_eq!(src.len(), dst.len());
    assert!(src.len() >= 3, "alignment needs at least three points");
    let n = src.len() as f64;
    let mut sc = Vec3::zero();
    let mut dc = Vec3::zero();
    for (s, d) in src.iter().zip(dst) {
        sc = sc.add(*s);
        dc = dc.add(*d);
    }
    sc = sc.scale(1.0 / n);
    dc = dc.scale(1.0 / n);
    let mut h = nalgebra::Matrix3::<f64>::zeros();
    for (s, d) in src.iter().zip(dst) {
        let a = s.sub(sc);
        let b = d.sub(dc);
        let av = [a.x, a.y, a.z];
        let bv = [b.x, b.y, b.z];
        for r in 0..3 {
            for c in 0..3 {
                h[(r, c)] += av[r] * bv[c];
            }
        }
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd with u");
    let v = svd.v_t.expect("svd with v_t").transpose();
    let d = (v * u.transpose()).determinant();
    let fix = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d.signum()));
    let r_m = v * fix * u.transpose();
    let rotation = rotation_from_matrix(&r_m);
    let translation = dc.sub(rotation.rotate(sc));
    Placement::new(rotation, translation)
}

/// Joint-origin world positions for one configuration.
fn joint_positions(model: &KinematicModel, q: &Configuration) -> Vec<Vec3<f64>> {
    joint_placements(model, q.as_slice())
        .iter()
        .map(|p| p.translation)
        .collect()
}

/// Mean per-joint position error in millimeters, after a per-frame rigid
/// alignment of the estimate onto the reference.
pub fn mpjpe_mm(model: &KinematicModel, est: &[Configuration], truth: &[Configuration]) -> f64 {
    assert_eq!(est.len(), truth.len());
    assert!(!est.is_empty());
    let mut total = 0.0;
    for (qe, qt) in est.iter().zip(truth) {
        let pe = joint_positions(model, qe);
        let pt = joint_positions(model, qt);
        let align = rigid_align(&pe, &pt);
        let mean = pe
            .iter()
            .zip(&pt)
            .map(|(e, t)| align.act_on_point(*e).sub(*t).norm())
            .sum::<f64>()
            / pe.len() as f64;
        total += mean;
    }
    1000.0 * total / est.len() as f64
}

/// Person configurations of a solution, in file order.
pub fn solution_person_configs(sol: &Solution) -> Vec<Configuration> {
    sol.frames
        .iter()
        .map(|f| Configuration(DVector::from_vec(f.person_q.clone())))
        .collect()
}

/// Object configurations of a solution; empty when the solution has none.
pub fn solution_object_configs(sol: &Solution) -> Vec<Configuration> {
    sol.frames
        .iter()
        .filter_map(|f| {
            f.object_q
                .as_ref()
                .map(|q| Configuration(DVector::from_vec(q.clone())))
        })
        .collect()
}

/// Relative force, contact-moment, and joint-torque errors against a
/// reference solution. Frame 0 carries no force variables and is skipped;
/// contact terms aggregate over the reference's active contacts.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ForceErrorReport {
    pub force_rel: f64,
    pub moment_rel: f64,
    pub torque_rel: f64,
}

fn norm3(a: [f64; 3], b: [f64; 3]) -> (f64, f64) {
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let n = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    (d, n)
}

pub fn force_error(truth: &Solution, est: &Solution) -> ForceErrorReport {
    assert_eq!(truth.frames.len(), est.frames.len());
    let (mut fn_, mut fd, mut mn, mut md, mut tn, mut td) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (ft, fe) in truth.frames.iter().zip(&est.frames).skip(1) {
        let dt: f64 = ft
            .torques
            .iter()
            .zip(&fe.torques)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        tn += dt;
        td += ft.torques.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert_eq!(ft.contact_forces.len(), fe.contact_forces.len());
        for (ct, ce) in ft.contact_forces.iter().zip(&fe.contact_forces) {
            if !ct.active {
                continue;
            }
            let (d, n) = norm3(ce.force, ct.force);
            fn_ += d;
            fd += n;
            if ct.cone_weights.is_none() {
                let (d, n) = norm3(ce.moment, ct.moment);
                mn += d;
                md += n;
            }
        }
    }
    ForceErrorReport {
        force_rel: fn_ / fd.max(1e-9),
        moment_rel: mn / md.max(1e-9),
        torque_rel: tn / td.max(1e-9),
    }
}

/// Pixel thresholds for the endpoint accuracy buckets, at the reference
/// 600x400 image size.
pub const ENDPOINT_THRESHOLDS_PX: [f64; 3] = [25.0, 50.0, 100.0];

/// Fraction of frames whose worst object-endpoint reprojection error is
/// within each threshold. Errors are rescaled per axis to the reference
/// 600x400 image so thresholds are resolution-independent.
pub fn endpoint_accuracy(
    camera: &Camera,
    object: &KinematicModel,
    truth: &[Configuration],
    est: &[Configuration],
    thresholds: &[f64],
) -> Vec<f64> {
    assert_eq!(truth.len(), est.len());
    let su = 600.0 / camera.width as f64;
    let sv = 400.0 / camera.height as f64;
    let mut within = vec![0usize; thresholds.len()];
    for (qt, qe) in truth.iter().zip(est) {
        let mut worst = 0.0f64;
        for marker in 0..object.markers.len() {
            let pt = crate::dynamics::forward_kinematics(object, qt).marker_positions[marker];
            let pe = crate::dynamics::forward_kinematics(object, qe).marker_positions[marker];
            let (ut, _, _) = camera.project_clamped_with_jacobian(pt);
            let (ue, _, _) = camera.project_clamped_with_jacobian(pe);
            let du = (ue[0] - ut[0]) * su;
            let dv = (ue[1] - ut[1]) * sv;
            worst = worst.max((du * du + dv * dv).sqrt());
        }
        for (b, &thr) in thresholds.iter().enumerate() {
            if worst <= thr {
                within[b] += 1;
            }
        }
    }
    within
        .iter()
        .map(|&c| c as f64 / truth.len() as f64)
        .collect()
}

/// Summary metrics of one estimate against its reference.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub mpjpe_mm: f64,
    pub force_rel: f64,
    pub moment_rel: f64,
    pub torque_rel: f64,
    /// Endpoint accuracy at [`ENDPOINT_THRESHOLDS_PX`]; absent without an
    /// object.
    pub endpoint_fraction: Option<[f64; 3]>,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "mpjpe_mm,force_rel,moment_rel,torque_rel,endpoint_25px,endpoint_50px,endpoint_100px"
    }

    pub fn csv_row(&self) -> String {
        let ep = |i: usize| {
            self.endpoint_fraction
                .map(|f| format!("{:.6}", f[i]))
                .unwrap_or_default()
        };
        format!(
            "{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.mpjpe_mm,
            self.force_rel,
            self.moment_rel,
            self.torque_rel,
            ep(0),
            ep(1),
            ep(2)
        )
    }
}

/// Compare an estimated solution against a reference one.
pub fn evaluate(problem: &Problem, truth: &Solution, est: &Solution) -> MetricReport {
    let mpjpe = mpjpe_mm(
        &problem.person,
        &solution_person_configs(est),
        &solution_person_configs(truth),
    );
    let fe = force_error(truth, est);
    let endpoint_fraction = problem.object.as_ref().map(|object| {
        let fr = endpoint_accuracy(
            &problem.camera,
            object,
            &solution_object_configs(truth),
            &solution_object_configs(est),
            &ENDPOINT_THRESHOLDS_PX,
        );
        [fr[0], fr[1], fr[2]]
    });
    MetricReport {
        mpjpe_mm: mpjpe,
        force_rel: fe.force_rel,
        moment_rel: fe.moment_rel,
        torque_rel: fe.torque_rel,
        endpoint_fraction,
    }
}

/// Rebuild an optimizer state from a serialized solution (inverse of the
/// export path), e.g. to warm-start or inspect residuals.
pub fn state_from_solution(problem: &Problem, sol: &Solution) -> TrajectoryState {
    let mut state = TrajectoryState::neutral(problem);
    state.plane = GroundPlane::new(Vec3::from_f64(sol.plane.normal), sol.plane.offset)
        .expect("solution plane is valid");
    for (t, f) in sol.frames.iter().enumerate() {
        state.person_q[t] = Configuration(DVector::from_vec(f.person_q.clone()));
        state.person_v[t] = TangentVector(DVector::from_vec(f.person_v.clone()));
        if let (Some(q), Some(v)) = (&f.object_q, &f.object_v) {
            state.object_q[t] = Configuration(DVector::from_vec(q.clone()));
            state.object_v[t] = DVector::from_vec(v.clone());
        }
        state.torque[t] = DVector::from_vec(f.torques.clone());
        for (slot, &k) in problem.cone_contacts.iter().enumerate() {
            if let Some(cw) = f.contact_forces[k].cone_weights {
                for j in 0..4 {
                    state.cone[t][4 * slot + j] = cw[j];
                }
            }
        }
        for (slot, &k) in problem.grasp_contacts.iter().enumerate() {
            let rec = &f.contact_forces[k];
            for j in 0..3 {
                state.wrench[t][6 * slot + j] = rec.moment[j];
                state.wrench[t][6 * slot + 3 + j] = rec.force[j];
            }
        }
    }
    state
}

// ---------------------------------------------------------------------------
// Synthetic scenarios
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Standing on both feet, swinging the arms.
    StaticStand,
    /// Grasping a stick standing on the ground, then lifting it.
    LiftObject,
    /// Swinging a held stick through the air.
    SwingObject,
    /// Two walking steps with alternating single support.
    WalkTwoSteps,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::StaticStand,
        Scenario::LiftObject,
        Scenario::SwingObject,
        Scenario::WalkTwoSteps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::StaticStand => "static-stand",
            Scenario::LiftObject => "lift-object",
            Scenario::SwingObject => "swing-object",
            Scenario::WalkTwoSteps => "walk-two-steps",
        }
    }

    pub fn parse(name: &str) -> Option<Scenario> {
        Scenario::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn has_object(self) -> bool {
        matches!(self, Scenario::LiftObject | Scenario::SwingObject)
    }

    /// Fewest frames for which the scripted motion is physically realizable
    /// at 10 fps.  Walking dominates: each weight shift must be slow enough
    /// that the center of pressure stays inside the support feet.
    pub fn min_frames(self) -> usize {
        match self {
            Scenario::WalkTwoSteps => 48,
            _ => 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticOptions {
    pub scenario: Scenario,
    pub n_frames: usize,
    pub fps: f64,
    /// Standard deviation of the pixel noise added to every keypoint.
    pub noise_px: f64,
    pub seed: u64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            scenario: Scenario::StaticStand,
            n_frames: 40,
            fps: 10.0,
            noise_px: 0.0,
            seed: 17,
        }
    }
}

/// A generated sequence: the (possibly noisy) measurements given to the
/// estimator and the exact reference the estimate is scored against.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub measurements: MeasurementSequence,
    pub truth: Solution,
}

fn canonical_camera() -> CameraSpec {
    CameraSpec {
        fx: 600.0,
        fy: 600.0,
        cx: 300.0,
        cy: 200.0,
        width: 600,
        height: 400,
        rotation_wxyz: [0.0, 0.0, 0.0, 1.0],
        translation: [0.0, 1.0, -3.0],
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Quintic ease (zero velocity *and* acceleration at both ends), for motions
/// whose acceleration profile matters — e.g. weight shifts, where a jump in
/// acceleration throws the center of pressure outside the support feet.
fn smootherstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (x * (6.0 * x - 15.0) + 10.0)
}

/// Base height at which the rest pose's sole vertices touch y = 0.
fn standing_base_height(person: &KinematicModel) -> f64 {
    let placements = joint_placements(person, person.neutral_configuration().as_slice());
    let mut lowest = f64::INFINITY;
    for sole in &person.soles {
        for v in &sole.vertices {
            lowest = lowest.min(placements[sole.ankle_joint].act_on_point(*v).y);
        }
    }
    -lowest
}

fn standing_config(person: &KinematicModel, base: Vec3<f64>) -> Configuration {
    let mut d = TangentVector::zeros(person.nv());
    d.0[0] = base.x;
    d.0[1] = base.y;
    d.0[2] = base.z;
    person
        .integrate(&person.neutral_configuration(), &d)
        .expect("standing pose is valid")
}

/// Rotation taking the +x axis to `dir` (unit) by the shortest arc.
fn align_x_to(dir: Vec3<f64>) -> Rotation<f64> {
    let ex = Vec3::new(1.0, 0.0, 0.0);
    let c = ex.dot(dir).clamp(-1.0, 1.0);
    if c > 1.0 - 1e-12 {
        return Rotation::identity();
    }
    if c < -1.0 + 1e-12 {
        return Rotation::from_wxyz(0.0, 0.0, 1.0, 0.0);
    }
    let axis = ex.cross(dir);
    let axis = axis.scale(1.0 / axis.norm());
    Rotation::from_rotation_vector(axis.scale(c.acos()))
}

struct IkTarget {
    joint: usize,
    position: Vec3<f64>,
    orientation: Option<Rotation<f64>>,
}

/// Damped least-squares inverse kinematics over the listed joints only.
fn solve_ik(
    model: &KinematicModel,
    start: &Configuration,
    free_joints: &[usize],
    targets: &[IkTarget],
) -> Configuration {
    let free_cols: Vec<usize> = free_joints
        .iter()
        .flat_map(|&j| {
            let o = model.v_offset(j);
            o..o + model.joints[j].kind.nv()
        })
        .collect();
    let rows: usize = targets
        .iter()
        .map(|t| if t.orientation.is_some() { 6 } else { 3 })
        .sum();
    let mut q = start.clone();
    let mut err = f64::INFINITY;
    for _ in 0..200 {
        let placements = joint_placements(model, q.as_slice());
        let mut e = DVector::zeros(rows);
        let mut jac = DMatrix::zeros(rows, free_cols.len());
        let mut row = 0;
        for tgt in targets {
            let full = if tgt.orientation.is_some() {
                frame_jacobian(model, &placements, tgt.joint, Vec3::zero())
            } else {
                point_jacobian(model, &placements, tgt.joint, Vec3::zero())
            };
            if let Some(r_t) = &tgt.orientation {
                let rel = r_t.compose(&placements[tgt.joint].rotation.inverse());
                let ev = rel.quat().log();
                e[row] = ev.x;
                e[row + 1] = ev.y;
                e[row + 2] = ev.z;
                let dp = tgt.position.sub(placements[tgt.joint].translation);
                e[row + 3] = dp.x;
                e[row + 4] = dp.y;
                e[row + 5] = dp.z;
                for (c, &col) in free_cols.iter().enumerate() {
                    for r in 0..6 {
                        jac[(row + r, c)] = full[(r, col)];
                    }
                }
                row += 6;
            } else {
                let dp = tgt.position.sub(placements[tgt.joint].translation);
                e[row] = dp.x;
                e[row + 1] = dp.y;
                e[row + 2] = dp.z;
                for (c, &col) in free_cols.iter().enumerate() {
                    for r in 0..3 {
                        jac[(row + r, c)] = full[(r, col)];
                    }
                }
                row += 3;
            }
        }
        err = e.amax();
        if err < 1e-11 {
            break;
        }
        let mut h = jac.transpose() * &jac;
        for i in 0..h.nrows() {
            h[(i, i)] += 1e-8;
        }
        let g = jac.transpose() * &e;
        let mut step = nalgebra::linalg::Cholesky::new(h)
            .expect("damped normal equations are positive definite")
            .solve(&g);
        let n = step.norm();
        if n > 0.5 {
            step *= 0.5 / n;
        }
        let mut d = TangentVector::zeros(model.nv());
        for (c, &col) in free_cols.iter().enumerate() {
            d.0[col] = step[c];
        }
        q = model.integrate(&q, &d).expect("ik step stays valid");
    }
    assert!(
        err < 1e-9,
        "inverse kinematics stalled at error {err} reaching {:?}",
        targets
            .iter()
            .map(|t| (model.joints[t.joint].name.as_str(), t.position))
            .collect::<Vec<_>>()
    );
    q
}

struct ScenarioMotion {
    person: KinematicModel,
    object: Option<KinematicModel>,
    person_q: Vec<Configuration>,
    object_q: Vec<Configuration>,
    schedule: ContactSchedule,
}

fn static_stand(t_count: usize) -> ScenarioMotion {
    let person = build_human_model(&default_human_spec()).expect("default person");
    let base = standing_base_height(&person);
    let stand = standing_config(&person, Vec3::new(0.0, base, 0.0));
    let le = person.joint_index("left_elbow").unwrap();
    let re = person.joint_index("right_elbow").unwrap();
    let mut person_q = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let theta = 0.35 * (2.0 * std::f64::consts::PI * t as f64 / (t_count - 1) as f64).sin();
        let mut d = TangentVector::zeros(person.nv());
        d.0[person.v_offset(le) + 2] = theta;
        d.0[person.v_offset(re) + 2] = -theta;
        person_q.push(person.integrate(&stand, &d).expect("arm swing stays valid"));
    }
    let mut schedule = ContactSchedule::empty(t_count);
    schedule.add_sole_contacts(
        &person,
        vec![Phase {
            start: 0,
            end: t_count,
        }],
    );
    ScenarioMotion {
        person,
        object: None,
        person_q,
        object_q: Vec::new(),
        schedule,
    }
}

fn lift_object(t_count: usize) -> ScenarioMotion {
    let person = build_human_model(&default_human_spec()).expect("default person");
    let object = build_object_model(&default_object_spec()).expect("default object");
    let info = object.object.as_ref().unwrap().clone();
    let length = info.handle_length;
    let base_h = standing_base_height(&person);
    let stand = standing_config(&person, Vec3::new(0.0, base_h, 0.0));
    let wrist = person.joint_index("right_wrist").unwrap();
    let free: Vec<usize> = ["spine3", "right_collar", "right_shoulder", "right_elbow"]
        .iter()
        .map(|n| person.joint_index(n).unwrap())
        .collect();

    // A stick standing nearly upright in front of the person's right hand:
    // handle end up, tip exactly on the ground.
    let raw = Vec3::new(-0.04, -0.99, -0.09);
    let dir = raw.scale(1.0 / raw.norm());
    let base0 = Vec3::new(-0.24, -dir.y * length, -0.12);
    let rot = align_x_to(dir);
    let quat = rot.quat();
    let grasp_coord = 0.05 * length;
    let ground_frames = ((0.45 * t_count as f64).round() as usize).clamp(2, t_count - 2);

    let mut person_q = Vec::with_capacity(t_count);
    let mut object_q = Vec::with_capacity(t_count);
    let mut prev = stand.clone();
    for t in 0..t_count {
        let progress = ((t as f64) - (ground_frames as f64 - 1.0))
            / ((t_count - ground_frames) as f64);
        let lift = 0.25 * smoothstep(progress);
        let base = base0.add(Vec3::new(0.0, lift, 0.0));
        object_q.push(object_full_config(
            &object,
            &[base.x, base.y, base.z, quat.w, quat.x, quat.y, quat.z],
            &[grasp_coord, 0.5 * length],
        ));
        let grip = base.add(dir.scale(grasp_coord));
        let q = solve_ik(
            &person,
            &prev,
            &free,
            &[IkTarget {
                joint: wrist,
                position: grip,
                orientation: None,
            }],
        );
        prev = q.clone();
        person_q.push(q);
    }

    let mut schedule = ContactSchedule::empty(t_count);
    schedule.add_sole_contacts(
        &person,
        vec![Phase {
            start: 0,
            end: t_count,
        }],
    );
    schedule.add(
        ContactPoint {
            name: "object_tip".into(),
            geometry: ContactGeometry::GroundPoint {
                body: ContactBody::Object,
                joint: info.head_joint,
                offset: Vec3::zero(),
            },
        },
        vec![Phase {
            start: 0,
            end: ground_frames,
        }],
    );
    schedule.add(
        ContactPoint {
            name: "right_hand_grasp".into(),
            geometry: ContactGeometry::HandleGrasp {
                person_joint: wrist,
                slot: 0,
            },
        },
        vec![Phase {
            start: 0,
            end: t_count,
        }],
    );
    ScenarioMotion {
        person,
        object: Some(object),
        person_q,
        object_q,
        schedule,
    }
}

fn swing_object(t_count: usize) -> ScenarioMotion {
    let person = build_human_model(&default_human_spec()).expect("default person");
    let object = build_object_model(&default_object_spec()).expect("default object");
    let length = object.object.as_ref().unwrap().handle_length;
    let base_h = standing_base_height(&person);
    let stand = standing_config(&person, Vec3::new(0.0, base_h, 0.0));
    let wrist = person.joint_index("right_wrist").unwrap();
    let free: Vec<usize> = ["spine3", "right_collar", "right_shoulder", "right_elbow"]
        .iter()
        .map(|n| person.joint_index(n).unwrap())
        .collect();
    let grasp_coord = 0.15 * length;

    let mut person_q = Vec::with_capacity(t_count);
    let mut object_q = Vec::with_capacity(t_count);
    let mut prev = stand.clone();
    for t in 0..t_count {
        let tau = t as f64 / (t_count - 1) as f64;
        let phase = 2.0 * std::f64::consts::PI * tau;
        let grip = Vec3::new(
            -0.3,
            1.15 + 0.08 * phase.sin(),
            -0.2 + 0.05 * (phase.cos() - 1.0),
        );
        let beta = phase.sin();
        let raw = Vec3::new(0.12, -beta.cos(), -beta.sin());
        let dir = raw.scale(1.0 / raw.norm());
        let base = grip.sub(dir.scale(grasp_coord));
        let quat = align_x_to(dir).quat();
        object_q.push(object_full_config(
            &object,
            &[base.x, base.y, base.z, quat.w, quat.x, quat.y, quat.z],
            &[grasp_coord, 0.5 * length],
        ));
        let q = solve_ik(
            &person,
            &prev,
            &free,
            &[IkTarget {
                joint: wrist,
                position: grip,
                orientation: None,
            }],
        );
        prev = q.clone();
        person_q.push(q);
    }

    let mut schedule = ContactSchedule::empty(t_count);
    schedule.add_sole_contacts(
        &person,
        vec![Phase {
            start: 0,
            end: t_count,
        }],
    );
    schedule.add(
        ContactPoint {
            name: "right_hand_grasp".into(),
            geometry: ContactGeometry::HandleGrasp {
                person_joint: wrist,
                slot: 0,
            },
        },
        vec![Phase {
            start: 0,
            end: t_count,
        }],
    );
    ScenarioMotion {
        person,
        object: Some(object),
        person_q,
        object_q,
        schedule,
    }
}

fn walk_two_steps(t_count: usize) -> ScenarioMotion {
    // Quasi-static gait: the base sways only while both feet are planted,
    // and slowly enough that the required center of pressure never leaves
    // the support feet (sole 0.08 x 0.20 m, pelvis about 0.9 m up, so a
    // lateral acceleration `a` displaces the center of pressure by roughly
    // 0.09 a meters).  That budget fixes the minimum duration.
    assert!(
        t_count >= Scenario::WalkTwoSteps.min_frames(),
        "walking needs at least {} frames",
        Scenario::WalkTwoSteps.min_frames()
    );
    let person = build_human_model(&default_human_spec()).expect("default person");
    let ankle_h = 0.05f64;
    // Crouch enough that every scripted foothold stays clearly inside the
    // legs' reach; a straight knee is a kinematic singularity.
    let base_y = standing_base_height(&person) - 0.09;
    let frame_at = |x: f64| ((x * t_count as f64).round() as usize).clamp(1, t_count - 1);
    let (t1, t2, t3, t4) = (
        frame_at(0.250),
        frame_at(0.354),
        frame_at(0.646),
        frame_at(0.771),
    );
    assert!(t1 < t2 && t2 < t3 && t3 < t4);

    // Base keyframes: shift over the left foot, hold through the right
    // step, cross to the right foot, hold through the left step, settle
    // between the final footprints.  Forward progress happens while both
    // feet are down.
    let segs: [(usize, usize, [f64; 2], [f64; 2]); 5] = [
        (0, t1, [0.0, 0.0], [0.085, 0.0]),
        (t1, t2, [0.085, 0.0], [0.085, 0.0]),
        (t2, t3, [0.085, 0.0], [-0.085, -0.17]),
        (t3, t4, [-0.085, -0.17], [-0.085, -0.17]),
        (t4, t_count, [-0.085, -0.17], [0.0, -0.30]),
    ];
    let base_xz = |t: usize| -> (f64, f64) {
        for &(s, e, a, b) in &segs {
            if t < e || e == t_count {
                let u = smootherstep((t - s) as f64 / (e - s) as f64);
                return (a[0] + (b[0] - a[0]) * u, a[1] + (b[1] - a[1]) * u);
            }
        }
        unreachable!()
    };
    // Swing interpolation from the last planted frame to the next one; the
    // profiles reach the ground with zero velocity and acceleration.
    let swing = |t: usize, start: usize, end: usize, from_z: f64, to_z: f64| -> (f64, f64) {
        let u = (t as f64 - (start as f64 - 1.0)) / (end as f64 - (start as f64 - 1.0));
        let z = from_z + (to_z - from_z) * smootherstep(u);
        let s = (std::f64::consts::PI * u.clamp(0.0, 1.0)).sin();
        (ankle_h + 0.06 * s * s, z)
    };
    let left_ankle_at = |t: usize| -> Vec3<f64> {
        if t < t3 {
            Vec3::new(0.09, ankle_h, 0.0)
        } else if t < t4 {
            let (y, z) = swing(t, t3, t4, 0.0, -0.40);
            Vec3::new(0.09, y, z)
        } else {
            Vec3::new(0.09, ankle_h, -0.40)
        }
    };
    let right_ankle_at = |t: usize| -> Vec3<f64> {
        if t < t1 {
            Vec3::new(-0.09, ankle_h, 0.0)
        } else if t < t2 {
            let (y, z) = swing(t, t1, t2, 0.0, -0.20);
            Vec3::new(-0.09, y, z)
        } else {
            Vec3::new(-0.09, ankle_h, -0.20)
        }
    };

    let legs: Vec<usize> = [
        "left_hip",
        "left_knee",
        "left_ankle",
        "right_hip",
        "right_knee",
        "right_ankle",
    ]
    .iter()
    .map(|n| person.joint_index(n).unwrap())
    .collect();
    let la = person.joint_index("left_ankle").unwrap();
    let ra = person.joint_index("right_ankle").unwrap();

    let mut person_q = Vec::with_capacity(t_count);
    // Pre-bend the legs so the first frame's solve does not start at the
    // straight-leg singularity, where the ankle gains no height from any
    // joint rate.
    let mut crouch = TangentVector::zeros(person.nv());
    for (hip, knee, ankle) in [("left_hip", "left_knee", "left_ankle")]
        .into_iter()
        .chain([("right_hip", "right_knee", "right_ankle")])
    {
        crouch.0[person.v_offset(person.joint_index(hip).unwrap())] = 0.25;
        crouch.0[person.v_offset(person.joint_index(knee).unwrap())] = -0.5;
        crouch.0[person.v_offset(person.joint_index(ankle).unwrap())] = 0.25;
    }
    let mut prev = person
        .integrate(&standing_config(&person, Vec3::new(0.0, base_y, 0.0)), &crouch)
        .expect("crouch pose is valid");
    for t in 0..t_count {
        let (bx, bz) = base_xz(t);
        // Write the base placement directly, then make the legs reach the
        // scripted footholds.
        let mut q = prev.clone();
        q.0[0] = bx;
        q.0[1] = base_y;
        q.0[2] = bz;
        let q = solve_ik(
            &person,
            &q,
            &legs,
            &[
                IkTarget {
                    joint: la,
                    position: left_ankle_at(t),
                    orientation: Some(Rotation::identity()),
                },
                IkTarget {
                    joint: ra,
                    position: right_ankle_at(t),
                    orientation: Some(Rotation::identity()),
                },
            ],
        );
        prev = q.clone();
        person_q.push(q);
    }

    let mut schedule = ContactSchedule::empty(t_count);
    let left_phases = vec![
        Phase { start: 0, end: t3 },
        Phase {
            start: t4,
            end: t_count,
        },
    ];
    let right_phases = vec![
        Phase { start: 0, end: t1 },
        Phase {
            start: t2,
            end: t_count,
        },
    ];
    for sole in &person.soles {
        let ankle = &person.joints[sole.ankle_joint].name;
        let phases = if sole.ankle_joint == la {
            &left_phases
        } else {
            &right_phases
        };
        for (v, offset) in sole.vertices.iter().enumerate() {
            schedule.add(
                ContactPoint {
                    name: format!("{ankle}_sole_{v}"),
                    geometry: ContactGeometry::GroundPoint {
                        body: ContactBody::Person,
                        joint: sole.ankle_joint,
                        offset: *offset,
                    },
                },
                phases.clone(),
            );
        }
    }
    ScenarioMotion {
        person,
        object: None,
        person_q,
        object_q: Vec::new(),
        schedule,
    }
}

// ---------------------------------------------------------------------------
// Ground-truth forces
// ---------------------------------------------------------------------------

/// Forces for one transition: contact cone weights and grasp wrenches from a
/// minimum-norm solve with the base rows of both models as hard equality
/// constraints, plus the joint torques that absorb the actuated rows.
struct FrameForces {
    /// `(schedule contact index, cone weights)`
    lambda: Vec<(usize, [f64; 4])>,
    /// `(schedule contact index, [moment; force])`
    wrench: Vec<(usize, [f64; 6])>,
    tau: DVector<f64>,
}

#[allow(clippy::too_many_arguments)]
fn solve_frame_forces(
    person: &KinematicModel,
    object: Option<&KinematicModel>,
    schedule: &ContactSchedule,
    frame: usize,
    qp: &Configuration,
    vp: &TangentVector,
    ap: &TangentVector,
    object_qva: Option<(&Configuration, &TangentVector, &TangentVector)>,
    plane: &GroundPlane,
    mu: f64,
    gravity: Vec3<f64>,
    weights: &CostWeights,
) -> FrameForces {
    let nv_p = person.nv();
    let placements_p = joint_placements(person, qp.as_slice());
    let b_p = inverse_dynamics(person, qp, vp, ap, gravity, None);
    let (b_o, placements_o) = match (object, object_qva) {
        (Some(obj), Some((qo, vo, ao))) => (
            Some(inverse_dynamics(obj, qo, vo, ao, gravity, None)),
            Some(joint_placements(obj, qo.as_slice())),
        ),
        _ => (None, None),
    };
    let frame_rot = plane.contact_frame();
    let gen_dir = |g: usize| {
        let mut unit = [0.0; 4];
        unit[g] = 1.0;
        cone_force_world(&frame_rot, mu, &unit)
    };

    // Active columns.
    let mut cone_cols: Vec<(usize, usize, Vec3<f64>, ContactBody)> = Vec::new();
    let mut grasp_cols: Vec<(usize, usize, usize)> = Vec::new();
    for (k, c) in schedule.contacts.iter().enumerate() {
        if !schedule.is_active(k, frame) {
            continue;
        }
        match &c.geometry {
            ContactGeometry::GroundPoint {
                body,
                joint,
                offset,
            } => cone_cols.push((k, *joint, *offset, *body)),
            ContactGeometry::HandleGrasp { person_joint, slot } => {
                let obj = object.expect("grasp needs an object");
                let slot_joint = obj.object.as_ref().unwrap().contact_joints[*slot];
                grasp_cols.push((k, *person_joint, slot_joint));
            }
        }
    }
    let n_lambda = 4 * cone_cols.len();
    let n_x = n_lambda + 6 * grasp_cols.len();
    let n_rows = nv_p + if object.is_some() { 6 } else { 0 };

    // Full generalized-force map A and bias b over person rows then object
    // base rows.
    let mut a = DMatrix::zeros(n_rows, n_x);
    let mut b = DVector::zeros(n_rows);
    b.rows_mut(0, nv_p).copy_from(&b_p);
    if let Some(bo) = &b_o {
        b.rows_mut(nv_p, 6).copy_from(&bo.rows(0, 6));
    }
    for (ci, (_, joint, offset, body)) in cone_cols.iter().enumerate() {
        for g in 0..4 {
            let dir = gen_dir(g);
            let col = 4 * ci + g;
            match body {
                ContactBody::Person => {
                    let jp = point_jacobian(person, &placements_p, *joint, *offset);
                    for r in 0..nv_p {
                        a[(r, col)] =
                            jp[(0, r)] * dir.x + jp[(1, r)] * dir.y + jp[(2, r)] * dir.z;
                    }
                }
                ContactBody::Object => {
                    let obj = object.unwrap();
                    let jo = point_jacobian(
                        obj,
                        placements_o.as_ref().unwrap(),
                        *joint,
                        *offset,
                    );
                    for r in 0..6 {
                        a[(nv_p + r, col)] =
                            jo[(0, r)] * dir.x + jo[(1, r)] * dir.y + jo[(2, r)] * dir.z;
                    }
                }
            }
        }
    }
    for (gi, (_, person_joint, slot_joint)) in grasp_cols.iter().enumerate() {
        let col0 = n_lambda + 6 * gi;
        let jp = frame_jacobian(person, &placements_p, *person_joint, Vec3::zero());
        for c in 0..6 {
            for r in 0..nv_p {
                a[(r, col0 + c)] = jp[(c, r)];
            }
        }
        if let Some(po) = &placements_o {
            let jo = frame_jacobian(object.unwrap(), po, *slot_joint, Vec3::zero());
            for c in 0..6 {
                for r in 0..6 {
                    a[(nv_p + r, col0 + c)] = -jo[(c, r)];
                }
            }
        }
    }

    // Hard rows (unactuated bases), soft rows (torque preference), and the
    // force regularizer, matching the estimator's relative weighting.
    let mut eq_rows: Vec<usize> = (0..6).collect();
    if object.is_some() {
        eq_rows.extend(nv_p..nv_p + 6);
    }
    let soft_rows: Vec<usize> = (6..nv_p).collect();
    let reg = weights.force_reg / weights.torque;

    let mut active: Vec<bool> = vec![true; n_x];
    let mut x_full = DVector::zeros(n_x);
    for _pass in 0..=n_x {
        let cols: Vec<usize> = (0..n_x).filter(|&c| active[c]).collect();
        let n_c = cols.len();
        let n_e = eq_rows.len();
        let mut h = DMatrix::zeros(n_c + n_e, n_c + n_e);
        let mut rhs = DVector::zeros(n_c + n_e);
        for (i, &ci) in cols.iter().enumerate() {
            for (j, &cj) in cols.iter().enumerate() {
                let mut s = 0.0;
                for &r in &soft_rows {
                    s += a[(r, ci)] * a[(r, cj)];
                }
                h[(i, j)] = s;
            }
            h[(i, i)] += reg * reg;
            let mut s = 0.0;
            for &r in &soft_rows {
                s += a[(r, ci)] * b[r];
            }
            rhs[i] = s;
            for (e, &r) in eq_rows.iter().enumerate() {
                h[(n_c + e, i)] = a[(r, ci)];
                h[(i, n_c + e)] = a[(r, ci)];
            }
        }
        for (e, &r) in eq_rows.iter().enumerate() {
            rhs[n_c + e] = b[r];
        }
        // A pseudo-inverse tolerates redundant equality rows, which show up
        // when pruning concentrates support on a footprint edge; genuinely
        // unsatisfiable balance is still caught by the assert below.
        let sol = nalgebra::linalg::SVD::new(h, true, true)
            .solve(&rhs, 1e-10)
            .unwrap_or_else(|e| {
                panic!("frame {frame}: force balance failed ({e}) with {n_c} active + {n_e} equality rows")
            });
        x_full.fill(0.0);
        for (i, &ci) in cols.iter().enumerate() {
            x_full[ci] = sol[i];
        }
        // Retire the most negative weight and re-solve; removing one column
        // at a time keeps the equality rows full-rank on the active set.
        let worst = (0..n_lambda)
            .filter(|&c| active[c])
            .min_by(|&p, &q| x_full[p].partial_cmp(&x_full[q]).unwrap());
        match worst {
            Some(c) if x_full[c] < -1e-9 => active[c] = false,
            _ => break,
        }
    }
    for c in 0..n_lambda {
        if x_full[c] < 0.0 {
            x_full[c] = 0.0;
        }
    }
    // The hard rows must balance exactly; anything else means the scripted
    // motion is not physically realizable with the scheduled contacts.
    for &r in &eq_rows {
        let mut s = -b[r];
        for c in 0..n_x {
            s += a[(r, c)] * x_full[c];
        }
        assert!(
            s.abs() < 1e-6 * b.amax().max(1.0),
            "frame {frame}: unbalanced base row {r}: {s}"
        );
    }
    let mut tau = DVector::zeros(nv_p - 6);
    for (i, &r) in soft_rows.iter().enumerate() {
        let mut s = b[r];
        for c in 0..n_x {
            s -= a[(r, c)] * x_full[c];
        }
        tau[i] = s;
    }

    let lambda = cone_cols
        .iter()
        .enumerate()
        .map(|(ci, (k, _, _, _))| {
            (
                *k,
                [
                    x_full[4 * ci],
                    x_full[4 * ci + 1],
                    x_full[4 * ci + 2],
                    x_full[4 * ci + 3],
                ],
            )
        })
        .collect();
    let wrench = grasp_cols
        .iter()
        .enumerate()
        .map(|(gi, (k, _, _))| {
            let o = n_lambda + 6 * gi;
            (
                *k,
                [
                    x_full[o],
                    x_full[o + 1],
                    x_full[o + 2],
                    x_full[o + 3],
                    x_full[o + 4],
                    x_full[o + 5],
                ],
            )
        })
        .collect();
    FrameForces {
        lambda,
        wrench,
        tau,
    }
}

/// Generate one synthetic sequence: scripted motion, physically consistent
/// forces, projected (optionally noisy) keypoints, and the exact reference.
pub fn generate_synthetic(opts: &SyntheticOptions) -> SyntheticData {
    assert!(opts.n_frames >= 8, "sequences need at least 8 frames");
    assert!(opts.fps > 0.0);
    let motion = match opts.scenario {
        Scenario::StaticStand => static_stand(opts.n_frames),
        Scenario::LiftObject => lift_object(opts.n_frames),
        Scenario::SwingObject => swing_object(opts.n_frames),
        Scenario::WalkTwoSteps => walk_two_steps(opts.n_frames),
    };
    let t_count = opts.n_frames;
    let dt = 1.0 / opts.fps;
    let person = &motion.person;
    let object = motion.object.as_ref();
    let weights = CostWeights::default();
    let gravity = Vec3::new(0.0, -9.81, 0.0);
    let plane = GroundPlane::new(Vec3::new(0.0, 1.0, 0.0), 0.0).expect("ground plane");

    // Velocities from configuration differences; frame 0 copies frame 1 so
    // the first transition starts at rest in the velocity sense.
    let mut person_v = vec![TangentVector::zeros(person.nv()); t_count];
    let mut object_v = vec![TangentVector::zeros(object.map_or(0, |o| o.nv())); t_count];
    for t in 1..t_count {
        person_v[t] = TangentVector(
            person
                .difference(&motion.person_q[t - 1], &motion.person_q[t])
                .expect("scripted poses are valid")
                .0
                / dt,
        );
        if let Some(obj) = object {
            object_v[t] = TangentVector(
                obj.difference(&motion.object_q[t - 1], &motion.object_q[t])
                    .expect("scripted object poses are valid")
                    .0
                    / dt,
            );
        }
    }
    person_v[0] = person_v[1].clone();
    object_v[0] = object_v[1].clone();

    let mut forces: Vec<Option<FrameForces>> = Vec::with_capacity(t_count);
    forces.push(None);
    for t in 1..t_count {
        let ap = TangentVector((&person_v[t].0 - &person_v[t - 1].0) / dt);
        let ao = object.map(|_| TangentVector((&object_v[t].0 - &object_v[t - 1].0) / dt));
        forces.push(Some(solve_frame_forces(
            person,
            object,
            &motion.schedule,
            t,
            &motion.person_q[t],
            &person_v[t],
            &ap,
            object.map(|_| {
                (
                    &motion.object_q[t],
                    &object_v[t],
                    ao.as_ref().expect("object acceleration"),
                )
            }),
            &plane,
            weights.friction_angle,
            gravity,
            &weights,
        )));
    }

    // Project the markers; corrupt a copy for the measurement stream.
    let camera_spec = canonical_camera();
    let camera = Camera::from_spec(&camera_spec);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut frames = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let fk = crate::dynamics::forward_kinematics(person, &motion.person_q[t]);
        let person_kp: Vec<Option<Keypoint>> = fk
            .marker_positions
            .iter()
            .map(|p| {
                let uv = camera.project(*p).expect("marker in front of the camera");
                Some(Keypoint {
                    u: uv[0] + opts.noise_px * gauss(&mut rng),
                    v: uv[1] + opts.noise_px * gauss(&mut rng),
                    confidence: 1.0,
                })
            })
            .collect();
        let object_kp = object.map(|obj| {
            let fk = crate::dynamics::forward_kinematics(obj, &motion.object_q[t]);
            fk.marker_positions
                .iter()
                .map(|p| {
                    let uv = camera.project(*p).expect("endpoint in front of the camera");
                    Some(Keypoint {
                        u: uv[0] + opts.noise_px * gauss(&mut rng),
                        v: uv[1] + opts.noise_px * gauss(&mut rng),
                        confidence: 1.0,
                    })
                })
                .collect()
        });
        frames.push(FrameMeasurements {
            person: person_kp,
            object: object_kp,
        });
    }

    let measurements = MeasurementSequence {
        schema_version: crate::io::SCHEMA_VERSION.into(),
        fps: opts.fps,
        camera: camera_spec,
        person_markers: person.markers.iter().map(|m| m.name.clone()).collect(),
        object_markers: object
            .map(|o| o.markers.iter().map(|m| m.name.clone()).collect())
            .unwrap_or_default(),
        frames,
        contacts: motion
            .schedule
            .contacts
            .iter()
            .zip(&motion.schedule.phases)
            .map(|(c, p)| ContactTimeline {
                name: c.name.clone(),
                geometry: c.geometry.clone(),
                phases: p.clone(),
            })
            .collect(),
        plane_hint: Some(PlaneSpec {
            normal: [0.0, 1.0, 0.0],
            offset: 0.0,
        }),
    };

    // Pack the exact trajectory into the solution schema via the estimator's
    // own export path so both sides agree on layout and force conventions.
    let problem = Problem::from_measurements(&measurements, None, CostWeights::default())
        .expect("generated measurements are valid");
    let mut state = TrajectoryState::neutral(&problem);
    for t in 0..t_count {
        state.person_q[t] = motion.person_q[t].clone();
        state.person_v[t] = person_v[t].clone();
        if object.is_some() {
            state.object_q[t] = motion.object_q[t].clone();
            for i in 0..6 {
                state.object_v[t][i] = object_v[t].0[i];
            }
        }
        if let Some(f) = &forces[t] {
            state.torque[t] = f.tau.clone();
            for (k, lam) in &f.lambda {
                let slot = problem
                    .cone_contacts
                    .iter()
                    .position(|kk| kk == k)
                    .expect("cone contact listed");
                for j in 0..4 {
                    state.cone[t][4 * slot + j] = lam[j];
                }
            }
            for (k, w) in &f.wrench {
                let slot = problem
                    .grasp_contacts
                    .iter()
                    .position(|kk| kk == k)
                    .expect("grasp contact listed");
                for j in 0..6 {
                    state.wrench[t][6 * slot + j] = w[j];
                }
            }
        }
    }
    let truth = crate::solver::export_solution(&problem, &state, SolveStats::default());
    SyntheticData {
        measurements,
        truth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::{build_caches, EvalContext, Stage};
    use rand::rngs::StdRng;

    fn random_cloud(rng: &mut StdRng, n: usize) -> Vec<Vec3<f64>> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect()
    }

    #[test]
    fn rigid_alignment_matches_quaternion_eigen_solution() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..10 {
            let src = random_cloud(&mut rng, 12);
            let rot = Rotation::from_rotation_vector(Vec3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ));
            let shift = Vec3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let dst: Vec<Vec3<f64>> = src.iter().map(|p| rot.rotate(*p).add(shift)).collect();
            let align = rigid_align(&src, &dst);

            // Independent closed form: the optimal rotation is the largest
            // eigenvector of the quaternion correlation matrix.
            let n = src.len() as f64;
            let mut sc = Vec3::zero();
            let mut dc = Vec3::zero();
            for (s, d) in src.iter().zip(&dst) {
                sc = sc.add(*s);
                dc = dc.add(*d);
            }
            sc = sc.scale(1.0 / n);
            dc = dc.scale(1.0 / n);
            let mut s = [[0.0f64; 3]; 3];
            for (a, b) in src.iter().zip(&dst) {
                let av = [a.x - sc.x, a.y - sc.y, a.z - sc.z];
                let bv = [b.x - dc.x, b.y - dc.y, b.z - dc.z];
                for r in 0..3 {
                    for c in 0..3 {
                        s[r][c] += av[r] * bv[c];
                    }
                }
            }
            let m = nalgebra::Matrix4::new(
                s[0][0] + s[1][1] + s[2][2],
                s[1][2] - s[2][1],
                s[2][0] - s[0][2],
                s[0][1] - s[1][0],
                s[1][2] - s[2][1],
                s[0][0] - s[1][1] - s[2][2],
                s[0][1] + s[1][0],
                s[2][0] + s[0][2],
                s[2][0] - s[0][2],
                s[0][1] + s[1][0],
                -s[0][0] + s[1][1] - s[2][2],
                s[1][2] + s[2][1],
                s[0][1] - s[1][0],
                s[2][0] + s[0][2],
                s[1][2] + s[2][1],
                -s[0][0] - s[1][1] + s[2][2],
            );
            let eig = nalgebra::linalg::SymmetricEigen::new(m);
            let mut best = 0;
            for i in 1..4 {
                if eig.eigenvalues[i] > eig.eigenvalues[best] {
                    best = i;
                }
            }
            let q = eig.eigenvectors.column(best);
            let horn = Rotation::from_wxyz(q[0], q[1], q[2], q[3]);

            for p in &src {
                let a = align.rotation.rotate(*p);
                let b = horn.rotate(*p);
                assert!(a.sub(b).norm() < 1e-10);
            }
            // And the full transform reproduces the target points.
            for (p, d) in src.iter().zip(&dst) {
                assert!(align.act_on_point(*p).sub(*d).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn mpjpe_is_invariant_to_global_rigid_motion() {
        let person = build_human_model(&default_human_spec()).unwrap();
        let mut rng = StdRng::seed_from_u64(12);
        let mut truth = Vec::new();
        let mut moved = Vec::new();
        for _ in 0..3 {
            let d = TangentVector(DVector::from_fn(person.nv(), |_, _| {
                rng.gen_range(-0.2..0.2)
            }));
            let q = person
                .integrate(&person.neutral_configuration(), &d)
                .unwrap();
            // The same pose, rigidly displaced: 90 deg yaw plus an offset.
            let mut shift = TangentVector::zeros(person.nv());
            shift.0[0] = 0.7;
            shift.0[2] = -0.4;
            shift.0[4] = std::f64::consts::FRAC_PI_2;
            moved.push(person.integrate(&q, &shift).unwrap());
            truth.push(q);
        }
        assert!(mpjpe_mm(&person, &truth, &truth) < 1e-9);
        assert!(mpjpe_mm(&person, &moved, &truth) < 1e-6);

        // A real pose difference is not aligned away. Bend the elbow across
        // the forearm axis so the wrist actually moves.
        let mut bent = truth.clone();
        let elbow = person.joint_index("left_elbow").unwrap();
        let mut d = TangentVector::zeros(person.nv());
        d.0[person.v_offset(elbow) + 2] = 0.8;
        bent[0] = person.integrate(&bent[0], &d).unwrap();
        assert!(mpjpe_mm(&person, &bent, &truth) > 1.0);
    }

    #[test]
    fn endpoint_accuracy_buckets_match_offsets() {
        let object = build_object_model(&default_object_spec()).unwrap();
        let camera = Camera::from_spec(&canonical_camera());
        let truth = vec![object_full_config(
            &object,
            &[0.0, 0.8, 0.0, 1.0, 0.0, 0.0, 0.0],
            &[0.2, 0.5],
        )];
        // Shift the object sideways until the reprojection lands between the
        // 25 px and 50 px thresholds (depth about 3 m, f = 600 px).
        let est = vec![object_full_config(
            &object,
            &[0.17, 0.8, 0.0, 1.0, 0.0, 0.0, 0.0],
            &[0.2, 0.5],
        )];
        let fr = endpoint_accuracy(&camera, &object, &truth, &truth, &ENDPOINT_THRESHOLDS_PX);
        assert_eq!(fr, vec![1.0, 1.0, 1.0]);
        let fr = endpoint_accuracy(&camera, &object, &truth, &est, &ENDPOINT_THRESHOLDS_PX);
        assert_eq!(fr, vec![0.0, 1.0, 1.0]);
    }

    /// The strongest generator check: at the generated reference state, the
    /// estimator's own data, kinematic-consistency, contact, and dynamics
    /// residuals all vanish, and cone weights respect their bounds.
    #[test]
    fn every_scenario_reference_satisfies_the_estimator_equations() {
        for scenario in Scenario::ALL {
            let data = generate_synthetic(&SyntheticOptions {
                scenario,
                n_frames: scenario.min_frames().max(14),
                fps: 10.0,
                noise_px: 0.0,
                seed: 3,
            });
            let problem =
                Problem::from_measurements(&data.measurements, None, CostWeights::default())
                    .unwrap();
            data.measurements
                .validate(&problem.person, problem.object.as_ref())
                .unwrap();
            data.truth
                .validate(&problem.person, problem.object.as_ref())
                .unwrap();

            let state = state_from_solution(&problem, &data.truth);
            for lam in &state.cone {
                assert!(lam.iter().all(|&l| l >= 0.0), "{}", scenario.name());
            }
            let caches = build_caches(&problem, &state);
            let ctx = EvalContext {
                problem: &problem,
                state: &state,
                caches: &caches,
            };
            let mut worst: std::collections::HashMap<&'static str, f64> =
                std::collections::HashMap::new();
            for block in problem.build_blocks(Stage::Full) {
                let mut r = vec![0.0; block.rows()];
                block.eval(&ctx, &mut r);
                let inf = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let w = worst.entry(block.label()).or_insert(0.0);
                *w = w.max(inf);
            }
            let limits = [
                ("person_data", 1e-8),
                ("object_data", 1e-8),
                ("person_collocation", 1e-7),
                ("object_collocation", 1e-7),
                ("ground_contact", 1e-4),
                ("attach", 1e-4),
                ("slide_smooth", 1e-7),
                ("person_dynamics", 1e-3),
                ("object_dynamics", 1e-3),
            ];
            for (label, tol) in limits {
                if let Some(&w) = worst.get(label) {
                    assert!(
                        w < tol,
                        "{}: residual `{label}` reaches {w:.3e} (tolerance {tol:.0e})",
                        scenario.name()
                    );
                }
            }
        }
    }

    #[test]
    fn standing_reference_carries_body_weight() {
        let data = generate_synthetic(&SyntheticOptions {
            scenario: Scenario::StaticStand,
            n_frames: 10,
            ..SyntheticOptions::default()
        });
        let person = build_human_model(&default_human_spec()).unwrap();
        let weight: f64 = person.inertias.iter().map(|i| i.mass).sum::<f64>() * 9.81;
        let mut mean = 0.0;
        let transitions = data.truth.frames.len() - 1;
        for (t, f) in data.truth.frames.iter().enumerate().skip(1) {
            let vertical: f64 = f
                .contact_forces
                .iter()
                .filter(|c| c.active)
                .map(|c| c.force[1])
                .sum();
            // The swinging arms accelerate, so individual frames deviate
            // from the static weight by their inertial share.
            assert!(
                (vertical - weight).abs() < 0.03 * weight,
                "frame {t}: {vertical} vs {weight}"
            );
            mean += vertical / transitions as f64;
        }
        assert!((mean - weight).abs() < 0.003 * weight, "{mean} vs {weight}");
    }

    /// End-to-end smoke test: estimate a noiseless lifting sequence from the
    /// generated measurements alone and compare against the reference.
    #[test]
    fn noiseless_lift_is_recovered_from_measurements() {
        let data = generate_synthetic(&SyntheticOptions {
            scenario: Scenario::LiftObject,
            n_frames: 10,
            fps: 10.0,
            noise_px: 0.0,
            seed: 5,
        });
        let prior = crate::costs::PosePrior::from_spec(&crate::costs::PosePrior::synthetic_spec(
            69, 4, 7,
        ))
        .unwrap();
        let problem =
            Problem::from_measurements(&data.measurements, Some(prior), CostWeights::default())
                .unwrap();
        let init = crate::solver::initialize(&problem);
        let opts = crate::solver::SolveOptions::default();
        let (state, stats) = crate::solver::solve(&problem, init, &opts);
        let est = crate::solver::export_solution(&problem, &state, stats);
        let report = evaluate(&problem, &data.truth, &est);
        assert!(
            report.mpjpe_mm < 5.0,
            "pose error too large: {report:?}, stats {:?}",
            est.stats.stages
        );
        assert!(
            report.force_rel < 0.15,
            "force error too large: {report:?}"
        );
        assert_eq!(report.endpoint_fraction, Some([1.0, 1.0, 1.0]));
    }
}
