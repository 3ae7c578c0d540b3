//! Ground plane, friction-cone force parameterization, and contact
//! scheduling.
//!
//! Contact forces against the ground are nonnegative combinations of four
//! generator directions spanning a pyramid inscribed in the friction cone;
//! grasp contacts (hand on object) carry an unconstrained 6D wrench. Each
//! contact point is attached either to a fixed body point (sole vertices,
//! object tips) or to a sliding slot along the object handle.

use serde::{Deserialize, Serialize};

use crate::model::KinematicModel;
use crate::scalar::Real;
use crate::spatial::{Placement, Rotation, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum ContactError {
    #[error("plane normal must be nonzero")]
    ZeroNormal,
    #[error("contact `{contact}` phase {phase:?} exceeds horizon {frames} or is empty")]
    BadPhase {
        contact: String,
        phase: (usize, usize),
        frames: usize,
    },
    #[error("contact `{contact}` phases overlap or are out of order")]
    PhaseOrder { contact: String },
    #[error("contact `{contact}` references joint {joint} outside the model")]
    BadJoint { contact: String, joint: usize },
    #[error("contact `{contact}` references object slot {slot}, model has {slots}")]
    BadSlot {
        contact: String,
        slot: usize,
        slots: usize,
    },
    #[error("schedule refers to an object but no object model was supplied")]
    MissingObject,
}

/// Oriented ground plane: points with `normal . p == offset` lie on it,
/// `normal` points toward the bodies it supports.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GroundPlane {
    pub normal: Vec3<f64>,
    pub offset: f64,
}

impl GroundPlane {
    pub fn new(normal: Vec3<f64>, offset: f64) -> Result<Self, ContactError> {
        let n = normal.norm();
        if n < 1e-9 {
            return Err(ContactError::ZeroNormal);
        }
        Ok(GroundPlane {
            normal: normal.scale(1.0 / n),
            offset: offset / n,
        })
    }

    pub fn through_point(normal: Vec3<f64>, point: Vec3<f64>) -> Result<Self, ContactError> {
        let mut p = GroundPlane::new(normal, 0.0)?;
        p.offset = p.normal.dot(point);
        Ok(p)
    }

    /// Positive above the plane (on the `normal` side).
    pub fn signed_distance(&self, p: Vec3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }

    pub fn project(&self, p: Vec3<f64>) -> Vec3<f64> {
        p.sub(self.normal.scale(self.signed_distance(p)))
    }

    /// Chart for plane updates: two rotations about in-plane axes plus an
    /// offset shift. The basis is a function of the current normal, so it
    /// must be re-evaluated after every retraction.
    pub fn tangent_basis(&self) -> (Vec3<f64>, Vec3<f64>) {
        let f = frame_with_y_axis(self.normal.neg());
        (f.rotate(Vec3::new(1.0, 0.0, 0.0)), f.rotate(Vec3::new(0.0, 0.0, 1.0)))
    }

    pub fn retract(&self, delta: [f64; 3]) -> GroundPlane {
        let (b1, b2) = self.tangent_basis();
        let (n, d) = retract_plane(self, [b1, b2], delta);
        GroundPlane { normal: n, offset: d }
    }

    /// Frame whose y-axis points into the ground (`-normal`); cone
    /// generators are expressed in this frame.
    pub fn contact_frame(&self) -> Rotation<f64> {
        frame_with_y_axis(self.normal.neg())
    }
}

/// Generic plane retraction used by both `GroundPlane::retract` and the dual
/// evaluations inside residual Jacobians: rotate the normal about the two
/// fixed basis axes, shift the offset.
pub fn retract_plane<T: Real>(
    plane: &GroundPlane,
    basis: [Vec3<f64>; 2],
    delta: [T; 3],
) -> (Vec3<T>, T) {
    let axis = Vec3::<T>::from_f64([basis[0].x, basis[0].y, basis[0].z])
        .scale(delta[0])
        .add(Vec3::<T>::from_f64([basis[1].x, basis[1].y, basis[1].z]).scale(delta[1]));
    let n0 = Vec3::<T>::from_f64([plane.normal.x, plane.normal.y, plane.normal.z]);
    let n = Rotation::from_rotation_vector(axis).rotate(n0);
    (n, T::from_f64(plane.offset) + delta[2])
}

/// Right-handed orthonormal frame with the given (unit) y-axis. The x-axis
/// is the projection of world x onto the plane orthogonal to `y`, falling
/// back to world z when `y` is (nearly) parallel to world x.
pub fn frame_with_y_axis<T: Real>(y: Vec3<T>) -> Rotation<T> {
    let seed = if y.x.value().abs() < 0.9 {
        Vec3::new(T::one(), T::zero(), T::zero())
    } else {
        Vec3::new(T::zero(), T::zero(), T::one())
    };
    let x_raw = seed.sub(y.scale(seed.dot(y)));
    let x = x_raw.scale(T::one() / x_raw.norm());
    let z = x.cross(y);
    Rotation::from_columns(x, y, z)
}

/// The four generator directions of the friction pyramid, in the contact
/// frame (y into the ground). `mu` is the friction half-angle in radians;
/// each generator leans `mu` away from the reaction direction `-y`.
pub fn cone_generators<T: Real>(mu: f64) -> [Vec3<T>; 4] {
    let s = T::from_f64(mu.sin());
    let c = T::from_f64(-mu.cos());
    [
        Vec3::new(s, c, T::zero()),
        Vec3::new(-s, c, T::zero()),
        Vec3::new(T::zero(), c, s),
        Vec3::new(T::zero(), c, -s),
    ]
}

/// World-frame contact force from nonnegative generator weights.
pub fn cone_force_world<T: Real>(frame: &Rotation<T>, mu: f64, lambda: &[T]) -> Vec3<T> {
    debug_assert_eq!(lambda.len(), 4);
    let gens = cone_generators::<T>(mu);
    let mut local = Vec3::zero();
    for (g, &l) in gens.iter().zip(lambda) {
        local = local.add(g.scale(l));
    }
    frame.rotate(local)
}

/// Which model a contact attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactBody {
    Person,
    Object,
}

/// Where the contact point lives and what force it carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContactGeometry {
    /// Fixed point in a joint frame, pressed against the ground plane;
    /// carries a friction-cone force (4 weights).
    GroundPoint {
        body: ContactBody,
        joint: usize,
        offset: Vec3<f64>,
    },
    /// Grasp: a person joint holds the object handle at a sliding coordinate
    /// (the object's contact-slot joint `slot`); carries a 6D wrench and one
    /// position variable along the handle.
    HandleGrasp { person_joint: usize, slot: usize },
}

impl ContactGeometry {
    /// Number of force variables this contact carries per active frame.
    pub fn force_dim(&self) -> usize {
        match self {
            ContactGeometry::GroundPoint { .. } => 4,
            ContactGeometry::HandleGrasp { .. } => 6,
        }
    }

    /// Number of contact-position variables per active frame.
    pub fn position_dim(&self) -> usize {
        match self {
            ContactGeometry::GroundPoint { .. } => 0,
            ContactGeometry::HandleGrasp { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactPoint {
    pub name: String,
    pub geometry: ContactGeometry,
}

/// Half-open active interval `[start, end)` in frame indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub start: usize,
    pub end: usize,
}

/// Per-contact activation timeline over a fixed horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactSchedule {
    pub n_frames: usize,
    pub contacts: Vec<ContactPoint>,
    /// `phases[k]` lists the active intervals of contact `k`, in order.
    pub phases: Vec<Vec<Phase>>,
}

impl ContactSchedule {
    pub fn empty(n_frames: usize) -> Self {
        ContactSchedule {
            n_frames,
            contacts: Vec::new(),
            phases: Vec::new(),
        }
    }

    pub fn add(&mut self, contact: ContactPoint, phases: Vec<Phase>) {
        self.contacts.push(contact);
        self.phases.push(phases);
    }

    pub fn is_active(&self, contact: usize, frame: usize) -> bool {
        self.phases[contact]
            .iter()
            .any(|p| frame >= p.start && frame < p.end)
    }

    /// Index of the phase containing `frame`, if any; anchors and force
    /// variables are tied to phases.
    pub fn phase_at(&self, contact: usize, frame: usize) -> Option<usize> {
        self.phases[contact]
            .iter()
            .position(|p| frame >= p.start && frame < p.end)
    }

    pub fn validate(
        &self,
        person: &KinematicModel,
        object: Option<&KinematicModel>,
    ) -> Result<(), ContactError> {
        assert_eq!(self.contacts.len(), self.phases.len());
        for (k, c) in self.contacts.iter().enumerate() {
            for w in self.phases[k].windows(2) {
                if w[0].end > w[1].start {
                    return Err(ContactError::PhaseOrder {
                        contact: c.name.clone(),
                    });
                }
            }
            for p in &self.phases[k] {
                if p.start >= p.end || p.end > self.n_frames {
                    return Err(ContactError::BadPhase {
                        contact: c.name.clone(),
                        phase: (p.start, p.end),
                        frames: self.n_frames,
                    });
                }
            }
            match &c.geometry {
                ContactGeometry::GroundPoint { body, joint, .. } => {
                    let model = match body {
                        ContactBody::Person => person,
                        ContactBody::Object => {
                            object.ok_or(ContactError::MissingObject)?
                        }
                    };
                    if *joint >= model.n_joints() {
                        return Err(ContactError::BadJoint {
                            contact: c.name.clone(),
                            joint: *joint,
                        });
                    }
                }
                ContactGeometry::HandleGrasp { person_joint, slot } => {
                    if *person_joint >= person.n_joints() {
                        return Err(ContactError::BadJoint {
                            contact: c.name.clone(),
                            joint: *person_joint,
                        });
                    }
                    let obj = object.ok_or(ContactError::MissingObject)?;
                    let info = obj.object.as_ref().ok_or(ContactError::MissingObject)?;
                    if *slot >= info.contact_joints.len() {
                        return Err(ContactError::BadSlot {
                            contact: c.name.clone(),
                            slot: *slot,
                            slots: info.contact_joints.len(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Standard schedule content for a person standing on two feet: the 8
    /// sole vertices, active over the whole horizon.
    pub fn add_sole_contacts(&mut self, person: &KinematicModel, phases: Vec<Phase>) {
        for sole in &person.soles {
            let ankle = &person.joints[sole.ankle_joint].name;
            for (v, offset) in sole.vertices.iter().enumerate() {
                self.add(
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
    }
}

/// World position of a contact point given current placements.
pub fn contact_position(
    contact: &ContactGeometry,
    person: &[Placement<f64>],
    object: Option<&(&KinematicModel, &[Placement<f64>])>,
) -> Vec3<f64> {
    match contact {
        ContactGeometry::GroundPoint { body, joint, offset } => match body {
            ContactBody::Person => person[*joint].act_on_point(*offset),
            ContactBody::Object => {
                let (_, placements) = object.expect("object placements");
                placements[*joint].act_on_point(*offset)
            }
        },
        ContactGeometry::HandleGrasp { slot, .. } => {
            let (model, placements) = object.expect("object placements");
            let info = model.object.as_ref().expect("object info");
            placements[info.contact_joints[*slot]].translation
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_human_model, build_object_model, default_human_spec, default_object_spec};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn cone_generators_at_reference_angles() {
        let g0 = cone_generators::<f64>(0.0);
        for g in &g0 {
            assert!(g.sub(Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-15);
        }
        let g30 = cone_generators::<f64>(std::f64::consts::FRAC_PI_6);
        assert!((g30[0].x - 0.5).abs() < 1e-15);
        assert!((g30[0].y + 3f64.sqrt() / 2.0).abs() < 1e-15);
        let g45 = cone_generators::<f64>(std::f64::consts::FRAC_PI_4);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((g45[2].z - r).abs() < 1e-15 && (g45[2].y + r).abs() < 1e-15);
        for g in &g45 {
            assert!((g.norm() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cone_combinations_stay_inside_the_friction_cone() {
        let mut rng = StdRng::seed_from_u64(50);
        let mu = 0.65_f64; // friction half-angle
        for _ in 0..10_000 {
            let normal = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.1..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let plane = GroundPlane::new(normal, rng.gen_range(-1.0..1.0)).unwrap();
            let frame = plane.contact_frame();
            let lambda = [
                rng.gen_range(0.0..50.0),
                rng.gen_range(0.0..50.0),
                rng.gen_range(0.0..50.0),
                rng.gen_range(0.0..50.0),
            ];
            let f = cone_force_world(&frame, mu, &lambda);
            // Reaction pushes the body away from the ground.
            let fn_ = f.dot(plane.normal);
            assert!(fn_ >= -1e-12, "downward reaction {fn_}");
            // Tangential part within the cone.
            let tang = f.sub(plane.normal.scale(fn_)).norm();
            assert!(
                tang <= fn_ * mu.tan() + 1e-12,
                "outside cone: |t| = {tang}, fn tan(mu) = {}",
                fn_ * mu.tan()
            );
        }
    }

    #[test]
    fn contact_frame_is_right_handed_with_y_into_ground() {
        let mut rng = StdRng::seed_from_u64(51);
        let mut normals: Vec<Vec3<f64>> = (0..200)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .filter(|v| v.norm() > 1e-3)
            .collect();
        // Degenerate directions for the fallback seed.
        normals.push(Vec3::new(1.0, 0.0, 0.0));
        normals.push(Vec3::new(-1.0, 1e-9, 0.0));
        for n in normals {
            let plane = GroundPlane::new(n, 0.3).unwrap();
            let f = plane.contact_frame();
            let m = f.to_mat3();
            // Orthonormality.
            for r in 0..3 {
                for c in 0..3 {
                    let dot: f64 = (0..3).map(|k| m.rows[k][r] * m.rows[k][c]).sum();
                    let expect = if r == c { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-12);
                }
            }
            // y column = -normal.
            let y = Vec3::new(m.rows[0][1], m.rows[1][1], m.rows[2][1]);
            assert!(y.add(plane.normal).norm() < 1e-12);
            // Right-handed by construction of from_columns (unit det).
            let x = Vec3::new(m.rows[0][0], m.rows[1][0], m.rows[2][0]);
            let z = Vec3::new(m.rows[0][2], m.rows[1][2], m.rows[2][2]);
            assert!(x.cross(y).sub(z).norm() < 1e-12);
        }
    }

    #[test]
    fn plane_distance_and_retraction_behave() {
        let plane = GroundPlane::through_point(
            Vec3::new(0.2, 1.0, -0.1),
            Vec3::new(4.0, 0.5, 2.0),
        )
        .unwrap();
        assert!(plane.signed_distance(Vec3::new(4.0, 0.5, 2.0)).abs() < 1e-12);
        let p = Vec3::new(-1.0, 2.0, 0.3);
        let d = plane.signed_distance(p);
        assert!((plane.signed_distance(p.add(plane.normal.scale(0.7))) - (d + 0.7)).abs() < 1e-12);
        assert!(plane.signed_distance(plane.project(p)).abs() < 1e-12);

        let moved = plane.retract([0.05, -0.03, 0.2]);
        assert!((moved.normal.norm() - 1.0).abs() < 1e-12);
        assert!((moved.offset - plane.offset - 0.2).abs() < 1e-12);
        let back = moved.retract([0.0, 0.0, 0.0]);
        assert!(back.normal.sub(moved.normal).norm() < 1e-15);
    }

    #[test]
    fn schedule_validation_catches_mistakes() {
        let person = build_human_model(&default_human_spec()).unwrap();
        let object = build_object_model(&default_object_spec()).unwrap();
        let mut s = ContactSchedule::empty(10);
        s.add_sole_contacts(&person, vec![Phase { start: 0, end: 10 }]);
        assert_eq!(s.contacts.len(), 8);
        s.add(
            ContactPoint {
                name: "right_hand_grasp".into(),
                geometry: ContactGeometry::HandleGrasp {
                    person_joint: person.joint_index("right_wrist").unwrap(),
                    slot: 0,
                },
            },
            vec![Phase { start: 2, end: 7 }],
        );
        s.validate(&person, Some(&object)).unwrap();
        assert!(s.is_active(8, 2) && s.is_active(8, 6) && !s.is_active(8, 7));
        assert_eq!(s.phase_at(8, 3), Some(0));
        assert_eq!(s.phase_at(8, 9), None);

        // Grasp without an object model.
        assert!(matches!(
            s.validate(&person, None),
            Err(ContactError::MissingObject)
        ));
        // Phase beyond horizon.
        let mut bad = s.clone();
        bad.phases[8] = vec![Phase { start: 2, end: 11 }];
        assert!(matches!(
            bad.validate(&person, Some(&object)),
            Err(ContactError::BadPhase { .. })
        ));
        // Overlapping phases.
        let mut bad = s.clone();
        bad.phases[0] = vec![Phase { start: 0, end: 5 }, Phase { start: 4, end: 9 }];
        assert!(matches!(
            bad.validate(&person, Some(&object)),
            Err(ContactError::PhaseOrder { .. })
        ));
        // Bad slot index.
        let mut bad = s.clone();
        bad.contacts[8].geometry = ContactGeometry::HandleGrasp {
            person_joint: 3,
            slot: 5,
        };
        assert!(matches!(
            bad.validate(&person, Some(&object)),
            Err(ContactError::BadSlot { .. })
        ));
    }

    #[test]
    fn contact_positions_follow_placements() {
        let person = build_human_model(&default_human_spec()).unwrap();
        let object = build_object_model(&default_object_spec()).unwrap();
        let qp = person.neutral_configuration();
        let base = [0.3, 1.1, -0.2, 1.0, 0.0, 0.0, 0.0];
        let qo = crate::model::object_full_config(&object, &base, &[0.4, 0.9]);
        let pp = crate::dynamics::joint_placements(&person, qp.as_slice());
        let po = crate::dynamics::joint_placements(&object, qo.as_slice());

        let sole = &person.soles[0];
        let g = ContactGeometry::GroundPoint {
            body: ContactBody::Person,
            joint: sole.ankle_joint,
            offset: sole.vertices[0],
        };
        let p = contact_position(&g, &pp, None);
        assert!(
            p.sub(pp[sole.ankle_joint].act_on_point(sole.vertices[0])).norm() < 1e-15
        );

        // Slot 0 at coordinate 0.4 along the handle (+x from the base).
        let grasp = ContactGeometry::HandleGrasp {
            person_joint: 0,
            slot: 0,
        };
        let p = contact_position(&grasp, &pp, Some(&(&object, &po)));
        assert!(p.sub(Vec3::new(0.3 + 0.4, 1.1, -0.2)).norm() < 1e-12);
    }
}
