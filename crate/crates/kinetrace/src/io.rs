//! On-disk schemas: measurement sequences (2D keypoint tracks plus contact
//! phases), solver solutions, and supporting specs (camera, ground-plane
//! hint, pose-prior parameters).
//!
//! All files are JSON with a `schema_version` field; readers accept any
//! version with the same major number. Serialization uses `serde_json`'s
//! shortest-round-trip float formatting, so write -> read -> write is
//! byte-stable.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::contact::{ContactGeometry, ContactSchedule, Phase};
use crate::model::KinematicModel;
use crate::spatial::{Placement, Rotation, Vec3};

pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema version `{found}`, this build reads {major}.x")]
    SchemaVersion { found: String, major: u32 },
    #[error("invalid `{field}`{}: {message}", frame.map(|f| format!(" at frame {f}")).unwrap_or_default())]
    BadValue {
        field: &'static str,
        frame: Option<usize>,
        message: String,
    },
    #[error(transparent)]
    Contact(#[from] crate::contact::ContactError),
}

fn bad(field: &'static str, frame: Option<usize>, message: impl Into<String>) -> IoError {
    IoError::BadValue {
        field,
        frame,
        message: message.into(),
    }
}

pub fn check_schema_version(found: &str) -> Result<(), IoError> {
    let major = found.split('.').next().unwrap_or("");
    if major != "1" {
        return Err(IoError::SchemaVersion {
            found: found.to_string(),
            major: 1,
        });
    }
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Pinhole camera: intrinsics in pixels, extrinsics as the camera frame
/// posed in the world (x right, y down, z forward/optical axis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Unit quaternion (w, x, y, z) of the camera frame in the world.
    pub rotation_wxyz: [f64; 4],
    pub translation: [f64; 3],
}

impl CameraSpec {
    pub fn world_from_camera(&self) -> Placement<f64> {
        let [w, x, y, z] = self.rotation_wxyz;
        Placement::new(
            Rotation::from_wxyz(w, x, y, z),
            Vec3::new(self.translation[0], self.translation[1], self.translation[2]),
        )
    }

    pub fn validate(&self) -> Result<(), IoError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(bad("camera", None, "focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(bad("camera", None, "image size must be positive"));
        }
        let n = self.rotation_wxyz.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(bad(
                "camera.rotation_wxyz",
                None,
                format!("quaternion norm {n}, expected 1"),
            ));
        }
        Ok(())
    }
}

/// One detected 2D keypoint: pixel position plus detector confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub u: f64,
    pub v: f64,
    pub confidence: f64,
}

/// Per-frame detections, index-aligned with the marker name lists in
/// [`MeasurementSequence`]; `None` marks a miss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeasurements {
    pub person: Vec<Option<Keypoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<Vec<Option<Keypoint>>>,
}

/// A contact point together with its recognized active phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactTimeline {
    pub name: String,
    pub geometry: ContactGeometry,
    pub phases: Vec<Phase>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub normal: [f64; 3],
    pub offset: f64,
}

/// Input to the estimator: camera, per-frame 2D tracks, contact phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSequence {
    pub schema_version: String,
    /// Frames per second of the source video.
    pub fps: f64,
    pub camera: CameraSpec,
    /// Marker names defining the column order of `frames[..].person`.
    pub person_markers: Vec<String>,
    /// Marker names for the object track columns; empty when no object.
    #[serde(default)]
    pub object_markers: Vec<String>,
    pub frames: Vec<FrameMeasurements>,
    #[serde(default)]
    pub contacts: Vec<ContactTimeline>,
    /// Optional prior on the ground plane (e.g. from calibration).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane_hint: Option<PlaneSpec>,
}

impl MeasurementSequence {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn has_object(&self) -> bool {
        !self.object_markers.is_empty()
    }

    pub fn to_schedule(&self) -> ContactSchedule {
        let mut s = ContactSchedule::empty(self.frames.len());
        for c in &self.contacts {
            s.add(
                crate::contact::ContactPoint {
                    name: c.name.clone(),
                    geometry: c.geometry.clone(),
                },
                c.phases.clone(),
            );
        }
        s
    }

    /// Column index of each `person_markers` entry in the model's marker
    /// list (and likewise for the object).
    pub fn marker_bindings(&self, model: &KinematicModel) -> Result<Vec<usize>, IoError> {
        self.person_markers
            .iter()
            .map(|name| {
                model.marker_index(name).ok_or_else(|| {
                    bad(
                        "person_markers",
                        None,
                        format!("`{name}` is not a marker of model `{}`", model.name),
                    )
                })
            })
            .collect()
    }

    pub fn object_marker_bindings(
        &self,
        object: &KinematicModel,
    ) -> Result<Vec<usize>, IoError> {
        self.object_markers
            .iter()
            .map(|name| {
                object.marker_index(name).ok_or_else(|| {
                    bad(
                        "object_markers",
                        None,
                        format!("`{name}` is not a marker of model `{}`", object.name),
                    )
                })
            })
            .collect()
    }

    pub fn validate(
        &self,
        person: &KinematicModel,
        object: Option<&KinematicModel>,
    ) -> Result<(), IoError> {
        check_schema_version(&self.schema_version)?;
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(bad("fps", None, format!("{} is not a valid rate", self.fps)));
        }
        self.camera.validate()?;
        if self.frames.is_empty() {
            return Err(bad("frames", None, "empty sequence"));
        }
        self.marker_bindings(person)?;
        if self.has_object() {
            let object = object.ok_or_else(|| {
                bad("object_markers", None, "sequence has object tracks but no object model was provided")
            })?;
            self.object_marker_bindings(object)?;
        }
        for (t, f) in self.frames.iter().enumerate() {
            if f.person.len() != self.person_markers.len() {
                return Err(bad(
                    "frames.person",
                    Some(t),
                    format!(
                        "{} detections, expected {}",
                        f.person.len(),
                        self.person_markers.len()
                    ),
                ));
            }
            match (&f.object, self.has_object()) {
                (Some(obs), true) if obs.len() != self.object_markers.len() => {
                    return Err(bad(
                        "frames.object",
                        Some(t),
                        format!("{} detections, expected {}", obs.len(), self.object_markers.len()),
                    ));
                }
                (Some(_), false) => {
                    return Err(bad(
                        "frames.object",
                        Some(t),
                        "object detections but `object_markers` is empty",
                    ));
                }
                _ => {}
            }
            for (which, list) in [("person", Some(&f.person)), ("object", f.object.as_ref().map(|v| v))]
                .iter()
                .filter_map(|(w, l)| l.map(|l| (*w, l)))
            {
                for (i, kp) in list.iter().enumerate() {
                    if let Some(kp) = kp {
                        if !(kp.u.is_finite() && kp.v.is_finite()) {
                            return Err(bad(
                                "frames",
                                Some(t),
                                format!("{which} keypoint {i} is not finite"),
                            ));
                        }
                        if !(0.0..=1.0).contains(&kp.confidence) {
                            return Err(bad(
                                "frames",
                                Some(t),
                                format!(
                                    "{which} keypoint {i} confidence {} outside [0, 1]",
                                    kp.confidence
                                ),
                            ));
                        }
                    }
                }
            }
        }
        let schedule = self.to_schedule();
        schedule.validate(person, object)?;
        if let Some(p) = &self.plane_hint {
            let n = Vec3::new(p.normal[0], p.normal[1], p.normal[2]).norm();
            if n < 1e-9 {
                return Err(bad("plane_hint.normal", None, "zero normal"));
            }
        }
        Ok(())
    }
}

/// Reconstructed force at one contact for one frame, world axes. For cone
/// contacts the moment is zero and `cone_weights` holds the generator
/// weights; for grasps `slot_coord` is the position along the handle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactForceRecord {
    pub name: String,
    pub active: bool,
    pub position: [f64; 3],
    pub force: [f64; 3],
    pub moment: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cone_weights: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot_coord: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionFrame {
    /// Person configuration (model order, quaternions w-first).
    pub person_q: Vec<f64>,
    /// Person velocity in tangent coordinates.
    pub person_v: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_q: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_v: Option<Vec<f64>>,
    /// Joint torques for the actuated (non-base) degrees of freedom.
    pub torques: Vec<f64>,
    pub contact_forces: Vec<ContactForceRecord>,
}

/// Per-stage optimizer statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: String,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Projected gradient infinity-norm at exit.
    pub gradient_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveStats {
    pub stages: Vec<StageStats>,
    /// Wall-clock seconds; excluded from serialization so outputs are
    /// byte-identical across runs.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Estimator output: trajectories, torques, contact forces, ground plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub schema_version: String,
    pub fps: f64,
    pub plane: PlaneSpec,
    pub frames: Vec<SolutionFrame>,
    pub stats: SolveStats,
}

impl Solution {
    pub fn validate(
        &self,
        person: &KinematicModel,
        object: Option<&KinematicModel>,
    ) -> Result<(), IoError> {
        check_schema_version(&self.schema_version)?;
        for (t, f) in self.frames.iter().enumerate() {
            if f.person_q.len() != person.nq() {
                return Err(bad(
                    "frames.person_q",
                    Some(t),
                    format!("length {}, expected {}", f.person_q.len(), person.nq()),
                ));
            }
            if f.person_v.len() != person.nv() {
                return Err(bad(
                    "frames.person_v",
                    Some(t),
                    format!("length {}, expected {}", f.person_v.len(), person.nv()),
                ));
            }
            if f.torques.len() + 6 != person.nv() {
                return Err(bad(
                    "frames.torques",
                    Some(t),
                    format!("length {}, expected {}", f.torques.len(), person.nv() - 6),
                ));
            }
            if let Some(q) = &f.object_q {
                let object = object.ok_or_else(|| {
                    bad("frames.object_q", Some(t), "object state without object model")
                })?;
                if q.len() != object.nq() {
                    return Err(bad(
                        "frames.object_q",
                        Some(t),
                        format!("length {}, expected {}", q.len(), object.nq()),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Diagonal-covariance Gaussian mixture over pose tangent coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub schema_version: String,
    /// Dimension of the pose vector the mixture is defined over.
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl GmmSpec {
    pub fn validate(&self) -> Result<(), IoError> {
        check_schema_version(&self.schema_version)?;
        let k = self.weights.len();
        if k == 0 {
            return Err(bad("weights", None, "mixture needs at least one component"));
        }
        if self.means.len() != k || self.variances.len() != k {
            return Err(bad(
                "means",
                None,
                format!(
                    "{} means / {} variances for {} weights",
                    self.means.len(),
                    self.variances.len(),
                    k
                ),
            ));
        }
        let wsum: f64 = self.weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-6 || self.weights.iter().any(|w| *w <= 0.0) {
            return Err(bad(
                "weights",
                None,
                format!("weights must be positive and sum to 1, got {wsum}"),
            ));
        }
        for (i, (m, v)) in self.means.iter().zip(&self.variances).enumerate() {
            if m.len() != self.dim || v.len() != self.dim {
                return Err(bad(
                    "means",
                    None,
                    format!("component {i} has wrong dimension"),
                ));
            }
            if v.iter().any(|x| *x <= 0.0) {
                return Err(bad(
                    "variances",
                    None,
                    format!("component {i} has a non-positive variance"),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::ContactBody;
    use crate::model::{build_human_model, build_object_model, default_human_spec, default_object_spec};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn sample_sequence(rng: &mut StdRng, frames: usize) -> MeasurementSequence {
        let person = build_human_model(&default_human_spec()).unwrap();
        let person_markers: Vec<String> =
            person.markers.iter().map(|m| m.name.clone()).collect();
        let mut seq = MeasurementSequence {
            schema_version: SCHEMA_VERSION.into(),
            fps: 30.0,
            camera: CameraSpec {
                fx: 600.0,
                fy: 600.0,
                cx: 300.0,
                cy: 200.0,
                width: 600,
                height: 400,
                rotation_wxyz: [0.0, 0.0, 1.0, 0.0],
                translation: [0.0, 1.0, -3.0],
            },
            person_markers,
            object_markers: vec!["handle_end".into(), "head".into()],
            frames: Vec::new(),
            contacts: vec![ContactTimeline {
                name: "left_sole_0".into(),
                geometry: ContactGeometry::GroundPoint {
                    body: ContactBody::Person,
                    joint: 7,
                    offset: Vec3::new(0.04, -0.05, 0.1),
                },
                phases: vec![Phase { start: 0, end: frames }],
            }],
            plane_hint: Some(PlaneSpec {
                normal: [0.0, 1.0, 0.0],
                offset: 0.0,
            }),
        };
        for _ in 0..frames {
            let person = (0..seq.person_markers.len())
                .map(|_| {
                    if rng.gen_bool(0.9) {
                        Some(Keypoint {
                            u: rng.gen_range(0.0..600.0),
                            v: rng.gen_range(0.0..400.0),
                            confidence: rng.gen_range(0.0..1.0),
                        })
                    } else {
                        None
                    }
                })
                .collect();
            let object = Some(
                (0..2)
                    .map(|_| {
                        Some(Keypoint {
                            u: rng.gen_range(0.0..600.0),
                            v: rng.gen_range(0.0..400.0),
                            confidence: 1.0,
                        })
                    })
                    .collect(),
            );
            seq.frames.push(FrameMeasurements { person, object });
        }
        seq
    }

    #[test]
    fn measurement_round_trip_is_byte_stable() {
        let mut rng = StdRng::seed_from_u64(60);
        let seq = sample_sequence(&mut rng, 7);
        let text = serde_json::to_string_pretty(&seq).unwrap();
        let back: MeasurementSequence = serde_json::from_str(&text).unwrap();
        assert_eq!(seq, back);
        let text2 = serde_json::to_string_pretty(&back).unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn validation_accepts_good_and_names_bad_fields() {
        let person = build_human_model(&default_human_spec()).unwrap();
        let object = build_object_model(&default_object_spec()).unwrap();
        let mut rng = StdRng::seed_from_u64(61);
        let seq = sample_sequence(&mut rng, 5);
        seq.validate(&person, Some(&object)).unwrap();

        let mut bad_version = seq.clone();
        bad_version.schema_version = "2.0".into();
        assert!(matches!(
            bad_version.validate(&person, Some(&object)),
            Err(IoError::SchemaVersion { .. })
        ));

        let mut bad_conf = seq.clone();
        bad_conf.frames[3].person[2] = Some(Keypoint {
            u: 1.0,
            v: 1.0,
            confidence: 1.5,
        });
        let err = bad_conf.validate(&person, Some(&object)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("frame 3") && msg.contains("confidence"), "{msg}");

        let mut bad_marker = seq.clone();
        bad_marker.person_markers[0] = "not_a_marker".into();
        let msg = bad_marker
            .validate(&person, Some(&object))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("not_a_marker"), "{msg}");

        let mut bad_len = seq.clone();
        bad_len.frames[1].person.pop();
        let msg = bad_len
            .validate(&person, Some(&object))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("frame 1"), "{msg}");

        // Object tracks but no object model supplied.
        let msg = seq.validate(&person, None).unwrap_err().to_string();
        assert!(msg.contains("object model"), "{msg}");
    }

    #[test]
    fn solution_round_trip_and_validation() {
        let person = build_human_model(&default_human_spec()).unwrap();
        let object = build_object_model(&default_object_spec()).unwrap();
        let mut rng = StdRng::seed_from_u64(62);
        let frame = SolutionFrame {
            person_q: (0..person.nq()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            person_v: (0..person.nv()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            object_q: Some((0..object.nq()).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            object_v: Some((0..object.nv()).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            torques: (0..person.nv() - 6).map(|_| rng.gen_range(-5.0..5.0)).collect(),
            contact_forces: vec![ContactForceRecord {
                name: "right_hand_grasp".into(),
                active: true,
                position: [0.1, 0.9, 0.3],
                force: [1.0, 55.0, -2.0],
                moment: [0.0, 0.1, 0.0],
                cone_weights: None,
                slot_coord: Some(0.37),
            }],
        };
        let sol = Solution {
            schema_version: SCHEMA_VERSION.into(),
            fps: 30.0,
            plane: PlaneSpec {
                normal: [0.0, 1.0, 0.0],
                offset: 0.05,
            },
            frames: vec![frame],
            stats: SolveStats {
                stages: vec![StageStats {
                    stage: "kinematics".into(),
                    iterations: 12,
                    initial_cost: 100.0,
                    final_cost: 0.5,
                    gradient_norm: 1e-9,
                    converged: true,
                }],
                wall_seconds: 3.25,
            },
        };
        sol.validate(&person, Some(&object)).unwrap();
        let text = serde_json::to_string_pretty(&sol).unwrap();
        // Wall time must not leak into the serialized form.
        assert!(!text.contains("wall"), "{text}");
        let back: Solution = serde_json::from_str(&text).unwrap();
        assert_eq!(back.stats.wall_seconds, 0.0);
        assert_eq!(text, serde_json::to_string_pretty(&back).unwrap());

        let mut bad = sol.clone();
        bad.frames[0].torques.pop();
        let msg = bad.validate(&person, Some(&object)).unwrap_err().to_string();
        assert!(msg.contains("torques"), "{msg}");
    }

    #[test]
    fn gmm_spec_validation() {
        let spec = GmmSpec {
            schema_version: SCHEMA_VERSION.into(),
            dim: 3,
            weights: vec![0.6, 0.4],
            means: vec![vec![0.0; 3], vec![0.1; 3]],
            variances: vec![vec![0.2; 3], vec![0.3; 3]],
        };
        spec.validate().unwrap();
        let mut bad = spec.clone();
        bad.weights = vec![0.6, 0.3];
        assert!(bad.validate().is_err());
        let mut bad = spec.clone();
        bad.variances[1][2] = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = spec;
        bad.means[0].pop();
        assert!(bad.validate().is_err());
    }
}
