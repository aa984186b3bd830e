//! Procedural ground-truth scenes: the capsule-man body driven by an
//! analytic motion preset, filmed along one of six camera moves, with the
//! evidence (masks, keypoints, flow) rendered from that ground truth.

use crate::body::capsule::{self, *};
use crate::body::{BodyModel, MotionClip, PoseFrame};
use crate::camopt::{CameraTrajectory, EvidenceFrame, EvidenceTrack, SceneTrack};
use crate::error::ensure;
use crate::geom::{Intrinsics, PinholeCamera, RigidTransform, Rotation, Vec3};
use crate::io;
use crate::raster;
use crate::retarget::{default_bone_map, BoneMap, Keypoints2D};
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING-KEBAB-CASE")]
pub enum ShotType {
    PushIn,
    PullOut,
    Pan,
    Track,
    Follow,
    Arc,
}

impl ShotType {
    pub const ALL: [ShotType; 6] = [ShotType::PushIn, ShotType::PullOut, ShotType::Pan, ShotType::Track, ShotType::Follow, ShotType::Arc];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionPreset {
    Walk,
    ArmRaise,
    Turn,
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shot_type: ShotType,
    pub frames: usize,
    pub motion_preset: MotionPreset,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(shot_type: ShotType, motion_preset: MotionPreset, frames: usize, size: usize, seed: u64) -> Self {
        Self { shot_type, frames, motion_preset, width: size, height: size, seed }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.frames >= 2, || format!("a scene needs at least 2 frames, got {}", self.frames))?;
        ensure(self.width >= 16 && self.height >= 16, || format!("resolution {}x{} is too small", self.width, self.height))
    }
}

/// A generated scene and everything rendered from it.
#[derive(Debug, Clone)]
pub struct GroundTruthBundle {
    pub spec: SceneSpec,
    pub motion: MotionClip,
    pub cameras: CameraTrajectory,
    pub evidence: EvidenceTrack,
    /// All body joints per frame, metres.
    pub joints3d: Vec<Vec<Vec3>>,
    pub vertices: Vec<Vec<Vec3>>,
    pub faces: Vec<[usize; 3]>,
    pub bone_map: BoneMap,
}

impl GroundTruthBundle {
    pub fn len(&self) -> usize {
        self.motion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motion.is_empty()
    }

    /// Bounding-box diagonal of the body over the whole clip.
    pub fn scene_diameter(&self) -> f64 {
        let all = self.vertices.iter().flatten();
        let lo = all.clone().fold(Vec3::repeat(f64::INFINITY), |a, v| a.inf(v));
        let hi = all.fold(Vec3::repeat(f64::NEG_INFINITY), |a, v| a.sup(v));
        (hi - lo).norm()
    }

    /// Mapped joints in keypoint order, per frame.
    pub fn keypoint_joints(&self) -> Vec<Vec<Vec3>> {
        let order = self.bone_map.joints_by_keypoint();
        self.joints3d.iter().map(|j| order.iter().map(|&k| j[k]).collect()).collect()
    }

    pub fn scene_track(&self) -> SceneTrack {
        SceneTrack { faces: self.faces.clone(), vertices: self.vertices.clone(), keypoint_joints: self.keypoint_joints() }
    }
}

/// Body height over the clip's rest pose, for scaling perturbations.
pub fn body_height() -> f64 {
    capsule::capsule_man().analytic_height
}

fn fps() -> f64 {
    30.0
}

fn rot(x: f64, y: f64, z: f64) -> Rotation {
    Rotation::new(x, y, z)
}

/// Arms lowered from the T-pose by `drop` radians.
fn arms_down(r: &mut [Rotation], drop: f64) {
    r[L_SHOULDER] = rot(0.0, 0.0, -drop);
    r[R_SHOULDER] = rot(0.0, 0.0, drop);
}

/// Analytic pose at normalized time `s` in [0, 1].
pub fn preset_pose(preset: MotionPreset, s: f64) -> PoseFrame {
    let mut f = PoseFrame::rest(N_JOINTS);
    let r = &mut f.local_rotations;
    match preset {
        MotionPreset::Idle => {
            arms_down(r, 1.0);
            r[L_ELBOW] = rot(0.0, 0.3, 0.0);
            r[R_ELBOW] = rot(0.0, -0.3, 0.0);
        }
        MotionPreset::Walk => {
            let phase = 2.0 * PI * 1.5 * s;
            let swing = 0.45 * phase.sin();
            arms_down(r, 1.2);
            r[L_HIP] = rot(-swing, 0.0, 0.0);
            r[R_HIP] = rot(swing, 0.0, 0.0);
            r[L_KNEE] = rot(0.6 * (0.5 - 0.5 * phase.cos()), 0.0, 0.0);
            r[R_KNEE] = rot(0.6 * (0.5 + 0.5 * phase.cos()), 0.0, 0.0);
            r[L_SHOULDER] = rot(0.0, -0.4 * swing, -1.2);
            r[R_SHOULDER] = rot(0.0, -0.4 * swing, 1.2);
            f.root_translation = [0.6 * s - 0.3, 0.02 * (2.0 * phase).sin().abs(), 0.0];
        }
        MotionPreset::ArmRaise => {
            let lift = -1.2 + 1.5 * (0.5 - 0.5 * (PI * s).cos());
            r[L_SHOULDER] = rot(0.0, 0.0, lift);
            r[R_SHOULDER] = rot(0.0, 0.0, -lift);
            r[L_ELBOW] = rot(0.0, 0.0, 0.3 * s);
            r[R_ELBOW] = rot(0.0, 0.0, -0.3 * s);
        }
        MotionPreset::Turn => {
            arms_down(r, 1.0);
            r[PELVIS] = rot(0.0, 0.5 * PI * s, 0.0);
            r[SPINE2] = rot(0.0, 0.15 * (PI * s).sin(), 0.0);
        }
    }
    f
}

pub fn preset_motion(preset: MotionPreset, frames: usize) -> Result<MotionClip> {
    let denom = (frames.max(2) - 1) as f64;
    MotionClip::new(fps(), (0..frames).map(|t| preset_pose(preset, t as f64 / denom)).collect())
}

/// Intrinsics with a 50° horizontal field of view.
pub fn scene_intrinsics(width: usize, height: usize) -> Intrinsics {
    let f = 0.5 * width as f64 / (25f64.to_radians()).tan();
    Intrinsics { fx: f, fy: f, cx: 0.5 * width as f64, cy: 0.5 * height as f64, width, height }
}

/// Camera path for a shot type. `roots` are the body's root positions per
/// frame; every camera keeps the body in frame by aiming near the root.
pub fn camera_path(shot: ShotType, intrinsics: Intrinsics, roots: &[Vec3]) -> Result<CameraTrajectory> {
    let n = roots.len();
    let denom = (n.max(2) - 1) as f64;
    let up = Vec3::y();
    let height = 1.25;
    let dolly = Vec3::new(0.2, height - 0.9, 5.0).normalize();
    let extrinsics = (0..n)
        .map(|t| {
            let s = t as f64 / denom;
            let root = roots[t];
            let centre = Vec3::new(0.0, 0.9, 0.0);
            let (eye, target) = match shot {
                // dolly straight along the view axis
                ShotType::PushIn => (centre + dolly * (6.0 - 2.5 * s), centre),
                ShotType::PullOut => (centre + dolly * (3.5 + 2.5 * s), centre),
                ShotType::Pan => {
                    let yaw = (-8.0 + 16.0 * s).to_radians();
                    (Vec3::new(0.0, height, 5.0), Vec3::new(0.0, height, 5.0) + Vec3::new(yaw.sin(), -0.07, -yaw.cos()))
                }
                ShotType::Track => {
                    let eye = Vec3::new(-0.8 + 1.6 * s, height, 5.0);
                    (eye, eye + Vec3::new(0.0, -0.07, -1.0))
                }
                ShotType::Follow => (Vec3::new(root.x + 0.3, height, root.z + 4.5), Vec3::new(root.x, 0.9 + root.y, root.z)),
                ShotType::Arc => {
                    let a = (-30.0 + 60.0 * s).to_radians();
                    (Vec3::new(4.5 * a.sin(), height, 4.5 * a.cos()), centre)
                }
            };
            Ok(PinholeCamera::look_at(intrinsics, eye, target, up)?.world_to_camera)
        })
        .collect::<Result<_>>()?;
    Ok(CameraTrajectory { intrinsics, extrinsics })
}

/// Renders masks, keypoints (confidence 1 when the projection lands in the
/// image, else 0) and forward flow for posed geometry seen by `cameras`.
pub fn render_evidence(
    vertices: &[Vec<Vec3>],
    faces: &[[usize; 3]],
    keypoint_joints: &[Vec<Vec3>],
    cameras: &CameraTrajectory,
) -> EvidenceTrack {
    let n = vertices.len();
    let frames = (0..n)
        .into_par_iter()
        .map(|t| {
            let cam = cameras.camera(t);
            let r = raster::rasterize(&vertices[t], faces, &cam);
            let flow = (t + 1 < n).then(|| r.flow_to(faces, &vertices[t + 1], &cameras.camera(t + 1)));
            let points = raster::project_joints(&keypoint_joints[t], &cam)
                .iter()
                .map(|p| if p.visible { [p.u, p.v, 1.0] } else { [0.0, 0.0, 0.0] })
                .collect();
            EvidenceFrame { mask: r.mask(), keypoints: Keypoints2D { points }, flow }
        })
        .collect();
    EvidenceTrack { frames }
}

fn pose_all(model: &BodyModel, motion: &MotionClip) -> Result<(Vec<Vec<Vec3>>, Vec<Vec<Vec3>>)> {
    let posed = motion.frames.par_iter().map(|f| model.pose(f)).collect::<Result<Vec<_>>>()?;
    Ok(posed.into_iter().map(|p| (p.vertices, p.joints)).unzip())
}

/// Builds a scene from an explicit motion and shot, rendering the evidence.
pub fn make_scene_with_motion(spec: &SceneSpec, motion: MotionClip) -> Result<GroundTruthBundle> {
    spec.validate()?;
    ensure(motion.len() == spec.frames, || format!("motion has {} frames, spec asks for {}", motion.len(), spec.frames))?;
    let man = capsule::capsule_man();
    let (vertices, joints3d) = pose_all(&man.model, &motion)?;
    let roots: Vec<Vec3> = motion.frames.iter().map(|f| f.root()).collect();
    let cameras = camera_path(spec.shot_type, scene_intrinsics(spec.width, spec.height), &roots)?;
    let bone_map = default_bone_map();
    let order = bone_map.joints_by_keypoint();
    let kp: Vec<Vec<Vec3>> = joints3d.iter().map(|j| order.iter().map(|&k| j[k]).collect()).collect();
    let evidence = render_evidence(&vertices, &man.model.faces, &kp, &cameras);
    Ok(GroundTruthBundle { spec: *spec, motion, cameras, evidence, joints3d, vertices, faces: man.model.faces, bone_map })
}

/// Generates a scene. The presets are deterministic; the seed only matters
/// to callers that perturb the result.
pub fn make_scene(spec: &SceneSpec) -> Result<GroundTruthBundle> {
    spec.validate()?;
    make_scene_with_motion(spec, preset_motion(spec.motion_preset, spec.frames)?)
}

/// Per-component rotation noise, radians, per unit of `sigma`; calibrated
/// so the mean joint displacement is about `sigma · height`.
const ROTATION_NOISE_PER_SIGMA: f64 = 0.69;
/// Root translation noise per component, in body heights per unit of `sigma`.
const ROOT_NOISE_PER_SIGMA: f64 = 0.56;

/// Adds seeded Gaussian noise to every local rotation and to the root
/// translation, scaled so joints move by about `sigma · height` on average.
pub fn perturb_motion(motion: &MotionClip, sigma: f64, height: f64, seed: u64) -> Result<MotionClip> {
    ensure(sigma >= 0.0 && sigma.is_finite(), || format!("motion noise must be non-negative, got {sigma}"))?;
    motion.validate()?;
    if sigma == 0.0 {
        return Ok(motion.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rs = ROTATION_NOISE_PER_SIGMA * sigma;
    let ts = ROOT_NOISE_PER_SIGMA * sigma * height;
    let mut out = motion.clone();
    for f in &mut out.frames {
        for r in &mut f.local_rotations {
            let n: [f64; 3] = std::array::from_fn(|_| rs * rng.sample::<f64, _>(StandardNormal));
            *r = Rotation::new(n[0], n[1], n[2]).compose(r);
        }
        for c in &mut f.root_translation {
            *c += ts * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}

/// Perturbs each camera by a rotation about its own centre (random axis,
/// angle uniform in `[0, max_rot_deg]`) and a centre shift (random
/// direction, length uniform in `[0, max_trans_frac · diameter]`).
pub fn perturb_camera(traj: &CameraTrajectory, max_rot_deg: f64, max_trans_frac: f64, diameter: f64, seed: u64) -> Result<CameraTrajectory> {
    ensure(max_rot_deg >= 0.0 && max_trans_frac >= 0.0 && diameter >= 0.0, || "perturbation bounds must be non-negative".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_rot = max_rot_deg.to_radians();
    let max_shift = max_trans_frac * diameter;
    let extrinsics = traj
        .extrinsics
        .iter()
        .map(|e| {
            let axis: [f64; 3] = UnitSphere.sample(&mut rng);
            let angle = rng.random::<f64>() * max_rot;
            let dir: [f64; 3] = UnitSphere.sample(&mut rng);
            let shift = rng.random::<f64>() * max_shift;
            if angle == 0.0 && shift == 0.0 {
                return *e;
            }
            let centre = e.inverse().translation + Vec3::from(dir) * shift;
            let linear = Rotation::from_axis_angle(&Vec3::from(axis), angle).to_matrix() * e.linear;
            RigidTransform::from_parts(linear, -(linear * centre))
        })
        .collect();
    Ok(CameraTrajectory { intrinsics: traj.intrinsics, extrinsics })
}

/// File names used for a bundle on disk.
pub mod files {
    pub const MOTION: &str = "motion.json";
    pub const CAMERAS: &str = "cameras.json";
    pub const JOINTS: &str = "joints3d.json";
    pub const BODY_MODEL: &str = "body_model.json";
    pub const BONE_MAP: &str = "bone_map.json";
    pub const SPEC: &str = "scene.json";
    pub const EVIDENCE_DIR: &str = "evidence";
}

/// Writes every evidence frame as `mask_NNNNNN.pgm`,
/// `keypoints_NNNNNN.json` and (all but the last) `flow_NNNNNN.flo`.
pub fn write_evidence(dir: &Path, evidence: &EvidenceTrack) -> Result<()> {
    for (t, f) in evidence.frames.iter().enumerate() {
        io::write_pgm(&io::frame_path(dir, "mask", t, "pgm"), &f.mask)?;
        io::write_json(&io::frame_path(dir, "keypoints", t, "json"), &f.keypoints)?;
        if let Some(flow) = &f.flow {
            io::write_flo(&io::frame_path(dir, "flow", t, "flo"), flow)?;
        }
    }
    Ok(())
}

/// Reads `frames` evidence frames written by [`write_evidence`]; flow is
/// optional per frame.
pub fn read_evidence(dir: &Path, frames: usize) -> Result<EvidenceTrack> {
    let frames = (0..frames)
        .map(|t| {
            let flow_path = io::frame_path(dir, "flow", t, "flo");
            Ok(EvidenceFrame {
                mask: io::read_pgm(&io::frame_path(dir, "mask", t, "pgm"))?,
                keypoints: io::read_json(&io::frame_path(dir, "keypoints", t, "json"))?,
                flow: if flow_path.exists() { Some(io::read_flo(&flow_path)?) } else { None },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let track = EvidenceTrack { frames };
    track.validate()?;
    Ok(track)
}

/// Joint positions file: one list of `[x, y, z]` per frame, metres.
pub fn joints_to_json(joints: &[Vec<Vec3>]) -> Vec<Vec<[f64; 3]>> {
    joints.iter().map(|f| f.iter().map(|j| [j.x, j.y, j.z]).collect()).collect()
}

pub fn joints_from_json(joints: &[Vec<[f64; 3]>]) -> Vec<Vec<Vec3>> {
    joints.iter().map(|f| f.iter().map(|j| Vec3::from(*j)).collect()).collect()
}

/// Writes the motion, cameras, ground-truth joints, body model, bone map
/// and evidence of a bundle under `dir`.
pub fn write_bundle(dir: &Path, bundle: &GroundTruthBundle) -> Result<()> {
    io::write_json(&dir.join(files::SPEC), &bundle.spec)?;
    io::write_json(&dir.join(files::MOTION), &bundle.motion)?;
    bundle.cameras.save(&dir.join(files::CAMERAS))?;
    io::write_json(&dir.join(files::JOINTS), &joints_to_json(&bundle.joints3d))?;
    io::write_json(&dir.join(files::BONE_MAP), &bundle.bone_map)?;
    capsule::capsule_man().model.save(&dir.join(files::BODY_MODEL))?;
    write_evidence(&dir.join(files::EVIDENCE_DIR), &bundle.evidence)
}
