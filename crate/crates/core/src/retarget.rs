//! Structure-guided character animation.
//!
//! A generated character mesh rarely shares the canonical skeleton's rest
//! pose: it may be larger, and its arms may hang in an A-pose where the body
//! model stands in a T-pose. Fitting happens in three steps:
//!
//! 1. scale the mesh by `L_s / L_m` (canonical height over character height);
//! 2. measure per-bone 2D angle differences `ΔR` between the character's
//!    front-view keypoints and the canonical skeleton's front view, and bend
//!    the canonical skeleton about +Z until its front view matches;
//! 3. skin the mesh to the bent skeleton and animate it with motion whose
//!    local rotations are compensated for the bend, so every bone ends up
//!    with the same world orientation it has in the source motion.
//!
//! Only in-plane (front-view) differences are observable from a single
//! image, so only rotations about +Z are corrected.

use crate::body::{self, capsule, BodyModel, MotionClip, SkinWeights, SparseRows};
use crate::error::ensure;
use crate::geom::{rot_z, wrap_angle, Mat3, Vec3};
use crate::io::TriMesh;
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Keypoints below this confidence carry no angle information.
pub const MIN_CONFIDENCE: f64 = 0.3;
/// Bones with fewer than this many pixels are treated as zero-length.
const MIN_BONE_PIXELS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CharacterMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl CharacterMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let h = measure_height(&vertices)?;
        ensure(h > 0.0, || "character mesh has zero height".into())?;
        ensure(faces.iter().flatten().all(|&i| i < vertices.len()), || "face index out of range".into())?;
        Ok(Self { vertices, faces })
    }
}

impl TryFrom<TriMesh> for CharacterMesh {
    type Error = Error;

    fn try_from(m: TriMesh) -> Result<Self> {
        CharacterMesh::new(m.vertices, m.faces)
    }
}

/// 2D keypoints `(u, v, confidence)` in an image's pixel frame (y down).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoints2D {
    pub points: Vec<[f64; 3]>,
}

impl Keypoints2D {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            ensure(p.iter().all(|c| c.is_finite()), || format!("keypoint {i} is not finite"))?;
            ensure((0.0..=1.0).contains(&p[2]), || format!("keypoint {i} confidence {} outside [0, 1]", p[2]))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One mapped key joint: keypoint index, canonical joint, and the mapped
/// joint its bone starts from (`None` for the reference entry).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoneMapEntry {
    pub keypoint: usize,
    pub joint: usize,
    pub parent_joint: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoneMap {
    pub entries: Vec<BoneMapEntry>,
}

impl BoneMap {
    pub fn validate(&self, n_joints: usize) -> Result<()> {
        let k = self.entries.len();
        let mut kp_seen = vec![false; k];
        let mut joint_seen = vec![false; n_joints];
        for e in &self.entries {
            ensure(e.keypoint < k, || format!("bone map keypoint {} out of range (K = {k})", e.keypoint))?;
            ensure(e.joint < n_joints, || format!("bone map joint {} does not exist", e.joint))?;
            ensure(!kp_seen[e.keypoint], || format!("keypoint {} mapped twice", e.keypoint))?;
            ensure(!joint_seen[e.joint], || format!("joint {} mapped twice", e.joint))?;
            kp_seen[e.keypoint] = true;
            joint_seen[e.joint] = true;
        }
        for e in &self.entries {
            if let Some(p) = e.parent_joint {
                ensure(p < n_joints && joint_seen[p], || format!("bone parent joint {p} of joint {} is not mapped", e.joint))?;
                ensure(p != e.joint, || format!("joint {} is its own bone parent", e.joint))?;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn entry_of_joint(&self, joint: usize) -> Option<&BoneMapEntry> {
        self.entries.iter().find(|e| e.joint == joint)
    }

    /// Keypoint indices of each entry's bone `(parent keypoint, keypoint)`.
    fn bone_keypoints(&self, e: &BoneMapEntry) -> Option<(usize, usize)> {
        let p = e.parent_joint?;
        Some((self.entry_of_joint(p)?.keypoint, e.keypoint))
    }

    /// Joints listed in keypoint order.
    pub fn joints_by_keypoint(&self) -> Vec<usize> {
        let mut out = vec![0; self.entries.len()];
        for e in &self.entries {
            out[e.keypoint] = e.joint;
        }
        out
    }
}

/// Fifteen key joints on the SMPL joint order: spine (the reference, with
/// no bone of its own), neck, head, shoulders, elbows, wrists, hips, knees and
/// ankles. Fourteen of them carry a bone.
pub fn default_bone_map() -> BoneMap {
    use capsule::*;
    let bones = [
        (SPINE1, None),
        (NECK, Some(SPINE1)),
        (HEAD, Some(NECK)),
        (L_SHOULDER, Some(NECK)),
        (L_ELBOW, Some(L_SHOULDER)),
        (L_WRIST, Some(L_ELBOW)),
        (R_SHOULDER, Some(NECK)),
        (R_ELBOW, Some(R_SHOULDER)),
        (R_WRIST, Some(R_ELBOW)),
        (L_HIP, Some(SPINE1)),
        (L_KNEE, Some(L_HIP)),
        (L_ANKLE, Some(L_KNEE)),
        (R_HIP, Some(SPINE1)),
        (R_KNEE, Some(R_HIP)),
        (R_ANKLE, Some(R_KNEE)),
    ];
    BoneMap {
        entries: bones.iter().enumerate().map(|(k, &(joint, parent_joint))| BoneMapEntry { keypoint: k, joint, parent_joint }).collect(),
    }
}

/// Gravity-axis extent of a vertex set.
pub fn measure_height(vertices: &[Vec3]) -> Result<f64> {
    body::y_extent(vertices).ok_or_else(|| Error::input("cannot measure the height of an empty mesh"))
}

/// Orthographic front view used to lay out canonical keypoints: the camera
/// sits on +Z looking down -Z, so world +X is image right and world +Y is
/// image up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontView {
    pub pixels_per_metre: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for FrontView {
    fn default() -> Self {
        Self { pixels_per_metre: 250.0, width: 512, height: 512 }
    }
}

impl FrontView {
    /// Projects mapped joints to keypoints (confidence 1), centred on the
    /// joints' bounding box.
    pub fn keypoints(&self, joints: &[Vec3], map: &BoneMap) -> Keypoints2D {
        let lo = joints.iter().fold(Vec3::repeat(f64::INFINITY), |a, j| a.inf(j));
        let hi = joints.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |a, j| a.sup(j));
        let c = (lo + hi) * 0.5;
        let mut points = vec![[0.0; 3]; map.len()];
        for e in &map.entries {
            let j = joints[e.joint];
            points[e.keypoint] = [
                self.width as f64 * 0.5 + (j.x - c.x) * self.pixels_per_metre,
                self.height as f64 * 0.5 - (j.y - c.y) * self.pixels_per_metre,
                1.0,
            ];
        }
        Keypoints2D { points }
    }
}

/// Per-entry angle differences plus any entries that were zeroed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaR {
    pub angles: Vec<f64>,
    pub warnings: Vec<String>,
}

/// In-plane bone angle with image y flipped up.
fn bone_angle(kp: &Keypoints2D, from: usize, to: usize) -> Option<f64> {
    let (a, b) = (kp.points[from], kp.points[to]);
    let (dx, dy) = (b[0] - a[0], -(b[1] - a[1]));
    (dx.hypot(dy) > MIN_BONE_PIXELS).then(|| dy.atan2(dx))
}

/// `ΔR_k = wrap(angle_character - angle_canonical)` for every mapped bone.
pub fn compute_delta_r(character: &Keypoints2D, canonical: &Keypoints2D, map: &BoneMap) -> Result<DeltaR> {
    character.validate()?;
    canonical.validate()?;
    ensure(character.len() == map.len() && canonical.len() == map.len(), || {
        format!("bone map has {} entries but keypoint sets have {} and {}", map.len(), character.len(), canonical.len())
    })?;
    let mut out = DeltaR { angles: vec![0.0; map.len()], warnings: Vec::new() };
    for (k, e) in map.entries.iter().enumerate() {
        let Some((from, to)) = map.bone_keypoints(e) else { continue };
        let conf = character.points[from][2].min(character.points[to][2]);
        if conf < MIN_CONFIDENCE {
            out.warnings.push(format!("bone to joint {}: character keypoint confidence {conf:.2} too low; ΔR set to 0", e.joint));
            continue;
        }
        match (bone_angle(character, from, to), bone_angle(canonical, from, to)) {
            (Some(a), Some(b)) => out.angles[k] = wrap_angle(a - b),
            _ => out.warnings.push(format!("bone to joint {} has zero length; ΔR set to 0", e.joint)),
        }
    }
    Ok(out)
}

/// Canonical skeleton bent to the character's rest pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonAdjustment {
    /// `L_s / L_m`, applied to the character mesh.
    pub scale: f64,
    /// Offset added to the scaled mesh to stand it on the skeleton.
    #[serde(default)]
    pub mesh_offset: [f64; 3],
    /// Uniform scale applied to the skeleton about its root.
    pub skeleton_scale: f64,
    pub delta_r: Vec<f64>,
    pub adjusted_rest_joints: Vec<[f64; 3]>,
    /// Accumulated rotation about +Z of the bone(s) each joint drives.
    pub joint_twist: Vec<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl SkeletonAdjustment {
    pub fn rest_joints(&self) -> Vec<Vec3> {
        self.adjusted_rest_joints.iter().map(|j| Vec3::from(*j)).collect()
    }

    /// Maps a character rest vertex into skeleton space.
    pub fn place_vertex(&self, v: &Vec3) -> Vec3 {
        v * self.scale + Vec3::from(self.mesh_offset)
    }
}

fn subtree(parents: &[Option<usize>], root: usize) -> Vec<bool> {
    let mut inside = vec![false; parents.len()];
    inside[root] = true;
    for k in root + 1..parents.len() {
        if let Some(p) = parents[k] {
            inside[k] = inside[p];
        }
    }
    inside
}

/// Scales the rest skeleton about its root, then, for each mapped bone in
/// joint order, rotates the bone's subtree about its parent joint (about +Z)
/// until the bone's front-view angle equals the canonical angle plus `ΔR`.
///
/// Angles are absolute: once an ancestor bone has been bent, a child with
/// `ΔR = 0` is turned back to its canonical direction rather than inheriting
/// the bend twice.
pub fn adapt_skeleton(
    rest_joints: &[Vec3],
    parents: &[Option<usize>],
    map: &BoneMap,
    delta_r: &[f64],
    scale: f64,
) -> Result<SkeletonAdjustment> {
    let n = rest_joints.len();
    ensure(parents.len() == n, || "parents and joints differ in length".into())?;
    ensure(scale > 0.0 && scale.is_finite(), || format!("skeleton scale must be positive, got {scale}"))?;
    ensure(delta_r.len() == map.len(), || format!("{} angles for {} bone map entries", delta_r.len(), map.len()))?;
    ensure(delta_r.iter().all(|d| d.abs() <= std::f64::consts::PI), || "ΔR angles must lie in [-π, π]".into())?;
    map.validate(n)?;

    let root = rest_joints[0];
    // at unit scale keep the joints bit-for-bit, `root + (j - root)` can round
    let canonical: Vec<Vec3> =
        rest_joints.iter().map(|j| if scale == 1.0 { *j } else { root + (j - root) * scale }).collect();
    let mut joints = canonical.clone();
    let mut twist = vec![0.0; n];
    let planar = |a: &Vec3, b: &Vec3| {
        let d = b - a;
        (d.x.hypot(d.y) > 1e-12).then(|| d.y.atan2(d.x))
    };

    let mut order: Vec<(usize, &BoneMapEntry)> = map.entries.iter().enumerate().collect();
    order.sort_by_key(|(_, e)| e.joint);
    for (k, e) in order {
        let Some(pj) = e.parent_joint else { continue };
        let (Some(target), Some(current)) = (planar(&canonical[pj], &canonical[e.joint]), planar(&joints[pj], &joints[e.joint])) else {
            continue;
        };
        let angle = wrap_angle(target + delta_r[k] - current);
        if angle == 0.0 {
            continue;
        }
        let pivot = joints[pj];
        let r = rot_z(angle);
        for (i, inside) in subtree(parents, e.joint).into_iter().enumerate() {
            if inside {
                joints[i] = pivot + r * (joints[i] - pivot);
                twist[i] += angle;
            }
        }
    }

    // a joint's own transform drives the bone(s) to its children; with a
    // single child it can absorb that bend exactly
    let joint_twist = (0..n)
        .map(|p| {
            let mut children = (0..n).filter(|&c| parents[c] == Some(p));
            match (children.next(), children.next()) {
                (Some(c), None) => twist[c],
                _ => twist[p],
            }
        })
        .collect();

    Ok(SkeletonAdjustment {
        scale: 1.0,
        mesh_offset: [0.0; 3],
        skeleton_scale: scale,
        delta_r: delta_r.to_vec(),
        adjusted_rest_joints: joints.iter().map(|j| [j.x, j.y, j.z]).collect(),
        joint_twist,
        warnings: Vec::new(),
    })
}

fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm()
}

/// Bone-distance skinning: each parent→child segment is a bone owned by the
/// parent joint; a vertex takes weights ∝ `1/(d + ε)^4` from its four
/// nearest bones, `ε = 1e-4 · height`.
pub fn auto_skin_weights(vertices: &[Vec3], joints: &[Vec3], parents: &[Option<usize>], height: f64) -> SkinWeights {
    const NEAREST: usize = 4;
    let eps = 1e-4 * height;
    let bones: Vec<(usize, Vec3, Vec3)> =
        (0..joints.len()).filter_map(|k| parents[k].map(|p| (p, joints[p], joints[k]))).collect();
    let rows = vertices
        .par_iter()
        .map(|v| {
            let mut d: Vec<(f64, usize)> = bones.iter().enumerate().map(|(b, (_, a, c))| (point_segment_distance(v, a, c), b)).collect();
            d.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            let mut acc = vec![0.0f64; joints.len()];
            for &(dist, b) in d.iter().take(NEAREST) {
                acc[bones[b].0] += 1.0 / (dist + eps).powi(4);
            }
            let total: f64 = acc.iter().sum();
            acc.iter().enumerate().filter(|(_, w)| **w > 0.0).map(|(j, w)| (j, w / total)).collect::<Vec<_>>()
        })
        .collect();
    SparseRows { n_cols: joints.len(), rows }
}

/// Posed vertices and joints for every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Animation {
    pub vertices: Vec<Vec<Vec3>>,
    pub joints: Vec<Vec<Vec3>>,
}

impl Animation {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

/// Local rotations re-expressed for the bent skeleton:
/// `R'_k = Rz(twist_parent) · R_k · Rz(-twist_k)`.
pub fn compensate(locals: &[Mat3], parents: &[Option<usize>], twist: &[f64]) -> Vec<Mat3> {
    locals
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let before = parents[k].map_or(0.0, |p| twist[p]);
            let after = twist[k];
            let mut m = *r;
            if before != 0.0 {
                m = rot_z(before) * m;
            }
            if after != 0.0 {
                m *= rot_z(-after);
            }
            m
        })
        .collect()
}

/// Animates the character: scale and place the mesh, compensate each
/// frame's local rotations for the skeleton bend, then forward kinematics
/// and linear blend skinning.
pub fn animate(
    mesh: &CharacterMesh,
    adjustment: &SkeletonAdjustment,
    weights: &SkinWeights,
    parents: &[Option<usize>],
    motion: &MotionClip,
) -> Result<Animation> {
    motion.validate()?;
    let joints = adjustment.rest_joints();
    ensure(parents.len() == joints.len() && adjustment.joint_twist.len() == joints.len(), || {
        "adjustment does not match the skeleton".into()
    })?;
    ensure(motion.n_joints() == joints.len(), || {
        format!("motion has {} joints, skeleton has {}", motion.n_joints(), joints.len())
    })?;
    ensure(weights.n_rows() == mesh.vertices.len() && weights.n_cols == joints.len(), || {
        format!("weights are {}x{}, expected {}x{}", weights.n_rows(), weights.n_cols, mesh.vertices.len(), joints.len())
    })?;
    weights.check_partition_of_unity("skin weights")?;

    let rest: Vec<Vec3> = mesh.vertices.iter().map(|v| adjustment.place_vertex(v)).collect();
    let frames: Vec<(Vec<Vec3>, Vec<Vec3>)> = motion
        .frames
        .par_iter()
        .map(|f| {
            let locals: Vec<Mat3> = f.local_rotations.iter().map(|r| r.to_matrix()).collect();
            let locals = compensate(&locals, parents, &adjustment.joint_twist);
            let root = f.root() * adjustment.skeleton_scale;
            let kin = body::forward_kinematics_matrices(&joints, parents, &root, &locals)?;
            Ok((body::lbs(&rest, weights, &kin.skinning), kin.joint_positions()))
        })
        .collect::<Result<_>>()?;
    let (vertices, joints) = frames.into_iter().unzip();
    Ok(Animation { vertices, joints })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetargetOptions {
    pub front_view: FrontView,
    /// Stand the scaled mesh on the canonical template's footprint.
    pub align_mesh: bool,
    /// Also match per-bone lengths measured from the keypoints.
    pub match_bone_lengths: bool,
}

impl Default for RetargetOptions {
    fn default() -> Self {
        Self { front_view: FrontView::default(), align_mesh: true, match_bone_lengths: false }
    }
}

/// Everything needed to animate a character.
#[derive(Debug, Clone)]
pub struct FittedCharacter {
    pub adjustment: SkeletonAdjustment,
    pub weights: SkinWeights,
    /// `L_s`: height of the canonical rest mesh.
    pub canonical_height: f64,
    /// `L_m`: height of the character mesh as given.
    pub character_height: f64,
}

/// Bottom-centre of a vertex set's bounding box.
fn footprint(vertices: &[Vec3]) -> Vec3 {
    let lo = vertices.iter().fold(Vec3::repeat(f64::INFINITY), |a, v| a.inf(v));
    let hi = vertices.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |a, v| a.sup(v));
    Vec3::new((lo.x + hi.x) * 0.5, lo.y, (lo.z + hi.z) * 0.5)
}

/// Runs the fitting half of retargeting for one character and body shape.
pub fn fit_character(
    model: &BodyModel,
    shape: &[f64],
    mesh: &CharacterMesh,
    character_keypoints: &Keypoints2D,
    map: &BoneMap,
    options: &RetargetOptions,
) -> Result<FittedCharacter> {
    let mut rest_frame = body::PoseFrame::rest(model.n_joints());
    rest_frame.shape = shape.to_vec();
    let canonical_mesh = body::shaped_template(model, &rest_frame)?;
    let canonical_joints = body::regress_joints(model, &canonical_mesh)?;
    let canonical_height = measure_height(&canonical_mesh)?;
    let character_height = measure_height(&mesh.vertices)?;
    if character_height <= 0.0 {
        return Err(Error::input("character mesh is degenerate: zero height"));
    }
    map.validate(model.n_joints())?;

    let canonical_kp = options.front_view.keypoints(&canonical_joints, map);
    let delta = compute_delta_r(character_keypoints, &canonical_kp, map)?;
    let mut adjustment = adapt_skeleton(&canonical_joints, &model.parents, map, &delta.angles, 1.0)?;
    adjustment.warnings = delta.warnings;
    if options.match_bone_lengths {
        match_bone_lengths(&mut adjustment, &model.parents, map, character_keypoints, &canonical_kp);
    }

    adjustment.scale = canonical_height / character_height;
    if options.align_mesh {
        let scaled: Vec<Vec3> = mesh.vertices.iter().map(|v| v * adjustment.scale).collect();
        let off = footprint(&canonical_mesh) - footprint(&scaled);
        adjustment.mesh_offset = [off.x, off.y, off.z];
    }
    let placed: Vec<Vec3> = mesh.vertices.iter().map(|v| adjustment.place_vertex(v)).collect();
    let weights = auto_skin_weights(&placed, &adjustment.rest_joints(), &model.parents, canonical_height);
    Ok(FittedCharacter { adjustment, weights, canonical_height, character_height })
}

/// Rescales each mapped bone to the character's keypoint proportions,
/// normalized by the median ratio so overall size stays with `L_s / L_m`.
fn match_bone_lengths(
    adj: &mut SkeletonAdjustment,
    parents: &[Option<usize>],
    map: &BoneMap,
    character: &Keypoints2D,
    canonical: &Keypoints2D,
) {
    let len = |kp: &Keypoints2D, a: usize, b: usize| {
        let (p, q) = (kp.points[a], kp.points[b]);
        (q[0] - p[0]).hypot(q[1] - p[1])
    };
    let mut ratios = Vec::new();
    for e in &map.entries {
        let Some((a, b)) = map.bone_keypoints(e) else { continue };
        let (lc, ln) = (len(character, a, b), len(canonical, a, b));
        if character.points[a][2].min(character.points[b][2]) >= MIN_CONFIDENCE && ln > MIN_BONE_PIXELS && lc > MIN_BONE_PIXELS {
            ratios.push((e.joint, e.parent_joint.unwrap_or(0), lc / ln));
        }
    }
    if ratios.is_empty() {
        return;
    }
    let mut sorted: Vec<f64> = ratios.iter().map(|r| r.2).collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let mut joints = adj.rest_joints();
    ratios.sort_by_key(|r| r.0);
    for (joint, pj, r) in ratios {
        let factor = r / median;
        let shift = (joints[joint] - joints[pj]) * (factor - 1.0);
        for (i, inside) in subtree(parents, joint).into_iter().enumerate() {
            if inside {
                joints[i] += shift;
            }
        }
    }
    adj.adjusted_rest_joints = joints.iter().map(|j| [j.x, j.y, j.z]).collect();
}
