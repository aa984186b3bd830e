//! Shape-aware camera movement optimization.
//!
//! Each frame's world-to-camera extrinsics are refined so that renders of
//! the animated body agree with evidence extracted from the original shot:
//! its silhouette (instance loss), its 2D keypoints (semantic loss) and its
//! optical flow (motion loss). Renders come from [`crate::raster`], which is
//! not differentiable, so the optimizer descends along central
//! finite-difference gradients with an adaptive step.

use crate::error::ensure;
use crate::geom::{Intrinsics, PinholeCamera, RigidTransform, Rotation, Vec3};
use crate::io;
use crate::raster::{self, FlowField, Mask, ProjectedJoint};
use crate::retarget::{Keypoints2D, MIN_CONFIDENCE};
use crate::Result;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Evidence for one frame of the original shot.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceFrame {
    pub mask: Mask,
    pub keypoints: Keypoints2D,
    /// Flow to the next frame; absent on the last frame.
    pub flow: Option<FlowField>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceTrack {
    pub frames: Vec<EvidenceFrame>,
}

impl EvidenceTrack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.mask.width(), f.mask.height()))
    }

    pub fn validate(&self) -> Result<()> {
        let Some((w, h)) = self.resolution() else {
            return Err(crate::Error::input("evidence track has no frames"));
        };
        for (t, f) in self.frames.iter().enumerate() {
            ensure(f.mask.width() == w && f.mask.height() == h, || {
                format!("evidence frame {t} mask is {}x{}, expected {w}x{h}", f.mask.width(), f.mask.height())
            })?;
            if let Some(flow) = &f.flow {
                ensure(flow.width() == w && flow.height() == h, || format!("evidence frame {t} flow has the wrong size"))?;
            }
            f.keypoints.validate()?;
        }
        Ok(())
    }
}

/// Per-shot intrinsics and per-frame world-to-camera extrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraTrajectory {
    pub intrinsics: Intrinsics,
    pub extrinsics: Vec<RigidTransform>,
}

#[derive(Serialize, Deserialize)]
struct ExtrinsicsFile {
    rotation: [f64; 3],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct TrajectoryFile {
    intrinsics: Intrinsics,
    frames: Vec<ExtrinsicsFile>,
}

impl Serialize for CameraTrajectory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let frames = self
            .extrinsics
            .iter()
            .map(|e| {
                let p = e.to_params();
                ExtrinsicsFile { rotation: [p[0], p[1], p[2]], translation: [p[3], p[4], p[5]] }
            })
            .collect();
        TrajectoryFile { intrinsics: self.intrinsics, frames }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraTrajectory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = TrajectoryFile::deserialize(d)?;
        let extrinsics = f
            .frames
            .iter()
            .map(|e| RigidTransform::new(&Rotation { axis_angle: e.rotation }, Vec3::from(e.translation)))
            .collect();
        Ok(CameraTrajectory { intrinsics: f.intrinsics, extrinsics })
    }
}

impl CameraTrajectory {
    pub fn len(&self) -> usize {
        self.extrinsics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.extrinsics.is_empty()
    }

    pub fn camera(&self, t: usize) -> PinholeCamera {
        PinholeCamera { intrinsics: self.intrinsics, world_to_camera: self.extrinsics[t] }
    }

    pub fn cameras(&self) -> Vec<PinholeCamera> {
        (0..self.len()).map(|t| self.camera(t)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        ensure(!self.extrinsics.is_empty(), || "camera trajectory has no frames".into())?;
        for (t, e) in self.extrinsics.iter().enumerate() {
            ensure(e.linear.iter().chain(e.translation.iter()).all(|v| v.is_finite()), || {
                format!("camera frame {t} is not finite")
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let traj: Self = io::read_json(path)?;
        traj.validate().map_err(|e| crate::Error::format(path, e.to_string()))?;
        Ok(traj)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CamOptConfig {
    pub lambda_instance: f64,
    pub lambda_semantic: f64,
    pub lambda_motion: f64,
    /// Temporal smoothness of the refined trajectory; 0 disables the post-pass.
    pub lambda_smooth: f64,
    /// Finite-difference step for rotation, radians.
    pub rotation_step: f64,
    /// Finite-difference step for translation, as a fraction of the scene diameter.
    pub translation_step: f64,
    /// First descent step, in finite-difference step units.
    pub initial_step: f64,
    /// Descent stops once the step falls below this, in the same units.
    pub min_step: f64,
    /// Step growth after an accepted move.
    pub step_growth: f64,
    pub max_iterations: usize,
    /// Stop once the total loss is at or below this.
    pub tolerance: f64,
    /// Also try the previous frame's refined camera, carried forward.
    pub warm_start: bool,
    /// Try Gauss-Newton steps on the keypoint residuals before falling back
    /// to gradient steps on the full loss.
    pub gauss_newton: bool,
}

impl Default for CamOptConfig {
    fn default() -> Self {
        Self {
            lambda_instance: 1.0,
            lambda_semantic: 1.0,
            lambda_motion: 0.5,
            lambda_smooth: 0.0,
            rotation_step: 1e-3,
            translation_step: 1e-3,
            initial_step: 32.0,
            min_step: 1e-3,
            step_growth: 2.0,
            max_iterations: 200,
            tolerance: 1e-7,
            warm_start: true,
            gauss_newton: true,
        }
    }
}

impl CamOptConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_instance, self.lambda_semantic, self.lambda_motion, self.lambda_smooth];
        ensure(lambdas.iter().all(|l| *l >= 0.0 && l.is_finite()), || "loss weights must be non-negative".into())?;
        ensure(lambdas[..3].iter().any(|l| *l > 0.0), || "at least one loss weight must be positive".into())?;
        ensure(self.max_iterations >= 1, || "max_iterations must be at least 1".into())?;
        ensure(self.rotation_step > 0.0 && self.translation_step > 0.0, || "finite-difference steps must be positive".into())?;
        ensure(self.initial_step > 0.0 && self.min_step > 0.0 && self.step_growth >= 1.0, || {
            "step schedule needs initial_step > 0, min_step > 0, step_growth >= 1".into()
        })?;
        ensure(self.tolerance >= 0.0, || "tolerance must be non-negative".into())?;
        Ok(())
    }
}

/// Euclidean distance from every pixel to the nearest `true` pixel
/// (infinite when there is none), by separable lower envelopes of parabolas.
pub fn distance_transform(features: &[bool], width: usize, height: usize) -> Vec<f64> {
    let mut d: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let n = width.max(height);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..width {
        for y in 0..height {
            f[y] = d[y * width + x];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for y in 0..height {
            d[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        f[..width].copy_from_slice(&d[y * width..(y + 1) * width]);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        d[y * width..(y + 1) * width].copy_from_slice(&out[..width]);
    }
    d.iter_mut().for_each(|x| *x = x.sqrt());
    d
}

/// Squared 1D distance transform of sampled function `f` into `out`.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    let mut k = 0;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *o = dq * dq + f[p];
    }
}

/// Foreground pixels with a 4-neighbour that is background or off-image.
pub fn boundary(mask: &Mask) -> Vec<bool> {
    let (w, h) = (mask.width(), mask.height());
    let bits = mask.bits();
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            out[i] = bits[i]
                && (x == 0 || y == 0 || x + 1 == w || y + 1 == h || !bits[i - 1] || !bits[i + 1] || !bits[i - w] || !bits[i + w]);
        }
    }
    out
}

/// A mask with its boundary and the boundary's distance transform, reused
/// across loss evaluations against it.
#[derive(Debug, Clone)]
pub struct MaskShape {
    mask: Mask,
    boundary: Vec<bool>,
    distance: Vec<f64>,
}

impl MaskShape {
    pub fn new(mask: Mask) -> Self {
        let boundary = boundary(&mask);
        let distance = distance_transform(&boundary, mask.width(), mask.height());
        Self { mask, boundary, distance }
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    /// Mean distance from this mask's boundary pixels to `other`'s boundary.
    fn chamfer_to(&self, other: &MaskShape) -> f64 {
        let (sum, n) = self
            .boundary
            .iter()
            .zip(&other.distance)
            .filter(|(b, _)| **b)
            .fold((0.0, 0usize), |(s, n), (_, d)| (s + d, n + 1));
        sum / n as f64
    }
}

/// `None` when both masks are empty.
fn instance_term(rendered: &MaskShape, reference: &MaskShape) -> Option<f64> {
    let (a, b) = (&rendered.mask, &reference.mask);
    let (ea, eb) = (a.is_empty(), b.is_empty());
    if ea && eb {
        return None;
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.bits().iter().zip(b.bits()) {
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    let iou = inter as f64 / union as f64;
    // with one side empty there is no boundary to match; charge the maximum
    let chamfer = if ea || eb {
        1.0
    } else {
        0.5 * (rendered.chamfer_to(reference) + reference.chamfer_to(rendered)) / a.diagonal()
    };
    Some(0.5 * (1.0 - iou) + 0.5 * chamfer)
}

/// `0.5 (1 - IoU) + 0.5 · symmetric boundary chamfer / image diagonal`.
/// When exactly one mask is empty the chamfer part counts as 1.
pub fn loss_instance(rendered: &Mask, reference: &Mask) -> Result<f64> {
    ensure(rendered.same_size(reference), || "instance loss: mask sizes differ".into())?;
    Ok(instance_term(&MaskShape::new(rendered.clone()), &MaskShape::new(reference.clone())).unwrap_or_else(|| {
        log::warn!("instance loss: both masks empty; degenerate frame");
        0.0
    }))
}

fn semantic_term(projected: &[ProjectedJoint], reference: &Keypoints2D, diagonal: f64) -> Option<f64> {
    let (mut sum, mut weight) = (0.0, 0.0);
    for (p, r) in projected.iter().zip(&reference.points) {
        if p.visible && r[2] >= MIN_CONFIDENCE {
            sum += r[2] * ((p.u - r[0]).powi(2) + (p.v - r[1]).powi(2));
            weight += r[2];
        }
    }
    (weight > 0.0).then(|| sum / weight / (diagonal * diagonal))
}

/// Confidence-weighted mean squared keypoint distance over visible,
/// confident pairs, divided by the squared image diagonal.
pub fn loss_semantic(projected: &[ProjectedJoint], reference: &Keypoints2D, diagonal: f64) -> Result<f64> {
    ensure(projected.len() == reference.len(), || {
        format!("semantic loss: {} projected joints vs {} keypoints", projected.len(), reference.len())
    })?;
    ensure(diagonal > 0.0, || "semantic loss: image diagonal must be positive".into())?;
    Ok(semantic_term(projected, reference, diagonal).unwrap_or_else(|| {
        log::warn!("semantic loss: no valid keypoint pairs");
        0.0
    }))
}

fn motion_term(rendered: &FlowField, reference: &FlowField, region: &Mask) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, &inside) in region.bits().iter().enumerate() {
        if inside && rendered.is_valid(i) && reference.is_valid(i) {
            let (a, b) = (rendered.vector(i), reference.vector(i));
            sum += (a[0] - b[0]).hypot(a[1] - b[1]);
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64 / region.diagonal())
}

/// Mean endpoint error over pixels inside `region` and valid in both fields,
/// divided by the image diagonal.
pub fn loss_motion(rendered: &FlowField, reference: &FlowField, region: &Mask) -> Result<f64> {
    ensure(
        rendered.width() == reference.width()
            && rendered.height() == reference.height()
            && region.width() == rendered.width()
            && region.height() == rendered.height(),
        || "motion loss: sizes differ".into(),
    )?;
    Ok(motion_term(rendered, reference, region).unwrap_or_else(|| {
        log::warn!("motion loss: no overlapping valid flow");
        0.0
    }))
}

/// Geometry seen by one frame's camera.
#[derive(Debug, Clone, Copy)]
pub struct FrameScene<'a> {
    pub vertices: &'a [Vec3],
    pub faces: &'a [[usize; 3]],
    /// 3D joints in keypoint order.
    pub keypoint_joints: &'a [Vec3],
    /// The same mesh at the next frame, for flow.
    pub next_vertices: Option<&'a [Vec3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub instance: f64,
    pub semantic: f64,
    pub motion: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameResult {
    pub extrinsics: RigidTransform,
    pub initial: LossTerms,
    pub last: LossTerms,
    pub iterations: usize,
    /// No usable evidence; the init was returned unchanged.
    pub skipped: bool,
}

struct Objective<'a> {
    intrinsics: Intrinsics,
    scene: FrameScene<'a>,
    reference: MaskShape,
    evidence: &'a EvidenceFrame,
    /// Camera motion from this frame to the next: `E_next = next_motion ∘ E`.
    next_motion: Option<RigidTransform>,
    /// The shot's own camera at this frame and the next; the shot camera
    /// maps to the stored next camera exactly rather than through `next_motion`.
    anchor: Option<(RigidTransform, RigidTransform)>,
    cfg: &'a CamOptConfig,
}

impl Objective<'_> {
    fn eval(&self, e: &RigidTransform) -> LossTerms {
        let cam = PinholeCamera { intrinsics: self.intrinsics, world_to_camera: *e };
        let cfg = self.cfg;
        let diag = self.intrinsics.diagonal();
        let mut terms = LossTerms::default();
        let need_raster = cfg.lambda_instance > 0.0 || cfg.lambda_motion > 0.0;
        let render = need_raster.then(|| raster::rasterize(self.scene.vertices, self.scene.faces, &cam));
        if let (true, Some(r)) = (cfg.lambda_instance > 0.0, &render) {
            terms.instance = instance_term(&MaskShape::new(r.mask()), &self.reference).unwrap_or(0.0);
        }
        if cfg.lambda_semantic > 0.0 {
            // joints that leave the image still count, so the loss cannot be
            // lowered by pushing them out of view
            let mut proj = raster::project_joints(self.scene.keypoint_joints, &cam);
            proj.iter_mut().for_each(|p| p.visible = p.u.is_finite());
            terms.semantic = semantic_term(&proj, &self.evidence.keypoints, diag).unwrap_or(0.0);
        }
        if let (true, Some(r), Some(next), Some(flow), Some(motion)) =
            (cfg.lambda_motion > 0.0, &render, self.scene.next_vertices, &self.evidence.flow, &self.next_motion)
        {
            let next_e = match self.anchor {
                Some((at, next)) if at == *e => next,
                _ => motion.compose(e),
            };
            let next_cam = cam.with_extrinsics(next_e);
            let rendered = r.flow_to(self.scene.faces, next, &next_cam);
            terms.motion = motion_term(&rendered, flow, self.reference.mask()).unwrap_or(0.0);
        }
        terms.total = cfg.lambda_instance * terms.instance + cfg.lambda_semantic * terms.semantic + cfg.lambda_motion * terms.motion;
        terms
    }

    fn degenerate(&self) -> bool {
        let e = self.evidence;
        let no_mask = self.cfg.lambda_instance == 0.0 || e.mask.is_empty();
        let no_kp = self.cfg.lambda_semantic == 0.0 || e.keypoints.points.iter().all(|p| p[2] < MIN_CONFIDENCE);
        let no_flow = self.cfg.lambda_motion == 0.0 || e.flow.as_ref().is_none_or(|f| f.valid_count() == 0) || self.scene.next_vertices.is_none();
        no_mask && no_kp && no_flow
    }
}

fn bounding_diameter(vertices: &[Vec3]) -> f64 {
    let lo = vertices.iter().fold(Vec3::repeat(f64::INFINITY), |a, v| a.inf(v));
    let hi = vertices.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |a, v| a.sup(v));
    (hi - lo).norm()
}

/// Applies a step in the camera's own frame: a rotation about the camera
/// centre followed by a camera-frame translation.
fn step_extrinsics(e: &RigidTransform, delta: &[f64; 6], scales: &[f64; 6]) -> RigidTransform {
    let d: Vec<f64> = delta.iter().zip(scales).map(|(a, b)| a * b).collect();
    let local = RigidTransform::new(&Rotation::new(d[0], d[1], d[2]), Vec3::new(d[3], d[4], d[5]));
    local.compose(e)
}

/// Refines one frame's extrinsics from `init`, never accepting a step that
/// raises the total loss.
///
/// `next_motion` is the shot's camera motion to the next frame
/// (`E_{t+1} ∘ E_t⁻¹`); rendered flow uses it to place the candidate's
/// next-frame camera.
pub fn optimize_frame(
    init: &PinholeCamera,
    next_motion: Option<&RigidTransform>,
    scene: FrameScene<'_>,
    evidence: &EvidenceFrame,
    cfg: &CamOptConfig,
) -> Result<FrameResult> {
    cfg.validate()?;
    ensure(evidence.mask.width() == init.width() && evidence.mask.height() == init.height(), || {
        format!(
            "evidence is {}x{} but the camera renders {}x{}",
            evidence.mask.width(),
            evidence.mask.height(),
            init.width(),
            init.height()
        )
    })?;
    ensure(scene.keypoint_joints.len() == evidence.keypoints.len(), || {
        format!("{} scene joints for {} evidence keypoints", scene.keypoint_joints.len(), evidence.keypoints.len())
    })?;
    let obj = Objective {
        intrinsics: init.intrinsics,
        scene,
        reference: MaskShape::new(evidence.mask.clone()),
        evidence,
        next_motion: next_motion.copied(),
        anchor: None,
        cfg,
    };
    Ok(descend(&obj, init.world_to_camera, cfg))
}

fn descend(obj: &Objective<'_>, init: RigidTransform, cfg: &CamOptConfig) -> FrameResult {
    let initial = obj.eval(&init);
    if obj.degenerate() {
        log::warn!("camera optimization: no usable evidence; keeping the initial camera");
        return FrameResult { extrinsics: init, initial, last: initial, iterations: 0, skipped: true };
    }
    let t = cfg.translation_step * bounding_diameter(obj.scene.vertices).max(f64::MIN_POSITIVE);
    let r = cfg.rotation_step;
    let scales = [r, r, r, t, t, t];

    let (mut e, mut cur) = (init, initial);
    let mut alpha = cfg.initial_step;
    let mut iterations = 0;
    let mut gauss_newton = cfg.gauss_newton && cfg.lambda_semantic > 0.0;
    while iterations < cfg.max_iterations && cur.total > cfg.tolerance && alpha >= cfg.min_step {
        iterations += 1;
        if gauss_newton {
            match obj.keypoint_step(&e, &scales) {
                Some(dir) => {
                    let mut accepted = false;
                    let mut beta = 1.0;
                    for _ in 0..4 {
                        let cand = step_extrinsics(&e, &dir.map(|d| d * beta), &scales);
                        let terms = obj.eval(&cand);
                        if terms.total < cur.total {
                            (e, cur, accepted) = (cand, terms, true);
                            break;
                        }
                        beta *= 0.5;
                    }
                    if accepted {
                        continue;
                    }
                    gauss_newton = false;
                }
                None => gauss_newton = false,
            }
        }
        let probes: Vec<f64> = (0..12)
            .into_par_iter()
            .map(|k| {
                let mut d = [0.0; 6];
                d[k / 2] = if k % 2 == 0 { 1.0 } else { -1.0 };
                obj.eval(&step_extrinsics(&e, &d, &scales)).total
            })
            .collect();
        let g: Vec<f64> = (0..6).map(|i| 0.5 * (probes[2 * i] - probes[2 * i + 1])).collect();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        // backtrack along the normalized descent direction
        loop {
            let delta: [f64; 6] = std::array::from_fn(|i| -alpha * g[i] / norm);
            let cand = step_extrinsics(&e, &delta, &scales);
            let terms = obj.eval(&cand);
            if terms.total < cur.total {
                e = cand;
                cur = terms;
                alpha *= cfg.step_growth;
                break;
            }
            alpha *= 0.5;
            if alpha < cfg.min_step {
                break;
            }
        }
    }
    FrameResult { extrinsics: e, initial, last: cur, iterations, skipped: false }
}

impl Objective<'_> {
    /// Damped Gauss-Newton step on the keypoint residuals, with the
    /// Jacobian taken by central differences of the projections. `None`
    /// when no keypoint constrains the camera or the step is negligible.
    fn keypoint_step(&self, e: &RigidTransform, scales: &[f64; 6]) -> Option<[f64; 6]> {
        let cam = PinholeCamera { intrinsics: self.intrinsics, world_to_camera: *e };
        let kp = &self.evidence.keypoints.points;
        let joints = self.scene.keypoint_joints;
        let project = |c: &PinholeCamera| joints.iter().map(|j| c.project(j)).collect::<Vec<_>>();
        let base = project(&cam);
        let probes: Vec<Vec<_>> = (0..12)
            .map(|k| {
                let mut d = [0.0; 6];
                d[k / 2] = if k % 2 == 0 { 1.0 } else { -1.0 };
                project(&cam.with_extrinsics(step_extrinsics(e, &d, scales)))
            })
            .collect();
        let mut jtj = nalgebra::Matrix6::<f64>::zeros();
        let mut jtr = nalgebra::Vector6::<f64>::zeros();
        let mut used = 0;
        for (i, p) in kp.iter().enumerate() {
            let Some(b) = base[i] else { continue };
            if p[2] < MIN_CONFIDENCE || probes.iter().any(|q| q[i].is_none()) {
                continue;
            }
            used += 1;
            for axis in 0..2 {
                let row = nalgebra::Vector6::from_fn(|c, _| 0.5 * (probes[2 * c][i].unwrap()[axis] - probes[2 * c + 1][i].unwrap()[axis]));
                let r = b[axis] - p[axis];
                jtj += row * row.transpose() * p[2];
                jtr += row * (r * p[2]);
            }
        }
        if used == 0 {
            return None;
        }
        let damping = 1e-6 * jtj.trace() / 6.0 + 1e-12;
        jtj += nalgebra::Matrix6::identity() * damping;
        let step = -jtj.cholesky()?.solve(&jtr);
        (step.norm() > 1e-6 && step.iter().all(|x| x.is_finite())).then(|| std::array::from_fn(|i| step[i]))
    }
}

/// Animated geometry for a whole shot.
#[derive(Debug, Clone)]
pub struct SceneTrack {
    pub faces: Vec<[usize; 3]>,
    pub vertices: Vec<Vec<Vec3>>,
    /// 3D joints in keypoint order, per frame.
    pub keypoint_joints: Vec<Vec<Vec3>>,
}

impl SceneTrack {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn frame(&self, t: usize) -> FrameScene<'_> {
        FrameScene {
            vertices: &self.vertices[t],
            faces: &self.faces,
            keypoint_joints: &self.keypoint_joints[t],
            next_vertices: self.vertices.get(t + 1).map(|v| v.as_slice()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryResult {
    pub trajectory: CameraTrajectory,
    pub frames: Vec<FrameResult>,
}

/// Refines every frame. With warm starting, each frame also tries the
/// previous refined camera carried forward by the shot's own camera motion
/// and starts from whichever candidate has the lower loss.
pub fn optimize_trajectory(
    init: &CameraTrajectory,
    scene: &SceneTrack,
    evidence: &EvidenceTrack,
    cfg: &CamOptConfig,
) -> Result<TrajectoryResult> {
    cfg.validate()?;
    init.validate()?;
    evidence.validate()?;
    let n = init.len();
    ensure(scene.len() == n && evidence.len() == n && scene.keypoint_joints.len() == n, || {
        format!("{n} cameras, {} scene frames, {} evidence frames", scene.len(), evidence.len())
    })?;
    if let Some((w, h)) = evidence.resolution() {
        ensure(w == init.intrinsics.width && h == init.intrinsics.height, || {
            format!("evidence is {w}x{h} but the intrinsics are {}x{}", init.intrinsics.width, init.intrinsics.height)
        })?;
    }
    let motion = |t: usize| (t + 1 < n).then(|| init.extrinsics[t + 1].compose(&init.extrinsics[t].inverse()));
    let run = |t: usize, start: Option<RigidTransform>| -> Result<FrameResult> {
        let m = motion(t);
        let obj = Objective {
            intrinsics: init.intrinsics,
            scene: scene.frame(t),
            reference: MaskShape::new(evidence.frames[t].mask.clone()),
            evidence: &evidence.frames[t],
            next_motion: m,
            anchor: (t + 1 < n).then(|| (init.extrinsics[t], init.extrinsics[t + 1])),
            cfg,
        };
        ensure(obj.scene.keypoint_joints.len() == obj.evidence.keypoints.len(), || {
            format!("frame {t}: {} scene joints for {} keypoints", obj.scene.keypoint_joints.len(), obj.evidence.keypoints.len())
        })?;
        let mut result = descend(&obj, init.extrinsics[t], cfg);
        if let Some(s) = start.filter(|s| *s != init.extrinsics[t]) {
            let warm = descend(&obj, s, cfg);
            // report losses relative to the shot camera either way
            if !warm.skipped && warm.last.total < result.last.total {
                result = FrameResult { initial: result.initial, iterations: result.iterations + warm.iterations, ..warm };
            }
        }
        Ok(result)
    };

    let frames: Vec<FrameResult> = if cfg.warm_start {
        let mut out: Vec<FrameResult> = Vec::with_capacity(n);
        for t in 0..n {
            let start = out.last().map(|prev| motion(t - 1).unwrap().compose(&prev.extrinsics));
            out.push(run(t, start)?);
        }
        out
    } else {
        (0..n).into_par_iter().map(|t| run(t, None)).collect::<Result<_>>()?
    };

    let mut extrinsics: Vec<RigidTransform> = frames.iter().map(|f| f.extrinsics).collect();
    if cfg.lambda_smooth > 0.0 {
        extrinsics = smooth(&extrinsics, cfg.lambda_smooth);
    }
    for f in frames.iter().filter(|f| f.skipped) {
        log::warn!("camera optimization skipped a frame with no evidence (loss {})", f.initial.total);
    }
    Ok(TrajectoryResult { trajectory: CameraTrajectory { intrinsics: init.intrinsics, extrinsics }, frames })
}

/// Picks the axis-angle representative of `v` nearest to `prev`, so a
/// sequence of rotations does not jump at angle π.
fn unwrap_axis_angle(v: Vec3, prev: &Vec3) -> Vec3 {
    let angle = v.norm();
    if angle < 1e-12 {
        return v;
    }
    let axis = v / angle;
    let two_pi = 2.0 * std::f64::consts::PI;
    [-1.0, 0.0, 1.0]
        .iter()
        .map(|k| axis * (angle + k * two_pi))
        .min_by(|a, b| (a - prev).norm().total_cmp(&(b - prev).norm()))
        .unwrap()
}

/// Trades closeness to `extrinsics` against squared second differences of
/// the 6-vectors (weight `lambda`), by Gauss-Seidel sweeps.
pub fn smooth(extrinsics: &[RigidTransform], lambda: f64) -> Vec<RigidTransform> {
    const SWEEPS: usize = 100;
    const DAMPING: f64 = 0.8;
    let n = extrinsics.len();
    if n < 3 || lambda <= 0.0 {
        return extrinsics.to_vec();
    }
    let mut y: Vec<[f64; 6]> = extrinsics.iter().map(|e| e.to_params()).collect();
    for t in 1..n {
        let prev = Vec3::new(y[t - 1][0], y[t - 1][1], y[t - 1][2]);
        let r = unwrap_axis_angle(Vec3::new(y[t][0], y[t][1], y[t][2]), &prev);
        y[t][..3].copy_from_slice(r.as_slice());
    }
    let mut x = y.clone();
    for _ in 0..SWEEPS {
        for t in 0..n {
            for c in 0..6 {
                // second differences centred at k = t-1, t, t+1 touch x_t
                let (mut num, mut den) = (y[t][c], 1.0);
                for (k, coef) in [(t as isize - 1, 1.0), (t as isize, -2.0), (t as isize + 1, 1.0)] {
                    if k < 1 || k as usize + 1 >= n {
                        continue;
                    }
                    let k = k as usize;
                    let d = x[k - 1][c] - 2.0 * x[k][c] + x[k + 1][c];
                    let rest = d - coef * x[t][c];
                    num -= lambda * coef * rest;
                    den += lambda * coef * coef;
                }
                x[t][c] += DAMPING * (num / den - x[t][c]);
            }
        }
    }
    x.iter().map(RigidTransform::from_params).collect()
}

/// Sum of squared second differences of the extrinsics' 6-vectors.
pub fn roughness(extrinsics: &[RigidTransform]) -> f64 {
    let mut p: Vec<[f64; 6]> = extrinsics.iter().map(|e| e.to_params()).collect();
    for t in 1..p.len() {
        let prev = Vec3::new(p[t - 1][0], p[t - 1][1], p[t - 1][2]);
        let r = unwrap_axis_angle(Vec3::new(p[t][0], p[t][1], p[t][2]), &prev);
        p[t][..3].copy_from_slice(r.as_slice());
    }
    p.windows(3).map(|w| (0..6).map(|c| (w[0][c] - 2.0 * w[1][c] + w[2][c]).powi(2)).sum::<f64>()).sum()
}

/// Mean pixel distance between two cameras' projections of the same joints.
pub fn reprojection_error(joints: &[Vec3], a: &PinholeCamera, b: &PinholeCamera) -> f64 {
    let mut total = 0.0;
    for j in joints {
        match (a.project(j), b.project(j)) {
            (Some(p), Some(q)) => total += (p - q).norm(),
            _ => return f64::INFINITY,
        }
    }
    total / joints.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_transform_small_cases() {
        let mut f = vec![false; 25];
        f[12] = true;
        let d = distance_transform(&f, 5, 5);
        assert_eq!(d[12], 0.0);
        assert_eq!(d[0], 8f64.sqrt());
        assert_eq!(d[14], 2.0);
        assert!(distance_transform(&[false; 4], 2, 2).iter().all(|x| x.is_infinite()));
    }

    #[test]
    fn instance_examples() {
        let a = Mask::from_fn(16, 16, |x, y| (3..9).contains(&x) && (3..9).contains(&y));
        assert_eq!(loss_instance(&a, &a).unwrap(), 0.0);
        let b = Mask::from_fn(16, 16, |x, y| x >= 12 && y >= 12);
        let l = loss_instance(&a, &b).unwrap();
        assert!(l > 0.5);
        assert_eq!(loss_instance(&Mask::new(4, 4), &Mask::new(4, 4)).unwrap(), 0.0);
        assert!(loss_instance(&a, &Mask::new(4, 4)).is_err());
    }

    #[test]
    fn semantic_examples() {
        let kp = Keypoints2D { points: vec![[10.0, 10.0, 1.0], [20.0, 30.0, 1.0]] };
        let exact: Vec<_> = kp.points.iter().map(|p| ProjectedJoint { u: p[0], v: p[1], visible: true }).collect();
        assert_eq!(loss_semantic(&exact, &kp, 100.0).unwrap(), 0.0);
        let off: Vec<_> = kp.points.iter().map(|p| ProjectedJoint { u: p[0] + 3.0, v: p[1] + 4.0, visible: true }).collect();
        assert!((loss_semantic(&off, &kp, 100.0).unwrap() - 25.0 / 1e4).abs() < 1e-15);
        // weights 1, 0.5, and 0.2 (ignored): (1*25 + 0.5*4) / 1.5
        let kp3 = Keypoints2D { points: vec![[0.0, 0.0, 1.0], [0.0, 0.0, 0.5], [0.0, 0.0, 0.2]] };
        let p3 = vec![
            ProjectedJoint { u: 3.0, v: 4.0, visible: true },
            ProjectedJoint { u: 0.0, v: 2.0, visible: true },
            ProjectedJoint { u: 9.0, v: 9.0, visible: true },
        ];
        assert!((loss_semantic(&p3, &kp3, 1.0).unwrap() - 27.0 / 1.5).abs() < 1e-12);
        let hidden = vec![ProjectedJoint { u: f64::NAN, v: f64::NAN, visible: false }; 2];
        assert_eq!(loss_semantic(&hidden, &kp, 100.0).unwrap(), 0.0);
    }

    #[test]
    fn motion_examples() {
        let region = Mask::from_fn(8, 8, |_, _| true);
        let mut a = FlowField::invalid(8, 8);
        let mut b = FlowField::invalid(8, 8);
        for i in 0..64 {
            a.set(i, [1.0, 0.0]);
            b.set(i, [0.0, 0.0]);
        }
        assert_eq!(loss_motion(&a, &a, &region).unwrap(), 0.0);
        assert!((loss_motion(&a, &b, &region).unwrap() - 1.0 / 128f64.sqrt()).abs() < 1e-15);
        assert_eq!(loss_motion(&a, &FlowField::invalid(8, 8), &region).unwrap(), 0.0);
    }

    #[test]
    fn trajectory_json_round_trip() {
        let traj = CameraTrajectory {
            intrinsics: Intrinsics { fx: 200.0, fy: 200.0, cx: 128.0, cy: 128.0, width: 256, height: 256 },
            extrinsics: vec![RigidTransform::new(&Rotation::new(0.1, -0.2, 0.3), Vec3::new(0.5, 1.0, 4.0))],
        };
        let text = serde_json::to_string(&traj).unwrap();
        assert!(text.contains("\"frames\"") && text.contains("\"rotation\""));
        let back: CameraTrajectory = serde_json::from_str(&text).unwrap();
        let (a, b) = (back.extrinsics[0].to_params(), traj.extrinsics[0].to_params());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn config_validation() {
        assert!(CamOptConfig::default().validate().is_ok());
        let none = CamOptConfig { lambda_instance: 0.0, lambda_semantic: 0.0, lambda_motion: 0.0, ..Default::default() };
        assert!(none.validate().is_err());
        assert!(CamOptConfig { max_iterations: 0, ..Default::default() }.validate().is_err());
        assert!(CamOptConfig { lambda_motion: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn smoothing_reduces_roughness() {
        let e: Vec<RigidTransform> = (0..10)
            .map(|t| {
                let jitter = if t % 2 == 0 { 0.01 } else { -0.01 };
                RigidTransform::new(&Rotation::new(0.0, 0.1 * t as f64 + jitter, 0.0), Vec3::new(jitter, 0.0, 4.0))
            })
            .collect();
        assert!(roughness(&smooth(&e, 10.0)) < 0.1 * roughness(&e));
        assert_eq!(smooth(&e, 0.0), e);
    }
}
