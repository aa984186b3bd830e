//! Parametric body model and linear blend skinning.
//!
//! A [`BodyModel`] carries a template mesh, linear blend-shape bases for
//! shape, pose and expression, a joint regressor, a kinematic tree and
//! per-vertex skinning weights. Posing follows the usual two steps:
//!
//! 1. `T = template + shape_dirs·β + pose_dirs·p(θ) + expr_dirs·ψ`
//! 2. `M = LBS(T, J(T), θ, W)`
//!
//! where the pose feature `p(θ)` is the flattened `R_k - I` of every non-root
//! joint.

pub mod capsule;
mod file;

pub use capsule::{capsule_man, CapsuleMan};
pub use file::BodyModelFile;

use crate::error::ensure;
use crate::geom::{Mat3, RigidTransform, Rotation, Vec3};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Tolerance on row sums of weights and regressors.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Dense linear basis mapping coefficients to per-vertex displacements.
///
/// Stored row-major as `[(vertex * 3 + axis) * width + coefficient]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendBasis {
    n_vertices: usize,
    width: usize,
    data: Vec<f64>,
}

impl BlendBasis {
    pub fn zeros(n_vertices: usize, width: usize) -> Self {
        Self { n_vertices, width, data: vec![0.0; n_vertices * 3 * width] }
    }

    pub fn from_data(n_vertices: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure(data.len() == n_vertices * 3 * width, || {
            format!("blend basis has {} values, expected {}x3x{}", data.len(), n_vertices, width)
        })?;
        Ok(Self { n_vertices, width, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn get(&self, vertex: usize, axis: usize, coeff: usize) -> f64 {
        self.data[(vertex * 3 + axis) * self.width + coeff]
    }

    pub fn set(&mut self, vertex: usize, axis: usize, coeff: usize, value: f64) {
        self.data[(vertex * 3 + axis) * self.width + coeff] = value;
    }

    /// Adds `basis · coeffs` to `vertices` in place.
    pub fn accumulate(&self, coeffs: &[f64], vertices: &mut [Vec3]) {
        debug_assert_eq!(coeffs.len(), self.width);
        if coeffs.iter().all(|&c| c == 0.0) {
            return;
        }
        for (v, out) in vertices.iter_mut().enumerate() {
            for axis in 0..3 {
                let row = &self.data[(v * 3 + axis) * self.width..(v * 3 + axis + 1) * self.width];
                out[axis] += row.iter().zip(coeffs).map(|(b, c)| b * c).sum::<f64>();
            }
        }
    }
}

/// Row-sparse matrix used for joint regressors and skinning weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRows {
    pub n_cols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        Self { n_cols, rows: vec![Vec::new(); n_rows] }
    }

    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut m = Self::new(n_rows, n_cols);
        for &(r, c, w) in triplets {
            ensure(r < n_rows && c < n_cols, || format!("triplet ({r}, {c}) outside {n_rows}x{n_cols}"))?;
            m.rows[r].push((c, w));
        }
        for row in &mut m.rows {
            row.sort_by_key(|&(c, _)| c);
        }
        Ok(m)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |&(c, w)| (r, c, w)))
            .collect()
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.rows[r].iter().map(|&(_, w)| w).sum()
    }

    /// Column holding the largest weight of row `r`.
    pub fn argmax(&self, r: usize) -> Option<usize> {
        self.rows[r]
            .iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(c, _)| c)
    }

    pub fn check_partition_of_unity(&self, what: &str) -> Result<()> {
        for (r, row) in self.rows.iter().enumerate() {
            ensure(row.iter().all(|&(_, w)| w >= 0.0 && w.is_finite()), || format!("{what} row {r} has a negative weight"))?;
            let s = self.row_sum(r);
            ensure((s - 1.0).abs() <= ROW_SUM_TOL, || format!("{what} row {r} sums to {s}"))?;
        }
        Ok(())
    }
}

/// Per-vertex joint weights; alias kept for readability at call sites.
pub type SkinWeights = SparseRows;

#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    pub template_vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub shape_dirs: BlendBasis,
    pub pose_dirs: Option<BlendBasis>,
    pub expr_dirs: Option<BlendBasis>,
    pub joint_regressor: SparseRows,
    pub parents: Vec<Option<usize>>,
    pub skin_weights: SkinWeights,
}

impl BodyModel {
    /// Checks every structural invariant; all constructors funnel through here.
    pub fn validate(&self) -> Result<()> {
        let nv = self.template_vertices.len();
        let nj = self.parents.len();
        ensure(nv > 0, || "body model has no vertices".into())?;
        ensure(nj > 0, || "body model has no joints".into())?;
        ensure(self.parents[0].is_none(), || "joint 0 must be the root".into())?;
        for (k, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < k => {}
                _ => return Err(Error::input(format!("joint {k} has parent {p:?}; parents must precede children"))),
            }
        }
        for f in &self.faces {
            ensure(f.iter().all(|&i| i < nv), || format!("face {f:?} references a missing vertex"))?;
        }
        ensure(self.shape_dirs.n_vertices() == nv, || "shape_dirs vertex count mismatch".into())?;
        if let Some(p) = &self.pose_dirs {
            ensure(p.n_vertices() == nv, || "pose_dirs vertex count mismatch".into())?;
            ensure(p.width() == 9 * (nj - 1), || format!("pose_dirs width {} != 9*(joints-1)", p.width()))?;
        }
        if let Some(e) = &self.expr_dirs {
            ensure(e.n_vertices() == nv, || "expr_dirs vertex count mismatch".into())?;
        }
        ensure(self.joint_regressor.n_rows() == nj && self.joint_regressor.n_cols == nv, || {
            "joint_regressor must be joints x vertices".into()
        })?;
        ensure(self.skin_weights.n_rows() == nv && self.skin_weights.n_cols == nj, || {
            "skin_weights must be vertices x joints".into()
        })?;
        self.joint_regressor.check_partition_of_unity("joint_regressor")?;
        self.skin_weights.check_partition_of_unity("skin_weights")?;
        Ok(())
    }

    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn n_shape(&self) -> usize {
        self.shape_dirs.width()
    }

    pub fn n_expression(&self) -> usize {
        self.expr_dirs.as_ref().map_or(0, |e| e.width())
    }

    /// Rest-pose joints of the unshaped template.
    pub fn rest_joints(&self) -> Vec<Vec3> {
        regress_joints(self, &self.template_vertices).expect("validated model")
    }

    /// Convenience: shape, regress, pose and skin one frame.
    pub fn pose(&self, frame: &PoseFrame) -> Result<PosedBody> {
        let rest = shaped_template(self, frame)?;
        let joints = regress_joints(self, &rest)?;
        let kin = forward_kinematics(&joints, &self.parents, frame)?;
        let vertices = lbs(&rest, &self.skin_weights, &kin.skinning);
        Ok(PosedBody { vertices, joints: kin.joint_positions() })
    }
}

/// Posed vertices and joint positions for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedBody {
    pub vertices: Vec<Vec3>,
    pub joints: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub root_translation: [f64; 3],
    pub local_rotations: Vec<Rotation>,
    #[serde(default)]
    pub shape: Vec<f64>,
    #[serde(default)]
    pub expression: Vec<f64>,
}

impl PoseFrame {
    pub fn rest(n_joints: usize) -> Self {
        Self { root_translation: [0.0; 3], local_rotations: vec![Rotation::IDENTITY; n_joints], shape: Vec::new(), expression: Vec::new() }
    }

    pub fn root(&self) -> Vec3 {
        Vec3::from(self.root_translation)
    }
}

/// A world-grounded motion: one pose per video frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionClip {
    pub fps: f64,
    pub frames: Vec<PoseFrame>,
}

impl MotionClip {
    pub fn new(fps: f64, frames: Vec<PoseFrame>) -> Result<Self> {
        let clip = Self { fps, frames };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.frames.is_empty(), || "motion clip has no frames".into())?;
        ensure(self.fps > 0.0 && self.fps.is_finite(), || format!("invalid fps {}", self.fps))?;
        let nj = self.frames[0].local_rotations.len();
        let shape = &self.frames[0].shape;
        for (t, f) in self.frames.iter().enumerate() {
            ensure(f.local_rotations.len() == nj, || format!("frame {t} has {} joints, frame 0 has {nj}", f.local_rotations.len()))?;
            ensure(&f.shape == shape, || format!("frame {t} changes the shape vector; a clip has one performer"))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn n_joints(&self) -> usize {
        self.frames.first().map_or(0, |f| f.local_rotations.len())
    }
}

fn coeffs_or_zero<'a>(given: &'a [f64], width: usize, what: &str, zero: &'a [f64]) -> Result<&'a [f64]> {
    if given.is_empty() {
        Ok(&zero[..width])
    } else {
        ensure(given.len() == width, || format!("{what} has {} coefficients, basis has {width}", given.len()))?;
        Ok(given)
    }
}

/// Flattened `R_k - I` over non-root joints.
pub fn pose_feature(rotations: &[Rotation]) -> Vec<f64> {
    let mut out = Vec::with_capacity(9 * rotations.len().saturating_sub(1));
    for r in rotations.iter().skip(1) {
        let m = r.to_matrix() - Mat3::identity();
        for i in 0..3 {
            for j in 0..3 {
                out.push(m[(i, j)]);
            }
        }
    }
    out
}

/// Template plus shape, pose and expression blend shapes.
pub fn shaped_template(model: &BodyModel, frame: &PoseFrame) -> Result<Vec<Vec3>> {
    ensure(frame.local_rotations.len() == model.n_joints(), || {
        format!("pose has {} rotations, model has {} joints", frame.local_rotations.len(), model.n_joints())
    })?;
    let widest = model.n_shape().max(model.n_expression());
    let zero = vec![0.0; widest];
    let beta = coeffs_or_zero(&frame.shape, model.n_shape(), "shape", &zero)?;
    let mut out = model.template_vertices.clone();
    model.shape_dirs.accumulate(beta, &mut out);
    if let Some(pose_dirs) = &model.pose_dirs {
        pose_dirs.accumulate(&pose_feature(&frame.local_rotations), &mut out);
    }
    match &model.expr_dirs {
        Some(expr) => {
            let psi = coeffs_or_zero(&frame.expression, expr.width(), "expression", &zero)?;
            expr.accumulate(psi, &mut out);
        }
        None => ensure(frame.expression.iter().all(|&e| e == 0.0), || {
            "expression coefficients given but the model has no expression basis".into()
        })?,
    }
    Ok(out)
}

pub fn regress_joints(model: &BodyModel, rest_vertices: &[Vec3]) -> Result<Vec<Vec3>> {
    ensure(rest_vertices.len() == model.joint_regressor.n_cols, || {
        format!("regressor expects {} vertices, got {}", model.joint_regressor.n_cols, rest_vertices.len())
    })?;
    Ok(model
        .joint_regressor
        .rows
        .iter()
        .map(|row| row.iter().fold(Vec3::zeros(), |acc, &(v, w)| acc + rest_vertices[v] * w))
        .collect())
}

/// Global joint transforms and the skinning transforms derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    /// Joint frame to world: rotation is the accumulated orientation,
    /// translation is the posed joint position.
    pub global: Vec<RigidTransform>,
    /// `global[k] ∘ inverse(rest transform of k)`: maps rest-pose points to posed points.
    pub skinning: Vec<RigidTransform>,
}

impl Kinematics {
    pub fn joint_positions(&self) -> Vec<Vec3> {
        self.global.iter().map(|g| g.translation).collect()
    }
}

pub fn forward_kinematics(rest_joints: &[Vec3], parents: &[Option<usize>], frame: &PoseFrame) -> Result<Kinematics> {
    ensure(frame.local_rotations.len() == rest_joints.len(), || {
        format!("pose has {} rotations, skeleton has {} joints", frame.local_rotations.len(), rest_joints.len())
    })?;
    let locals: Vec<Mat3> = frame.local_rotations.iter().map(Rotation::to_matrix).collect();
    forward_kinematics_matrices(rest_joints, parents, &frame.root(), &locals)
}

/// Forward kinematics on local rotation matrices.
pub fn forward_kinematics_matrices(
    rest_joints: &[Vec3],
    parents: &[Option<usize>],
    root_translation: &Vec3,
    locals: &[Mat3],
) -> Result<Kinematics> {
    let n = rest_joints.len();
    ensure(parents.len() == n && locals.len() == n, || "joint count mismatch in forward kinematics".into())?;
    let mut global: Vec<RigidTransform> = Vec::with_capacity(n);
    for k in 0..n {
        let g = match parents[k] {
            None => RigidTransform::from_parts(locals[k], rest_joints[k] + root_translation),
            Some(p) => {
                ensure(p < k, || format!("joint {k} has parent {p}; parents must precede children"))?;
                let local = RigidTransform::from_parts(locals[k], rest_joints[k] - rest_joints[p]);
                global[p].compose(&local)
            }
        };
        global.push(g);
    }
    let skinning = global
        .iter()
        .zip(rest_joints)
        .map(|(g, j)| RigidTransform::from_parts(g.linear, g.translation - g.linear * j))
        .collect();
    Ok(Kinematics { global, skinning })
}

/// Linear blend skinning: each vertex is the weighted blend of its
/// per-joint transformed positions.
pub fn lbs(rest_vertices: &[Vec3], weights: &SkinWeights, transforms: &[RigidTransform]) -> Vec<Vec3> {
    rest_vertices
        .iter()
        .zip(&weights.rows)
        .map(|(v, row)| row.iter().fold(Vec3::zeros(), |acc, &(j, w)| acc + transforms[j].apply(v) * w))
        .collect()
}

/// Y-extent of a vertex set; `None` when empty.
pub fn y_extent(vertices: &[Vec3]) -> Option<f64> {
    let (lo, hi) = vertices
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.y), hi.max(v.y)));
    (lo <= hi).then_some(hi - lo)
}
