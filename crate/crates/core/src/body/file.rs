use super::{BlendBasis, BodyModel, SparseRows};
use crate::geom::Vec3;
use crate::{io, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// On-disk JSON layout of a [`BodyModel`].
///
/// Bases are nested `[vertex][axis][coefficient]`; the regressor is a list
/// of `[joint, vertex, weight]` triplets and skinning weights a list of
/// `[vertex, joint, weight]` triplets. The root's parent is `null`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BodyModelFile {
    pub template_vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub shape_dirs: Vec<[Vec<f64>; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_dirs: Option<Vec<[Vec<f64>; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr_dirs: Option<Vec<[Vec<f64>; 3]>>,
    pub joint_regressor: Vec<(usize, usize, f64)>,
    pub parents: Vec<Option<usize>>,
    pub skin_weights: Vec<(usize, usize, f64)>,
}

fn basis_from_nested(nested: &[[Vec<f64>; 3]], what: &str) -> Result<BlendBasis> {
    let nv = nested.len();
    let width = nested.first().map_or(0, |v| v[0].len());
    let mut data = Vec::with_capacity(nv * 3 * width);
    for (i, v) in nested.iter().enumerate() {
        for axis in v {
            if axis.len() != width {
                return Err(crate::Error::input(format!("{what}: vertex {i} has ragged coefficient rows")));
            }
            data.extend_from_slice(axis);
        }
    }
    BlendBasis::from_data(nv, width, data)
}

fn basis_to_nested(b: &BlendBasis) -> Vec<[Vec<f64>; 3]> {
    (0..b.n_vertices())
        .map(|v| std::array::from_fn(|axis| (0..b.width()).map(|c| b.get(v, axis, c)).collect()))
        .collect()
}

impl BodyModelFile {
    pub fn into_model(self) -> Result<BodyModel> {
        let nv = self.template_vertices.len();
        let nj = self.parents.len();
        let shape_dirs = if self.shape_dirs.is_empty() { BlendBasis::zeros(nv, 0) } else { basis_from_nested(&self.shape_dirs, "shape_dirs")? };
        let model = BodyModel {
            template_vertices: self.template_vertices.iter().map(|v| Vec3::from(*v)).collect(),
            faces: self.faces,
            shape_dirs,
            pose_dirs: self.pose_dirs.as_deref().map(|p| basis_from_nested(p, "pose_dirs")).transpose()?,
            expr_dirs: self.expr_dirs.as_deref().map(|e| basis_from_nested(e, "expr_dirs")).transpose()?,
            joint_regressor: SparseRows::from_triplets(nj, nv, &self.joint_regressor)?,
            parents: self.parents,
            skin_weights: SparseRows::from_triplets(nv, nj, &self.skin_weights)?,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn from_model(model: &BodyModel) -> Self {
        Self {
            template_vertices: model.template_vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            faces: model.faces.clone(),
            shape_dirs: basis_to_nested(&model.shape_dirs),
            pose_dirs: model.pose_dirs.as_ref().map(basis_to_nested),
            expr_dirs: model.expr_dirs.as_ref().map(basis_to_nested),
            joint_regressor: model.joint_regressor.triplets(),
            parents: model.parents.clone(),
            skin_weights: model.skin_weights.triplets(),
        }
    }
}

impl BodyModel {
    pub fn load(path: impl AsRef<Path>) -> Result<BodyModel> {
        let file: BodyModelFile = io::read_json(path.as_ref())?;
        file.into_model().map_err(|e| crate::Error::format(path.as_ref(), e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json(path.as_ref(), &BodyModelFile::from_model(self))
    }
}
