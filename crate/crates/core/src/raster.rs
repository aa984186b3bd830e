//! Deterministic software renderer for silhouettes, projected joints and
//! mesh-motion flow.
//!
//! Pixel `(x, y)` covers `[x, x+1) × [y, y+1)` and is sampled at its centre.
//! Triangles are filled with edge functions and a top-left tie rule, depth
//! tested per pixel, and never culled by facing. Triangles with any vertex at
//! or behind the camera plane are dropped; there is no near-plane clipping.

use crate::error::ensure;
use crate::geom::{PinholeCamera, Vec2, Vec3};
use crate::Result;

/// Binary occupancy image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height, "mask size mismatch");
        Self { width, height, bits }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Covered fraction of the image.
    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn same_size(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn diagonal(&self) -> f64 {
        ((self.width * self.width + self.height * self.height) as f64).sqrt()
    }

    /// Tight bounding box `(x0, y0, x1, y1)` inclusive, if any pixel is set.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }
}

/// Dense flow with a per-pixel validity flag; invalid pixels hold (0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    vectors: Vec<[f64; 2]>,
    valid: Vec<bool>,
}

impl FlowField {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self { width, height, vectors: vec![[0.0; 2]; width * height], valid: vec![false; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn vector(&self, i: usize) -> [f64; 2] {
        self.vectors[i]
    }

    pub fn at(&self, x: usize, y: usize) -> Option<[f64; 2]> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.vectors[i])
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn set(&mut self, i: usize, v: [f64; 2]) {
        self.vectors[i] = v;
        self.valid[i] = true;
    }

    pub fn invalidate(&mut self, i: usize) {
        self.vectors[i] = [0.0; 2];
        self.valid[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Nearest surface sample at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub triangle: u32,
    /// Perspective-correct barycentric weights of the triangle's corners.
    pub bary: [f64; 3],
    /// Camera-frame depth.
    pub depth: f64,
}

/// Per-pixel nearest fragments of one render.
#[derive(Debug, Clone)]
pub struct Raster {
    width: usize,
    height: usize,
    fragments: Vec<Option<Fragment>>,
}

#[inline]
fn edge(a: &Vec2, b: &Vec2, p: &Vec2) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Top-left rule for the winding produced in [`rasterize`] (positive area, y down).
#[inline]
fn is_top_left(a: &Vec2, b: &Vec2) -> bool {
    let d = b - a;
    (d.y == 0.0 && d.x > 0.0) || d.y < 0.0
}

/// Rasterizes a triangle mesh, keeping the nearest fragment per pixel.
pub fn rasterize(vertices: &[Vec3], faces: &[[usize; 3]], cam: &PinholeCamera) -> Raster {
    let (w, h) = (cam.width(), cam.height());
    let mut fragments: Vec<Option<Fragment>> = vec![None; w * h];
    let cam_pts: Vec<Vec3> = vertices.iter().map(|v| cam.world_to_camera.apply(v)).collect();
    let screen: Vec<Option<Vec2>> = cam_pts.iter().map(|p| cam.project_camera_frame(p)).collect();

    for (ti, f) in faces.iter().enumerate() {
        let (Some(p0), Some(mut p1), Some(mut p2)) = (screen[f[0]], screen[f[1]], screen[f[2]]) else {
            continue;
        };
        let mut z = [cam_pts[f[0]].z, cam_pts[f[1]].z, cam_pts[f[2]].z];
        let mut corner = [0usize, 1, 2];
        let mut area = edge(&p0, &p1, &p2);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            std::mem::swap(&mut p1, &mut p2);
            z.swap(1, 2);
            corner.swap(1, 2);
            area = -area;
        }
        let min_x = p0.x.min(p1.x).min(p2.x);
        let max_x = p0.x.max(p1.x).max(p2.x);
        let min_y = p0.y.min(p1.y).min(p2.y);
        let max_y = p0.y.max(p1.y).max(p2.y);
        if max_x < 0.0 || max_y < 0.0 || min_x > w as f64 || min_y > h as f64 {
            continue;
        }
        let x0 = (min_x - 0.5).ceil().max(0.0) as usize;
        let y0 = (min_y - 0.5).ceil().max(0.0) as usize;
        let x1 = ((max_x - 0.5).floor().min(w as f64 - 1.0)).max(-1.0);
        let y1 = ((max_y - 0.5).floor().min(h as f64 - 1.0)).max(-1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        let tl = [is_top_left(&p1, &p2), is_top_left(&p2, &p0), is_top_left(&p0, &p1)];
        let inv_z = [1.0 / z[0], 1.0 / z[1], 1.0 / z[2]];

        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = Vec2::new(x as f64 + 0.5, y as f64 + 0.5);
                let e = [edge(&p1, &p2, &p), edge(&p2, &p0, &p), edge(&p0, &p1, &p)];
                let inside = (0..3).all(|k| e[k] > 0.0 || (e[k] == 0.0 && tl[k]));
                if !inside {
                    continue;
                }
                let l = [e[0] / area, e[1] / area, e[2] / area];
                let s = l[0] * inv_z[0] + l[1] * inv_z[1] + l[2] * inv_z[2];
                let depth = 1.0 / s;
                let slot = &mut fragments[y * w + x];
                if slot.is_some_and(|f| f.depth <= depth) {
                    continue;
                }
                let mut bary = [0.0; 3];
                for k in 0..3 {
                    bary[corner[k]] = l[k] * inv_z[k] * depth;
                }
                *slot = Some(Fragment { triangle: ti as u32, bary, depth });
            }
        }
    }
    Raster { width: w, height: h, fragments }
}

impl Raster {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn fragment(&self, x: usize, y: usize) -> Option<&Fragment> {
        self.fragments[y * self.width + x].as_ref()
    }

    pub fn mask(&self) -> Mask {
        Mask::from_bits(self.width, self.height, self.fragments.iter().map(Option::is_some).collect())
    }

    /// Flow of every covered pixel to where its surface point lands at the
    /// next frame. `next_vertices` must share the rendered mesh's topology.
    pub fn flow_to(&self, faces: &[[usize; 3]], next_vertices: &[Vec3], next_cam: &PinholeCamera) -> FlowField {
        let mut flow = FlowField::invalid(self.width, self.height);
        for (i, frag) in self.fragments.iter().enumerate() {
            let Some(frag) = frag else { continue };
            let f = faces[frag.triangle as usize];
            let p = next_vertices[f[0]] * frag.bary[0] + next_vertices[f[1]] * frag.bary[1] + next_vertices[f[2]] * frag.bary[2];
            if let Some(uv) = next_cam.project(&p) {
                let (x, y) = (i % self.width, i / self.width);
                flow.set(i, [uv.x - (x as f64 + 0.5), uv.y - (y as f64 + 0.5)]);
            }
        }
        flow
    }
}

pub fn rasterize_silhouette(vertices: &[Vec3], faces: &[[usize; 3]], cam: &PinholeCamera) -> Mask {
    rasterize(vertices, faces, cam).mask()
}

pub fn render_flow(
    faces: &[[usize; 3]],
    vertices_t: &[Vec3],
    vertices_next: &[Vec3],
    cam_t: &PinholeCamera,
    cam_next: &PinholeCamera,
) -> Result<FlowField> {
    ensure(vertices_t.len() == vertices_next.len(), || {
        format!("flow needs matching topology: {} vs {} vertices", vertices_t.len(), vertices_next.len())
    })?;
    ensure(faces.iter().flatten().all(|&i| i < vertices_t.len()), || "face index out of range".into())?;
    Ok(rasterize(vertices_t, faces, cam_t).flow_to(faces, vertices_next, cam_next))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedJoint {
    pub u: f64,
    pub v: f64,
    /// False when behind the camera or outside the image.
    pub visible: bool,
}

pub fn project_joints(joints: &[Vec3], cam: &PinholeCamera) -> Vec<ProjectedJoint> {
    let (w, h) = (cam.width() as f64, cam.height() as f64);
    joints
        .iter()
        .map(|j| match cam.project(j) {
            Some(uv) => ProjectedJoint { u: uv.x, v: uv.y, visible: uv.x >= 0.0 && uv.x < w && uv.y >= 0.0 && uv.y < h },
            None => ProjectedJoint { u: f64::NAN, v: f64::NAN, visible: false },
        })
        .collect()
}
