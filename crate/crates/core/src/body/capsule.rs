//! "Capsule-man": a procedural 24-joint body in SMPL joint order.
//!
//! Every body part is a capsule (a cylinder closed by hemispherical caps)
//! around one bone, plus a sphere for the head. Each part is rigidly owned by
//! the joint whose rotation moves it, which gives an analytic skinning
//! oracle. Joints are regressed as centroids of the vertex ring generated at
//! the joint, so the regressor reproduces the generator's joints exactly and
//! follows the mesh under shape blend shapes.
//!
//! The body stands in a T-pose facing +Z with the soles near y = 0.

use super::{BlendBasis, BodyModel, SparseRows};
use crate::geom::Vec3;
use std::f64::consts::{FRAC_PI_2, PI};

pub const PELVIS: usize = 0;
pub const L_HIP: usize = 1;
pub const R_HIP: usize = 2;
pub const SPINE1: usize = 3;
pub const L_KNEE: usize = 4;
pub const R_KNEE: usize = 5;
pub const SPINE2: usize = 6;
pub const L_ANKLE: usize = 7;
pub const R_ANKLE: usize = 8;
pub const SPINE3: usize = 9;
pub const L_FOOT: usize = 10;
pub const R_FOOT: usize = 11;
pub const NECK: usize = 12;
pub const L_COLLAR: usize = 13;
pub const R_COLLAR: usize = 14;
pub const HEAD: usize = 15;
pub const L_SHOULDER: usize = 16;
pub const R_SHOULDER: usize = 17;
pub const L_ELBOW: usize = 18;
pub const R_ELBOW: usize = 19;
pub const L_WRIST: usize = 20;
pub const R_WRIST: usize = 21;
pub const L_HAND: usize = 22;
pub const R_HAND: usize = 23;

pub const N_JOINTS: usize = 24;
pub const N_SHAPE: usize = 10;

pub const JOINT_NAMES: [&str; N_JOINTS] = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2", "left_ankle",
    "right_ankle", "spine3", "left_foot", "right_foot", "neck", "left_collar", "right_collar", "head",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
];

pub const PARENTS: [Option<usize>; N_JOINTS] = [
    None, Some(0), Some(0), Some(0), Some(1), Some(2), Some(3), Some(4), Some(5), Some(6), Some(7), Some(8),
    Some(9), Some(9), Some(9), Some(12), Some(13), Some(14), Some(16), Some(17), Some(18), Some(19),
    Some(20), Some(21),
];

/// Segments around each ring.
const RING: usize = 8;
/// Latitude rings per hemispherical cap, excluding the pole.
const CAP_RINGS: usize = 2;
/// Latitude rings of the head sphere, excluding poles.
const HEAD_RINGS: usize = 7;
/// Target distance between the rings along a tube.
const SPACING: f64 = 0.05;
/// Distance of the rings on either side of a straight joint, relative to
/// the thicker tube's radius.
const GAP: f64 = 0.35;

const HEAD_CENTER: [f64; 3] = [0.0, 1.64, 0.0];
const HEAD_RADIUS: f64 = 0.10;
const FOOT_RADIUS: f64 = 0.04;
const TORSO_RADIUS: f64 = 0.11;

/// Rest joint positions in metres.
pub fn rest_joint_positions() -> [Vec3; N_JOINTS] {
    let p = |x: f64, y: f64, z: f64| Vec3::new(x, y, z);
    let mut j = [Vec3::zeros(); N_JOINTS];
    j[PELVIS] = p(0.0, 0.95, 0.0);
    j[SPINE1] = p(0.0, 1.07, 0.0);
    j[SPINE2] = p(0.0, 1.19, 0.0);
    j[SPINE3] = p(0.0, 1.30, 0.0);
    j[NECK] = p(0.0, 1.45, 0.0);
    j[HEAD] = p(0.0, 1.56, 0.0);
    for (side, s) in [(0usize, 1.0f64), (1, -1.0)] {
        j[L_HIP + side] = p(0.09 * s, 0.86, 0.0);
        j[L_KNEE + side] = p(0.09 * s, 0.50, 0.0);
        j[L_ANKLE + side] = p(0.09 * s, 0.10, 0.0);
        j[L_FOOT + side] = p(0.09 * s, 0.10, 0.14);
        j[L_COLLAR + side] = p(0.07 * s, 1.40, 0.0);
        j[L_SHOULDER + side] = p(0.18 * s, 1.40, 0.0);
        j[L_ELBOW + side] = p(0.45 * s, 1.40, 0.0);
        j[L_WRIST + side] = p(0.70 * s, 1.40, 0.0);
        j[L_HAND + side] = p(0.80 * s, 1.40, 0.0);
    }
    j
}

/// One tube of the body, around the bone from `start` to `end`.
#[derive(Debug, Clone, Copy)]
struct Tube {
    owner: usize,
    start: usize,
    end: usize,
    radius: f64,
}

/// Every tube, parents before children.
fn tubes() -> Vec<Tube> {
    let t = |owner, start, end, radius| Tube { owner, start, end, radius };
    let mut c = vec![
        t(PELVIS, PELVIS, SPINE1, TORSO_RADIUS),
        t(SPINE1, SPINE1, SPINE2, TORSO_RADIUS),
        t(SPINE2, SPINE2, SPINE3, TORSO_RADIUS),
        t(SPINE3, SPINE3, NECK, TORSO_RADIUS),
        t(NECK, NECK, HEAD, 0.05),
    ];
    for side in 0..2 {
        c.extend([
            t(L_HIP + side, L_HIP + side, L_KNEE + side, 0.065),
            t(L_KNEE + side, L_KNEE + side, L_ANKLE + side, 0.05),
            t(L_ANKLE + side, L_ANKLE + side, L_FOOT + side, FOOT_RADIUS),
            t(L_COLLAR + side, L_COLLAR + side, L_SHOULDER + side, 0.045),
            t(L_SHOULDER + side, L_SHOULDER + side, L_ELBOW + side, 0.045),
            t(L_ELBOW + side, L_ELBOW + side, L_WRIST + side, 0.04),
            t(L_WRIST + side, L_WRIST + side, L_HAND + side, 0.035),
        ]);
    }
    c
}

/// The built-in body together with its generator-level ground truth.
#[derive(Debug, Clone)]
pub struct CapsuleMan {
    pub model: BodyModel,
    /// Joint that generated (and rigidly owns) each vertex.
    pub vertex_owner: Vec<usize>,
    /// Height computed from the generator parameters.
    pub analytic_height: f64,
}

/// How a tube begins at its start joint.
#[derive(Debug, Clone, Copy)]
enum Start {
    /// Hemisphere below the root.
    Cap,
    /// Continues the tube arriving in a straight line.
    Joined,
    /// Bone with no tube of its own leading in: a cone owned by the parent
    /// joint reaches up to the tube.
    Socket,
    /// Another tube closes over the bent joint; start clear of it.
    Clear(f64),
}

/// How a tube ends at its end joint.
#[derive(Debug, Clone, Copy)]
enum Finish {
    /// Hemisphere beyond a leaf joint.
    Cap,
    /// Left open for the tube that continues in a straight line.
    Joined,
    /// Flat disc through a bent joint.
    Flat,
}

struct Builder {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    owner: Vec<usize>,
}

impl Builder {
    fn push(&mut self, v: Vec3, owner: usize) -> usize {
        self.vertices.push(v);
        self.owner.push(owner);
        self.vertices.len() - 1
    }

    fn ring(&mut self, center: Vec3, frame: [Vec3; 2], radius: f64, owner: usize) -> Vec<usize> {
        (0..RING)
            .map(|k| {
                let phi = 2.0 * PI * k as f64 / RING as f64;
                self.push(center + (frame[0] * phi.cos() + frame[1] * phi.sin()) * radius, owner)
            })
            .collect()
    }

    fn strip(&mut self, a: &[usize], b: &[usize]) {
        for k in 0..RING {
            let k1 = (k + 1) % RING;
            self.faces.push([a[k], b[k], b[k1]]);
            self.faces.push([a[k], b[k1], a[k1]]);
        }
    }

    fn fan(&mut self, pole: usize, ring: &[usize], flip: bool) {
        for k in 0..RING {
            let k1 = (k + 1) % RING;
            self.faces.push(if flip { [pole, ring[k1], ring[k]] } else { [pole, ring[k], ring[k1]] });
        }
    }

    /// Flat disc across a ring, with no vertex in the middle.
    fn disc(&mut self, ring: &[usize], flip: bool) {
        for k in 1..RING - 1 {
            self.faces.push(if flip { [ring[0], ring[k + 1], ring[k]] } else { [ring[0], ring[k], ring[k + 1]] });
        }
    }

    /// Cap rings from the equator outwards to the pole along `d`.
    fn cap(&mut self, center: Vec3, d: Vec3, frame: [Vec3; 2], r: f64, owner: usize) -> (Vec<Vec<usize>>, usize) {
        let rings = (1..=CAP_RINGS)
            .rev()
            .map(|i| {
                let lat = FRAC_PI_2 * i as f64 / (CAP_RINGS + 1) as f64;
                self.ring(center + d * (r * lat.cos()), frame, r * lat.sin(), owner)
            })
            .collect();
        (rings, self.push(center + d * r, owner))
    }

    fn sphere(&mut self, c: Vec3, r: f64, owner: usize) {
        let bottom = self.push(c - Vec3::y() * r, owner);
        let mut rings = Vec::new();
        for i in 1..=HEAD_RINGS {
            let polar = PI * i as f64 / (HEAD_RINGS + 1) as f64;
            let y = -polar.cos() * r;
            rings.push(self.ring(c + Vec3::y() * y, [Vec3::x(), -Vec3::z()], polar.sin() * r, owner));
        }
        let top = self.push(c + Vec3::y() * r, owner);
        self.fan(bottom, &rings[0], true);
        for w in 0..rings.len() - 1 {
            let (lo, hi) = (rings[w].clone(), rings[w + 1].clone());
            self.strip(&lo, &hi);
        }
        self.fan(top, rings.last().unwrap(), false);
    }
}

/// Shape basis: a handful of smooth analytic displacement fields.
fn shape_basis(vertices: &[Vec3]) -> BlendBasis {
    let mut b = BlendBasis::zeros(vertices.len(), N_SHAPE);
    for (i, v) in vertices.iter().enumerate() {
        // stature, width, depth
        b.set(i, 1, 0, 0.1 * v.y);
        b.set(i, 0, 1, 0.1 * v.x);
        b.set(i, 2, 2, 0.1 * v.z);
        // longer legs: lift everything above the knees
        b.set(i, 1, 3, 0.05 * (v.y - 0.5).max(0.0));
        // broader shoulders
        b.set(i, 0, 4, 0.05 * v.x * (v.y - 1.0).max(0.0));
        // remaining coefficients are inert
    }
    b
}

/// Builds the capsule-man body model.
///
/// Tubes meeting at a joint are joined by faces that span the joint, with
/// the nearest rings a little way off on either side, so no vertex sits
/// where two bones are equally close. Each joint is regressed from rings
/// placed symmetrically about it.
pub fn capsule_man() -> CapsuleMan {
    let joints = rest_joint_positions();
    let parts = tubes();
    let axis = |t: &Tube| (joints[t.end] - joints[t.start]).normalize();
    let straight = |a: &Tube, b: &Tube| axis(a).dot(&axis(b)) > 1.0 - 1e-9;

    let mut bld = Builder { vertices: Vec::new(), faces: Vec::new(), owner: Vec::new() };
    // last ring of each tube left open at its end joint
    let mut open: Vec<Option<Vec<usize>>> = vec![None; N_JOINTS];
    let mut regress: Vec<Vec<Vec<usize>>> = vec![Vec::new(); N_JOINTS];

    for tube in &parts {
        let (a, b, r, owner) = (joints[tube.start], joints[tube.end], tube.radius, tube.owner);
        let d = axis(tube);
        let reference = if d.y.abs() < 0.9 { Vec3::y() } else { Vec3::x() };
        let e1 = d.cross(&reference).normalize();
        let frame = [e1, d.cross(&e1)];

        let incoming = parts.iter().find(|t| t.end == tube.start);
        let start = match incoming {
            _ if PARENTS[tube.start].is_none() => Start::Cap,
            Some(t) if straight(t, tube) => Start::Joined,
            Some(t) => Start::Clear(t.radius),
            None => Start::Socket,
        };
        let outgoing = parts.iter().find(|t| t.start == tube.end);
        let finish = match outgoing {
            Some(t) if straight(tube, t) => Finish::Joined,
            Some(_) => Finish::Flat,
            None => Finish::Cap,
        };
        let gap = |t: Option<&Tube>| GAP * t.map_or(r, |t| t.radius.max(r));

        let mut rings: Vec<Vec<usize>> = Vec::new();
        let from = match start {
            Start::Cap => {
                let (mut cap, pole) = bld.cap(a, -d, frame, r, owner);
                cap.reverse();
                let equator = bld.ring(a, frame, r, owner);
                bld.fan(pole, &cap[0], true);
                rings.extend(cap);
                rings.push(equator.clone());
                regress[tube.start].push(equator);
                a
            }
            Start::Joined => {
                let g = gap(incoming);
                let before = open[tube.start].take().expect("parent tube comes first");
                let after = bld.ring(a + d * g, frame, r, owner);
                regress[tube.start].extend([before.clone(), after.clone()]);
                rings.extend([before, after]);
                a + d * g
            }
            Start::Socket => {
                // the socket ring is narrower than its distance from the
                // joint, which keeps it nearer the parent's bones
                let parent = PARENTS[tube.start].expect("not the root");
                let (g, rho) = (r, 0.6 * r);
                let socket = bld.ring(a - d * g, frame, rho, parent);
                let pole = bld.push(a - d * (g + rho), parent);
                bld.fan(pole, &socket, true);
                let after = bld.ring(a + d * g, frame, r, owner);
                regress[tube.start].extend([socket.clone(), after.clone()]);
                rings.extend([socket, after]);
                a + d * g
            }
            Start::Clear(c) => {
                let first = bld.ring(a + d * c, frame, r, owner);
                bld.disc(&first, true);
                rings.push(first);
                a + d * c
            }
        };
        let to = match finish {
            Finish::Joined => b - d * gap(outgoing),
            Finish::Flat | Finish::Cap => b,
        };
        let n = ((to - from).norm() / SPACING).round().max(1.0) as usize;
        for i in 1..n {
            rings.push(bld.ring(from + (to - from) * (i as f64 / n as f64), frame, r, owner));
        }
        let last = bld.ring(to, frame, r, owner);
        rings.push(last.clone());
        let pole = match finish {
            Finish::Joined => {
                open[tube.end] = Some(last);
                None
            }
            Finish::Flat => {
                regress[tube.end].push(last);
                None
            }
            Finish::Cap => {
                regress[tube.end].push(last);
                let (cap, pole) = bld.cap(b, d, frame, r, owner);
                rings.extend(cap);
                Some(pole)
            }
        };
        for w in 0..rings.len() - 1 {
            let (lo, hi) = (rings[w].clone(), rings[w + 1].clone());
            bld.strip(&lo, &hi);
        }
        match (pole, finish) {
            (Some(p), _) => bld.fan(p, rings.last().unwrap(), false),
            (None, Finish::Flat) => bld.disc(rings.last().unwrap(), false),
            _ => {}
        }
    }
    // the head rides on the neck joint
    bld.sphere(Vec3::from(HEAD_CENTER), HEAD_RADIUS, NECK);

    let nv = bld.vertices.len();
    let mut regressor = Vec::new();
    for (j, rings) in regress.iter().enumerate() {
        assert!(!rings.is_empty(), "joint {j} has no ring");
        let w = 1.0 / (rings.len() * RING) as f64;
        regressor.extend(rings.iter().flat_map(|ring| ring.iter().map(move |&v| (j, v, w))));
    }
    let weights: Vec<_> = bld.owner.iter().enumerate().map(|(v, &j)| (v, j, 1.0)).collect();

    let model = BodyModel {
        shape_dirs: shape_basis(&bld.vertices),
        template_vertices: bld.vertices,
        faces: bld.faces,
        pose_dirs: None,
        expr_dirs: None,
        joint_regressor: SparseRows::from_triplets(N_JOINTS, nv, &regressor).expect("in range"),
        parents: PARENTS.to_vec(),
        skin_weights: SparseRows::from_triplets(nv, N_JOINTS, &weights).expect("in range"),
    };
    debug_assert!(model.validate().is_ok());

    // top of the head sphere down to the underside of the foot tube
    let top = HEAD_CENTER[1] + HEAD_RADIUS;
    let bottom = joints[L_ANKLE].y - FOOT_RADIUS;
    CapsuleMan { model, vertex_owner: bld.owner, analytic_height: top - bottom }
}

/// Joints with no children carry no bone of their own.
pub fn is_leaf(parents: &[Option<usize>], joint: usize) -> bool {
    !parents.iter().any(|p| *p == Some(joint))
}
