use cinetransfer::geom::{Intrinsics, PinholeCamera, RigidTransform, Rotation, Vec3};
use cinetransfer::raster::{self, FlowField};

fn camera(size: usize, f: f64) -> PinholeCamera {
    let k = Intrinsics { fx: f, fy: f, cx: size as f64 / 2.0, cy: size as f64 / 2.0, width: size, height: size };
    PinholeCamera::new(k, RigidTransform::IDENTITY).unwrap()
}

/// Axis-aligned cube with 12 triangles.
fn cube(centre: Vec3, side: f64) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let h = side / 2.0;
    let v = (0..8)
        .map(|i| centre + Vec3::new(if i & 1 == 0 { -h } else { h }, if i & 2 == 0 { -h } else { h }, if i & 4 == 0 { -h } else { h }))
        .collect();
    let quads = [[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]];
    let faces = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
    (v, faces)
}

/// A finely tessellated square in the plane z = depth.
fn plane(depth: f64, half: f64, n: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let mut v = Vec::new();
    for i in 0..=n {
        for j in 0..=n {
            v.push(Vec3::new(-half + 2.0 * half * j as f64 / n as f64, -half + 2.0 * half * i as f64 / n as f64, depth));
        }
    }
    let mut f = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let a = i * (n + 1) + j;
            f.push([a, a + 1, a + n + 2]);
            f.push([a, a + n + 2, a + n + 1]);
        }
    }
    (v, f)
}

fn shifted(v: &[Vec3], d: Vec3) -> Vec<Vec3> {
    v.iter().map(|p| p + d).collect()
}

/// Pixel centres inside the axis-aligned square [lo, hi]² (in pixel units).
fn centres_inside(lo: [f64; 2], hi: [f64; 2], size: usize) -> usize {
    let count = |a: f64, b: f64| (0..size).filter(|&i| (i as f64 + 0.5) > a && (i as f64 + 0.5) < b).count();
    count(lo[0], hi[0]) * count(lo[1], hi[1])
}

#[test]
fn cube_mask_is_exact_pixel_centre_sampling() {
    let (v, f) = cube(Vec3::new(0.0, 0.0, 4.0), 1.0);
    let mask = raster::rasterize_silhouette(&v, &f, &camera(256, 100.0));
    let half = 0.5 * 100.0 / 3.5;
    assert_eq!(mask.count(), centres_inside([128.0 - half; 2], [128.0 + half; 2], 256));
}

#[test]
fn cube_area_matches_projection() {
    // a single placement can be off by a whole pixel row per side, so average
    // over sub-pixel offsets of the cube across the grid
    let (f, depth, near) = (100.0, 4.0, 3.5);
    let side = f / near;
    let analytic = side * side;
    let n = 8;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let shift = Vec3::new(i as f64 / n as f64, j as f64 / n as f64, 0.0) * (near / f);
            let (v, faces) = cube(Vec3::new(0.0, 0.0, depth) + shift, 1.0);
            let area = raster::rasterize_silhouette(&v, &faces, &camera(256, f)).count() as f64;
            // every single placement is within one pixel row per side
            assert!((area - analytic).abs() <= 2.0 * side + 1.0, "{area} vs {analytic}");
            total += area;
        }
    }
    let mean = total / (n * n) as f64;
    assert!((mean - analytic).abs() / analytic <= 0.02, "{mean} vs {analytic}");
}

#[test]
fn doubling_resolution_keeps_normalized_area() {
    // a generically oriented cube, so pixel quantization does not line up with the edges
    let (v, f) = cube(Vec3::zeros(), 1.0);
    let r = Rotation::new(0.4, 0.7, 0.3).to_matrix();
    let v: Vec<Vec3> = v.iter().map(|p| r * p + Vec3::new(0.1, -0.05, 2.5)).collect();
    let lo = raster::rasterize_silhouette(&v, &f, &camera(256, 100.0)).area_fraction();
    let hi = raster::rasterize_silhouette(&v, &f, &camera(512, 200.0)).area_fraction();
    assert!((lo - hi).abs() / hi < 0.01, "{lo} vs {hi}");
}

#[test]
fn rendering_is_deterministic() {
    let (v, f) = cube(Vec3::new(0.1, 0.2, 3.0), 1.0);
    let cam = camera(128, 90.0);
    assert_eq!(raster::rasterize_silhouette(&v, &f, &cam), raster::rasterize_silhouette(&v, &f, &cam));
    let next = shifted(&v, Vec3::new(0.01, 0.0, 0.0));
    assert_eq!(
        raster::render_flow(&f, &v, &next, &cam, &cam).unwrap(),
        raster::render_flow(&f, &v, &next, &cam, &cam).unwrap()
    );
}

#[test]
fn static_scene_has_zero_flow() {
    let (v, f) = cube(Vec3::new(0.0, 0.0, 4.0), 1.0);
    let cam = camera(128, 100.0);
    let flow = raster::render_flow(&f, &v, &v, &cam, &cam).unwrap();
    assert!(flow.valid_count() > 0);
    for i in 0..128 * 128 {
        if flow.is_valid(i) {
            let d = flow.vector(i);
            assert!(d[0].abs() < 1e-9 && d[1].abs() < 1e-9);
        }
    }
}

#[test]
fn translation_flow_is_three_pixels() {
    let depth = 4.0;
    let f = 100.0;
    let (v, faces) = plane(depth, 0.6, 12);
    // 3 px at this depth and focal length
    let next = shifted(&v, Vec3::new(3.0 * depth / f, 0.0, 0.0));
    let cam = camera(128, f);
    let flow = raster::render_flow(&faces, &v, &next, &cam, &cam).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..128 * 128 {
        if flow.is_valid(i) {
            let d = flow.vector(i);
            worst = worst.max((d[0] - 3.0).hypot(d[1]));
        }
    }
    assert!(flow.valid_count() > 100);
    assert!(worst <= 0.5, "worst {worst}");
}

#[test]
fn pan_flow_matches_pinhole_rotation() {
    let (v, faces) = plane(5.0, 1.0, 10);
    let cam = camera(128, 120.0);
    let pan = Rotation::new(0.0, 0.03, 0.0);
    let next_cam = cam.with_extrinsics(RigidTransform::new(&pan, Vec3::zeros()));
    let flow = raster::render_flow(&faces, &v, &v, &cam, &next_cam).unwrap();
    let r = raster::rasterize(&v, &faces, &cam);
    let mut checked = 0;
    for y in 0..128 {
        for x in 0..128 {
            let Some(frag) = r.fragment(x, y) else { continue };
            // the surface point seen at the pixel centre, reprojected analytically
            let ray = Vec3::new((x as f64 + 0.5 - 64.0) / 120.0, (y as f64 + 0.5 - 64.0) / 120.0, 1.0);
            let p = ray * frag.depth;
            let q = next_cam.project(&p).unwrap();
            let d = flow.at(x, y).unwrap();
            assert!((q.x - (x as f64 + 0.5) - d[0]).abs() <= 0.5);
            assert!((q.y - (y as f64 + 0.5) - d[1]).abs() <= 0.5);
            checked += 1;
        }
    }
    assert!(checked > 1000);
}

fn sample(flow: &FlowField, u: f64, v: f64) -> Option<[f64; 2]> {
    let (x, y) = (u.floor(), v.floor());
    if x < 0.0 || y < 0.0 {
        return None;
    }
    flow.at(x as usize, y as usize)
}

#[test]
fn flow_composes_over_two_steps() {
    let (v0, faces) = plane(4.0, 0.8, 16);
    let step = |v: &[Vec3], k: f64| -> Vec<Vec3> {
        let r = Rotation::new(0.0, 0.0, 0.02 * k).to_matrix();
        v.iter().map(|p| r * (p - Vec3::new(0.0, 0.0, 4.0)) + Vec3::new(0.01 * k, 0.005 * k, 4.0)).collect()
    };
    let (v1, v2) = (step(&v0, 1.0), step(&v0, 2.0));
    let cam = camera(128, 100.0);
    let f01 = raster::render_flow(&faces, &v0, &v1, &cam, &cam).unwrap();
    let f12 = raster::render_flow(&faces, &v1, &v2, &cam, &cam).unwrap();
    let f02 = raster::render_flow(&faces, &v0, &v2, &cam, &cam).unwrap();
    let (mut sum, mut n) = (0.0, 0);
    for y in 0..128 {
        for x in 0..128 {
            let (Some(a), Some(c)) = (f01.at(x, y), f02.at(x, y)) else { continue };
            let (u, v) = (x as f64 + 0.5 + a[0], y as f64 + 0.5 + a[1]);
            let Some(b) = sample(&f12, u, v) else { continue };
            sum += (a[0] + b[0] - c[0]).hypot(a[1] + b[1] - c[1]);
            n += 1;
        }
    }
    assert!(n > 1000);
    assert!((sum / n as f64) < 1.0, "mean composition error {}", sum / n as f64);
}

#[test]
fn projections_survive_joint_rigid_motion() {
    let cam = camera(256, 150.0);
    let joints = vec![Vec3::new(0.1, 0.2, 3.0), Vec3::new(-0.4, 0.3, 5.0), Vec3::new(0.0, 0.0, -1.0)];
    let g = RigidTransform::new(&Rotation::new(0.3, -1.1, 0.7), Vec3::new(2.0, -1.0, 0.5));
    let moved: Vec<Vec3> = joints.iter().map(|j| g.apply(j)).collect();
    let moved_cam = cam.with_extrinsics(cam.world_to_camera.compose(&g.inverse()));
    let a = raster::project_joints(&joints, &cam);
    let b = raster::project_joints(&moved, &moved_cam);
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.visible, q.visible);
        if p.visible {
            assert!((p.u - q.u).abs() < 1e-6 && (p.v - q.v).abs() < 1e-6);
        }
    }
    assert!(!a[2].visible);
}
