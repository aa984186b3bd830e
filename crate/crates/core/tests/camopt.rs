use cinetransfer::camopt::{self, CamOptConfig, CameraTrajectory, EvidenceFrame, EvidenceTrack, FrameScene};
use cinetransfer::geom::{PinholeCamera, RigidTransform, Rotation, Vec3};
use cinetransfer::raster::{FlowField, Mask, ProjectedJoint};
use cinetransfer::retarget::Keypoints2D;
use cinetransfer::synth::{self, GroundTruthBundle, MotionPreset, SceneSpec, ShotType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_boundary(m: &Mask) -> Vec<(usize, usize)> {
    let (w, h) = (m.width() as isize, m.height() as isize);
    let on = |x: isize, y: isize| x >= 0 && y >= 0 && x < w && y < h && m.get(x as usize, y as usize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if on(x, y) && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| !on(x + dx, y + dy)) {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}

fn brute_chamfer(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|&(x, y)| {
            to.iter()
                .map(|&(u, v)| ((x as f64 - u as f64).powi(2) + (y as f64 - v as f64).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / from.len() as f64
}

fn brute_instance(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for y in 0..a.height() {
        for x in 0..a.width() {
            inter += (a.get(x, y) && b.get(x, y)) as u8 as f64;
            union += (a.get(x, y) || b.get(x, y)) as u8 as f64;
        }
    }
    if union == 0.0 {
        return 0.0;
    }
    let diag = ((a.width().pow(2) + a.height().pow(2)) as f64).sqrt();
    let (ba, bb) = (brute_boundary(a), brute_boundary(b));
    let chamfer = if ba.is_empty() || bb.is_empty() { 1.0 } else { 0.5 * (brute_chamfer(&ba, &bb) + brute_chamfer(&bb, &ba)) / diag };
    0.5 * (1.0 - inter / union) + 0.5 * chamfer
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Mask {
    let p = rng.random_range(0.05..0.9);
    Mask::from_bits(w, h, (0..w * h).map(|_| rng.random_bool(p)).collect())
}

#[test]
fn instance_loss_matches_brute_force_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..150 {
        let (w, h) = (rng.random_range(1..14), rng.random_range(1..14));
        let (a, b) = (random_mask(&mut rng, w, h), random_mask(&mut rng, w, h));
        let got = camopt::loss_instance(&a, &b).unwrap();
        assert!((got - brute_instance(&a, &b)).abs() <= 1e-9, "{w}x{h}");
    }
}

#[test]
fn instance_loss_one_pixel_shift_on_256() {
    let disc = |cx: f64| Mask::from_fn(256, 256, |x, y| (x as f64 - cx).powi(2) + (y as f64 - 120.0).powi(2) < 60.0f64.powi(2));
    let (a, b) = (disc(128.0), disc(129.0));
    let got = camopt::loss_instance(&a, &b).unwrap();
    assert!(got > 0.0);
    assert!((got - brute_instance(&a, &b)).abs() <= 1e-9);
    assert_eq!(camopt::loss_instance(&a, &a).unwrap(), 0.0);
}

#[test]
fn instance_loss_special_cases() {
    let a = Mask::from_fn(32, 32, |x, y| x < 8 && y < 8);
    let b = Mask::from_fn(32, 32, |x, y| x > 20 && y > 20);
    let l = camopt::loss_instance(&a, &b).unwrap();
    assert!(l > 0.5);
    assert_eq!(camopt::loss_instance(&Mask::new(8, 8), &Mask::new(8, 8)).unwrap(), 0.0);
    assert!(camopt::loss_instance(&a, &Mask::new(8, 8)).is_err());
}

fn random_flow(rng: &mut ChaCha8Rng, w: usize, h: usize) -> FlowField {
    let mut f = FlowField::invalid(w, h);
    for i in 0..w * h {
        if rng.random_bool(0.8) {
            f.set(i, [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]);
        }
    }
    f
}

#[test]
fn motion_loss_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..150 {
        let (a, b) = (random_flow(&mut rng, 8, 8), random_flow(&mut rng, 8, 8));
        let region = random_mask(&mut rng, 8, 8);
        let (mut sum, mut n) = (0.0, 0);
        for y in 0..8 {
            for x in 0..8 {
                if let (true, Some(p), Some(q)) = (region.get(x, y), a.at(x, y), b.at(x, y)) {
                    sum += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                    n += 1;
                }
            }
        }
        let expected = if n == 0 { 0.0 } else { sum / n as f64 / 128f64.sqrt() };
        assert!((camopt::loss_motion(&a, &b, &region).unwrap() - expected).abs() <= 1e-9);
    }
}

#[test]
fn motion_loss_unit_offset() {
    let mut a = FlowField::invalid(30, 40);
    let mut b = FlowField::invalid(30, 40);
    for i in 0..1200 {
        a.set(i, [1.0, 0.0]);
        b.set(i, [0.0, 0.0]);
    }
    let region = Mask::from_fn(30, 40, |x, _| x > 10);
    assert!((camopt::loss_motion(&a, &b, &region).unwrap() - 1.0 / 50.0).abs() < 1e-15);
    assert_eq!(camopt::loss_motion(&a, &a, &region).unwrap(), 0.0);
    assert!(camopt::loss_motion(&a, &FlowField::invalid(30, 41), &region).is_err());
}

fn pj(u: f64, v: f64) -> ProjectedJoint {
    ProjectedJoint { u, v, visible: true }
}

#[test]
fn semantic_loss_examples() {
    let d = 100.0;
    let proj = vec![pj(10.0, 10.0), pj(50.0, 20.0)];
    let offset = Keypoints2D { points: vec![[13.0, 14.0, 1.0], [53.0, 24.0, 1.0]] };
    assert!((camopt::loss_semantic(&proj, &offset, d).unwrap() - 25.0 / (d * d)).abs() < 1e-15);
    // squared distances 25, 100, 4 with confidences 1, 0.5, 0.2 (the last one is ignored)
    let proj = vec![pj(0.0, 0.0), pj(10.0, 0.0), pj(5.0, 5.0)];
    let kp = Keypoints2D { points: vec![[3.0, 4.0, 1.0], [10.0, 10.0, 0.5], [5.0, 7.0, 0.2]] };
    let expected = (25.0 * 1.0 + 100.0 * 0.5) / 1.5 / (d * d);
    assert!((camopt::loss_semantic(&proj, &kp, d).unwrap() - expected).abs() < 1e-15);
    let hidden = vec![ProjectedJoint { u: 0.0, v: 0.0, visible: false }; 3];
    assert_eq!(camopt::loss_semantic(&hidden, &kp, d).unwrap(), 0.0);
}

fn scene(shot: ShotType, preset: MotionPreset, frames: usize, size: usize) -> GroundTruthBundle {
    synth::make_scene(&SceneSpec::new(shot, preset, frames, size, 0)).unwrap()
}

#[test]
fn evidence_from_init_is_a_fixed_point() {
    let b = scene(ShotType::Arc, MotionPreset::Walk, 4, 128);
    let r = camopt::optimize_trajectory(&b.cameras, &b.scene_track(), &b.evidence, &CamOptConfig::default()).unwrap();
    assert_eq!(r.trajectory, b.cameras);
    assert!(r.frames.iter().all(|f| f.last.total == 0.0));
}

#[test]
fn perturbed_frame_is_recovered_and_never_worse() {
    let b = scene(ShotType::PushIn, MotionPreset::ArmRaise, 3, 256);
    let init = synth::perturb_camera(&b.cameras, 5.0, 0.05, b.scene_diameter(), 4).unwrap();
    let track = b.scene_track();
    let cfg = CamOptConfig::default();
    for t in 0..2 {
        let motion = init.extrinsics[t + 1].compose(&init.extrinsics[t].inverse());
        let r = camopt::optimize_frame(&init.camera(t), Some(&motion), track.frame(t), &b.evidence.frames[t], &cfg).unwrap();
        assert!(r.last.total <= r.initial.total);
        let err = camopt::reprojection_error(&b.joints3d[t], &init.camera(t).with_extrinsics(r.extrinsics), &b.cameras.camera(t));
        assert!(err <= 1.0, "frame {t}: {err} px");
    }
}

#[test]
fn semantic_only_single_joint_descends_monotonically() {
    let b = scene(ShotType::Arc, MotionPreset::Idle, 2, 128);
    let cam = b.cameras.camera(0);
    let joint = [b.keypoint_joints()[0][0]];
    let mut points = vec![[0.0, 0.0, 0.0]; 1];
    let target = cam.project(&joint[0]).unwrap();
    points[0] = [target.x + 6.0, target.y - 4.0, 1.0];
    let evidence = EvidenceFrame { mask: Mask::new(128, 128), keypoints: Keypoints2D { points }, flow: None };
    let frame = FrameScene { vertices: &b.vertices[0], faces: &b.faces, keypoint_joints: &joint, next_vertices: None };
    let residual = |e: &RigidTransform| {
        let p = cam.with_extrinsics(*e).project(&joint[0]).unwrap();
        (p.x - evidence.keypoints.points[0][0]).hypot(p.y - evidence.keypoints.points[0][1])
    };
    // a run capped at k iterations is the first k steps of the full run
    let mut last = residual(&cam.world_to_camera);
    for k in 1..=12 {
        let cfg = CamOptConfig { lambda_instance: 0.0, lambda_motion: 0.0, max_iterations: k, ..CamOptConfig::default() };
        let r = camopt::optimize_frame(&cam, None, frame, &evidence, &cfg).unwrap();
        let now = residual(&r.extrinsics);
        assert!(now <= last + 1e-12, "iteration {k}: {now} > {last}");
        last = now;
    }
    assert!(last < 0.05, "{last}");
}

#[test]
fn camera_distance_follows_character_scale() {
    let b = scene(ShotType::PushIn, MotionPreset::Idle, 2, 256);
    let cam = b.cameras.camera(0);
    let target = Vec3::new(0.0, 0.9, 0.0);
    let k = 1.2;
    // evidence of a 1.2x larger character, scaled about the point the camera aims at
    let grow = |v: &Vec<Vec3>| v.iter().map(|p| target + (p - target) * k).collect::<Vec<_>>();
    let big_v = vec![grow(&b.vertices[0])];
    let big_j = vec![grow(&b.keypoint_joints()[0])];
    let single = CameraTrajectory { intrinsics: b.cameras.intrinsics, extrinsics: vec![b.cameras.extrinsics[0]] };
    let evidence = synth::render_evidence(&big_v, &b.faces, &big_j, &single);
    let joints = b.keypoint_joints();
    let frame = FrameScene { vertices: &b.vertices[0], faces: &b.faces, keypoint_joints: &joints[0], next_vertices: None };
    let r = camopt::optimize_frame(&cam, None, frame, &evidence.frames[0], &CamOptConfig::default()).unwrap();
    let d0 = (cam.eye() - target).norm();
    let d1 = (cam.with_extrinsics(r.extrinsics).eye() - target).norm();
    let expected = d0 / k;
    assert!((d1 - expected).abs() <= 0.05 * expected, "{d1} vs {expected}");
}

#[test]
fn degenerate_evidence_skips_the_frame() {
    let b = scene(ShotType::Arc, MotionPreset::Idle, 2, 64);
    let empty = EvidenceFrame {
        mask: Mask::new(64, 64),
        keypoints: Keypoints2D { points: vec![[0.0, 0.0, 0.0]; 15] },
        flow: None,
    };
    let joints = b.keypoint_joints();
    let frame = FrameScene { vertices: &b.vertices[0], faces: &b.faces, keypoint_joints: &joints[0], next_vertices: None };
    // move the camera away from the body so nothing renders either
    let away = b.cameras.camera(0).with_extrinsics(RigidTransform::new(&Rotation::new(0.0, std::f64::consts::PI, 0.0), Vec3::new(0.0, 0.0, 50.0)));
    let r = camopt::optimize_frame(&away, None, frame, &empty, &CamOptConfig::default()).unwrap();
    assert!(r.skipped);
    assert_eq!(r.extrinsics, away.world_to_camera);
}

#[test]
fn resolution_mismatch_is_an_error() {
    let b = scene(ShotType::Pan, MotionPreset::Idle, 2, 64);
    let small = scene(ShotType::Pan, MotionPreset::Idle, 2, 32);
    assert!(camopt::optimize_trajectory(&b.cameras, &b.scene_track(), &small.evidence, &CamOptConfig::default()).is_err());
    let joints = b.keypoint_joints();
    let frame = FrameScene { vertices: &b.vertices[0], faces: &b.faces, keypoint_joints: &joints[0], next_vertices: None };
    assert!(camopt::optimize_frame(&b.cameras.camera(0), None, frame, &small.evidence.frames[0], &CamOptConfig::default()).is_err());
    let short = EvidenceTrack { frames: b.evidence.frames[..1].to_vec() };
    assert!(camopt::optimize_trajectory(&b.cameras, &b.scene_track(), &short, &CamOptConfig::default()).is_err());
}

fn wobbly_trajectory(n: usize, seed: u64) -> Vec<RigidTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|t| {
            let s = t as f64 * 0.1;
            let r = Rotation::new(0.1 * s + rng.random_range(-0.05..0.05), 3.0 + 0.2 * s + rng.random_range(-0.05..0.05), 0.02);
            RigidTransform::new(&r, Vec3::new(s + rng.random_range(-0.1..0.1), 1.0, 4.0 + rng.random_range(-0.1..0.1)))
        })
        .collect()
}

#[test]
fn stronger_smoothing_gives_smoother_paths() {
    let x = wobbly_trajectory(20, 3);
    let mut prev = camopt::roughness(&x);
    for lambda in [0.5, 5.0, 50.0] {
        let r = camopt::roughness(&camopt::smooth(&x, lambda));
        assert!(r < prev, "lambda {lambda}: {r} >= {prev}");
        prev = r;
    }
    assert_eq!(camopt::smooth(&x, 0.0), x);
}

#[test]
fn trajectory_optimization_is_deterministic() {
    let b = scene(ShotType::Track, MotionPreset::Walk, 3, 96);
    let init = synth::perturb_camera(&b.cameras, 3.0, 0.03, b.scene_diameter(), 9).unwrap();
    let cfg = CamOptConfig::default();
    let a = camopt::optimize_trajectory(&init, &b.scene_track(), &b.evidence, &cfg).unwrap();
    let c = camopt::optimize_trajectory(&init, &b.scene_track(), &b.evidence, &cfg).unwrap();
    assert_eq!(a.trajectory, c.trajectory);
    for f in &a.frames {
        assert!(f.last.total <= f.initial.total);
    }
}

#[test]
fn trajectory_file_round_trip() {
    let b = scene(ShotType::Arc, MotionPreset::Idle, 3, 64);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cameras.json");
    b.cameras.save(&path).unwrap();
    let back = CameraTrajectory::load(&path).unwrap();
    assert_eq!(back.intrinsics, b.cameras.intrinsics);
    for (a, c) in back.extrinsics.iter().zip(&b.cameras.extrinsics) {
        assert!((a.linear - c.linear).norm() < 1e-12 && (a.translation - c.translation).norm() < 1e-12);
    }
    let _: PinholeCamera = back.camera(0);
}
