//! The pipeline stages. Each one loads and checks all of its inputs, then
//! computes, then writes, so a bad input never leaves partial output behind.

use crate::config::{required, stage_seed, DenoiserChoice, PipelineConfig, Stage, SynthConfig};
use crate::CliError;
use cinetransfer::body::{capsule, BodyModel, MotionClip};
use cinetransfer::camopt::{optimize_trajectory, CameraTrajectory, SceneTrack};
use cinetransfer::geom::{PinholeCamera, Vec3};
use cinetransfer::io;
use cinetransfer::metrics::{self, EvalReport};
use cinetransfer::raster::{self, Mask};
use cinetransfer::refine::{self, BlurDenoiser, Denoiser, Frame, ZeroDenoiser};
use cinetransfer::retarget::{self, BoneMap, CharacterMesh, Keypoints2D, SkeletonAdjustment};
use cinetransfer::synth::{self, SceneSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Output layout under `output_dir`.
pub mod layout {
    pub const RETARGET: &str = "retarget";
    pub const RESHOOT: &str = "reshoot";
    pub const COMPOSITE: &str = "composite";
    pub const FRAMES: &str = "frames";
    pub const EVAL: &str = "eval";

    pub const MESH_PREFIX: &str = "mesh";
    pub const FRAME_PREFIX: &str = "frame";
    pub const MASK_PREFIX: &str = "mask";
    pub const ADJUSTMENT: &str = "adjustment.json";
    pub const JOINTS: &str = "joints.json";
    pub const TRAJECTORY: &str = "trajectory.json";
    pub const LOSSES: &str = "losses.csv";
    pub const REPORT: &str = "report.json";

    /// Files written by `synth` next to the ground-truth bundle.
    pub const GROUND_TRUTH: &str = "ground_truth";
    pub const CHARACTER_MESH: &str = "character.obj";
    pub const CHARACTER_KEYPOINTS: &str = "character_keypoints.json";
    pub const INIT_CAMERAS: &str = "cameras_init.json";
    pub const ENVIRONMENT: &str = "environment";
    pub const PIPELINE: &str = "pipeline.json";
    pub const RUN: &str = "run";
}

fn invalid(e: cinetransfer::Error) -> CliError {
    CliError::Validation(e.to_string())
}

fn failed(e: cinetransfer::Error) -> CliError {
    CliError::Stage(e.to_string())
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), CliError> {
    if cond {
        Ok(())
    } else {
        Err(CliError::Stage(msg()))
    }
}

fn load_bone_map(cfg: &PipelineConfig) -> Result<BoneMap, CliError> {
    match &cfg.bone_map {
        Some(p) => io::read_json(p).map_err(invalid),
        None => Ok(retarget::default_bone_map()),
    }
}

fn load_body_model(cfg: &PipelineConfig) -> Result<BodyModel, CliError> {
    match &cfg.body_model {
        Some(p) => BodyModel::load(p).map_err(invalid),
        None => Ok(capsule::capsule_man().model),
    }
}

/// The `adjustment.json` written by `retarget`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetargetReport {
    /// `L_s / L_m`.
    pub scale: f64,
    pub canonical_height: f64,
    pub character_height: f64,
    pub delta_r: Vec<f64>,
    pub warnings: Vec<String>,
    pub adjustment: SkeletonAdjustment,
}

/// Animated character as written by `retarget`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetargetOutput {
    pub faces: Vec<[usize; 3]>,
    pub vertices: Vec<Vec<Vec3>>,
    /// All skeleton joints per frame.
    pub joints: Vec<Vec<Vec3>>,
}

impl RetargetOutput {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Reads the frames listed in `joints.json` and their meshes.
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let joints: Vec<Vec<[f64; 3]>> = io::read_json(&dir.join(layout::JOINTS)).map_err(invalid)?;
        let joints = synth::joints_from_json(&joints);
        let meshes = (0..joints.len())
            .into_par_iter()
            .map(|t| io::read_obj(&io::frame_path(dir, layout::MESH_PREFIX, t, "obj")))
            .collect::<cinetransfer::Result<Vec<_>>>()
            .map_err(invalid)?;
        let faces = meshes.first().map(|m| m.faces.clone()).unwrap_or_default();
        if let Some(t) = meshes.iter().position(|m| m.faces != faces) {
            return Err(CliError::Validation(format!("retargeted mesh {t} has different faces from mesh 0")));
        }
        Ok(Self { faces, vertices: meshes.into_iter().map(|m| m.vertices).collect(), joints })
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let io_err = |e: cinetransfer::Error| CliError::Stage(e.to_string());
        self.vertices
            .par_iter()
            .enumerate()
            .try_for_each(|(t, v)| io::write_obj(&io::frame_path(dir, layout::MESH_PREFIX, t, "obj"), v, &self.faces))
            .map_err(io_err)?;
        io::write_json(&dir.join(layout::JOINTS), &synth::joints_to_json(&self.joints)).map_err(io_err)
    }
}

/// Fits the character to the canonical skeleton and animates it with the
/// motion clip.
pub fn retarget(cfg: &PipelineConfig) -> Result<RetargetOutput, CliError> {
    let mesh = io::read_obj(required(&cfg.character_mesh, "character_mesh")?).map_err(invalid)?;
    let keypoints: Keypoints2D =
        io::read_json(required(&cfg.character_keypoints, "character_keypoints")?).map_err(invalid)?;
    keypoints.validate().map_err(invalid)?;
    let map = load_bone_map(cfg)?;
    let model = load_body_model(cfg)?;
    let motion: MotionClip = io::read_json(required(&cfg.motion, "motion")?).map_err(invalid)?;
    motion.validate().map_err(invalid)?;

    let mesh = CharacterMesh::try_from(mesh).map_err(failed)?;
    let fit = retarget::fit_character(&model, &cfg.shape, &mesh, &keypoints, &map, &cfg.retarget).map_err(failed)?;
    for w in &fit.adjustment.warnings {
        log::warn!("retarget: {w}");
    }
    let anim = retarget::animate(&mesh, &fit.adjustment, &fit.weights, &model.parents, &motion).map_err(failed)?;
    log::info!(
        "retarget: {} frames, scale {:.6} (canonical {:.4} m, character {:.4})",
        anim.len(),
        fit.adjustment.scale,
        fit.canonical_height,
        fit.character_height
    );

    let out = RetargetOutput { faces: mesh.faces, vertices: anim.vertices, joints: anim.joints };
    let report = RetargetReport {
        scale: fit.adjustment.scale,
        canonical_height: fit.canonical_height,
        character_height: fit.character_height,
        delta_r: fit.adjustment.delta_r.clone(),
        warnings: fit.adjustment.warnings.clone(),
        adjustment: fit.adjustment,
    };
    let dir = cfg.stage_dir(layout::RETARGET);
    out.save(&dir)?;
    io::write_json(&dir.join(layout::ADJUSTMENT), &report).map_err(failed)?;
    Ok(out)
}

fn check_resolution(cams: &CameraTrajectory, width: usize, height: usize, what: &str) -> Result<(), CliError> {
    let i = &cams.intrinsics;
    check(i.width == width && i.height == height, || {
        format!("{what} is {width}x{height} but the camera intrinsics are {}x{}", i.width, i.height)
    })
}

/// Refines the camera trajectory against the shot's evidence.
pub fn reshoot(cfg: &PipelineConfig) -> Result<CameraTrajectory, CliError> {
    let character = RetargetOutput::load(&cfg.stage_dir(layout::RETARGET))?;
    let map = load_bone_map(cfg)?;
    let init = CameraTrajectory::load(required(&cfg.cameras, "cameras")?).map_err(invalid)?;
    let evidence = synth::read_evidence(required(&cfg.evidence_dir, "evidence_dir")?, character.len()).map_err(invalid)?;

    check(init.len() == character.len(), || {
        format!("camera file has {} frames, the retargeted character {}", init.len(), character.len())
    })?;
    if let Some((w, h)) = evidence.resolution() {
        check_resolution(&init, w, h, "evidence")?;
    }
    map.validate(character.joints.first().map_or(0, |j| j.len())).map_err(failed)?;
    let order = map.joints_by_keypoint();
    let scene = SceneTrack {
        faces: character.faces,
        keypoint_joints: character.joints.iter().map(|j| order.iter().map(|&k| j[k]).collect()).collect(),
        vertices: character.vertices,
    };
    let result = optimize_trajectory(&init, &scene, &evidence, &cfg.camopt).map_err(failed)?;

    let mut csv = String::from(
        "frame,initial_instance,initial_semantic,initial_motion,initial_total,\
         final_instance,final_semantic,final_motion,final_total,iterations,skipped\n",
    );
    for (t, f) in result.frames.iter().enumerate() {
        let (a, b) = (f.initial, f.last);
        let _ = writeln!(
            csv,
            "{t},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{}",
            a.instance, a.semantic, a.motion, a.total, b.instance, b.semantic, b.motion, b.total, f.iterations, f.skipped
        );
    }
    let (before, after): (f64, f64) = result.frames.iter().fold((0.0, 0.0), |(x, y), f| (x + f.initial.total, y + f.last.total));
    log::info!("reshoot: {} frames, total loss {before:.6} -> {after:.6}", result.frames.len());

    let dir = cfg.stage_dir(layout::RESHOOT);
    result.trajectory.save(&dir.join(layout::TRAJECTORY)).map_err(failed)?;
    io::write_bytes(&dir.join(layout::LOSSES), csv.as_bytes()).map_err(failed)?;
    Ok(result.trajectory)
}

/// Base colour of the rendered character, in [0, 1].
const CHARACTER_COLOUR: [f64; 3] = [0.85, 0.45, 0.25];

/// Renders the character with flat Lambert shading (light at the camera).
pub fn render_character(vertices: &[Vec3], faces: &[[usize; 3]], cam: &PinholeCamera) -> (Frame, Mask) {
    let r = raster::rasterize(vertices, faces, cam);
    let (w, h) = (cam.width(), cam.height());
    let mut frame = Frame::filled(w, h, [0.0; 3]);
    let eye = cam.eye();
    for y in 0..h {
        for x in 0..w {
            let Some(f) = r.fragment(x, y) else { continue };
            let [a, b, c] = faces[f.triangle as usize];
            let n = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
            let p = vertices[a] * f.bary[0] + vertices[b] * f.bary[1] + vertices[c] * f.bary[2];
            let cos = n.normalize().dot(&(eye - p).normalize()).abs();
            let shade = 0.35 + 0.65 * if cos.is_finite() { cos } else { 0.0 };
            frame.set_pixel(x, y, CHARACTER_COLOUR.map(|k| (2.0 * k * shade - 1.0) as f32));
        }
    }
    (frame, r.mask())
}

/// Environment frames `frame_NNNNNN.ppm`, in index order, stopping at the
/// first gap.
pub fn read_environment(dir: &Path) -> Result<Vec<Frame>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Validation(format!("{}: environment directory not found", dir.display())));
    }
    let paths: Vec<PathBuf> = (0..)
        .map(|t| io::frame_path(dir, layout::FRAME_PREFIX, t, "ppm"))
        .take_while(|p| p.is_file())
        .collect();
    paths.par_iter().map(|p| io::read_ppm(p)).collect::<cinetransfer::Result<Vec<_>>>().map_err(invalid)
}

fn denoiser(choice: DenoiserChoice) -> Box<dyn Denoiser> {
    match choice {
        DenoiserChoice::Zero => Box::new(ZeroDenoiser),
        DenoiserChoice::Blur { sigma } => Box::new(BlurDenoiser { sigma }),
    }
}

/// Renders the character under the refined cameras, composites it over the
/// environment and refines the result.
pub fn compose_refine(cfg: &PipelineConfig) -> Result<Vec<Frame>, CliError> {
    let character = RetargetOutput::load(&cfg.stage_dir(layout::RETARGET))?;
    let cams = CameraTrajectory::load(&cfg.stage_dir(layout::RESHOOT).join(layout::TRAJECTORY)).map_err(invalid)?;
    let environment = read_environment(required(&cfg.environment_dir, "environment_dir")?)?;

    let n = character.len();
    check(cams.len() == n && environment.len() == n, || {
        format!("frame count mismatch: {n} character frames, {} cameras, {} environment frames", cams.len(), environment.len())
    })?;
    if let Some(e) = environment.first() {
        check_resolution(&cams, e.width(), e.height(), "environment")?;
    }
    let (renders, masks): (Vec<Frame>, Vec<Mask>) = (0..n)
        .into_par_iter()
        .map(|t| render_character(&character.vertices[t], &character.faces, &cams.camera(t)))
        .unzip();
    let (composite, masks) = refine::composite(&renders, &masks, &environment).map_err(failed)?;
    let mut rc = cfg.refine;
    rc.seed = stage_seed(cfg.seed, Stage::Refine);
    let refined = refine::refine_video(&composite, &masks, denoiser(cfg.denoiser).as_ref(), &rc).map_err(failed)?;
    log::info!("compose-refine: {n} frames, denoising from step {}", rc.start_step());

    let (cdir, fdir) = (cfg.stage_dir(layout::COMPOSITE), cfg.stage_dir(layout::FRAMES));
    (0..n)
        .into_par_iter()
        .try_for_each(|t| {
            io::write_ppm(&io::frame_path(&cdir, layout::FRAME_PREFIX, t, "ppm"), &composite[t])?;
            io::write_ppm(&io::frame_path(&fdir, layout::FRAME_PREFIX, t, "ppm"), &refined[t])?;
            io::write_pgm(&io::frame_path(&fdir, layout::MASK_PREFIX, t, "pgm"), &masks[t])
        })
        .map_err(failed)?;
    Ok(refined)
}

/// Scores the retargeted character against a ground-truth bundle. Masks are
/// rendered with the refined trajectory when `reshoot` has run, else with
/// the configured cameras.
pub fn eval(cfg: &PipelineConfig) -> Result<EvalReport, CliError> {
    let character = RetargetOutput::load(&cfg.stage_dir(layout::RETARGET))?;
    let refined = cfg.stage_dir(layout::RESHOOT).join(layout::TRAJECTORY);
    let cams_path = if refined.is_file() { refined.as_path() } else { required(&cfg.cameras, "cameras")? };
    let cams = CameraTrajectory::load(cams_path).map_err(invalid)?;
    let gt_dir = required(&cfg.ground_truth_dir, "ground_truth_dir")?;
    let gt_joints: Vec<Vec<[f64; 3]>> = io::read_json(&gt_dir.join(synth::files::JOINTS)).map_err(invalid)?;
    let gt_joints = synth::joints_from_json(&gt_joints);
    let mask_dir = gt_dir.join(synth::files::EVIDENCE_DIR);
    let gt_masks = (0..gt_joints.len())
        .into_par_iter()
        .map(|t| io::read_pgm(&io::frame_path(&mask_dir, layout::MASK_PREFIX, t, "pgm")))
        .collect::<cinetransfer::Result<Vec<_>>>()
        .map_err(invalid)?;

    check(cams.len() == character.len(), || {
        format!("camera file has {} frames, the retargeted character {}", cams.len(), character.len())
    })?;
    let pred_masks = predicted_masks(&character, &cams);
    let report =
        metrics::evaluate(&character.joints, &gt_joints, &pred_masks, &gt_masks, cfg.pixel_accuracy).map_err(failed)?;
    log::info!(
        "eval: MPJPE {:.3} mm, PA {:.4}, IoU {:.4} over {} frames",
        report.mean.mpjpe,
        report.mean.pa,
        report.mean.iou,
        report.per_frame.len()
    );
    io::write_json(&cfg.stage_dir(layout::EVAL).join(layout::REPORT), &report).map_err(failed)?;
    Ok(report)
}

/// Silhouettes of the character under each frame's camera.
pub fn predicted_masks(character: &RetargetOutput, cams: &CameraTrajectory) -> Vec<Mask> {
    (0..character.len())
        .into_par_iter()
        .map(|t| raster::rasterize_silhouette(&character.vertices[t], &character.faces, &cams.camera(t)))
        .collect()
}

/// Procedural backdrop: a sky gradient over a checkered floor that scrolls
/// with the frame index.
pub fn environment_frame(width: usize, height: usize, t: usize) -> Frame {
    let mut f = Frame::filled(width, height, [0.0; 3]);
    let horizon = height as f64 * 0.55;
    for y in 0..height {
        for x in 0..width {
            let yf = y as f64;
            let rgb = if yf < horizon {
                let s = yf / horizon;
                [0.35 + 0.3 * s, 0.55 + 0.25 * s, 0.9 - 0.1 * s]
            } else {
                let d = (yf - horizon + 1.0) / (height as f64 - horizon);
                let u = ((x as f64 - width as f64 * 0.5) / d + 4.0 * t as f64) / 24.0;
                let v = 6.0 / d;
                let dark = (u.floor() as i64 + v.floor() as i64).rem_euclid(2) == 0;
                if dark {
                    [0.3, 0.28, 0.25]
                } else {
                    [0.62, 0.6, 0.55]
                }
            };
            f.set_pixel(x, y, rgb.map(|c| (2.0 * c - 1.0) as f32));
        }
    }
    f
}

/// Writes a ground-truth bundle plus everything a pipeline run needs:
/// a rescaled, shifted copy of the capsule man with its front-view
/// keypoints, perturbed init cameras, environment frames and a ready
/// `pipeline.json` whose output goes to `run/`.
pub fn synth(cfg: &PipelineConfig) -> Result<synth::GroundTruthBundle, CliError> {
    let sc: SynthConfig = cfg.synth.unwrap_or_default();
    let seed = stage_seed(cfg.seed, Stage::Synth);
    let spec = SceneSpec {
        shot_type: sc.shot_type,
        frames: sc.frames,
        motion_preset: sc.motion_preset,
        width: sc.width,
        height: sc.height,
        seed,
    };
    spec.validate().map_err(invalid)?;
    if !(sc.character_scale > 0.0 && sc.character_scale.is_finite()) {
        return Err(CliError::Validation(format!("character_scale must be positive, got {}", sc.character_scale)));
    }
    if !(sc.camera_noise_deg >= 0.0 && sc.camera_noise_frac >= 0.0) {
        return Err(CliError::Validation("camera noise bounds must be non-negative".into()));
    }

    let bundle = synth::make_scene(&spec).map_err(failed)?;
    let init = synth::perturb_camera(&bundle.cameras, sc.camera_noise_deg, sc.camera_noise_frac, bundle.scene_diameter(), seed)
        .map_err(failed)?;
    let man = capsule::capsule_man();
    let offset = Vec3::new(0.4, 0.25, -0.3);
    let vertices: Vec<Vec3> = man.model.template_vertices.iter().map(|v| v * sc.character_scale + offset).collect();
    let joints: Vec<Vec3> = man.model.rest_joints().iter().map(|j| j * sc.character_scale + offset).collect();
    let keypoints = retarget::FrontView::default().keypoints(&joints, &bundle.bone_map);

    let out = &cfg.output_dir;
    let gt = out.join(layout::GROUND_TRUTH);
    synth::write_bundle(&gt, &bundle).map_err(failed)?;
    io::write_obj(&out.join(layout::CHARACTER_MESH), &vertices, &man.model.faces).map_err(failed)?;
    io::write_json(&out.join(layout::CHARACTER_KEYPOINTS), &keypoints).map_err(failed)?;
    init.save(&out.join(layout::INIT_CAMERAS)).map_err(failed)?;
    let env_dir = out.join(layout::ENVIRONMENT);
    (0..spec.frames)
        .into_par_iter()
        .try_for_each(|t| {
            io::write_ppm(&io::frame_path(&env_dir, layout::FRAME_PREFIX, t, "ppm"), &environment_frame(spec.width, spec.height, t))
        })
        .map_err(failed)?;

    let rel = |p: &str| Some(PathBuf::from(p));
    let gt_file = |f: &str| Some(Path::new(layout::GROUND_TRUTH).join(f));
    let pipeline = PipelineConfig {
        character_mesh: rel(layout::CHARACTER_MESH),
        character_keypoints: rel(layout::CHARACTER_KEYPOINTS),
        bone_map: gt_file(synth::files::BONE_MAP),
        body_model: gt_file(synth::files::BODY_MODEL),
        motion: gt_file(synth::files::MOTION),
        cameras: rel(layout::INIT_CAMERAS),
        evidence_dir: gt_file(synth::files::EVIDENCE_DIR),
        environment_dir: rel(layout::ENVIRONMENT),
        ground_truth_dir: rel(layout::GROUND_TRUTH),
        output_dir: PathBuf::from(layout::RUN),
        synth: None,
        ..cfg.clone()
    };
    io::write_json(&out.join(layout::PIPELINE), &pipeline).map_err(failed)?;
    log::info!("synth: {:?} {} frames at {}x{} written to {}", spec.shot_type, spec.frames, spec.width, spec.height, out.display());
    Ok(bundle)
}
