//! Cinematic transfer: animate a new character with the motion of a
//! reference shot, re-optimize the camera so the character is framed like the
//! original, composite it into the shot's environment and refine the result
//! with a masked diffusion pass.
//!
//! Stages, in pipeline order:
//!
//! - [`retarget`]: fit a character mesh to the canonical skeleton and animate it.
//! - [`camopt`]: refine per-frame camera extrinsics against the shot's masks,
//!   keypoints and flow, rendering candidates with [`raster`].
//! - [`refine`]: composite over the environment and run masked partial denoising.
//! - [`metrics`]: MPJPE, pixel accuracy and IoU.
//!
//! [`body`] holds the parametric body model and skinning, [`geom`] the shared
//! rotation and camera math, and [`synth`] a procedural scene generator used
//! as a ground-truth oracle.

pub mod body;
pub mod camopt;
mod error;
pub mod geom;
pub mod io;
pub mod metrics;
pub mod raster;
pub mod refine;
pub mod retarget;
pub mod synth;

pub use error::{Error, Result};

// The guide's code listings are compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/skinning.md")]
    mod skinning {}
    #[doc = include_str!("../../../book/src/retargeting.md")]
    mod retargeting {}
    #[doc = include_str!("../../../book/src/rendering.md")]
    mod rendering {}
    #[doc = include_str!("../../../book/src/camera-optimization.md")]
    mod camera_optimization {}
    #[doc = include_str!("../../../book/src/refinement.md")]
    mod refinement {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/synthetic-scenes.md")]
    mod synthetic_scenes {}
}
