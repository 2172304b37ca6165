//! Semantic map-based localization.
//!
//! The crate localizes a camera against a semantically labeled triangle mesh:
//! virtual views of the mesh are rendered at predicted poses and directly
//! aligned, coarse-to-fine, against per-pixel class-probability images coming
//! from the camera, with odometry fused over a sliding keyframe window.
//!
//! The easiest way to explore the crate is through its runnable examples
//! (`cargo run --release -p semloc --example <name>`):
//!
//! | example                | shows                                              |
//! |------------------------|----------------------------------------------------|
//! | `render_preview`       | rendering labeled views + depth from a scene mesh  |
//! | `generate_scene`       | synthetic street scenes, frames, noisy odometry    |
//! | `align_single_frame`   | recovering a perturbed pose by direct alignment    |
//! | `track_sequence`       | windowed tracking over a full synthetic drive      |
//! | `pf_baseline`          | the particle-filter baseline on the same drive     |
//! | `class_dropout`        | how dropping map classes degrades accuracy         |
//! | `evaluate_trajectory`  | error metrics, summaries and CDF tables            |
//!
//! The same functionality is scriptable through the thin `semloc` binary
//! (`generate`, `localize`, `pf`, `eval` subcommands).

pub mod align;
pub mod baseline_pf;
pub mod cli;
pub mod eval;
pub mod geom;
pub mod render;
pub mod scenegen;
pub mod semantics;
pub mod window;

pub use geom::{CameraIntrinsics, GeomError, Pose, Twist};
pub use render::{RenderConfig, RenderedView, SemanticMesh, Triangle};
pub use semantics::{ClassTable, LabelImage, LogitsImage, LogitsPyramid, SemanticsError};
