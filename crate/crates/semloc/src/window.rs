//! Keyframe window management: odometry-coupled joint optimization over a
//! sliding set of keyframes, pose extrapolation for intermediate frames, and
//! the trajectory/odometry CSV formats used by the tools.

use crate::align::{
    align_multiscale_from, assemble_level, AlignError, AlignmentConfig, AlignmentProblem,
    SETTLE_STEP_MAX,
};
use crate::geom::{boxminus, exp_map, log_map, CameraIntrinsics, GeomError, Pose, Twist};
use crate::render::{render, RenderConfig, SemanticMesh};
use crate::semantics::{labels_to_logits, LabelImage, LogitsImage, LogitsPyramid};
use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use std::io::{BufRead, Write};
use std::path::Path;

/// Measured relative pose between two consecutive frames (or keyframes),
/// with per-component weights in 1/standard-deviation units, translation
/// components first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryMeasurement {
    pub rel: Pose,
    pub weight: Vector6<f64>,
}

/// One keyframe of the sliding window: the virtual view rendered at its
/// render pose, the camera frame's logits pyramid (both inside `problem`),
/// and the current twist estimate `xi` relating the estimated camera pose to
/// the render pose by `estimated = render_pose * exp(xi)^-1`.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: usize,
    pub render_pose: Pose,
    pub problem: AlignmentProblem,
    pub twist: Twist,
}

impl Keyframe {
    /// The estimated camera pose in the map frame implied by the current
    /// twist.
    pub fn estimated_pose(&self) -> Pose {
        self.render_pose.compose(&exp_map(&self.twist).inverse())
    }

    /// The relative pose handed to the semantic residuals (render camera in
    /// frame camera coordinates); equals `exp(twist)`.
    fn rel(&self) -> Pose {
        exp_map(&self.twist)
    }
}

/// How each keyframe's semantic cost is scaled before the lambda weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemanticNormalization {
    /// Sum of squared residuals as-is; lambda's meaning then depends on how
    /// many edge pixels the view happens to have.
    Raw,
    /// Mean squared residual (sum divided by the kept-row count), making the
    /// semantic and odometry terms comparable across scenes and levels.
    PerPixelMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowConfig {
    /// Maximum number of keyframes optimized jointly.
    pub window_size: usize,
    /// Weight of the semantic term; `1 - lambda` weighs odometry.
    pub lambda: f64,
    /// Frames between keyframes.
    pub keyframe_stride: usize,
    pub normalization: SemanticNormalization,
    /// Pyramid schedule and damping shared with single-frame alignment.
    pub align: AlignmentConfig,
    /// Diagonal odometry weights (1/std-dev per twist component) applied to
    /// keyframe-to-keyframe measurements.
    pub w_odom: Vector6<f64>,
    /// Consecutive non-converged keyframe optimizations before the engine
    /// declares tracking lost.
    pub lost_after: usize,
    /// Damping added to the joint normal-equation diagonal. Stiffer than the
    /// single-frame default because the stacked system mixes semantic blocks
    /// (whose effective curvature the label lattice understates) with exact
    /// odometry blocks; this contracts the coupled iteration without
    /// measurably slowing well-posed convergence.
    pub damping: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_size: 8,
            lambda: 0.65,
            keyframe_stride: 5,
            normalization: SemanticNormalization::PerPixelMean,
            align: AlignmentConfig::default(),
            w_odom: Vector6::new(10.0, 10.0, 10.0, 50.0, 50.0, 50.0),
            lost_after: 3,
            damping: 30.0,
        }
    }
}

/// Errors from windowed optimization and the localization engine.
#[derive(Debug, thiserror::Error)]
pub enum WindowError {
    #[error("window inputs inconsistent: {0}")]
    Mismatch(String),
    #[error("joint solver produced a non-finite or unsolvable update at level {level}")]
    SolverFailure { level: usize },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error("engine not initialized")]
    NotInitialized,
    #[error("tracking lost after {consecutive} consecutive non-converged keyframe optimizations")]
    LostTracking { consecutive: usize },
}

/// Weighted odometry residual between two estimated keyframe poses: the
/// boxminus discrepancy of the estimated relative motion from the measured
/// one, scaled componentwise by the measurement weights. Its squared norm is
/// the pair's contribution to the odometry cost.
pub fn odometry_residual(
    est_k: &Pose,
    est_k1: &Pose,
    meas: &OdometryMeasurement,
) -> Result<Vector6<f64>, GeomError> {
    let rel_est = est_k.inverse().compose(est_k1);
    let err = boxminus(&meas.rel, &rel_est)?;
    Ok(meas.weight.component_mul(&err.0))
}

/// Per-keyframe outcome of one window optimization.
#[derive(Debug, Clone, Copy)]
pub struct KeyframeReport {
    pub id: usize,
    /// Kept semantic rows at the finest optimized level (final pose).
    pub semantic_rows: usize,
    /// False when the keyframe contributed no semantic block (blank or
    /// near-blank view) and rode on odometry alone.
    pub semantically_constrained: bool,
}

/// Outcome of one `optimize_window` call.
#[derive(Debug, Clone)]
pub struct WindowReport {
    /// Total windowed cost at the finest optimized level before/after.
    pub initial_cost: f64,
    pub final_cost: f64,
    /// True when the update was discarded because it raised the total cost;
    /// the window then keeps its previous twists.
    pub reverted: bool,
    /// Largest per-keyframe twist update in the last joint step.
    pub last_step: f64,
    pub keyframes: Vec<KeyframeReport>,
    /// Solve succeeded, the final joint step had settled under the
    /// single-frame bound, and at least one keyframe held a semantic block.
    pub converged: bool,
}

/// Minimum kept rows for a keyframe's semantic block to enter the joint
/// system, mirroring the single-frame degeneracy rule.
const MIN_SEMANTIC_ROWS: usize = 6;

/// Central finite-difference step for odometry Jacobians with respect to
/// left-multiplicative twist increments.
const ODOM_FD_STEP: f64 = 1e-6;

/// Upper bound on optimization rounds per keyframe event. Nominal tracking
/// settles in one round; the budget only matters while absorbing a large
/// initialization offset, when relinearizing between rounds lets the window
/// walk a multi-meter correction before the lost-tracking counter reacts.
const SETTLE_ROUNDS_MAX: usize = 8;

fn semantic_scale(config: &WindowConfig, rows: usize) -> f64 {
    match config.normalization {
        SemanticNormalization::Raw => 1.0,
        SemanticNormalization::PerPixelMean => 1.0 / rows as f64,
    }
}

/// Total windowed cost at one pyramid level: lambda-weighted (normalized)
/// semantic terms plus (1 - lambda)-weighted squared odometry residuals.
fn total_cost_at_level(
    window: &[Keyframe],
    rels: &[Pose],
    odom: &[OdometryMeasurement],
    config: &WindowConfig,
    level: usize,
) -> Result<f64, WindowError> {
    let mut cost = 0.0;
    for (kf, rel) in window.iter().zip(rels) {
        let sys = assemble_level(&kf.problem, level, rel, &config.align);
        if sys.rows_used >= MIN_SEMANTIC_ROWS {
            cost += config.lambda * semantic_scale(config, sys.rows_used) * sys.cost;
        }
    }
    for (j, meas) in odom.iter().enumerate() {
        let est_k = window[j].render_pose.compose(&rels[j].inverse());
        let est_k1 = window[j + 1].render_pose.compose(&rels[j + 1].inverse());
        let rho = odometry_residual(&est_k, &est_k1, meas)?;
        cost += (1.0 - config.lambda) * rho.norm_squared();
    }
    Ok(cost)
}

/// Odometry residual expressed in terms of the per-keyframe relative poses
/// `rel = exp(twist)` that the optimizer iterates on.
fn odometry_residual_from_rels(
    window: &[Keyframe],
    rel_k: &Pose,
    rel_k1: &Pose,
    j: usize,
    meas: &OdometryMeasurement,
) -> Result<Vector6<f64>, GeomError> {
    let est_k = window[j].render_pose.compose(&rel_k.inverse());
    let est_k1 = window[j + 1].render_pose.compose(&rel_k1.inverse());
    odometry_residual(&est_k, &est_k1, meas)
}

/// Joint damped Gauss-Newton over the stacked per-keyframe twists,
/// coarse-to-fine over the same pyramid schedule as single-frame alignment.
/// Exact decoupling limits: `lambda == 1` dispatches to per-keyframe
/// single-frame alignment, `lambda == 0` to dead reckoning along the
/// odometry chain anchored at the first keyframe's current estimate. If the
/// full update would end with a higher total cost than it started with, the
/// window reverts to its previous twists and reports that.
pub fn optimize_window(
    window: &mut [Keyframe],
    odom: &[OdometryMeasurement],
    config: &WindowConfig,
) -> Result<WindowReport, WindowError> {
    if window.is_empty() {
        return Err(WindowError::Mismatch("window must contain at least one keyframe".into()));
    }
    if odom.len() + 1 != window.len() {
        return Err(WindowError::Mismatch(format!(
            "expected {} odometry measurements for {} keyframes, got {}",
            window.len() - 1,
            window.len(),
            odom.len()
        )));
    }
    if !(0.0..=1.0).contains(&config.lambda) {
        return Err(WindowError::Mismatch(format!("lambda {} outside [0, 1]", config.lambda)));
    }

    let finest = config.align.levels_total - config.align.levels_used;
    let start_rels: Vec<Pose> = window.iter().map(|kf| kf.rel()).collect();
    let initial_cost = total_cost_at_level(window, &start_rels, odom, config, finest)?;

    // Decoupling limits are handled exactly rather than through the joint
    // system, where the shared damping would perturb them at the last digit.
    if config.lambda == 1.0 {
        let mut last_step = 0.0f64;
        let mut all_converged = true;
        for kf in window.iter_mut() {
            let result = align_multiscale_from(&kf.problem, exp_map(&kf.twist), &config.align);
            kf.twist = log_map(&result.rel)?;
            all_converged &= result.converged;
            if let Some(report) = result.levels.last() {
                last_step = last_step.max(report.stats.last_step);
            }
        }
        return finish_window_report(
            window,
            odom,
            config,
            finest,
            initial_cost,
            start_rels,
            last_step,
            all_converged,
        );
    }
    if config.lambda == 0.0 {
        let mut est = window[0].estimated_pose();
        for j in 0..odom.len() {
            est = est.compose(&odom[j].rel);
            let rel = est.inverse().compose(&window[j + 1].render_pose);
            window[j + 1].twist = log_map(&rel)?;
        }
        return finish_window_report(
            window,
            odom,
            config,
            finest,
            initial_cost,
            start_rels,
            0.0,
            true,
        );
    }

    let n = window.len();
    let mut rels = start_rels.clone();
    let mut last_step = f64::INFINITY;
    let mut solver_ok = true;
    'levels: for level in (finest..config.align.levels_total).rev() {
        for _ in 0..config.align.iters_per_level {
            let mut h = DMatrix::<f64>::zeros(6 * n, 6 * n);
            let mut b = DVector::<f64>::zeros(6 * n);
            for (k, kf) in window.iter().enumerate() {
                let sys = assemble_level(&kf.problem, level, &rels[k], &config.align);
                if sys.rows_used < MIN_SEMANTIC_ROWS {
                    continue;
                }
                let s = config.lambda * semantic_scale(config, sys.rows_used);
                let mut block = h.view_mut((6 * k, 6 * k), (6, 6));
                block += sys.h * s;
                let mut rows = b.rows_mut(6 * k, 6);
                rows += sys.b * s;
            }
            for (j, meas) in odom.iter().enumerate() {
                let rho = odometry_residual_from_rels(window, &rels[j], &rels[j + 1], j, meas)?;
                let mut jk = Matrix6::<f64>::zeros();
                let mut jk1 = Matrix6::<f64>::zeros();
                for i in 0..6 {
                    let mut step = Vector6::zeros();
                    step[i] = ODOM_FD_STEP;
                    let plus = exp_map(&Twist(step)).compose(&rels[j]);
                    let minus = exp_map(&Twist(-step)).compose(&rels[j]);
                    let rp = odometry_residual_from_rels(window, &plus, &rels[j + 1], j, meas)?;
                    let rm = odometry_residual_from_rels(window, &minus, &rels[j + 1], j, meas)?;
                    jk.set_column(i, &((rp - rm) / (2.0 * ODOM_FD_STEP)));
                    let plus1 = exp_map(&Twist(step)).compose(&rels[j + 1]);
                    let minus1 = exp_map(&Twist(-step)).compose(&rels[j + 1]);
                    let rp1 = odometry_residual_from_rels(window, &rels[j], &plus1, j, meas)?;
                    let rm1 = odometry_residual_from_rels(window, &rels[j], &minus1, j, meas)?;
                    jk1.set_column(i, &((rp1 - rm1) / (2.0 * ODOM_FD_STEP)));
                }
                let w = 1.0 - config.lambda;
                let mut kk = h.view_mut((6 * j, 6 * j), (6, 6));
                kk += jk.transpose() * jk * w;
                let mut k1k1 = h.view_mut((6 * (j + 1), 6 * (j + 1)), (6, 6));
                k1k1 += jk1.transpose() * jk1 * w;
                let mut kk1 = h.view_mut((6 * j, 6 * (j + 1)), (6, 6));
                kk1 += jk.transpose() * jk1 * w;
                let mut k1k = h.view_mut((6 * (j + 1), 6 * j), (6, 6));
                k1k += jk1.transpose() * jk * w;
                let mut bk = b.rows_mut(6 * j, 6);
                bk += jk.transpose() * rho * w;
                let mut bk1 = b.rows_mut(6 * (j + 1), 6);
                bk1 += jk1.transpose() * rho * w;
            }
            for d in 0..6 * n {
                h[(d, d)] += config.damping;
            }
            let delta = match h.clone().cholesky() {
                Some(chol) => chol.solve(&b),
                None => {
                    solver_ok = false;
                    break 'levels;
                }
            };
            if !delta.iter().all(|v| v.is_finite()) {
                return Err(WindowError::SolverFailure { level });
            }
            for (k, rel) in rels.iter_mut().enumerate() {
                let block = Twist(-Vector6::from_iterator(delta.rows(6 * k, 6).iter().cloned()));
                *rel = exp_map(&block).compose(rel);
            }
            // The settle measure is the largest per-keyframe update, not the
            // stacked norm: healthy lattice wobble is a per-keyframe
            // phenomenon, and a stacked norm would scale with window size
            // and misread a full window of small wobbles as divergence.
            last_step = (0..n).map(|k| delta.rows(6 * k, 6).norm()).fold(0.0, f64::max);
            if last_step < config.align.early_exit_step {
                break;
            }
        }
    }

    for (kf, rel) in window.iter_mut().zip(&rels) {
        kf.twist = log_map(rel)?;
    }
    finish_window_report(
        window,
        odom,
        config,
        finest,
        initial_cost,
        start_rels,
        last_step,
        solver_ok,
    )
}

/// Shared epilogue: evaluate the final cost, revert if it exceeds the
/// initial one, and collect the per-keyframe reports.
#[allow(clippy::too_many_arguments)]
fn finish_window_report(
    window: &mut [Keyframe],
    odom: &[OdometryMeasurement],
    config: &WindowConfig,
    finest: usize,
    initial_cost: f64,
    start_rels: Vec<Pose>,
    last_step: f64,
    solver_ok: bool,
) -> Result<WindowReport, WindowError> {
    let rels: Vec<Pose> = window.iter().map(|kf| kf.rel()).collect();
    let mut final_cost = total_cost_at_level(window, &rels, odom, config, finest)?;
    let mut reverted = false;
    if !(final_cost <= initial_cost) {
        for (kf, rel) in window.iter_mut().zip(&start_rels) {
            kf.twist = log_map(rel)?;
        }
        final_cost = initial_cost;
        reverted = true;
    }
    let keyframes: Vec<KeyframeReport> = window
        .iter()
        .map(|kf| {
            let sys = assemble_level(&kf.problem, finest, &kf.rel(), &config.align);
            KeyframeReport {
                id: kf.id,
                semantic_rows: sys.rows_used,
                semantically_constrained: sys.rows_used >= MIN_SEMANTIC_ROWS,
            }
        })
        .collect();
    // Converged means settled, not merely accepted: the last candidate step
    // stayed under the single-frame settle bound and at least one keyframe
    // is semantically anchored to the map. A reverted call still counts when
    // its candidate step was tiny — that is a window parked at the cost
    // floor, where label-lattice noise makes the exact cost comparison
    // wobble, not a window being dragged away. A window with no semantic
    // anchor is never converged: it is dead reckoning with nothing tying it
    // to the map, however small its steps.
    let anchored = keyframes.iter().any(|k| k.semantically_constrained);
    let converged = solver_ok && anchored && last_step < SETTLE_STEP_MAX;
    Ok(WindowReport { initial_cost, final_cost, reverted, last_step, keyframes, converged })
}

/// What the engine receives for one camera frame: either class probabilities
/// from a segmentation front end, or a hard label image that the engine
/// converts to logits itself.
#[derive(Debug, Clone)]
pub enum FrameObservation {
    Logits(LogitsImage),
    Labels(LabelImage),
}

/// Online localizer: owns the map mesh, renders a virtual view for every
/// keyframe at the odometry-predicted pose, optimizes a sliding window of
/// keyframes jointly, and extrapolates intermediate frames with raw
/// odometry. Single-writer: `process_frame` calls are serialized.
pub struct LocalizationEngine {
    mesh: SemanticMesh,
    intrinsics: CameraIntrinsics,
    config: WindowConfig,
    render_config: RenderConfig,
    /// Confidence given to the winning class when converting label images
    /// into logits.
    pub label_confidence: f64,
    num_classes: u8,
    state: Option<EngineState>,
}

struct EngineState {
    window: Vec<Keyframe>,
    /// Keyframe-to-keyframe measurements; `odom[j]` couples `window[j]` to
    /// `window[j+1]`.
    odom: Vec<OdometryMeasurement>,
    /// Optimized pose of the newest keyframe.
    last_kf_pose: Pose,
    /// Accumulated odometry since the newest keyframe.
    odom_acc: Pose,
    frame_index: usize,
    consecutive_failures: usize,
    /// Poses of keyframes that slid out of the window, frozen at their value
    /// at eviction time.
    evicted: Vec<(usize, Pose)>,
    lost: bool,
    /// Report of the most recent window optimization, for diagnostics.
    last_report: Option<WindowReport>,
}

impl LocalizationEngine {
    pub fn new(
        mesh: SemanticMesh,
        num_classes: u8,
        intrinsics: CameraIntrinsics,
        config: WindowConfig,
        render_config: RenderConfig,
    ) -> Self {
        LocalizationEngine {
            mesh,
            intrinsics,
            config,
            render_config,
            label_confidence: 0.9,
            num_classes,
            state: None,
        }
    }

    /// Arms (or re-arms) the engine at the given map-frame pose. Any
    /// existing window is discarded.
    pub fn initialize(&mut self, pose: Pose) {
        self.state = Some(EngineState {
            window: Vec::new(),
            odom: Vec::new(),
            last_kf_pose: pose,
            odom_acc: Pose::identity(),
            frame_index: 0,
            consecutive_failures: 0,
            evicted: Vec::new(),
            lost: false,
            last_report: None,
        });
    }

    pub fn is_initialized(&self) -> bool {
        self.state.is_some()
    }

    /// Number of keyframes currently in the window.
    pub fn window_len(&self) -> usize {
        self.state.as_ref().map_or(0, |s| s.window.len())
    }

    /// Keyframe poses frozen at eviction time, oldest first.
    pub fn evicted_keyframes(&self) -> &[(usize, Pose)] {
        self.state.as_ref().map_or(&[], |s| &s.evicted)
    }

    /// Current estimates for the keyframes still in the window.
    pub fn window_keyframes(&self) -> Vec<(usize, Pose)> {
        self.state.as_ref().map_or_else(Vec::new, |s| {
            s.window.iter().map(|kf| (kf.id, kf.estimated_pose())).collect()
        })
    }

    pub fn last_report(&self) -> Option<&WindowReport> {
        self.state.as_ref().and_then(|s| s.last_report.as_ref())
    }

    /// Feeds one frame. `odom_step` is the measured motion from the previous
    /// frame to this one (identity for the first frame). Keyframes (every
    /// `keyframe_stride`-th frame, starting with the first) render a virtual
    /// view at the predicted pose and trigger a window optimization; other
    /// frames return the newest keyframe pose composed with the odometry
    /// accumulated since it.
    pub fn process_frame(
        &mut self,
        observation: FrameObservation,
        odom_step: &Pose,
    ) -> Result<Pose, WindowError> {
        let logits = match observation {
            FrameObservation::Logits(logits) => logits,
            FrameObservation::Labels(labels) => {
                labels_to_logits(&labels, self.num_classes, self.label_confidence)
                    .map_err(|e| WindowError::Mismatch(e.to_string()))?
            }
        };
        let state = self.state.as_mut().ok_or(WindowError::NotInitialized)?;
        if state.lost {
            return Err(WindowError::LostTracking { consecutive: state.consecutive_failures });
        }
        let frame_index = state.frame_index;
        state.frame_index += 1;
        if frame_index > 0 {
            state.odom_acc = state.odom_acc.compose(odom_step);
        }
        if frame_index % self.config.keyframe_stride != 0 {
            return Ok(state.last_kf_pose.compose(&state.odom_acc));
        }

        // Keyframe path: render at the predicted pose, push, optimize.
        let predicted = state.last_kf_pose.compose(&state.odom_acc);
        let view = render(&self.mesh, &self.intrinsics, &predicted, 0, &self.render_config);
        let pyramid = LogitsPyramid::build(logits, self.config.align.levels_total)
            .map_err(|e| WindowError::Mismatch(e.to_string()))?;
        let problem = AlignmentProblem::new(view, &self.intrinsics, pyramid, Pose::identity())?;
        let keyframe = Keyframe {
            id: frame_index,
            render_pose: predicted,
            problem,
            twist: Twist(Vector6::zeros()),
        };
        if !state.window.is_empty() {
            state.odom.push(OdometryMeasurement {
                rel: state.odom_acc,
                weight: self.config.w_odom,
            });
        }
        state.window.push(keyframe);
        state.odom_acc = Pose::identity();
        if state.window.len() > self.config.window_size {
            let old = state.window.remove(0);
            state.evicted.push((old.id, old.estimated_pose()));
            state.odom.remove(0);
        }

        if state.window.len() >= 2 {
            let mut report = optimize_window(&mut state.window, &state.odom, &self.config)?;
            let mut rounds = 1;
            while !report.converged && !report.reverted && rounds < SETTLE_ROUNDS_MAX {
                report = optimize_window(&mut state.window, &state.odom, &self.config)?;
                rounds += 1;
            }
            if report.converged {
                state.consecutive_failures = 0;
            } else {
                state.consecutive_failures += 1;
            }
            state.last_report = Some(report);
            if state.consecutive_failures >= self.config.lost_after {
                state.lost = true;
                return Err(WindowError::LostTracking {
                    consecutive: state.consecutive_failures,
                });
            }
        }
        let newest = state.window.last().expect("window just received a keyframe");
        state.last_kf_pose = newest.estimated_pose();
        Ok(state.last_kf_pose)
    }
}

/// Errors from the trajectory/odometry CSV readers.
#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

const POSE_CSV_HEADER: &str = "frame_id,tx,ty,tz,qx,qy,qz,qw";

fn write_pose_rows<W: Write>(out: &mut W, rows: &[(usize, Pose)]) -> std::io::Result<()> {
    writeln!(out, "{POSE_CSV_HEADER}")?;
    for (frame_id, pose) in rows {
        let (t, q) = pose.quaternion_coords();
        write!(out, "{frame_id}")?;
        for v in t.iter().chain(q.iter()) {
            write!(out, ",{v:.8e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn read_pose_rows<R: BufRead>(input: R) -> Result<Vec<(usize, Pose)>, CsvError> {
    let mut rows = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with(POSE_CSV_HEADER) || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 8 {
            return Err(CsvError::Parse {
                line: idx + 1,
                detail: format!("expected 8 comma-separated fields, found {}", fields.len()),
            });
        }
        let parse = |i: usize| -> Result<f64, CsvError> {
            fields[i].parse().map_err(|_| CsvError::Parse {
                line: idx + 1,
                detail: format!("bad number {:?}", fields[i]),
            })
        };
        let frame_id: usize = fields[0].parse().map_err(|_| CsvError::Parse {
            line: idx + 1,
            detail: format!("bad frame id {:?}", fields[0]),
        })?;
        let t = [parse(1)?, parse(2)?, parse(3)?];
        let q = [parse(4)?, parse(5)?, parse(6)?, parse(7)?];
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.5 && norm.is_finite()) {
            return Err(CsvError::Parse { line: idx + 1, detail: format!("degenerate quaternion norm {norm}") });
        }
        rows.push((frame_id, Pose::from_quaternion_coords(t, q)));
    }
    Ok(rows)
}

/// Writes absolute poses as `frame_id,tx,ty,tz,qx,qy,qz,qw` rows (9
/// significant digits, quaternion normalized with non-negative w). Output is
/// byte-identical across runs for identical input.
pub fn save_trajectory(path: &Path, rows: &[(usize, Pose)]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pose_rows(&mut out, rows)
}

pub fn load_trajectory(path: &Path) -> Result<Vec<(usize, Pose)>, CsvError> {
    read_pose_rows(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Writes per-frame relative poses in the same CSV layout as trajectories;
/// row k holds the motion from frame k−1 to frame k (row 0 is identity).
pub fn save_odometry(path: &Path, steps: &[Pose]) -> std::io::Result<()> {
    let rows: Vec<(usize, Pose)> = steps.iter().copied().enumerate().collect();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pose_rows(&mut out, &rows)
}

/// Reads relative pose steps; rows must cover frame ids 0..n contiguously.
pub fn load_odometry(path: &Path) -> Result<Vec<Pose>, CsvError> {
    let rows = read_pose_rows(std::io::BufReader::new(std::fs::File::open(path)?))?;
    for (i, (frame_id, _)) in rows.iter().enumerate() {
        if *frame_id != i {
            return Err(CsvError::Parse {
                line: i + 2,
                detail: format!("expected contiguous frame id {i}, found {frame_id}"),
            });
        }
    }
    Ok(rows.into_iter().map(|(_, p)| p).collect())
}
