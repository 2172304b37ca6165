//! Semantic particle-filter baseline: localizes by rendering low-resolution
//! label views at particle poses and scoring them against the camera's
//! segmentation, for head-to-head comparison with the alignment engine on
//! identical inputs.

use crate::geom::{exp_map, CameraIntrinsics, Pose, Twist};
use crate::render::{render, RenderConfig, SemanticMesh};
use crate::semantics::LabelImage;
use nalgebra::{Quaternion, UnitQuaternion, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub struct Particle {
    pub pose: Pose,
    /// Non-negative; the filter keeps the set normalized to sum 1.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfConfig {
    pub particle_count: usize,
    /// Fraction of highest-weight particles averaged into the estimate.
    pub best_fraction: f64,
    /// Per-frame process noise std-devs, twist order (meters, radians).
    /// Reported alongside any comparison results: the reference system never
    /// published its values, so these are this artifact's choice.
    pub process_sigma: [f64; 6],
    /// Pyramid halvings applied before scoring (2 = quarter resolution).
    pub score_level: usize,
    /// Frames between scored (keyframe) steps, matching the engine cadence.
    pub keyframe_stride: usize,
    pub seed: u64,
}

impl Default for PfConfig {
    fn default() -> Self {
        PfConfig {
            particle_count: 500,
            best_fraction: 0.10,
            process_sigma: [0.03, 0.03, 0.015, 0.003, 0.003, 0.006],
            score_level: 2,
            keyframe_stride: 5,
            seed: 0,
        }
    }
}

/// Keeps every 2^level-th pixel starting at the top-left corner, matching the
/// renderer's own downscale convention, so a subsampled camera frame and a
/// low-resolution render sample comparable rays.
pub fn subsample_labels(frame: &LabelImage, level: usize) -> LabelImage {
    let step = 1usize << level;
    let (w, h) = (frame.width as usize >> level, frame.height as usize >> level);
    let mut labels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            labels.push(frame.labels[y * step * frame.width as usize + x * step]);
        }
    }
    LabelImage::new(w as u32, h as u32, labels).expect("subsampled dimensions are consistent")
}

/// Fraction of non-background pixels rendered at the particle pose whose
/// label matches the frame's label at the same pixel. `k` and `frame` must
/// already be at the scoring resolution. An empty render (all background)
/// scores 0.
pub fn score_particle(
    mesh: &SemanticMesh,
    k: &CameraIntrinsics,
    pose: &Pose,
    frame: &LabelImage,
    background_id: u8,
) -> f64 {
    let view = render(mesh, k, pose, background_id, &RenderConfig::default());
    let mut rendered = 0usize;
    let mut matched = 0usize;
    for (r, f) in view.labels.labels.iter().zip(&frame.labels) {
        if *r != background_id {
            rendered += 1;
            if r == f {
                matched += 1;
            }
        }
    }
    if rendered == 0 {
        0.0
    } else {
        matched as f64 / rendered as f64
    }
}

/// Moves every particle by `odom_step` followed by a seeded Gaussian twist
/// perturbation. Zero sigmas and identity odometry leave poses untouched.
pub fn propagate_particles(
    particles: &mut [Particle],
    odom_step: &Pose,
    sigma: &[f64; 6],
    rng: &mut ChaCha8Rng,
) {
    let gauss: Vec<Normal<f64>> =
        sigma.iter().map(|&s| Normal::new(0.0, s.max(0.0)).expect("sigma >= 0")).collect();
    let all_zero = sigma.iter().all(|&s| s == 0.0);
    for p in particles.iter_mut() {
        let stepped = p.pose.compose(odom_step);
        p.pose = if all_zero {
            stepped
        } else {
            let eps = Vector6::from_iterator(gauss.iter().map(|g| g.sample(rng)));
            stepped.compose(&exp_map(&Twist(eps)))
        };
    }
}

fn normalize_weights(particles: &mut [Particle]) {
    let sum: f64 = particles.iter().map(|p| p.weight).sum();
    if sum <= 0.0 || !sum.is_finite() {
        // Information-free frame (e.g. all scores zero): fall back to uniform
        // rather than dividing by zero.
        let u = 1.0 / particles.len() as f64;
        for p in particles.iter_mut() {
            p.weight = u;
        }
    } else {
        for p in particles.iter_mut() {
            p.weight /= sum;
        }
    }
}

fn effective_sample_size(particles: &[Particle]) -> f64 {
    1.0 / particles.iter().map(|p| p.weight * p.weight).sum::<f64>()
}

/// Systematic (low-variance) resampling: one uniform draw positions a comb of
/// `n` equally spaced pointers over the cumulative weights. Preserves the
/// particle count and resets weights to uniform.
pub fn systematic_resample(particles: &mut Vec<Particle>, rng: &mut ChaCha8Rng) {
    use rand::Rng;
    let n = particles.len();
    let u0: f64 = rng.gen_range(0.0..1.0 / n as f64);
    let mut out = Vec::with_capacity(n);
    let mut cumulative = particles[0].weight;
    let mut i = 0usize;
    for j in 0..n {
        let target = u0 + j as f64 / n as f64;
        while cumulative < target && i + 1 < n {
            i += 1;
            cumulative += particles[i].weight;
        }
        out.push(Particle { pose: particles[i].pose, weight: 1.0 / n as f64 });
    }
    *particles = out;
}

/// One scored filter step: propagate with process noise, reweight every
/// particle by its rendered-view match score, normalize, and resample
/// systematically when the effective sample size drops below half the
/// particle count. `k` is the full-resolution intrinsics; the frame is
/// subsampled to the configured scoring level internally.
pub fn pf_step(
    particles: &mut Vec<Particle>,
    odom_step: &Pose,
    frame: &LabelImage,
    mesh: &SemanticMesh,
    k: &CameraIntrinsics,
    background_id: u8,
    config: &PfConfig,
    rng: &mut ChaCha8Rng,
) {
    propagate_particles(particles, odom_step, &config.process_sigma, rng);
    let k_low = k.at_level(config.score_level);
    let frame_low = subsample_labels(frame, config.score_level);
    let scores: Vec<f64> = particles
        .par_iter()
        .map(|p| score_particle(mesh, &k_low, &p.pose, &frame_low, background_id))
        .collect();
    for (p, s) in particles.iter_mut().zip(&scores) {
        p.weight *= s;
    }
    normalize_weights(particles);
    if effective_sample_size(particles) < particles.len() as f64 / 2.0 {
        systematic_resample(particles, rng);
    }
}

/// Mean pose of the highest-weight `best_fraction` of the set (ties broken
/// by particle index): arithmetic mean translation, chordal mean rotation
/// via sign-aligned quaternion averaging.
pub fn pf_estimate(particles: &[Particle], config: &PfConfig) -> Pose {
    let mut order: Vec<usize> = (0..particles.len()).collect();
    order.sort_by(|&a, &b| {
        particles[b].weight.partial_cmp(&particles[a].weight).expect("finite weights")
    });
    let keep = ((config.best_fraction * particles.len() as f64).ceil() as usize)
        .clamp(1, particles.len());

    let mut translation = nalgebra::Vector3::zeros();
    let mut quat_sum = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    let mut reference: Option<Quaternion<f64>> = None;
    for &i in order.iter().take(keep) {
        let p = &particles[i];
        translation += p.pose.translation;
        let q = UnitQuaternion::from_matrix(&p.pose.rotation).into_inner();
        let q = match &reference {
            None => {
                reference = Some(q);
                q
            }
            // Quaternions double-cover rotations: flip any sample on the far
            // hemisphere before averaging so q and -q average to q.
            Some(r) => {
                if q.dot(r) < 0.0 {
                    -q
                } else {
                    q
                }
            }
        };
        quat_sum += q;
    }
    let mean_q = UnitQuaternion::from_quaternion(quat_sum);
    Pose::new(mean_q.to_rotation_matrix().into_inner(), translation / keep as f64)
}

/// Drives the filter over a frame sequence with the keyframe cadence used by
/// the alignment engine: every frame propagates the set by the measured
/// odometry step, every `keyframe_stride`-th frame also scores and resamples.
pub struct PfTracker {
    mesh: SemanticMesh,
    k: CameraIntrinsics,
    background_id: u8,
    config: PfConfig,
    pub particles: Vec<Particle>,
    rng: ChaCha8Rng,
    frame_index: usize,
}

impl PfTracker {
    pub fn new(
        mesh: SemanticMesh,
        k: CameraIntrinsics,
        background_id: u8,
        config: PfConfig,
        init_pose: Pose,
    ) -> Self {
        let n = config.particle_count.max(1);
        let particles = vec![Particle { pose: init_pose, weight: 1.0 / n as f64 }; n];
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        PfTracker { mesh, k, background_id, config, particles, rng, frame_index: 0 }
    }

    /// Feeds one frame and returns the current pose estimate.
    pub fn process_frame(&mut self, frame: &LabelImage, odom_step: &Pose) -> Pose {
        let scored = self.frame_index % self.config.keyframe_stride == 0;
        let step = if self.frame_index == 0 { Pose::identity() } else { *odom_step };
        if scored {
            pf_step(
                &mut self.particles,
                &step,
                frame,
                &self.mesh,
                &self.k,
                self.background_id,
                &self.config,
                &mut self.rng,
            );
        } else {
            propagate_particles(
                &mut self.particles,
                &step,
                &self.config.process_sigma,
                &mut self.rng,
            );
        }
        self.frame_index += 1;
        pf_estimate(&self.particles, &self.config)
    }
}
