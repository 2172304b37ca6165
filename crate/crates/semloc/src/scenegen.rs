//! Deterministic synthetic street scenes: labeled meshes, camera
//! trajectories, segmentation-like frames and noisy odometry.
//!
//! Everything is seeded; the same spec always produces bit-identical output.
//! The map frame is x forward at the street origin, y left, z up; cameras use
//! the usual z-forward/x-right/y-down convention and are mounted level.
//!
//! Streets follow a circular arc (left-curving) of configurable radius. The
//! default urban scene is a closed ring "canyon" with contiguous facades tall
//! enough that no sky is visible from street level. That is deliberate:
//! boundaries against empty background only produce edge pixels on one side,
//! so their residuals pull the optimizer toward the content interior with
//! nothing to balance them, biasing the cost minimum away from ground truth.
//! Two-sided class boundaries cancel pairwise and leave the minimum at the
//! true pose.

use crate::geom::{exp_map, CameraIntrinsics, Pose, Twist};
use crate::render::{render, RenderConfig, SemanticMesh, Triangle};
use crate::semantics::{ClassTable, LabelImage};
use crate::window::OdometryMeasurement;
use nalgebra::{Matrix3, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::f64::consts::PI;

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_ROAD: u8 = 1;
pub const CLASS_SIDEWALK: u8 = 2;
pub const CLASS_MARKING: u8 = 3;
pub const CLASS_POLE: u8 = 4;
pub const CLASS_SIGN: u8 = 5;
pub const CLASS_BUILDING: u8 = 6;
pub const CLASS_NATURE: u8 = 7;

/// The fixed eight-class palette used by every generated scene.
pub fn standard_class_table() -> ClassTable {
    ClassTable::new(
        vec![
            "background".into(),
            "road".into(),
            "sidewalk".into(),
            "marking".into(),
            "pole".into(),
            "sign".into(),
            "building".into(),
            "nature".into(),
        ],
        CLASS_BACKGROUND,
    )
    .expect("static class table is valid")
}

/// Parameters of an arc street scene.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub street_length: f64,
    /// Centerline radius; the street curves left. If the requested extent
    /// covers a full circle the street closes into a ring.
    pub curve_radius: f64,
    pub road_width: f64,
    /// Zero disables sidewalks (and their curbs).
    pub sidewalk_width: f64,
    /// Probability that each 6 m facade segment along the street is built.
    pub building_density: f64,
    /// Dashed center-line segments; also enables the lane edge lines.
    pub marking_count: usize,
    /// Road-crossing marking bands; they anchor the along-street direction,
    /// which dashes and facades constrain only weakly at coarse scales.
    pub crosswalk_count: usize,
    pub pole_count: usize,
    pub sign_count: usize,
    pub nature_count: usize,
    /// Adds a marking strip hidden behind a low wall; used to study what
    /// happens when occluder classes are dropped from the map.
    pub occluded_strip: bool,
    pub seed: u64,
}

impl SceneSpec {
    pub fn urban_street(seed: u64) -> Self {
        SceneSpec {
            street_length: 120.0,
            curve_radius: 25.0,
            road_width: 8.0,
            sidewalk_width: 2.0,
            building_density: 1.0,
            marking_count: 40,
            crosswalk_count: 10,
            pole_count: 10,
            sign_count: 12,
            nature_count: 14,
            occluded_strip: false,
            seed,
        }
    }

    pub fn sparse_rural(seed: u64) -> Self {
        SceneSpec {
            street_length: 120.0,
            curve_radius: 400.0,
            road_width: 7.0,
            sidewalk_width: 0.0,
            building_density: 0.0,
            marking_count: 8,
            crosswalk_count: 1,
            pole_count: 4,
            sign_count: 2,
            nature_count: 16,
            occluded_strip: false,
            seed,
        }
    }

    pub fn markings_only(seed: u64) -> Self {
        SceneSpec {
            street_length: 120.0,
            curve_radius: 25.0,
            road_width: 8.0,
            sidewalk_width: 0.0,
            building_density: 0.0,
            marking_count: 16,
            crosswalk_count: 5,
            pole_count: 0,
            sign_count: 0,
            nature_count: 0,
            occluded_strip: false,
            seed,
        }
    }

    pub fn by_name(name: &str, seed: u64) -> Option<Self> {
        match name {
            "urban-street" => Some(Self::urban_street(seed)),
            "sparse-rural" => Some(Self::sparse_rural(seed)),
            "markings-only" => Some(Self::markings_only(seed)),
            _ => None,
        }
    }
}

/// Maps street coordinates to map coordinates: `s` is arc length along the
/// centerline, `d` the signed lateral offset (positive left, toward the arc
/// center), `z` height. The centerline starts at the origin heading +x.
pub fn street_point(radius: f64, s: f64, d: f64, z: f64) -> Vector3<f64> {
    let theta = s / radius;
    let (sin, cos) = theta.sin_cos();
    Vector3::new((radius - d) * sin, radius - (radius - d) * cos, z)
}

/// Street heading (radians from +x) at arc length `s`.
pub fn street_heading(radius: f64, s: f64) -> f64 {
    s / radius
}

/// Level camera pose standing on the street at (s, d), looking along it.
pub fn street_camera(radius: f64, s: f64, d: f64, height: f64) -> Pose {
    camera_pose(street_point(radius, s, d, height), street_heading(radius, s))
}

struct MeshBuilder {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<Triangle>,
    radius: f64,
}

impl MeshBuilder {
    fn new(radius: f64) -> Self {
        MeshBuilder { vertices: Vec::new(), triangles: Vec::new(), radius }
    }

    fn quad(&mut self, a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>, d: Vector3<f64>, class_id: u8) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&[a, b, c, d]);
        self.triangles.push(Triangle { indices: [base, base + 1, base + 2], class_id });
        self.triangles.push(Triangle { indices: [base, base + 2, base + 3], class_id });
    }

    /// Horizontal strip [s0,s1]x[d0,d1] at height z, subdivided along s so
    /// the flat quads follow the arc closely.
    fn ground_strip(&mut self, s0: f64, s1: f64, d0: f64, d1: f64, z: f64, class_id: u8) {
        let r = self.radius;
        let chunks = ((s1 - s0) / 3.0).ceil().max(1.0) as usize;
        let step = (s1 - s0) / chunks as f64;
        for i in 0..chunks {
            let (a, b) = (s0 + i as f64 * step, s0 + (i + 1) as f64 * step);
            self.quad(
                street_point(r, a, d0, z),
                street_point(r, b, d0, z),
                street_point(r, b, d1, z),
                street_point(r, a, d1, z),
                class_id,
            );
        }
    }

    /// Vertical wall along the street at lateral offset d.
    fn wall(&mut self, s0: f64, s1: f64, d: f64, z0: f64, z1: f64, class_id: u8) {
        let r = self.radius;
        let chunks = ((s1 - s0) / 3.0).ceil().max(1.0) as usize;
        let step = (s1 - s0) / chunks as f64;
        for i in 0..chunks {
            let (a, b) = (s0 + i as f64 * step, s0 + (i + 1) as f64 * step);
            self.quad(
                street_point(r, a, d, z0),
                street_point(r, b, d, z0),
                street_point(r, b, d, z1),
                street_point(r, a, d, z1),
                class_id,
            );
        }
    }

    /// Vertical plate crossing the street at fixed s (faces along the street).
    fn plate(&mut self, s: f64, d0: f64, d1: f64, z0: f64, z1: f64, class_id: u8) {
        let r = self.radius;
        self.quad(
            street_point(r, s, d0, z0),
            street_point(r, s, d1, z0),
            street_point(r, s, d1, z1),
            street_point(r, s, d0, z1),
            class_id,
        );
    }

    /// Four side faces of an upright post with a square cross-section in
    /// street coordinates.
    fn post(&mut self, s: f64, d: f64, half: f64, z0: f64, z1: f64, class_id: u8) {
        self.wall(s - half, s + half, d - half, z0, z1, class_id);
        self.wall(s - half, s + half, d + half, z0, z1, class_id);
        self.plate(s - half, d - half, d + half, z0, z1, class_id);
        self.plate(s + half, d - half, d + half, z0, z1, class_id);
    }
}

/// Builds the street mesh for a spec. Deterministic for a given spec.
pub fn generate_scene(spec: &SceneSpec) -> (SemanticMesh, ClassTable) {
    let table = standard_class_table();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut b = MeshBuilder::new(spec.curve_radius);
    let half_road = spec.road_width / 2.0;
    let len = spec.street_length;
    let curb = 0.12;

    // Street extent: a margin past both trajectory ends, or the whole ring
    // if the circle is short enough to close.
    let circumference = 2.0 * PI * spec.curve_radius;
    let (s0, s1) =
        if circumference <= len + 80.0 { (0.0, circumference) } else { (-40.0, len + 40.0) };

    b.ground_strip(s0, s1, -half_road, half_road, 0.0, CLASS_ROAD);

    let walk_outer = half_road + spec.sidewalk_width;
    if spec.sidewalk_width > 0.0 {
        for side in [-1.0, 1.0] {
            let (d0, d1) = (side * half_road, side * walk_outer);
            b.ground_strip(s0, s1, d0.min(d1), d0.max(d1), curb, CLASS_SIDEWALK);
            // Curb face so no background sliver opens between road and walk.
            b.wall(s0, s1, side * half_road, 0.0, curb, CLASS_SIDEWALK);
            // Apron continuing under the facades, which stand back up to
            // 0.6 m; covers the ground right up to every wall base.
            b.ground_strip(s0, s1, side * walk_outer, side * (walk_outer + 2.4), curb, CLASS_SIDEWALK);
        }
    }

    if spec.marking_count > 0 {
        // Continuous lane edge lines plus the dashed center line.
        for side in [-1.0, 1.0] {
            let d = side * (half_road - 0.5);
            b.ground_strip(s0, s1, d - 0.1, d + 0.1, 0.002, CLASS_MARKING);
        }
        let spacing = len / spec.marking_count as f64;
        for i in 0..spec.marking_count {
            let a = i as f64 * spacing + 0.25 * spacing;
            b.ground_strip(a, a + 2.0, -0.15, 0.15, 0.002, CLASS_MARKING);
        }
        // Parking-bay ticks along both edges and lane arrows: many small,
        // well-separated ground features so no single boundary dominates the
        // coarse-level normal equations.
        let ticks = (len / 3.0) as usize;
        for i in 0..ticks {
            let a = (i as f64 + 0.3) * 3.0;
            for side in [-1.0, 1.0] {
                let d = side * (half_road - 1.0);
                b.ground_strip(a, a + 0.9, d - 0.175, d + 0.175, 0.002, CLASS_MARKING);
            }
        }
        let arrows = (len / 8.0) as usize;
        for i in 0..arrows {
            let a = (i as f64 + 0.4) * 8.0;
            let d = if i % 2 == 0 { -1.75 } else { 1.75 };
            b.ground_strip(a, a + 2.2, d - 0.3, d + 0.3, 0.002, CLASS_MARKING);
        }
    }

    // Crosswalk bands spanning the road.
    if spec.crosswalk_count > 0 {
        let spacing = len / spec.crosswalk_count as f64;
        for i in 0..spec.crosswalk_count {
            let a = (i as f64 + 0.5) * spacing + rng.gen_range(-2.0..2.0);
            b.ground_strip(a, a + 3.0, -half_road, half_road, 0.003, CLASS_MARKING);
        }
    }

    // Poles alternate street sides with a little seeded jitter.
    let pole_d = half_road + spec.sidewalk_width.max(0.8) * 0.5;
    for i in 0..spec.pole_count {
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        let s = (i as f64 + 0.5) / spec.pole_count as f64 * len + rng.gen_range(-1.0..1.0);
        b.post(s, side * pole_d, 0.6, 0.0, 3.5, CLASS_POLE);
    }

    // Sign plates: street signs facing traffic, and storefront boards on the
    // facades that give the upper image half some structure.
    for i in 0..spec.sign_count {
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        let s = (i as f64 + 0.5) / spec.sign_count as f64 * len + rng.gen_range(-2.0..2.0);
        let d = side * pole_d;
        b.plate(s, d - 0.6, d + 0.6, 2.0, 3.1, CLASS_SIGN);
        let board = side * (walk_outer + 0.85);
        for _ in 0..2 {
            let w = rng.gen_range(1.0..2.2);
            let z = rng.gen_range(2.4..6.5);
            let off = rng.gen_range(-4.0..4.0);
            b.wall(s + off - w, s + off + w, board, z, z + rng.gen_range(1.2..2.0), CLASS_SIGN);
        }
    }

    // Building facades in 6 m segments, present per building_density. The
    // urban preset keeps them contiguous and tall enough that no sky is
    // visible from street level anywhere on the ring.
    let facade_d = walk_outer + 1.0;
    let segments = ((s1 - s0) / 6.0).ceil() as usize;
    for side in [-1.0, 1.0] {
        for seg in 0..segments {
            let present = rng.gen::<f64>() < spec.building_density;
            let height = rng.gen_range(17.0..24.0);
            // All segments share one wall plane: varying the depth per
            // segment would open slots at the joints that sight lines can
            // thread, letting background leak into the canyon.
            if present {
                let a = s0 + (s1 - s0) * seg as f64 / segments as f64;
                let e = s0 + (s1 - s0) * (seg + 1) as f64 / segments as f64;
                b.wall(a, e, side * facade_d, 0.0, height, CLASS_BUILDING);
            }
        }
    }

    // Tree billboards: two crossed vertical quads with crowns reaching into
    // the facade band.
    let nature_d = half_road + spec.sidewalk_width.max(1.0) * 0.6;
    for i in 0..spec.nature_count {
        let side = if i % 2 == 0 { -1.0 } else { 1.0 };
        let s = (i as f64 + 0.5) / spec.nature_count as f64 * len + rng.gen_range(-2.0..2.0);
        let d = side * nature_d;
        b.wall(s - 2.0, s + 2.0, d, 0.3, 6.5, CLASS_NATURE);
        b.plate(s, d - 2.0, d + 2.0, 0.3, 6.5, CLASS_NATURE);
    }

    // Optional occlusion study geometry: a marking strip near the far road
    // edge hidden behind a low wall. Sight lines from the right-hand driving
    // lane clear the wall only well above road level, so the markings are
    // map-only content unless the wall is rendered too.
    if spec.occluded_strip {
        let wall_d = 3.2_f64.min(half_road - 0.2);
        b.wall(5.0, len - 5.0, wall_d, 0.0, 1.2, CLASS_BUILDING);
        let dashes = (len / 6.0) as usize;
        for i in 0..dashes {
            let a = 5.0 + i as f64 * 6.0;
            b.ground_strip(a, a + 2.5, wall_d + 0.2, wall_d + 0.7, 0.002, CLASS_MARKING);
        }
    }

    let mesh = SemanticMesh::new(b.vertices, b.triangles, &table).expect("generated scene is valid");
    (mesh, table)
}

/// Default camera for generated scenes: 640x480, ~63 degree horizontal FOV.
/// Dimensions divide by 2^5, so six pyramid levels are available.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480)
}

/// Piecewise path element in the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum PathSegment {
    Straight { length: f64 },
    /// Circular arc; positive angle turns left. `radius > 0`.
    Arc { radius: f64, angle: f64 },
}

/// Camera trajectory sampled at fixed rate along a piecewise path.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrajectorySpec {
    /// Starting position (z is the camera height above ground).
    pub start: [f64; 3],
    /// Initial heading in radians; 0 points along +x.
    pub heading: f64,
    pub segments: Vec<PathSegment>,
    /// Meters per second along the path.
    pub speed: f64,
    /// Frames per second.
    pub frame_rate: f64,
}

impl TrajectorySpec {
    /// Drive down the generated street in the right-hand lane (lateral
    /// -1.75 m), following the street's curve.
    pub fn street_drive(curve_radius: f64, length: f64, speed: f64, frame_rate: f64) -> Self {
        let lane_radius = curve_radius + 1.75;
        let start = street_point(curve_radius, 2.0, -1.75, 1.5);
        TrajectorySpec {
            start: [start.x, start.y, start.z],
            heading: street_heading(curve_radius, 2.0),
            segments: vec![PathSegment::Arc { radius: lane_radius, angle: length / lane_radius }],
            speed,
            frame_rate,
        }
    }
}

/// Level camera pose for a ground position and heading: z looks along the
/// heading, x points right, y points down.
pub fn camera_pose(position: Vector3<f64>, heading: f64) -> Pose {
    let (s, c) = heading.sin_cos();
    #[rustfmt::skip]
    let rotation = Matrix3::new(
        s,  0.0, c,
       -c,  0.0, s,
        0.0, -1.0, 0.0,
    );
    Pose::new(rotation, position)
}

/// Samples camera poses every `speed / frame_rate` meters along the path.
pub fn generate_trajectory(spec: &TrajectorySpec) -> Vec<Pose> {
    let step = spec.speed / spec.frame_rate;
    assert!(step > 0.0, "speed and frame rate must be positive");
    let total: f64 = spec
        .segments
        .iter()
        .map(|s| match s {
            PathSegment::Straight { length } => *length,
            PathSegment::Arc { radius, angle } => radius * angle.abs(),
        })
        .sum();
    let frames = (total / step).floor() as usize + 1;

    let mut poses = Vec::with_capacity(frames);
    for i in 0..frames {
        let mut remaining = (i as f64 * step).min(total);
        let mut pos = Vector3::new(spec.start[0], spec.start[1], spec.start[2]);
        let mut heading = spec.heading;
        for seg in &spec.segments {
            match *seg {
                PathSegment::Straight { length } => {
                    let d = remaining.min(length);
                    pos += Vector3::new(heading.cos(), heading.sin(), 0.0) * d;
                    remaining -= d;
                }
                PathSegment::Arc { radius, angle } => {
                    let length = radius * angle.abs();
                    let d = remaining.min(length);
                    let turned = angle.signum() * d / radius;
                    // Rotate about the arc center, which sits `radius` to the
                    // side of the current heading.
                    let side = angle.signum();
                    let center = pos
                        + Vector3::new(-heading.sin(), heading.cos(), 0.0) * (radius * side);
                    let from_center = pos - center;
                    let (s, c) = turned.sin_cos();
                    pos = center
                        + Vector3::new(
                            c * from_center.x - s * from_center.y,
                            s * from_center.x + c * from_center.y,
                            0.0,
                        );
                    heading += turned;
                    remaining -= d;
                }
            }
            if remaining <= 0.0 {
                break;
            }
        }
        poses.push(camera_pose(pos, heading));
    }
    poses
}

/// Segmentation and odometry corruption parameters. All zeros = clean data.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseModel {
    /// Per-pixel probability of relabeling to a uniformly random class.
    pub label_flip_prob: f64,
    /// Rounds of random boundary erosion/dilation (pixels).
    pub boundary_jitter: f64,
    /// Per-step odometry noise std-devs, twist order (meters, radians).
    pub odom_sigma: [f64; 6],
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel { label_flip_prob: 0.0, boundary_jitter: 0.0, odom_sigma: [0.0; 6], seed: 0 }
    }
}

fn corrupt_labels(clean: &LabelImage, num_classes: u8, noise: &NoiseModel, rng: &mut ChaCha8Rng) -> LabelImage {
    let mut img = clean.clone();
    let (w, h) = (img.width, img.height);

    for _ in 0..noise.boundary_jitter.round() as usize {
        let snapshot = img.clone();
        for y in 0..h {
            for x in 0..w {
                let c = snapshot.at(x, y);
                let mut neighbors = [(0u32, 0u32); 4];
                let mut n = 0;
                if x > 0 {
                    neighbors[n] = (x - 1, y);
                    n += 1;
                }
                if x + 1 < w {
                    neighbors[n] = (x + 1, y);
                    n += 1;
                }
                if y > 0 {
                    neighbors[n] = (x, y - 1);
                    n += 1;
                }
                if y + 1 < h {
                    neighbors[n] = (x, y + 1);
                    n += 1;
                }
                let boundary = neighbors[..n].iter().any(|&(nx, ny)| snapshot.at(nx, ny) != c);
                if boundary && rng.gen::<f64>() < 0.5 {
                    let (nx, ny) = neighbors[rng.gen_range(0..n)];
                    img.set(x, y, snapshot.at(nx, ny));
                }
            }
        }
    }

    if noise.label_flip_prob > 0.0 {
        for label in &mut img.labels {
            if rng.gen::<f64>() < noise.label_flip_prob {
                *label = rng.gen_range(0..num_classes);
            }
        }
    }
    img
}

/// Renders ground-truth label frames at each pose and applies the noise
/// model. Each frame uses an RNG stream derived from (seed, frame index),
/// so output is deterministic regardless of parallelism.
pub fn synthesize_frames(
    mesh: &SemanticMesh,
    table: &ClassTable,
    k: &CameraIntrinsics,
    poses: &[Pose],
    noise: &NoiseModel,
    render_config: &RenderConfig,
) -> Vec<LabelImage> {
    poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            let view = render(mesh, k, pose, table.background_id(), render_config);
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            rng.set_stream(i as u64);
            corrupt_labels(&view.labels, table.num_classes(), noise, &mut rng)
        })
        .collect()
}

/// Relative poses between consecutive frames with Gaussian twist noise; the
/// first entry is the identity (frame 0 has no predecessor). Weights are the
/// inverse noise sigmas, falling back to [10, 10, 10, 50, 50, 50] where the
/// sigma is zero.
pub fn synthesize_odometry(poses: &[Pose], noise: &NoiseModel) -> Vec<OdometryMeasurement> {
    let default_w = [10.0, 10.0, 10.0, 50.0, 50.0, 50.0];
    let weight = Vector6::from_iterator(
        noise.odom_sigma.iter().zip(default_w).map(|(&s, d)| if s > 0.0 { 1.0 / s } else { d }),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    rng.set_stream(u64::MAX);
    let gauss: Vec<Normal<f64>> = noise
        .odom_sigma
        .iter()
        .map(|&s| Normal::new(0.0, s.max(0.0)).expect("sigma >= 0"))
        .collect();

    let mut out = Vec::with_capacity(poses.len());
    out.push(OdometryMeasurement { rel: Pose::identity(), weight });
    for i in 1..poses.len() {
        let true_rel = poses[i - 1].inverse().compose(&poses[i]);
        let eps = Vector6::from_iterator(gauss.iter().map(|g| g.sample(&mut rng)));
        let rel = true_rel.compose(&exp_map(&Twist(eps)));
        out.push(OdometryMeasurement { rel, weight });
    }
    out
}
