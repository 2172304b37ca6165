//! Randomized algebraic invariants of the math layers: pose algebra, camera
//! model, logits/softmax machinery, and the error metrics. Rendering-level
//! invariants (determinism, plane consistency, equivariance) live next to
//! their modules where seeded tests keep the runtime bounded.

use nalgebra::{Matrix3, Vector2, Vector3};
use proptest::prelude::*;
use semloc::align::semantic_residual;
use semloc::eval::{cumulative_distribution, pose_error, summarize};
use semloc::geom::{boxminus, exp_map, log_map};
use semloc::scenegen::default_intrinsics;
use semloc::semantics::{labels_to_logits, LabelImage, LogitsImage};
use semloc::{Pose, Twist};

fn vec3(max: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-max..max).prop_map(|v| Vector3::new(v[0], v[1], v[2]))
}

/// Twists whose rotation norm stays below π, where the logarithm is unique.
fn twist() -> impl Strategy<Value = Twist> {
    (vec3(10.0), vec3(1.7)).prop_map(|(t, w)| Twist::new(t, w))
}

fn pose() -> impl Strategy<Value = Pose> {
    twist().prop_map(|xi| exp_map(&xi))
}

fn small_twist() -> impl Strategy<Value = Twist> {
    (vec3(0.5), vec3(0.2)).prop_map(|(t, w)| Twist::new(t, w))
}

proptest! {
    #[test]
    fn exp_log_roundtrip(xi in twist()) {
        let back = log_map(&exp_map(&xi)).unwrap();
        prop_assert!((back.0 - xi.0).norm() < 1e-9 * xi.0.norm().max(1.0));
    }

    #[test]
    fn exponentials_are_proper_rotations(xi in twist()) {
        let p = exp_map(&xi);
        let gram = p.rotation.transpose() * p.rotation;
        prop_assert!((gram - Matrix3::identity()).norm() < 1e-9);
        prop_assert!((p.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn inverse_is_two_sided(p in pose()) {
        for q in [p.compose(&p.inverse()), p.inverse().compose(&p)] {
            prop_assert!(q.translation.norm() < 1e-9);
            prop_assert!((q.rotation - Matrix3::identity()).norm() < 1e-9);
        }
    }

    #[test]
    fn composition_is_associative(a in pose(), b in pose(), c in pose()) {
        let left = a.compose(&b).compose(&c);
        let right = a.compose(&b.compose(&c));
        prop_assert!((left.translation - right.translation).norm() < 1e-9);
        prop_assert!((left.rotation - right.rotation).norm() < 1e-9);
    }

    #[test]
    fn boxminus_recovers_a_right_increment(a in pose(), d in small_twist()) {
        let bumped = a.compose(&exp_map(&d));
        let got = boxminus(&bumped, &a).unwrap();
        prop_assert!((got.0 - d.0).norm() < 1e-9 * d.0.norm().max(1.0));
    }

    #[test]
    fn quaternion_coords_roundtrip(p in pose()) {
        let (t, q) = p.quaternion_coords();
        prop_assert!(q[3] >= 0.0, "scalar part is canonicalized non-negative");
        let back = Pose::from_quaternion_coords(t, q);
        prop_assert!((back.translation - p.translation).norm() < 1e-9);
        prop_assert!((back.rotation - p.rotation).norm() < 1e-9);
    }

    #[test]
    fn projection_inverts_unprojection(
        x in 0.0..639.0f64,
        y in 0.0..479.0f64,
        depth in 0.2..80.0f64,
    ) {
        let k = default_intrinsics();
        let px = Vector2::new(x, y);
        let point = k.unproject(&px, depth).unwrap();
        prop_assert!((point.z - depth).abs() < 1e-9);
        let back = k.project(&point).unwrap();
        prop_assert!((back - px).norm() < 1e-9);
    }

    #[test]
    fn unprojection_inverts_projection(p in vec3(30.0), z in 0.2..80.0f64) {
        let k = default_intrinsics();
        let point = Vector3::new(p.x, p.y, z);
        if let Ok(px) = k.project(&point) {
            let back = k.unproject(&px, point.z).unwrap();
            prop_assert!((back - point).norm() < 1e-9 * point.norm().max(1.0));
        }
    }

    #[test]
    fn intrinsics_halve_focal_lengths_per_level(level in 0usize..6) {
        let k = default_intrinsics();
        let kl = k.at_level(level);
        let s = (1u32 << level) as f64;
        prop_assert!((kl.fx - k.fx / s).abs() < 1e-12);
        prop_assert!((kl.fy - k.fy / s).abs() < 1e-12);
        prop_assert_eq!(kl.width, k.width >> level);
    }

    #[test]
    fn squared_residual_is_the_negative_log_likelihood(lp in -13.8..0.0f64) {
        let r = semantic_residual(lp);
        prop_assert!((r * r - (-2.0 * lp)).abs() < 1e-9);
    }

    #[test]
    fn residual_decreases_with_probability(a in 0.01..0.99f64, b in 0.01..0.99f64) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(semantic_residual(hi.ln()) <= semantic_residual(lo.ln()));
    }
}

fn logits_image(
    w: u32,
    h: u32,
    n: u8,
) -> impl Strategy<Value = LogitsImage> {
    prop::collection::vec(-8.0..8.0f64, (w * h) as usize * n as usize)
        .prop_map(move |data| LogitsImage::new(w, h, n, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(img in logits_image(8, 6, 4), x in 0u32..8, y in 0u32..6) {
        let p = img.softmax_at(x, y);
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn softmax_ignores_a_common_logit_shift(
        img in logits_image(8, 6, 4),
        shift in -20.0..20.0f64,
        x in 0u32..8,
        y in 0u32..6,
    ) {
        let shifted = LogitsImage::new(
            8,
            6,
            4,
            img.data().iter().map(|v| v + shift).collect(),
        ).unwrap();
        let a = img.softmax_at(x, y);
        let b = shifted.softmax_at(x, y);
        for (pa, pb) in a.iter().zip(&b) {
            prop_assert!((pa - pb).abs() < 1e-12);
        }
    }

    #[test]
    fn label_conversion_recovers_the_stated_confidence(
        labels in prop::collection::vec(0u8..5, 24),
        x in 0u32..6,
        y in 0u32..4,
    ) {
        let img = LabelImage::new(6, 4, labels).unwrap();
        let logits = labels_to_logits(&img, 5, 0.9).unwrap();
        let p = logits.softmax_at(x, y);
        let winner = img.at(x, y) as usize;
        prop_assert!((p[winner] - 0.9).abs() < 1e-12);
        for (c, v) in p.iter().enumerate() {
            if c != winner {
                prop_assert!((v - 0.1 / 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn downscale_commutes_with_per_class_shifts(
        img in logits_image(8, 6, 3),
        shift in prop::array::uniform3(-5.0..5.0f64),
    ) {
        let shifted = LogitsImage::new(
            8,
            6,
            3,
            img.data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + shift[i % 3])
                .collect(),
        )
        .unwrap();
        let a = img.downscale().unwrap();
        let b = shifted.downscale().unwrap();
        for y in 0..3 {
            for x in 0..4 {
                for c in 0..3u8 {
                    let expected = a.at(x, y, c) + shift[c as usize];
                    prop_assert!((b.at(x, y, c) - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sampled_logprob_is_continuous_across_cell_borders(
        img in logits_image(8, 6, 3),
        cls in 0u8..3,
        col in 2u32..6,
        v_frac in 0.1..0.9f64,
    ) {
        // Approach an interior vertical cell border from both sides; the
        // bilinear-then-log-softmax field must agree in the limit.
        let v = 1.5 + v_frac * 3.0;
        let eps = 1e-9;
        let left = img.sample_logprob(cls, &Vector2::new(col as f64 - eps, v)).unwrap().0;
        let right = img.sample_logprob(cls, &Vector2::new(col as f64 + eps, v)).unwrap().0;
        prop_assert!((left - right).abs() < 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pose_errors_ignore_a_common_rigid_transform(
        gt in pose(),
        est in pose(),
        t in pose(),
    ) {
        let a = pose_error(&gt, &est, 0);
        let b = pose_error(&t.compose(&gt), &t.compose(&est), 0);
        prop_assert!((a.lateral - b.lateral).abs() < 1e-9);
        prop_assert!((a.longitudinal - b.longitudinal).abs() < 1e-9);
        prop_assert!((a.vertical - b.vertical).abs() < 1e-9);
        prop_assert!((a.translational - b.translational).abs() < 1e-9);
        prop_assert!((a.rotational_deg - b.rotational_deg).abs() < 1e-6);
    }

    #[test]
    fn translation_error_splits_into_its_components(gt in pose(), est in pose()) {
        let e = pose_error(&gt, &est, 0);
        let recomposed =
            (e.lateral.powi(2) + e.longitudinal.powi(2) + e.vertical.powi(2)).sqrt();
        prop_assert!((e.translational - recomposed).abs() < 1e-9);
        prop_assert!(
            (e.translational - (est.translation - gt.translation).norm()).abs() < 1e-9
        );
    }

    #[test]
    fn cdf_is_monotone_and_ends_at_one(
        errors in prop::collection::vec(0.0..5.0f64, 1..60),
        resolution in 0.01..1.0f64,
    ) {
        let cdf = cumulative_distribution(&errors, resolution).unwrap();
        prop_assert!(!cdf.is_empty());
        for pair in cdf.windows(2) {
            prop_assert!(pair[0].0 < pair[1].0);
            prop_assert!(pair[0].1 <= pair[1].1);
        }
        prop_assert_eq!(cdf.last().unwrap().1, 1.0);
    }

    #[test]
    fn summary_orders_its_quantiles(errors in prop::collection::vec(0.0..10.0f64, 1..80)) {
        let s = summarize(&errors).unwrap();
        let lo = errors.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(lo <= s.median && s.median <= s.p90 && s.p90 <= s.max);
        prop_assert!(s.mean <= s.max && s.mean >= lo);
    }
}
