use semloc::render::RenderConfig;
use semloc::scenegen::{
    default_intrinsics, generate_scene, generate_trajectory, synthesize_frames,
    synthesize_odometry, NoiseModel, SceneSpec, TrajectorySpec,
};
use semloc::window::{FrameObservation, LocalizationEngine, WindowConfig};

fn main() {
    let spec = SceneSpec::markings_only(3);
    let (mesh, table) = generate_scene(&spec);
    let traj = TrajectorySpec::street_drive(spec.curve_radius, 99.0 * 0.1, 1.0, 10.0);
    let poses = generate_trajectory(&traj);
    let k = default_intrinsics();
    let noise = NoiseModel::default();
    let frames = synthesize_frames(&mesh, &table, &k, &poses, &noise, &RenderConfig::default());
    let odom = synthesize_odometry(&poses, &noise);

    let mut engine = LocalizationEngine::new(
        mesh,
        table.num_classes(),
        k,
        WindowConfig::default(),
        RenderConfig::default(),
    );
    engine.initialize(poses[0]);
    for (i, (frame, m)) in frames.iter().zip(&odom).enumerate() {
        let r = engine.process_frame(FrameObservation::Labels(frame.clone()), &m.rel);
        if i % 5 == 0 {
            match &r {
                Ok(pose) => {
                    let err = (pose.translation - poses[i].translation).norm();
                    if let Some(rep) = engine.last_report() {
                        println!(
                            "kf frame {i:3} err {err:.4} cost {:.1} -> {:.1} reverted {} last_step {:.4} converged {} rows {:?}",
                            rep.initial_cost,
                            rep.final_cost,
                            rep.reverted,
                            rep.last_step,
                            rep.converged,
                            rep.keyframes.iter().map(|k| k.semantic_rows).collect::<Vec<_>>()
                        );
                    } else {
                        println!("kf frame {i:3} err {err:.4} (no report)");
                    }
                }
                Err(e) => {
                    println!("frame {i:3} -> error: {e}");
                    break;
                }
            }
        }
    }
}
