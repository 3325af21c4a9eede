use haif_core::base::BaseGeometry;
use haif_core::controller::*;
use haif_core::geometry::angle_diff;
use haif_core::sim::episode::{generate_episode, TaskKind};
use haif_core::sim::{Action10, SimConfig};

#[test]
fn dbg_direct_pursuit_in_apartment() {
    let ep = generate_episode(TaskKind::TidyHouse, 1).unwrap();
    let mut world = ep.build_world(SimConfig::default());
    // spawn as generated: (-3.23, -0.65, 1.20)
    let mut config = ControllerConfig::default();
    config.kappa_arm = 0.0;
    let dt = config.dt;
    let mut model = WholeBodyModel::new(ep.chain.clone(), BaseGeometry::default(), config);
    model.align_to_observations(&world.observe()).unwrap();
    // first waypoint region: north through the doorway; use an intermediate target
    let target = (-1.5, 2.0);
    for step in 0..1200 {
        let obs = world.observe();
        let dp = ((world.base.x - target.0).powi(2) + (world.base.y - target.1).powi(2)).sqrt();
        let bearing = (target.1 - world.base.y).atan2(target.0 - world.base.x);
        let goal = if dp > 0.25 && angle_diff(bearing, world.base.theta).abs() > 1.0 {
            GoalSpec::base_pose(world.base.x, world.base.y, bearing, 5.0)
        } else if dp > 0.25 {
            GoalSpec::base_pose(target.0, target.1, bearing, 5.0)
        } else {
            GoalSpec::base_pose(target.0, target.1, 0.0, 5.0)
        };
        model.set_base_goals(vec![goal]);
        let cmd = model.step(&obs, 0.0).unwrap();
        let action = Action10 { base_v: cmd.base_v, base_omega: cmd.base_omega, joint_rates: cmd.joint_rates.clone(), gripper: 0.0 };
        world.step(&action, dt);
        if step % 100 == 0 {
            eprintln!("t={:4.1} base=({:+.2},{:+.2},{:+.2}) dp={:.2} v={:+.3} w={:+.3}",
                step as f64 * dt, world.base.x, world.base.y, world.base.theta, dp, cmd.base_v, cmd.base_omega);
        }
        if dp < 0.2 { eprintln!("ARRIVED at t={:.1}", step as f64 * dt); break; }
    }
}
