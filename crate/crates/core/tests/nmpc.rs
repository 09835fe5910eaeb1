mod common;

use std::f64::consts::PI;

use uavtrack::control::ControlInput;
use uavtrack::geometry::{FeatureState, Vec3};
use uavtrack::nmpc::{dynamics_jacobians, objective_gradient, reduced_dynamics, solve_ocp, NmpcConfig};

#[test]
fn objective_gradient_matches_finite_differences() {
    let worst = common::nmpc_gradient_worst(20, 21);
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn dynamics_jacobians_match_finite_differences() {
    let mut r = common::rng(4);
    for _ in 0..200 {
        let s = common::random_features(&mut r);
        let u = common::random_control(&mut r);
        let vq = common::random_vec3(&mut r, -1.0, 1.0);
        let (a, b) = dynamics_jacobians(&s, &u, &vq);
        let h = 1e-6;
        for c in 0..4 {
            let mut sp = s.to_vector();
            let mut sm = sp;
            sp[c] += h;
            sm[c] -= h;
            let fp = reduced_dynamics(&FeatureState::from_vector(&sp), &u, &vq).unwrap();
            let fm = reduced_dynamics(&FeatureState::from_vector(&sm), &u, &vq).unwrap();
            let col = (fp - fm) / (2.0 * h);
            assert!(
                (a.column(c) - col).amax() < 1e-6 * (1.0 + col.amax()),
                "∂f/∂s column {c}"
            );

            let (mut up, mut um) = (u.to_vector(), u.to_vector());
            up[c] += h;
            um[c] -= h;
            let fp = reduced_dynamics(&s, &ControlInput::from_vector(&up), &vq).unwrap();
            let fm = reduced_dynamics(&s, &ControlInput::from_vector(&um), &vq).unwrap();
            let col = (fp - fm) / (2.0 * h);
            assert!(
                (b.column(c) - col).amax() < 1e-6 * (1.0 + col.amax()),
                "∂f/∂u column {c}"
            );
        }
    }
}

#[test]
fn solution_respects_boxes_and_beats_the_warm_start() {
    let cfg = NmpcConfig::default();
    let s_k = FeatureState::new(0.3, -0.2, 0.2, 2.0);
    let s_d = FeatureState::new(0.0, 0.188, 1.0 / 7.0, PI);
    let u_d = ControlInput::new(0.5, 0.0, 0.0, 0.0);
    let sol = solve_ocp(&s_k, &s_d, &u_d, &Vec3::zeros(), &cfg, None).unwrap();
    for u in &sol.u {
        let v = u.to_vector();
        for c in 0..4 {
            assert!(v[c] >= cfg.u_lower[c] - 1e-9 && v[c] <= cfg.u_upper[c] + 1e-9);
        }
    }
    let still: Vec<ControlInput> = vec![u_d; cfg.horizon];
    let (j_still, _) = objective_gradient(&s_k, &s_d, &u_d, &Vec3::zeros(), &still, &cfg).unwrap();
    let (j_opt, _) = objective_gradient(&s_k, &s_d, &u_d, &Vec3::zeros(), &sol.u, &cfg).unwrap();
    assert!(j_opt < j_still, "{j_opt} vs {j_still}");
}

#[test]
fn straight_line_regulation_converges() {
    for speed in [0.0, 0.5] {
        let trace = common::regulation_trace(speed, 12.0);
        let hit = trace.iter().find(|s| s.error < 0.01).map(|s| s.t);
        assert!(
            hit.is_some_and(|t| t <= 10.0),
            "speed {speed}: first below 0.01 at {hit:?}"
        );
        // Monotone once the initial transient has passed.
        for w in trace.windows(2).filter(|w| w[0].t >= 2.0) {
            assert!(w[1].error <= w[0].error + 1e-9, "speed {speed} at t = {}", w[1].t);
        }
    }
}
