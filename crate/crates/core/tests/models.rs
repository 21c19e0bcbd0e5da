mod common;

use common::fine_euler;
use ppdmpc::models::{
    ego_step, traffic_policy, traffic_step, EgoControl, EgoGeometry, EgoState, PolicyConfig, PolicyContext, Road,
    TrafficParams, TrafficVehicleState,
};
use proptest::prelude::*;

#[test]
fn rk4_matches_fine_euler_on_reference_point() {
    let g = EgoGeometry::default();
    let x = EgoState::new(5.0, 1.0, 8.0, 0.1, 0.05);
    let u = EgoControl::new(0.02, 0.5);
    let rk = ego_step(&x, &u, &g, 0.2).unwrap().to_array();
    let eu = fine_euler(&x, &u, &g, 0.2, 10_000).to_array();
    for i in 0..5 {
        assert!((rk[i] - eu[i]).abs() < 1e-6, "component {i}: {} vs {}", rk[i], eu[i]);
    }
}

#[test]
fn constant_speed_translation_is_exact() {
    let x = ego_step(&EgoState::new(0.0, 0.0, 10.0, 0.0, 0.0), &EgoControl::zero(), &EgoGeometry::default(), 0.2).unwrap();
    assert_eq!(x, EgoState::new(2.0, 0.0, 10.0, 0.0, 0.0));
}

#[test]
fn traffic_acceleration_is_clamped() {
    let road = Road::default();
    let v = TrafficVehicleState::new(0.0, 1, 10.0, &road);
    let a5 = traffic_step(&v, 5.0, 0.2);
    let a4 = traffic_step(&v, 4.0, 0.2);
    assert_eq!(a5, a4);
    let slow = TrafficVehicleState::new(0.0, 1, 0.5, &road);
    assert_eq!(traffic_step(&slow, -4.0, 0.2).vx, 0.0);
}

fn ctx<'a>(road: &'a Road, g: &'a EgoGeometry, p: &'a PolicyConfig) -> PolicyContext<'a> {
    PolicyContext { road, ego: g, policy: p }
}

fn arb_traffic() -> impl Strategy<Value = (Vec<TrafficVehicleState>, Vec<TrafficParams>)> {
    prop::collection::vec((0usize..3, -40.0..40.0f64, 0.0..12.0f64, 0.0..1.0f64), 1..7).prop_map(|spec| {
        let road = Road::default();
        let mut vs = Vec::new();
        let mut ps = Vec::new();
        for (i, (lane, px, vx, coop)) in spec.into_iter().enumerate() {
            // Spread vehicles so no two share a position.
            vs.push(TrafficVehicleState::new(px + 0.37 * i as f64, lane, vx, &road));
            ps.push(TrafficParams { cooperativeness: coop, ..Default::default() });
        }
        (vs, ps)
    })
}

proptest! {
    #[test]
    fn standstill_without_input_is_identity(px in -50.0..50.0f64, py in -2.0..9.0f64, th1 in -1.2..1.2f64, dth in -1.0..1.0f64) {
        let x = EgoState::new(px, py, 0.0, th1, th1 + dth);
        let y = ego_step(&x, &EgoControl::zero(), &EgoGeometry::default(), 0.2).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn rk4_consistent_with_euler_over_state_box(
        vx in 0.0..25.0f64, th1 in -0.3..0.3f64, dth in -0.2..0.2f64,
        lat in -1.0..1.0f64, av in -4.0..2.0f64, dt in 0.01..=0.2f64,
    ) {
        // Steering is limited to 4 m/s^2 of lateral acceleration. 10^5 Euler
        // substeps keep the oracle's own error near 1e-8.
        let g = EgoGeometry::default();
        let delta = (lat * 4.0 * g.l1 / (vx * vx).max(1e-9)).atan().clamp(-0.5, 0.5);
        let x = EgoState::new(0.0, 3.5, vx, th1, th1 + dth);
        let u = EgoControl::new(delta, av);
        let rk = ego_step(&x, &u, &g, dt).unwrap().to_array();
        let eu = fine_euler(&x, &u, &g, dt, 100_000).to_array();
        for i in 0..5 {
            prop_assert!((rk[i] - eu[i]).abs() < 1e-6, "component {}: {} vs {}", i, rk[i], eu[i]);
        }
    }

    #[test]
    fn traffic_step_respects_limits(vx in 0.0..20.0f64, a in -20.0..20.0f64, dt in 0.01..1.0f64) {
        let v = TrafficVehicleState::new(0.0, 0, vx, &Road::default());
        let n = traffic_step(&v, a, dt);
        prop_assert!(n.vx >= 0.0);
        prop_assert!((n.vx - vx).abs() <= 4.0 * dt + 1e-12);
        prop_assert_eq!((n.py, n.theta), (v.py, v.theta));
    }

    #[test]
    fn policy_depends_only_on_relative_positions((vs, ps) in arb_traffic(), offset in -200.0..200.0f64, ego_px in -30.0..30.0f64, ego_py in 0.0..9.0f64) {
        let (road, g, pol) = (Road::default(), EgoGeometry::default(), PolicyConfig::default());
        let ego = EgoState::new(ego_px, ego_py, 8.0, 0.0, 0.0);
        let a = traffic_policy(&vs, &ego, &ps, &ctx(&road, &g, &pol));
        let moved: Vec<_> = vs.iter().map(|v| TrafficVehicleState { px: v.px + offset, ..*v }).collect();
        let ego_moved = EgoState { px: ego.px + offset, ..ego };
        let b = traffic_policy(&moved, &ego_moved, &ps, &ctx(&road, &g, &pol));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn non_cooperative_traffic_ignores_ego((vs, ps) in arb_traffic(), e1 in (-30.0..30.0f64, 0.0..9.0f64), e2 in (-30.0..30.0f64, 0.0..9.0f64)) {
        let (road, g, pol) = (Road::default(), EgoGeometry::default(), PolicyConfig::default());
        let ps: Vec<_> = ps.into_iter().map(|p| TrafficParams { cooperativeness: 0.0, ..p }).collect();
        let a = traffic_policy(&vs, &EgoState::new(e1.0, e1.1, 8.0, 0.0, 0.0), &ps, &ctx(&road, &g, &pol));
        let b = traffic_policy(&vs, &EgoState::new(e2.0, e2.1, 3.0, 0.1, 0.0), &ps, &ctx(&road, &g, &pol));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn policy_output_is_physically_limited((vs, ps) in arb_traffic(), ego_py in 0.0..9.0f64) {
        let (road, g, pol) = (Road::default(), EgoGeometry::default(), PolicyConfig::default());
        let a = traffic_policy(&vs, &EgoState::new(0.0, ego_py, 8.0, 0.0, 0.0), &ps, &ctx(&road, &g, &pol));
        prop_assert!(a.iter().all(|x| x.abs() <= 4.0));
    }
}
