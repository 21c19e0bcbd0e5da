mod common;

use ppdmpc::constraints::{
    build_constraint_set, corridor, lane_change_residual, lane_keep_residual, lane_limit_residuals, smooth_boundary,
    smooth_boundary_dpx, ControllerTag, SafetyParams, SmoothBoundaryParams, Snapshot,
};
use ppdmpc::models::{EgoGeometry, EgoState, Road, TrafficVehicleState};
use proptest::prelude::*;

#[test]
fn lane_keep_substitution_example() {
    let g = EgoGeometry { l1: 4.0, ..Default::default() };
    let p = SafetyParams { ds: 2.0, ts: 1.5, ..Default::default() };
    let ego = EgoState::new(0.0, 3.5, 10.0, 0.0, 0.0);
    let mut lead = TrafficVehicleState::new(0.0, 1, 8.0, &Road::default());
    // Place the rear bumper at 50 m.
    lead.px = 50.0 + 0.5 * lead.length;
    assert!((lane_keep_residual(&ego, &lead, &p, &g, 0.0) + 29.0).abs() < 1e-12);
}

#[test]
fn lane_limits_at_centre_and_edge() {
    let g = EgoGeometry { dwe: 1.25, ..Default::default() };
    let p = SafetyParams::default();
    let centre = EgoState::new(0.0, p.road.lane_center(1), 8.0, 0.0, 0.0);
    let r = lane_limit_residuals(&centre, &p, &g, ControllerTag::Nc, 1).unwrap();
    assert!(r[0] < 0.0 && r[1] < 0.0, "{r:?}");
    let (lo, hi) = corridor(ControllerTag::Nc, 1, &p, &g).unwrap();
    let edge = EgoState { py: hi, ..centre };
    assert_eq!(lane_limit_residuals(&edge, &p, &g, ControllerTag::Nc, 1).unwrap()[0], 0.0);
    let (llo, lhi) = corridor(ControllerTag::Lc, 1, &p, &g).unwrap();
    let (rlo, rhi) = corridor(ControllerTag::Rc, 1, &p, &g).unwrap();
    assert!(llo <= lo && hi <= lhi && rlo <= lo && hi <= rhi);
}

#[test]
fn missing_target_lane_is_an_error() {
    let p = SafetyParams::default();
    let g = EgoGeometry::default();
    assert!(corridor(ControllerTag::Rc, 0, &p, &g).is_err());
    assert!(corridor(ControllerTag::Lc, 2, &p, &g).is_err());
}

#[test]
fn dense_block_rc_set_holds_gap_pair_and_leader() {
    let road = Road::default();
    let g = EgoGeometry::default();
    let ego = EgoState::new(0.0, road.lane_center(1), 8.0, 0.0, 0.0);
    let vehicles = vec![
        TrafficVehicleState::new(-25.0, 0, 8.0, &road),
        TrafficVehicleState::new(-8.0, 0, 8.0, &road),
        TrafficVehicleState::new(9.0, 0, 8.0, &road),
        TrafficVehicleState::new(25.0, 1, 8.0, &road),
        TrafficVehicleState::new(5.0, 2, 8.0, &road),
        TrafficVehicleState::new(400.0, 0, 8.0, &road),
    ];
    let snap = Snapshot { ego: &ego, vehicles: &vehicles, geometry: &g, lane: None };
    let set = build_constraint_set(ControllerTag::Rc, &snap, &SafetyParams::default()).unwrap();
    let idx = set.indices();
    assert!(idx.contains(&3), "ego-lane leader missing from {idx:?}");
    assert!(idx.contains(&1) && idx.contains(&2), "gap pair missing from {idx:?}");
    assert!(!idx.contains(&4) && !idx.contains(&5), "{idx:?}");
    let nc = build_constraint_set(ControllerTag::Nc, &snap, &SafetyParams::default()).unwrap();
    assert_eq!(nc.indices(), vec![3]);
}

#[test]
fn no_holes_inside_the_footprint() {
    let worst = common::smooth_boundary_sweep(7, 10_000);
    assert!(worst > 0.0, "smallest residual {worst}");
}

fn arb_params() -> impl Strategy<Value = SmoothBoundaryParams> {
    (0.5..4.0f64, 2.0..20.0f64, 2.0..20.0f64, -5.0..5.0f64, prop::bool::ANY, 0.2..1.0f64).prop_map(
        |(a0, a1, a2, a3, up, k)| {
            let beta = if up { -1.0 } else { 1.0 };
            SmoothBoundaryParams { alpha0: beta * a0, alpha1: a1, alpha2: a2, alpha3: a3, beta, sharpness: k }
        },
    )
}

fn veh_at(px: f64) -> TrafficVehicleState {
    TrafficVehicleState::new(px, 0, 8.0, &Road::default())
}

proptest! {
    #[test]
    fn boundary_gradient_matches_differences(p in arb_params(), ex in -40.0..40.0f64, vx in -40.0..40.0f64) {
        let veh = veh_at(vx);
        let at = |px: f64| smooth_boundary(&EgoState::new(px, 0.0, 8.0, 0.0, 0.0), &veh, &p);
        let h = 1e-5;
        let fd = (at(ex + h) - at(ex - h)) / (2.0 * h);
        let an = smooth_boundary_dpx(&EgoState::new(ex, 0.0, 8.0, 0.0, 0.0), &veh, &p);
        prop_assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{} vs {}", fd, an);
    }

    #[test]
    fn boundary_monotone_in_shift_and_scale(p in arb_params(), ex in -40.0..40.0f64, d in 0.01..3.0f64) {
        let veh = veh_at(0.0);
        let ego = EgoState::new(ex, 0.0, 8.0, 0.0, 0.0);
        let base = smooth_boundary(&ego, &veh, &p);
        let shifted = SmoothBoundaryParams { alpha3: p.alpha3 + d, ..p };
        prop_assert!(smooth_boundary(&ego, &veh, &shifted) > base);
        let scaled = SmoothBoundaryParams { alpha0: p.alpha0 + d, ..p };
        prop_assert!(smooth_boundary(&ego, &veh, &scaled) >= base);
    }

    #[test]
    fn slack_only_relaxes(p in arb_params(), ex in -40.0..40.0f64, py in -3.0..10.0f64, s in 0.0..5.0f64, ds in 0.001..5.0f64) {
        let g = EgoGeometry::default();
        let veh = veh_at(0.0);
        let ego = EgoState::new(ex, py, 8.0, 0.0, 0.0);
        prop_assert!(lane_change_residual(&ego, &veh, &p, &g, s + ds) < lane_change_residual(&ego, &veh, &p, &g, s));
        let sp = SafetyParams::default();
        prop_assert!(lane_keep_residual(&ego, &veh, &sp, &g, s + ds) < lane_keep_residual(&ego, &veh, &sp, &g, s));
    }

    #[test]
    fn upper_and_lower_boundaries_mirror(p in arb_params(), ex in -40.0..40.0f64, py in -3.0..10.0f64) {
        let g = EgoGeometry::default();
        let veh = veh_at(0.0);
        let lower = SmoothBoundaryParams { beta: 1.0, alpha0: p.alpha0.abs(), ..p };
        // Reflecting py -> -py maps the boundary y to -y - 2 dwe under the
        // shared `+ dwe` in the residual.
        let upper = SmoothBoundaryParams { beta: -1.0, alpha0: -lower.alpha0, alpha3: -lower.alpha3 - 2.0 * g.dwe, ..p };
        let a = lane_change_residual(&EgoState::new(ex, py, 8.0, 0.0, 0.0), &veh, &lower, &g, 0.0);
        let b = lane_change_residual(&EgoState::new(ex, -py, 8.0, 0.0, 0.0), &veh, &upper, &g, 0.0);
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }
}
