mod common;

use ppdmpc::models::{EgoGeometry, EgoState, PolicyConfig, Road, TrafficParams, TrafficVehicleState, TRAFFIC_ACCEL_LIMIT};
use ppdmpc::ocp::Plan;
use ppdmpc::predictor::{ModelPredictor, NoiseKey, Observation, Predictor, PredictorConfig};
use ppdmpc::sim::WorldModel;
use proptest::prelude::*;

fn model() -> WorldModel {
    WorldModel { road: Road::default(), geometry: EgoGeometry::default(), policy: PolicyConfig::default() }
}

fn predictor() -> ModelPredictor {
    let m = model();
    ModelPredictor { road: m.road, geometry: m.geometry, policy: m.policy, dt: 0.2 }
}

fn plan_for(seed: u64, n: usize) -> (ppdmpc::sim::WorldState, Vec<EgoState>) {
    let w = common::random_world(seed);
    let us = common::random_controls(seed, n);
    let plan = Plan::rollout(&w.ego, &us, &EgoGeometry::default(), 0.2, 0).unwrap();
    (w, plan.xs)
}

#[test]
fn noiseless_prediction_reproduces_simulation() {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let w = common::random_world(seed);
        let us = common::random_controls(seed, 25);
        worst = worst.max(common::prediction_vs_simulation(&w, &us, &model(), 0.2));
    }
    assert!(worst <= 1e-12, "max deviation {worst}");
}

#[test]
fn encroaching_plan_slows_the_follower() {
    let road = Road::default();
    let vehicles = vec![TrafficVehicleState::new(-8.0, 0, 8.0, &road), TrafficVehicleState::new(30.0, 0, 8.0, &road)];
    let params = vec![TrafficParams { cooperativeness: 1.0, ..Default::default() }; 2];
    let obs = Observation { current: &vehicles, history: &[], params: &params };
    let keep: Vec<EgoState> = (0..=25).map(|k| EgoState::new(1.6 * k as f64, road.lane_center(1), 8.0, 0.0, 0.0)).collect();
    let push: Vec<EgoState> = keep
        .iter()
        .enumerate()
        .map(|(k, x)| EgoState { py: x.py - (0.08 * k as f64).min(1.5), ..*x })
        .collect();
    let cfg = PredictorConfig::default();
    let a = predictor().predict(&obs, &keep, &cfg, NoiseKey::default()).unwrap();
    let b = predictor().predict(&obs, &push, &cfg, NoiseKey::default()).unwrap();
    assert!(b.states[25][0].px < a.states[25][0].px - 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prediction_is_deterministic(seed in 0u64..10_000, sigma in 0.0..2.0f64, step in 0u64..100, it in 0u64..20) {
        let (w, xs) = plan_for(seed, 25);
        let obs = Observation { current: &w.vehicles, history: &w.history, params: &w.params };
        let cfg = PredictorConfig { sigma_a: sigma, seed, redraw_per_iterate: true };
        let key = NoiseKey { step, iterate: it };
        let a = predictor().predict(&obs, &xs, &cfg, key).unwrap();
        let b = predictor().predict(&obs, &xs, &cfg, key).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn noisy_accelerations_stay_within_limits(seed in 0u64..10_000, sigma in 0.0..20.0f64) {
        let (w, xs) = plan_for(seed, 25);
        let obs = Observation { current: &w.vehicles, history: &w.history, params: &w.params };
        let cfg = PredictorConfig { sigma_a: sigma, seed, redraw_per_iterate: true };
        let b = predictor().predict(&obs, &xs, &cfg, NoiseKey::default()).unwrap();
        prop_assert_eq!(b.steps(), 25);
        prop_assert!(b.accel_vector().iter().all(|a| a.abs() <= TRAFFIC_ACCEL_LIMIT));
        prop_assert!(b.states.iter().flatten().all(|v| v.vx >= 0.0));
    }

    /// Changing the plan after step k leaves steps 0..=k+1 of the prediction untouched.
    #[test]
    fn prediction_depends_only_on_plan_prefix(seed in 0u64..10_000, k in 0usize..24) {
        let (w, xs) = plan_for(seed, 25);
        let mut other = xs.clone();
        for x in &mut other[k + 1..] {
            x.py += 1.0;
            x.px -= 3.0;
        }
        let obs = Observation { current: &w.vehicles, history: &w.history, params: &w.params };
        let cfg = PredictorConfig { sigma_a: 0.5, seed, redraw_per_iterate: false };
        let a = predictor().predict(&obs, &xs, &cfg, NoiseKey::default()).unwrap();
        let b = predictor().predict(&obs, &other, &cfg, NoiseKey::default()).unwrap();
        prop_assert_eq!(&a.states[..=k + 1], &b.states[..=k + 1]);
        prop_assert_eq!(&a.accels[..=k], &b.accels[..=k]);
    }

    #[test]
    fn blend_with_self_is_identity(seed in 0u64..10_000, w in 0.0..1.0f64) {
        let (world, xs) = plan_for(seed, 10);
        let obs = Observation { current: &world.vehicles, history: &world.history, params: &world.params };
        let a = predictor().predict(&obs, &xs, &PredictorConfig::default(), NoiseKey::default()).unwrap();
        let b = a.blend(&a, w).unwrap();
        for (x, y) in a.state_vector().iter().zip(b.state_vector()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}
