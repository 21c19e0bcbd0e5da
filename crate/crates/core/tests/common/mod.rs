#![allow(dead_code)]

use nalgebra::Vector5;
use ppdmpc::constraints::{lane_change_residual, ControllerTag, SafetyParams, SmoothBoundaryParams, TRANSITION_BAND};
use ppdmpc::models::{
    ego_derivative, ego_step, ego_step_jacobian, EgoControl, EgoGeometry, EgoState, HorizonConfig, PolicyConfig,
    Road, TrafficParams, TrafficVehicleState,
};
use ppdmpc::ocp::{assemble_nlp, BoxBounds, NlpInstance, ObjectiveWeights, OcpConfig, Plan};
use ppdmpc::predictor::{ModelPredictor, NoiseKey, Observation, Predictor, PredictorConfig};
use ppdmpc::sim::{step_world, WorldModel, WorldState};
use ppdmpc::solver::{solve, SolveStatus, SolverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const V_REF: f64 = 30.0 / 3.6;

pub fn ocp_config(steps: usize) -> OcpConfig {
    OcpConfig::new(
        EgoGeometry::default(),
        SafetyParams::default(),
        ObjectiveWeights::default(),
        BoxBounds::default(),
        HorizonConfig { steps, dt: 0.2 },
        V_REF,
    )
    .unwrap()
}

/// Explicit Euler with `substeps` steps over `dt`.
pub fn fine_euler(x: &EgoState, u: &EgoControl, g: &EgoGeometry, dt: f64, substeps: usize) -> EgoState {
    let h = dt / substeps as f64;
    let mut v = x.to_vector();
    for _ in 0..substeps {
        let d = ego_derivative(&EgoState::from_vector(&v), u, g).unwrap();
        v += d * h;
    }
    EgoState::from_vector(&v)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// A random NLP around a random traffic snapshot plus an arbitrary (not
/// necessarily feasible) point to differentiate at.
pub fn random_instance(seed: u64) -> (NlpInstance, Plan) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ocp_config(8);
    let road = Road::default();
    let py = road.lane_center(1) + rng.random_range(-0.8..0.8);
    let th1 = rng.random_range(-0.1..0.1);
    let x0 = EgoState::new(0.0, py, rng.random_range(3.0..12.0), th1, th1 + rng.random_range(-0.05..0.05));
    let mut vehicles = Vec::new();
    let mut params = Vec::new();
    for lane in [0usize, 1, 2] {
        let count = if lane == 1 { 1 } else { rng.random_range(1..3) };
        for j in 0..count {
            let px = if lane == 1 { rng.random_range(15.0..40.0) } else { -20.0 + 22.0 * j as f64 + rng.random_range(-3.0..3.0) };
            vehicles.push(TrafficVehicleState::new(px, lane, rng.random_range(5.0..10.0), &road));
            params.push(TrafficParams { cooperativeness: rng.random_range(0.0..1.0), ..Default::default() });
        }
    }
    let us: Vec<EgoControl> =
        (0..8).map(|_| EgoControl::new(rng.random_range(-0.05..0.05), rng.random_range(-1.0..1.0))).collect();
    let warm = Plan::rollout(&x0, &us, &cfg.geometry, 0.2, 0).unwrap();
    let predictor = ModelPredictor { road, geometry: cfg.geometry, policy: PolicyConfig::default(), dt: 0.2 };
    let obs = Observation { current: &vehicles, history: &[], params: &params };
    let pred = predictor.predict(&obs, &warm.xs, &PredictorConfig::default(), NoiseKey::default()).unwrap();
    let tag = [ControllerTag::Nc, ControllerTag::Lc, ControllerTag::Rc][rng.random_range(0..3)];
    let nlp = assemble_nlp(tag, &x0, &pred, &cfg).unwrap();
    let mc = nlp.constrained();
    let mut plan = warm;
    for x in plan.xs.iter_mut().skip(1) {
        x.px += rng.random_range(-2.0..2.0);
        x.py += rng.random_range(-0.5..0.5);
        x.vx += rng.random_range(-1.0..1.0);
        x.theta1 += rng.random_range(-0.05..0.05);
        x.theta2 += rng.random_range(-0.05..0.05);
    }
    plan.slacks = (0..8).map(|_| (0..mc).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    (nlp, plan)
}

/// Largest relative error between the analytic objective gradient and
/// central differences over every decision variable.
pub fn objective_gradient_error(nlp: &NlpInstance, plan: &Plan) -> f64 {
    let g = nlp.gradient(plan).unwrap().to_flat();
    let v = plan.to_flat();
    let (n, mc) = (nlp.steps(), nlp.constrained());
    let mut worst: f64 = 0.0;
    for i in 0..v.len() {
        let h = 1e-4 * v[i].abs().max(1.0);
        let mut p = v.clone();
        p[i] += h;
        let fp = nlp.objective(&Plan::from_flat(&p, n, mc).unwrap()).unwrap();
        p[i] -= 2.0 * h;
        let fm = nlp.objective(&Plan::from_flat(&p, n, mc).unwrap()).unwrap();
        worst = worst.max(rel_err(g[i], (fp - fm) / (2.0 * h)));
    }
    worst
}

fn perturb(x: &EgoState, i: usize, h: f64) -> EgoState {
    let mut v = x.to_vector();
    v[i] += h;
    EgoState::from_vector(&v)
}

/// Largest relative error over the analytic derivatives of every inequality
/// row and of the dynamics defects of `nlp`, evaluated along `plan`.
pub fn constraint_gradient_error(nlp: &NlpInstance, plan: &Plan) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 1..=nlp.steps() {
        let x = plan.xs[k];
        for c in 0..nlp.constrained() {
            let e = nlp.collision(k, c, &x);
            for i in 0..5 {
                let fd = (nlp.collision(k, c, &perturb(&x, i, h)).value - nlp.collision(k, c, &perturb(&x, i, -h)).value)
                    / (2.0 * h);
                worst = worst.max(rel_err(e.gx[i], fd));
            }
            let fd2 = (nlp.collision(k, c, &perturb(&x, 0, h)).gx[0] - nlp.collision(k, c, &perturb(&x, 0, -h)).gx[0])
                / (2.0 * h);
            worst = worst.max(rel_err(e.dpx2, fd2));
        }
        let rows = nlp.state_rows(k, &x);
        for (r, row) in rows.iter().enumerate() {
            for i in 0..5 {
                let fd = (nlp.state_rows(k, &perturb(&x, i, h))[r].value - nlp.state_rows(k, &perturb(&x, i, -h))[r].value)
                    / (2.0 * h);
                worst = worst.max(rel_err(row.gx[i], fd));
            }
        }
    }
    for k in 0..nlp.steps() {
        let u = plan.us[k];
        for (r, row) in nlp.control_rows(&u).iter().enumerate() {
            let fd_d = (nlp.control_rows(&EgoControl::new(u.delta + h, u.av))[r].value
                - nlp.control_rows(&EgoControl::new(u.delta - h, u.av))[r].value)
                / (2.0 * h);
            let fd_a = (nlp.control_rows(&EgoControl::new(u.delta, u.av + h))[r].value
                - nlp.control_rows(&EgoControl::new(u.delta, u.av - h))[r].value)
                / (2.0 * h);
            worst = worst.max(rel_err(row.gu[0], fd_d)).max(rel_err(row.gu[1], fd_a));
        }
        let x = plan.xs[k];
        let (_, a, b) = ego_step_jacobian(&x, &u, &nlp.geometry, nlp.horizon.dt).unwrap();
        let step = |x: &EgoState, u: &EgoControl| -> Vector5<f64> { ego_step(x, u, &nlp.geometry, nlp.horizon.dt).unwrap().to_vector() };
        for i in 0..5 {
            let fd = (step(&perturb(&x, i, h), &u) - step(&perturb(&x, i, -h), &u)) / (2.0 * h);
            for r in 0..5 {
                worst = worst.max(rel_err(a[(r, i)], fd[r]));
            }
        }
        for j in 0..2 {
            let du = |s: f64| if j == 0 { EgoControl::new(u.delta + s, u.av) } else { EgoControl::new(u.delta, u.av + s) };
            let fd = (step(&x, &du(h)) - step(&x, &du(-h))) / (2.0 * h);
            for r in 0..5 {
                worst = worst.max(rel_err(b[(r, j)], fd[r]));
            }
        }
    }
    worst
}

/// Solve a two-step instance and compare with a 51^2-per-step control grid.
/// Returns `(solver objective, best grid objective, spread over the grid
/// cell around the optimum)`.
pub fn two_step_grid_check(x0: EgoState, tag: ControllerTag) -> (f64, f64, f64) {
    let cfg = ocp_config(2);
    let pred = ppdmpc::predictor::PredictionBundle { states: vec![vec![]; 3], accels: vec![vec![]; 3] };
    let nlp = assemble_nlp(tag, &x0, &pred, &cfg).unwrap();
    let sol = solve(&nlp, None, &SolverConfig::default()).unwrap();
    assert_eq!(sol.status, SolveStatus::Converged);
    let b = nlp.bounds;
    let grid = |i: usize, lo: f64, hi: f64| lo + (hi - lo) * i as f64 / 50.0;
    let eval = |us: [EgoControl; 2]| -> Option<f64> {
        let mut plan = Plan::rollout(&nlp.x0, &us, &nlp.geometry, 0.2, 0).ok()?;
        plan.slacks = nlp.minimal_slacks(&plan);
        (nlp.max_violation(&plan).ok()? <= 1e-12).then(|| nlp.objective(&plan).unwrap())
    };
    let mut best = f64::INFINITY;
    for a in 0..51 {
        for bb in 0..51 {
            for c in 0..51 {
                for d in 0..51 {
                    let us = [
                        EgoControl::new(grid(a, -b.delta_max, b.delta_max), grid(bb, b.av_min, b.av_max)),
                        EgoControl::new(grid(c, -b.delta_max, b.delta_max), grid(d, b.av_min, b.av_max)),
                    ];
                    if let Some(f) = eval(us) {
                        best = best.min(f);
                    }
                }
            }
        }
    }
    let hd = 2.0 * b.delta_max / 50.0;
    let ha = (b.av_max - b.av_min) / 50.0;
    let mut cell: f64 = 0.0;
    let (u0, u1) = (sol.plan.us[0], sol.plan.us[1]);
    for s in 0..16 {
        let sg = |bit: usize| if s >> bit & 1 == 1 { 1.0 } else { -1.0 };
        let clamp_a = |a: f64| a.clamp(b.av_min, b.av_max);
        let clamp_d = |d: f64| d.clamp(-b.delta_max, b.delta_max);
        let us = [
            EgoControl::new(clamp_d(u0.delta + sg(0) * hd), clamp_a(u0.av + sg(1) * ha)),
            EgoControl::new(clamp_d(u1.delta + sg(2) * hd), clamp_a(u1.av + sg(3) * ha)),
        ];
        if let Some(f) = eval(us) {
            cell = cell.max(f - sol.objective);
        }
    }
    (sol.objective, best, cell)
}

/// Sample `count` joint positions strictly inside the footprint of a
/// neighbour (bodies overlapping, no margins), at least the transition band
/// away from its longitudinal ends, and return the smallest residual.
pub fn smooth_boundary_sweep(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = EgoGeometry::default();
    let safety = SafetyParams::default();
    let road = Road::default();
    let mut worst = f64::INFINITY;
    for _ in 0..count {
        let (lane, beta) = if rng.random_bool(0.5) { (0, 1.0) } else { (2, -1.0) };
        let mut veh = TrafficVehicleState::new(rng.random_range(-50.0..50.0), lane, 8.0, &road);
        veh.length = rng.random_range(3.5..6.0);
        veh.width = rng.random_range(1.6..2.2);
        let p = SmoothBoundaryParams::for_vehicle(&veh, beta, &g, &safety);
        let lo = veh.rear() - g.l1 + TRANSITION_BAND;
        let hi = veh.front() + g.rear_overhang() - TRANSITION_BAND;
        let px = rng.random_range(lo..hi);
        let y_lo = veh.py - 0.5 * veh.width - g.dwe;
        let y_hi = veh.py + 0.5 * veh.width + g.dwe;
        let py = rng.random_range(y_lo..y_hi);
        let ego = EgoState::new(px, py, 8.0, 0.0, 0.0);
        worst = worst.min(lane_change_residual(&ego, &veh, &p, &g, 0.0));
    }
    worst
}

/// Largest deviation between a noiseless prediction and the simulator
/// stepping the same world under the same ego controls.
pub fn prediction_vs_simulation(world: &WorldState, us: &[EgoControl], model: &WorldModel, dt: f64) -> f64 {
    let plan = Plan::rollout(&world.ego, us, &model.geometry, dt, 0).unwrap();
    let predictor = ModelPredictor { road: model.road, geometry: model.geometry, policy: model.policy, dt };
    let obs = Observation { current: &world.vehicles, history: &world.history, params: &world.params };
    let pred = predictor.predict(&obs, &plan.xs, &PredictorConfig::default(), NoiseKey::default()).unwrap();
    let mut w = world.clone();
    let mut worst: f64 = 0.0;
    for k in 0..=us.len() {
        for (a, b) in w.vehicles.iter().zip(&pred.states[k]) {
            for d in [a.px - b.px, a.py - b.py, a.vx - b.vx, a.theta - b.theta] {
                worst = worst.max(d.abs());
            }
        }
        if k < us.len() {
            w = step_world(&w, &us[k], dt, model).unwrap();
        }
    }
    worst
}

pub fn random_world(seed: u64) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let road = Road::default();
    let mut vehicles = Vec::new();
    let mut params = Vec::new();
    for lane in [0usize, 1, 2] {
        let mut px = rng.random_range(-30.0..-10.0);
        for _ in 0..rng.random_range(1..4) {
            vehicles.push(TrafficVehicleState::new(px, lane, rng.random_range(5.0..10.0), &road));
            params.push(TrafficParams { cooperativeness: rng.random_range(0.0..1.0), ..Default::default() });
            px += rng.random_range(8.0..20.0);
        }
    }
    WorldState { t: 0.0, step: 0, ego: EgoState::new(0.0, road.lane_center(1), 8.0, 0.0, 0.0), vehicles, params, history: vec![], seed }
}

pub fn random_controls(seed: u64, n: usize) -> Vec<EgoControl> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..n).map(|_| EgoControl::new(rng.random_range(-0.03..0.03), rng.random_range(-1.0..1.0))).collect()
}
