//! Closed-loop simulation of the forced lane change: scenario sampling,
//! world stepping, collision detection, episodes and aggregate metrics.

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{ControllerTag, SafetyParams};
use crate::error::{Error, Result};
use crate::models::{
    ego_step, traffic_policy, EgoControl, EgoGeometry, EgoState, HorizonConfig, PolicyConfig, PolicyContext, Road,
    TrafficParams, TrafficVehicleState,
};
use crate::ocp::{BoxBounds, ObjectiveWeights, OcpConfig, Plan};
use crate::planner::{
    decide, decoupled_plan, dmpc_iterate, shift, DecisionConfig, DecisionHistory, DmpcConfig, IterateRecord,
    PlanOutcome, PlanningContext, Termination,
};
use crate::predictor::{advance_traffic, ModelPredictor, Observation, PredictorConfig};
use crate::solver::SolverConfig;

/// Number of past traffic snapshots handed to the predictor.
const HISTORY_LEN: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Number of surrounding vehicles.
    pub vehicles: usize,
    /// How many of them drive in the exit lane; the rest use the other neighbouring lane.
    pub exit_lane_vehicles: usize,
    pub road: Road,
    pub ego_lane: usize,
    pub exit_lane: usize,
    /// Mean traffic parameters `(v_ref, time_headway, standstill_gap, accel_gain, cooperativeness)`.
    pub phi_mean: [f64; 5],
    pub phi_min: [f64; 5],
    pub phi_max: [f64; 5],
    /// Longitudinal position of the exit (m).
    pub exit_position: f64,
    pub v_ref: f64,
    pub t_max: f64,
    /// Range of the rearmost neighbour's centre relative to the ego joint (m).
    pub placement: (f64, f64),
    /// Smallest bumper-to-bumper gap between sampled neighbours (m).
    pub min_gap: f64,
    /// How far the ego may have to move along its lane to reach a usable gap (m).
    pub reach: f64,
    /// Duration of the cooperative-yielding check (s).
    pub feasibility_horizon: f64,
    pub max_attempts: usize,
    /// Lateral tolerance around the exit-lane centre counting as success (m).
    pub success_tolerance: f64,
    /// Distance to a new lane centre at which the controllers adopt that lane (m).
    pub lane_switch_tolerance: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            vehicles: 4,
            exit_lane_vehicles: 3,
            road: Road::default(),
            ego_lane: 1,
            exit_lane: 0,
            phi_mean: [30.0 / 3.6, 1.0, 2.0, 1.5, 0.6],
            phi_min: [-1.0, -0.2, -0.5, -0.3, -0.4],
            phi_max: [1.0, 0.2, 0.5, 0.3, 0.4],
            exit_position: 250.0,
            v_ref: 30.0 / 3.6,
            t_max: 30.0,
            placement: (-24.0, -8.0),
            min_gap: 4.0,
            reach: 20.0,
            feasibility_horizon: 8.0,
            max_attempts: 200,
            success_tolerance: 0.2,
            lane_switch_tolerance: 0.15,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.vehicles >= 1
            && self.exit_lane_vehicles <= self.vehicles
            && self.exit_position > 0.0
            && self.t_max > 0.0
            && self.ego_lane < self.road.lane_count
            && self.exit_lane < self.road.lane_count
            && self.ego_lane.abs_diff(self.exit_lane) == 1
            && self.placement.0 <= self.placement.1
            && self.min_gap > 0.0
            && self.max_attempts >= 1
            && self.phi_min.iter().zip(&self.phi_max).all(|(a, b)| a <= b);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid scenario config {self:?}")))
        }
    }

    /// Lane on the far side of the ego from the exit lane, if the road has one.
    fn other_lane(&self) -> Option<usize> {
        let l = 2 * self.ego_lane as isize - self.exit_lane as isize;
        (l >= 0 && (l as usize) < self.road.lane_count).then_some(l as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub t: f64,
    pub step: u64,
    pub ego: EgoState,
    pub vehicles: Vec<TrafficVehicleState>,
    pub params: Vec<TrafficParams>,
    /// Earlier traffic snapshots, oldest first.
    pub history: Vec<Vec<TrafficVehicleState>>,
    /// Seed the scenario was sampled from.
    pub seed: u64,
}

/// Ground-truth surroundings shared by stepping and prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub road: Road,
    pub geometry: EgoGeometry,
    pub policy: PolicyConfig,
}

impl WorldModel {
    fn ctx(&self) -> PolicyContext<'_> {
        PolicyContext { road: &self.road, ego: &self.geometry, policy: &self.policy }
    }
}

/// Advance the world by one step: ego under `ego_u`, traffic under the
/// noiseless policy evaluated at the current ego state.
pub fn step_world(w: &WorldState, ego_u: &EgoControl, dt: f64, model: &WorldModel) -> Result<WorldState> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("step length must be positive, got {dt}")));
    }
    let accels = traffic_policy(&w.vehicles, &w.ego, &w.params, &model.ctx());
    let vehicles = advance_traffic(&w.vehicles, &accels, dt);
    let ego = ego_step(&w.ego, ego_u, &model.geometry, dt)?;
    let mut history = w.history.clone();
    history.push(w.vehicles.clone());
    if history.len() > HISTORY_LEN {
        history.remove(0);
    }
    Ok(WorldState { t: w.t + dt, step: w.step + 1, ego, vehicles, params: w.params.clone(), history, seed: w.seed })
}

/// Oriented rectangle: centre, unit heading, half extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub center: Vector2<f64>,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl Rect {
    fn axes(&self) -> [Vector2<f64>; 2] {
        let (s, c) = self.heading.sin_cos();
        [Vector2::new(c, s), Vector2::new(-s, c)]
    }

    fn project(&self, axis: &Vector2<f64>) -> (f64, f64) {
        let [u, v] = self.axes();
        let mid = self.center.dot(axis);
        let r = self.half_length * u.dot(axis).abs() + self.half_width * v.dot(axis).abs();
        (mid - r, mid + r)
    }

    /// Separating-axis test; touching rectangles overlap.
    pub fn overlaps(&self, other: &Rect) -> bool {
        self.axes().iter().chain(other.axes().iter()).all(|axis| {
            let (a0, a1) = self.project(axis);
            let (b0, b1) = other.project(axis);
            a0.max(b0) <= a1.min(b1)
        })
    }
}

/// Tractor and trailer rectangles of the ego.
pub fn ego_footprint(x: &EgoState, g: &EgoGeometry) -> [Rect; 2] {
    let joint = Vector2::new(x.px, x.py);
    let dir = |th: f64| Vector2::new(th.cos(), th.sin());
    let trailer_len = g.rear_overhang();
    [
        Rect { center: joint + dir(x.theta1) * (0.5 * g.l1), heading: x.theta1, half_length: 0.5 * g.l1, half_width: 0.5 * g.width },
        Rect {
            center: joint - dir(x.theta2) * (0.5 * trailer_len),
            heading: x.theta2,
            half_length: 0.5 * trailer_len,
            half_width: 0.5 * g.width,
        },
    ]
}

pub fn vehicle_footprint(v: &TrafficVehicleState) -> Rect {
    Rect { center: Vector2::new(v.px, v.py), heading: v.theta, half_length: 0.5 * v.length, half_width: 0.5 * v.width }
}

pub fn detect_collision(w: &WorldState, g: &EgoGeometry) -> bool {
    let ego = ego_footprint(&w.ego, g);
    w.vehicles.iter().map(vehicle_footprint).any(|r| ego.iter().any(|e| e.overlaps(&r)))
}

/// Whether a slot of the ego's length opens in `lane` within `reach` of the ego centre.
fn slot_within_reach(ego: &EgoState, vehicles: &[TrafficVehicleState], lane: usize, g: &EgoGeometry, margin: f64, reach: f64) -> bool {
    let mut in_lane: Vec<&TrafficVehicleState> = vehicles.iter().filter(|v| v.lane == lane).collect();
    in_lane.sort_by(|a, b| a.px.total_cmp(&b.px));
    let need = g.length + 2.0 * margin;
    let center = ego.px + g.center_offset();
    let mut lo = f64::NEG_INFINITY;
    for v in in_lane.iter().map(Some).chain(std::iter::once(None)) {
        let hi = v.map_or(f64::INFINITY, |v| v.rear());
        if hi - lo >= need {
            let c = center.clamp(lo + 0.5 * need, hi - 0.5 * need);
            if (c - center).abs() <= reach {
                return true;
            }
        }
        if let Some(v) = v {
            lo = v.front();
        }
    }
    false
}

/// Check that holding the ego against the exit-lane marker makes the traffic
/// open a usable gap within the feasibility horizon.
fn lane_change_feasible(w: &WorldState, cfg: &ScenarioConfig, model: &WorldModel, safety: &SafetyParams, dt: f64) -> bool {
    let g = &model.geometry;
    let sign = if cfg.exit_lane < cfg.ego_lane { -1.0 } else { 1.0 };
    let marker = cfg.road.lane_center(cfg.ego_lane) + sign * 0.5 * cfg.road.lane_width;
    let mut probe = w.clone();
    probe.ego.py = marker - sign * (g.dwe - 0.25);
    let steps = (cfg.feasibility_horizon / dt).ceil() as usize;
    for _ in 0..=steps {
        if slot_within_reach(&probe.ego, &probe.vehicles, cfg.exit_lane, g, safety.long_margin, cfg.reach) {
            return true;
        }
        let accels = traffic_policy(&probe.vehicles, &probe.ego, &probe.params, &model.ctx());
        probe.vehicles = advance_traffic(&probe.vehicles, &accels, dt);
        probe.ego.px += probe.ego.vx * dt;
    }
    false
}

fn place_lane(
    rng: &mut ChaCha8Rng,
    count: usize,
    lane: usize,
    cfg: &ScenarioConfig,
    g: &EgoGeometry,
    out: &mut Vec<(f64, usize)>,
) {
    if count == 0 {
        return;
    }
    let mut px = rng.random_range(cfg.placement.0..=cfg.placement.1);
    for _ in 0..count {
        out.push((px, lane));
        // Bumper gaps stay shorter than the ego so no gap is free at the start.
        let gap = rng.random_range(cfg.min_gap..g.length.max(cfg.min_gap + 1e-9));
        px += 4.5 + gap;
    }
}

/// Sample a dense scenario around an ego in its start lane. Resamples until
/// a lane change is feasible under cooperative yielding.
pub fn sample_scenario(seed: u64, cfg: &ScenarioConfig, model: &WorldModel, safety: &SafetyParams, dt: f64) -> Result<WorldState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = &model.geometry;
    let other = cfg.other_lane();
    for _ in 0..cfg.max_attempts {
        let mut slots = Vec::with_capacity(cfg.vehicles);
        let rest = cfg.vehicles - cfg.exit_lane_vehicles;
        place_lane(&mut rng, cfg.exit_lane_vehicles, cfg.exit_lane, cfg, g, &mut slots);
        place_lane(&mut rng, rest, other.unwrap_or(cfg.exit_lane), cfg, g, &mut slots);
        let mut vehicles = Vec::with_capacity(cfg.vehicles);
        let mut params = Vec::with_capacity(cfg.vehicles);
        for (px, lane) in slots {
            let mut phi = [0.0; 5];
            for (i, p) in phi.iter_mut().enumerate() {
                *p = cfg.phi_mean[i] + rng.random_range(cfg.phi_min[i]..=cfg.phi_max[i]);
            }
            let tp = TrafficParams::from_vector(phi);
            let tp = TrafficParams { cooperativeness: tp.cooperativeness.clamp(0.0, 1.0), ..tp };
            vehicles.push(TrafficVehicleState::new(px, lane, tp.v_ref, &cfg.road));
            params.push(tp);
        }
        let ego = EgoState::new(0.0, cfg.road.lane_center(cfg.ego_lane), cfg.v_ref, 0.0, 0.0);
        let w = WorldState { t: 0.0, step: 0, ego, vehicles, params, history: Vec::new(), seed };
        if !detect_collision(&w, g) && lane_change_feasible(&w, cfg, model, safety, dt) {
            return Ok(w);
        }
    }
    Err(Error::Sampling(format!("no feasible scenario for seed {seed} after {} attempts", cfg.max_attempts)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    DcMpc,
    PpDmpc,
}

impl ControllerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::DcMpc => "dc-mpc",
            ControllerKind::PpDmpc => "pp-dmpc",
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dc-mpc" | "dc" => Ok(ControllerKind::DcMpc),
            "pp-dmpc" | "pp" => Ok(ControllerKind::PpDmpc),
            other => Err(Error::Config(format!("unknown controller kind {other:?}"))),
        }
    }
}

/// Every setting of one closed-loop episode apart from the seed and noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub scenario: ScenarioConfig,
    pub geometry: EgoGeometry,
    pub safety: SafetyParams,
    pub policy: PolicyConfig,
    pub weights: ObjectiveWeights,
    pub bounds: BoxBounds,
    pub horizon: HorizonConfig,
    pub solver: SolverConfig,
    /// DMPC settings; weights default to `1 / (M + 1)` when absent.
    pub dmpc: Option<DmpcConfig>,
    pub decision: DecisionConfig,
    pub redraw_per_iterate: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        let scenario = ScenarioConfig::default();
        let safety = SafetyParams { road: scenario.road, ..Default::default() };
        Self {
            scenario,
            geometry: EgoGeometry::default(),
            safety,
            policy: PolicyConfig::default(),
            weights: ObjectiveWeights::default(),
            bounds: BoxBounds::default(),
            horizon: HorizonConfig::default(),
            solver: SolverConfig { optimality_tol: 1e-4, ..Default::default() },
            dmpc: None,
            decision: DecisionConfig::default(),
            redraw_per_iterate: true,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.geometry.validate()?;
        self.safety.validate()?;
        self.weights.validate()?;
        self.horizon.validate()?;
        self.solver.validate()?;
        self.dmpc().validate()?;
        self.decision.validate()?;
        if self.safety.road != self.scenario.road {
            return Err(Error::Config("scenario and safety roads differ".into()));
        }
        if self.decision.exit_lane != self.scenario.exit_lane {
            return Err(Error::Config("decision and scenario exit lanes differ".into()));
        }
        Ok(())
    }

    pub fn dmpc(&self) -> DmpcConfig {
        self.dmpc.unwrap_or_else(|| DmpcConfig::for_vehicles(self.scenario.vehicles))
    }

    pub fn world_model(&self) -> WorldModel {
        WorldModel { road: self.scenario.road, geometry: self.geometry, policy: self.policy }
    }

    pub fn ocp(&self) -> Result<OcpConfig> {
        OcpConfig::new(self.geometry, self.safety, self.weights, self.bounds, self.horizon, self.scenario.v_ref)
    }

    pub fn sample(&self, seed: u64) -> Result<WorldState> {
        sample_scenario(seed, &self.scenario, &self.world_model(), &self.safety, self.horizon.dt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Collision,
    Timeout,
}

/// Per-controller result at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerReport {
    pub tag: ControllerTag,
    pub objective: Option<f64>,
    pub iterations: usize,
    pub termination: Option<Termination>,
    pub trace: Vec<IterateRecord>,
    pub error: Option<String>,
}

impl ControllerReport {
    /// Whether this report comes from a completed coupled planning call.
    pub fn is_coupled(&self) -> bool {
        matches!(
            self.termination,
            Some(Termination::Converged | Termination::LossIncrease | Termination::MaxIter | Termination::SolveFailed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub t: f64,
    pub ego: EgoState,
    pub vehicles: Vec<TrafficVehicleState>,
    pub chosen: ControllerTag,
    pub control: EgoControl,
    pub stage_cost: f64,
    pub controllers: Vec<ControllerReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub controller: ControllerKind,
    pub sigma_a: f64,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
    /// Time at which the episode ended (s).
    pub end_time: f64,
    /// Realized closed-loop cost.
    pub total_cost: f64,
    /// Set when the decision manager had no usable candidate.
    pub aborted: bool,
    /// Set when the ego passed the exit without reaching the exit lane.
    pub missed_exit: bool,
}

impl EpisodeLog {
    pub fn completion_time(&self) -> Option<f64> {
        (self.outcome == Outcome::Success).then_some(self.end_time)
    }

    /// Outcomes of every coupled planning call.
    pub fn dmpc_calls(&self) -> impl Iterator<Item = &ControllerReport> {
        self.steps.iter().flat_map(|s| s.controllers.iter()).filter(|c| c.is_coupled())
    }
}

/// Stage cost of the realized trajectory against the exit-lane reference.
pub fn realized_stage_cost(x: &EgoState, u: &EgoControl, u_prev: Option<&EgoControl>, w: &ObjectiveWeights, py_ref: f64, v_ref: f64) -> f64 {
    let dy = x.py - py_ref;
    let dv = x.vx - v_ref;
    let uv = Vector2::new(u.delta, u.av);
    let mut f = w.q_y * dy * dy + w.q_v * dv * dv + quad(&w.r(), &uv);
    if let Some(p) = u_prev {
        let d = uv - Vector2::new(p.delta, p.av);
        f += quad(&w.rd(), &d);
    }
    f
}

fn quad(m: &Matrix2<f64>, v: &Vector2<f64>) -> f64 {
    v.dot(&(m * v))
}

/// The ego counts as having changed lanes once it is within `tolerance` of the new lane centre.
pub fn track_lane(lane: usize, x: &EgoState, road: &Road, tolerance: f64) -> usize {
    let nearest = road.lane_of(x.py);
    if nearest != lane && (x.py - road.lane_center(nearest)).abs() <= tolerance {
        nearest
    } else {
        lane
    }
}

fn warm_start(prev: Option<&Plan>, x0: &EgoState, g: &EgoGeometry, h: &HorizonConfig) -> Result<Plan> {
    match prev {
        Some(p) => shift(p, g, h.dt),
        None => Plan::rollout(x0, &vec![EgoControl::zero(); h.steps], g, h.dt, 0),
    }
}

/// Run one closed-loop episode from a sampled world.
pub fn run_episode(
    world: &WorldState,
    kind: ControllerKind,
    sigma_a: f64,
    cfg: &EpisodeConfig,
) -> Result<EpisodeLog> {
    cfg.validate()?;
    if !(sigma_a >= 0.0) {
        return Err(Error::Config(format!("sigma_a must be nonnegative, got {sigma_a}")));
    }
    let ocp = cfg.ocp()?;
    let model = cfg.world_model();
    let predictor = ModelPredictor { road: model.road, geometry: model.geometry, policy: model.policy, dt: cfg.horizon.dt };
    let pred_cfg = PredictorConfig { sigma_a, seed: world.seed, redraw_per_iterate: cfg.redraw_per_iterate };
    let ctx = PlanningContext { ocp: &ocp, solver: &cfg.solver, predictor: &predictor, pred_cfg: &pred_cfg };
    let dmpc = cfg.dmpc();
    let sc = &cfg.scenario;
    let py_exit = sc.road.lane_center(sc.exit_lane);
    let dt = cfg.horizon.dt;
    let max_steps = (sc.t_max / dt).round() as u64;

    let mut w = world.clone();
    // Every candidate starts from the shifted plan that was actually applied.
    let mut applied: Option<Plan> = None;
    let mut history = DecisionHistory::new(cfg.decision.memory);
    let mut steps = Vec::new();
    let mut total_cost = 0.0;
    let mut last_u: Option<EgoControl> = None;
    let mut aborted = false;
    let mut missed_exit = false;
    let mut lane = sc.ego_lane;

    let outcome = loop {
        if (w.ego.py - py_exit).abs() < sc.success_tolerance {
            break Outcome::Success;
        }
        if w.ego.px >= sc.exit_position {
            missed_exit = true;
            break Outcome::Timeout;
        }
        if w.step >= max_steps {
            break Outcome::Timeout;
        }
        let obs = Observation { current: &w.vehicles, history: &w.history, params: &w.params };
        lane = track_lane(lane, &w.ego, &sc.road, sc.lane_switch_tolerance);
        let mut reports = Vec::with_capacity(3);
        let mut outcomes: Vec<(ControllerTag, PlanOutcome)> = Vec::with_capacity(3);
        let warm = warm_start(applied.as_ref(), &w.ego, &cfg.geometry, &cfg.horizon)?;
        for tag in ControllerTag::ALL {
            if tag.target_lane(lane, &sc.road).is_none() {
                continue;
            }
            let res = match kind {
                ControllerKind::PpDmpc => dmpc_iterate(tag, &w.ego, Some(lane), &obs, &ctx, &dmpc, &warm, w.step),
                ControllerKind::DcMpc => decoupled_plan(tag, &w.ego, Some(lane), &obs, &ctx, &warm, w.step),
            };
            match res {
                Ok(o) => {
                    reports.push(ControllerReport {
                        tag,
                        objective: Some(o.solution.objective),
                        iterations: o.iterations,
                        termination: Some(o.termination),
                        trace: o.trace.clone(),
                        error: None,
                    });
                    outcomes.push((tag, o));
                }
                Err(e) => {
                    log::debug!("seed {} step {}: {tag} failed: {e}", w.seed, w.step);
                    reports.push(ControllerReport { tag, objective: None, iterations: 0, termination: None, trace: Vec::new(), error: Some(e.to_string()) });
                }
            }
        }
        let candidates: Vec<(ControllerTag, &_)> = outcomes.iter().map(|(t, o)| (*t, &o.solution)).collect();
        let decision = match decide(&candidates, &mut history, &w.ego, lane, &cfg.decision) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("seed {} step {}: {e}", w.seed, w.step);
                aborted = true;
                break Outcome::Timeout;
            }
        };
        applied = outcomes.iter().find(|(t, _)| *t == decision.tag).map(|(_, o)| o.solution.plan.clone());
        let next = step_world(&w, &decision.control, dt, &model)?;
        let stage_cost = realized_stage_cost(&next.ego, &decision.control, last_u.as_ref(), &cfg.weights, py_exit, sc.v_ref);
        total_cost += stage_cost;
        last_u = Some(decision.control);
        steps.push(StepRecord {
            step: w.step,
            t: w.t,
            ego: w.ego,
            vehicles: w.vehicles.clone(),
            chosen: decision.tag,
            control: decision.control,
            stage_cost,
            controllers: reports,
        });
        w = next;
        if detect_collision(&w, &cfg.geometry) {
            break Outcome::Collision;
        }
    };
    Ok(EpisodeLog {
        seed: world.seed,
        controller: kind,
        sigma_a,
        steps,
        outcome,
        end_time: w.t,
        total_cost,
        aborted,
        missed_exit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub controller: ControllerKind,
    pub sigma_a: f64,
    pub episodes: usize,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub timeout_rate: f64,
    /// Mean end time of successful episodes (s).
    pub mean_time: Option<f64>,
    pub total_cost: f64,
    /// Total cost as a percentage of the largest total among compared tables.
    pub relative_cost: f64,
    /// Mean solves per coupled planning call.
    pub mean_iterations: Option<f64>,
    /// Percentage of coupled planning calls ending on the loss tolerance.
    pub convergence_rate: Option<f64>,
}

/// Aggregate episodes of one configuration. `relative_cost` is 100 until
/// [`normalize_costs`] is applied across configurations.
pub fn aggregate_metrics(logs: &[EpisodeLog]) -> Result<MetricsTable> {
    let first = logs.first().ok_or_else(|| Error::Config("no episodes to aggregate".into()))?;
    let n = logs.len() as f64;
    let rate = |o: Outcome| 100.0 * logs.iter().filter(|l| l.outcome == o).count() as f64 / n;
    let times: Vec<f64> = logs.iter().filter_map(EpisodeLog::completion_time).collect();
    let mean_time = (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64);
    let calls: Vec<&ControllerReport> = logs.iter().flat_map(EpisodeLog::dmpc_calls).collect();
    let (mean_iterations, convergence_rate) = if calls.is_empty() {
        (None, None)
    } else {
        let c = calls.len() as f64;
        let iters = calls.iter().map(|r| r.iterations as f64).sum::<f64>() / c;
        let conv = calls.iter().filter(|r| r.termination == Some(Termination::Converged)).count() as f64;
        (Some(iters), Some(100.0 * conv / c))
    };
    Ok(MetricsTable {
        controller: first.controller,
        sigma_a: first.sigma_a,
        episodes: logs.len(),
        success_rate: rate(Outcome::Success),
        collision_rate: rate(Outcome::Collision),
        timeout_rate: rate(Outcome::Timeout),
        mean_time,
        total_cost: logs.iter().map(|l| l.total_cost).sum(),
        relative_cost: 100.0,
        mean_iterations,
        convergence_rate,
    })
}

/// Express each total cost relative to the largest one.
pub fn normalize_costs(tables: &mut [MetricsTable]) {
    let max = tables.iter().map(|t| t.total_cost).fold(0.0, f64::max);
    for t in tables.iter_mut() {
        t.relative_cost = if max > 0.0 { 100.0 * t.total_cost / max } else { 100.0 };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(x: f64, y: f64, heading: f64) -> Rect {
        Rect { center: Vector2::new(x, y), heading, half_length: 2.0, half_width: 1.0 }
    }

    #[test]
    fn sat_cases() {
        assert!(rect(0.0, 0.0, 0.0).overlaps(&rect(0.0, 0.0, 0.3)));
        assert!(!rect(0.0, 0.0, 0.0).overlaps(&rect(0.0, 3.5, 0.0)));
        // Corner contact at (2, 1).
        assert!(rect(0.0, 0.0, 0.0).overlaps(&rect(4.0, 2.0, 0.0)));
        assert!(!rect(0.0, 0.0, 0.0).overlaps(&rect(4.0 + 1e-9, 2.0, 0.0)));
        // A rotated square whose corner just misses an axis-aligned box.
        let diamond = Rect { center: Vector2::new(2.0 + 2f64.sqrt() + 1e-6, 0.0), heading: std::f64::consts::FRAC_PI_4, half_length: 1.0, half_width: 1.0 };
        assert!(!rect(0.0, 0.0, 0.0).overlaps(&diamond));
    }

    #[test]
    fn empty_world_step_moves_only_ego() {
        let model = WorldModel { road: Road::default(), geometry: EgoGeometry::default(), policy: PolicyConfig::default() };
        let w = WorldState { t: 0.0, step: 0, ego: EgoState::new(0.0, 3.5, 8.0, 0.0, 0.0), vehicles: vec![], params: vec![], history: vec![], seed: 0 };
        let n = step_world(&w, &EgoControl::zero(), 0.2, &model).unwrap();
        assert!((n.ego.px - 1.6).abs() < 1e-12);
        assert_eq!((n.ego.py, n.ego.vx), (3.5, 8.0));
        assert!((n.t - 0.2).abs() < 1e-15);
    }

    #[test]
    fn metrics_rates() {
        let log = EpisodeLog {
            seed: 0,
            controller: ControllerKind::PpDmpc,
            sigma_a: 0.1,
            steps: vec![],
            outcome: Outcome::Success,
            end_time: 5.0,
            total_cost: 10.0,
            aborted: false,
            missed_exit: false,
        };
        let m = aggregate_metrics(&[log]).unwrap();
        assert_eq!((m.success_rate, m.collision_rate, m.timeout_rate), (100.0, 0.0, 0.0));
        let mut tables = vec![m.clone(), m];
        normalize_costs(&mut tables);
        assert!(tables.iter().all(|t| t.relative_cost == 100.0));
    }
}
