//! Per-controller optimal control problem with a fixed prediction.
//!
//! Decision variables are the ego states `X = x(0..=N)`, controls
//! `U = u(0..N)` and collision slacks `S = s(1..=N)` (one column per
//! constrained vehicle). The slack at step 0 would multiply a constraint
//! on the fixed initial state and is left out of the layout.

use nalgebra::{Matrix2, Matrix5, SMatrix, Vector2, Vector5};
use serde::{Deserialize, Serialize};

use crate::constraints::{
    build_constraint_set, corridor, lane_change_residual, lane_keep_residual, smooth_boundary_dpx,
    ConstraintKind, ConstraintSet, ControllerTag, SafetyParams, SmoothBoundaryParams, Snapshot,
};
use crate::error::{Error, Result};
use crate::models::{ego_step_jacobian, EgoControl, EgoGeometry, EgoState, HorizonConfig};
use crate::predictor::PredictionBundle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveWeights {
    pub q_y: f64,
    pub q_v: f64,
    pub q_a: f64,
    pub q_delta: f64,
    pub q_da: f64,
    pub q_ddelta: f64,
    pub slack_weight: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { q_y: 0.5, q_v: 1.0, q_a: 0.1, q_delta: 20.0, q_da: 1.0, q_ddelta: 50.0, slack_weight: 1e4 }
    }
}

impl ObjectiveWeights {
    pub fn q(&self) -> Matrix5<f64> {
        Matrix5::from_diagonal(&Vector5::new(0.0, self.q_y, self.q_v, 0.0, 0.0))
    }

    /// Control weight in `(delta, av)` order.
    pub fn r(&self) -> Matrix2<f64> {
        Matrix2::new(self.q_delta, 0.0, 0.0, self.q_a)
    }

    pub fn rd(&self) -> Matrix2<f64> {
        Matrix2::new(self.q_ddelta, 0.0, 0.0, self.q_da)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.q_y, self.q_v, self.q_a, self.q_delta, self.q_da, self.q_ddelta, self.slack_weight];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(format!("negative weight in {self:?}")));
        }
        if self.q_a <= 0.0 || self.q_delta <= 0.0 {
            return Err(Error::Config("control weights must be positive".into()));
        }
        if self.slack_weight < 100.0 * self.q_y.max(self.q_v) {
            return Err(Error::Config("slack weight must dominate the tracking weights".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoxBounds {
    pub delta_max: f64,
    pub av_min: f64,
    pub av_max: f64,
    pub vx_min: f64,
    pub vx_max: f64,
    /// Tractor heading limit; keeps every RK4 stage away from the `cos = 0` singularity.
    pub theta_max: f64,
}

impl Default for BoxBounds {
    fn default() -> Self {
        Self { delta_max: 0.5, av_min: -4.0, av_max: 2.0, vx_min: 0.0, vx_max: 25.0, theta_max: 0.6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSignal {
    pub py: f64,
    pub vx: f64,
}

impl ReferenceSignal {
    pub fn state(&self) -> Vector5<f64> {
        Vector5::new(0.0, self.py, self.vx, 0.0, 0.0)
    }
}

/// Ego trajectory candidate: states, controls and slacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub xs: Vec<EgoState>,
    pub us: Vec<EgoControl>,
    /// `slacks[k - 1][c]` belongs to step `k` and constrained vehicle `c`.
    pub slacks: Vec<Vec<f64>>,
}

impl Plan {
    pub fn horizon(&self) -> usize {
        self.us.len()
    }

    /// Roll `us` out from `x0` with zero slacks.
    pub fn rollout(x0: &EgoState, us: &[EgoControl], g: &EgoGeometry, dt: f64, mc: usize) -> Result<Self> {
        let mut xs = Vec::with_capacity(us.len() + 1);
        xs.push(*x0);
        for u in us {
            let next = crate::models::ego_step(xs.last().unwrap(), u, g, dt)?;
            xs.push(next);
        }
        Ok(Self { xs, us: us.to_vec(), slacks: vec![vec![0.0; mc]; us.len()] })
    }

    pub fn check(&self, n: usize, mc: usize) -> Result<()> {
        if self.xs.len() != n + 1 || self.us.len() != n || self.slacks.len() != n {
            return Err(Error::Dimension(format!(
                "plan has {} states, {} controls, {} slack rows for horizon {n}",
                self.xs.len(),
                self.us.len(),
                self.slacks.len()
            )));
        }
        if self.slacks.iter().any(|row| row.len() != mc) {
            return Err(Error::Dimension(format!("slack rows must have {mc} entries")));
        }
        Ok(())
    }

    /// Flatten as `[X, U, S]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(5 * self.xs.len() + 2 * self.us.len());
        for x in &self.xs {
            v.extend_from_slice(&x.to_array());
        }
        for u in &self.us {
            v.extend_from_slice(&u.to_array());
        }
        for row in &self.slacks {
            v.extend_from_slice(row);
        }
        v
    }

    pub fn from_flat(v: &[f64], n: usize, mc: usize) -> Result<Self> {
        let len = 5 * (n + 1) + 2 * n + n * mc;
        if v.len() != len {
            return Err(Error::Dimension(format!("flat vector has {} entries, expected {len}", v.len())));
        }
        let xs = (0..=n).map(|k| EgoState::new(v[5 * k], v[5 * k + 1], v[5 * k + 2], v[5 * k + 3], v[5 * k + 4])).collect();
        let ou = 5 * (n + 1);
        let us = (0..n).map(|k| EgoControl::new(v[ou + 2 * k], v[ou + 2 * k + 1])).collect();
        let os = ou + 2 * n;
        let slacks = (0..n).map(|k| v[os + k * mc..os + (k + 1) * mc].to_vec()).collect();
        Ok(Self { xs, us, slacks })
    }
}

/// Gradient of the objective laid out like a [`Plan`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlanGradient {
    pub xs: Vec<Vector5<f64>>,
    pub us: Vec<Vector2<f64>>,
    pub slacks: Vec<Vec<f64>>,
}

impl PlanGradient {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for x in &self.xs {
            v.extend(x.iter());
        }
        for u in &self.us {
            v.extend(u.iter());
        }
        for row in &self.slacks {
            v.extend_from_slice(row);
        }
        v
    }
}

fn control_vector(u: &EgoControl) -> Vector2<f64> {
    Vector2::new(u.delta, u.av)
}

fn quad5(m: &Matrix5<f64>, v: &Vector5<f64>) -> f64 {
    (v.transpose() * m * v)[0]
}

fn quad2(m: &Matrix2<f64>, v: &Vector2<f64>) -> f64 {
    (v.transpose() * m * v)[0]
}

/// Tracking, control, comfort, slack and terminal terms of the ego objective.
pub fn objective_value(
    plan: &Plan,
    refs: &ReferenceSignal,
    w: &ObjectiveWeights,
    terminal: &Matrix5<f64>,
) -> Result<f64> {
    let n = plan.horizon();
    let mc = plan.slacks.first().map_or(0, Vec::len);
    plan.check(n, mc)?;
    let (q, r, rd) = (w.q(), w.r(), w.rd());
    let xr = refs.state();
    let mut f = 0.0;
    for k in 0..n {
        f += quad5(&q, &(plan.xs[k].to_vector() - xr));
        f += quad2(&r, &control_vector(&plan.us[k]));
    }
    for k in 0..n.saturating_sub(1) {
        f += quad2(&rd, &(control_vector(&plan.us[k + 1]) - control_vector(&plan.us[k])));
    }
    for row in &plan.slacks {
        f += w.slack_weight * row.iter().map(|s| s * s).sum::<f64>();
    }
    f += quad5(terminal, &(plan.xs[n].to_vector() - xr));
    Ok(f)
}

pub fn objective_gradient(
    plan: &Plan,
    refs: &ReferenceSignal,
    w: &ObjectiveWeights,
    terminal: &Matrix5<f64>,
) -> Result<PlanGradient> {
    let n = plan.horizon();
    let mc = plan.slacks.first().map_or(0, Vec::len);
    plan.check(n, mc)?;
    let (q, r, rd) = (w.q(), w.r(), w.rd());
    let xr = refs.state();
    let mut xs: Vec<Vector5<f64>> = (0..n).map(|k| q * (plan.xs[k].to_vector() - xr) * 2.0).collect();
    xs.push((terminal + terminal.transpose()) * (plan.xs[n].to_vector() - xr));
    let mut us: Vec<Vector2<f64>> = plan.us.iter().map(|u| r * control_vector(u) * 2.0).collect();
    for k in 0..n.saturating_sub(1) {
        let d = rd * (control_vector(&plan.us[k + 1]) - control_vector(&plan.us[k])) * 2.0;
        us[k + 1] += d;
        us[k] -= d;
    }
    let slacks = plan
        .slacks
        .iter()
        .map(|row| row.iter().map(|s| 2.0 * w.slack_weight * s).collect())
        .collect();
    Ok(PlanGradient { xs, us, slacks })
}

/// Fixed-point iteration of the discrete algebraic Riccati equation from `P = Q`.
pub fn solve_dare<const NX: usize, const NU: usize>(
    a: &SMatrix<f64, NX, NX>,
    b: &SMatrix<f64, NX, NU>,
    q: &SMatrix<f64, NX, NX>,
    r: &SMatrix<f64, NU, NU>,
    tol: f64,
    max_iter: usize,
) -> Result<SMatrix<f64, NX, NX>> {
    let mut p = *q;
    for _ in 0..max_iter {
        let next = dare_map(a, b, q, r, &p)?;
        let diff = (next - p).amax();
        p = next;
        if diff < tol {
            return Ok(p);
        }
    }
    Err(Error::Solver(format!("Riccati iteration did not converge in {max_iter} iterations")))
}

/// One application of the Riccati map; its fixed point solves the DARE.
pub fn dare_map<const NX: usize, const NU: usize>(
    a: &SMatrix<f64, NX, NX>,
    b: &SMatrix<f64, NX, NU>,
    q: &SMatrix<f64, NX, NX>,
    r: &SMatrix<f64, NU, NU>,
    p: &SMatrix<f64, NX, NX>,
) -> Result<SMatrix<f64, NX, NX>> {
    let btp = b.transpose() * p;
    let gain = (r + btp * b)
        .try_inverse()
        .ok_or_else(|| Error::Solver("singular Riccati gain".into()))?;
    let atpb = a.transpose() * p * b;
    let next = a.transpose() * p * a - atpb * gain * atpb.transpose() + q;
    Ok((next + next.transpose()) * 0.5)
}

/// Terminal weight from the LQR of the dynamics linearised at the reference.
pub fn terminal_weight(
    refs: &ReferenceSignal,
    g: &EgoGeometry,
    w: &ObjectiveWeights,
    h: &HorizonConfig,
) -> Result<Matrix5<f64>> {
    let xr = EgoState::from_vector(&refs.state());
    let (_, a, b) = ego_step_jacobian(&xr, &EgoControl::zero(), g, h.dt)?;
    solve_dare(&a, &b, &w.q(), &w.r(), 1e-10, 10_000)
}

/// Everything [`assemble_nlp`] needs besides the controller tag, state and prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpConfig {
    pub geometry: EgoGeometry,
    pub safety: SafetyParams,
    pub weights: ObjectiveWeights,
    pub bounds: BoxBounds,
    pub horizon: HorizonConfig,
    pub v_ref: f64,
    pub terminal: Matrix5<f64>,
}

impl OcpConfig {
    pub fn new(
        geometry: EgoGeometry,
        safety: SafetyParams,
        weights: ObjectiveWeights,
        bounds: BoxBounds,
        horizon: HorizonConfig,
        v_ref: f64,
    ) -> Result<Self> {
        geometry.validate()?;
        safety.validate()?;
        weights.validate()?;
        horizon.validate()?;
        let refs = ReferenceSignal { py: 0.0, vx: v_ref };
        let terminal = terminal_weight(&refs, &geometry, &weights, &horizon)?;
        Ok(Self { geometry, safety, weights, bounds, horizon, v_ref, terminal })
    }
}

/// One inequality row `value <= 0` with its gradient in `(x_k, u_k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowEval {
    pub value: f64,
    pub gx: Vector5<f64>,
    pub gu: Vector2<f64>,
}

/// Collision row `value - s <= 0` at one step, with the curvature of
/// `value` along `px` (the only direction in which it is nonlinear).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionEval {
    pub value: f64,
    pub gx: Vector5<f64>,
    pub dpx2: f64,
}

pub const CONTROL_ROWS: usize = 4;
pub const STATE_ROWS: usize = 6;

#[derive(Debug, Clone)]
pub struct NlpInstance {
    pub tag: ControllerTag,
    pub x0: EgoState,
    pub horizon: HorizonConfig,
    pub prediction: PredictionBundle,
    pub constraints: ConstraintSet,
    /// Smooth-boundary shape per constrained vehicle (None for lane keeping).
    pub boundaries: Vec<Option<SmoothBoundaryParams>>,
    pub weights: ObjectiveWeights,
    pub terminal: Matrix5<f64>,
    pub reference: ReferenceSignal,
    pub geometry: EgoGeometry,
    pub safety: SafetyParams,
    pub bounds: BoxBounds,
    /// Lateral corridor `(lo, hi)` for steps `1..=N`, stored at `k - 1`.
    pub corridor: Vec<(f64, f64)>,
}

impl NlpInstance {
    pub fn steps(&self) -> usize {
        self.horizon.steps
    }

    pub fn constrained(&self) -> usize {
        self.constraints.len()
    }

    /// Number of scalar decision variables.
    pub fn dimension(&self) -> usize {
        let n = self.steps();
        5 * (n + 1) + 2 * n + n * self.constrained()
    }

    pub fn objective(&self, plan: &Plan) -> Result<f64> {
        objective_value(plan, &self.reference, &self.weights, &self.terminal)
    }

    pub fn gradient(&self, plan: &Plan) -> Result<PlanGradient> {
        objective_gradient(plan, &self.reference, &self.weights, &self.terminal)
    }

    /// Control-box rows at step `k < N`.
    pub fn control_rows(&self, u: &EgoControl) -> [RowEval; CONTROL_ROWS] {
        let b = &self.bounds;
        let z5 = Vector5::zeros();
        [
            RowEval { value: u.delta - b.delta_max, gx: z5, gu: Vector2::new(1.0, 0.0) },
            RowEval { value: -u.delta - b.delta_max, gx: z5, gu: Vector2::new(-1.0, 0.0) },
            RowEval { value: u.av - b.av_max, gx: z5, gu: Vector2::new(0.0, 1.0) },
            RowEval { value: b.av_min - u.av, gx: z5, gu: Vector2::new(0.0, -1.0) },
        ]
    }

    /// Corridor, speed and heading rows at step `k >= 1`.
    pub fn state_rows(&self, k: usize, x: &EgoState) -> [RowEval; STATE_ROWS] {
        let (lo, hi) = self.corridor[k - 1];
        let b = &self.bounds;
        let z2 = Vector2::zeros();
        let e = |i: usize, s: f64| {
            let mut v = Vector5::zeros();
            v[i] = s;
            v
        };
        let th = self.theta_limit();
        [
            RowEval { value: x.py - hi, gx: e(1, 1.0), gu: z2 },
            RowEval { value: lo - x.py, gx: e(1, -1.0), gu: z2 },
            RowEval { value: x.vx - b.vx_max, gx: e(2, 1.0), gu: z2 },
            RowEval { value: b.vx_min - x.vx, gx: e(2, -1.0), gu: z2 },
            RowEval { value: x.theta1 - th, gx: e(3, 1.0), gu: z2 },
            RowEval { value: -x.theta1 - th, gx: e(3, -1.0), gu: z2 },
        ]
    }

    /// Heading limit, relaxed if the initial state already exceeds it.
    pub fn theta_limit(&self) -> f64 {
        self.bounds.theta_max.max(self.x0.theta1.abs() + 0.05)
    }

    /// Collision row of constrained vehicle `c` at step `k >= 1`, without slack.
    pub fn collision(&self, k: usize, c: usize, x: &EgoState) -> CollisionEval {
        let cv = &self.constraints.vehicles[c];
        let veh = &self.prediction.states[k][cv.index];
        match (cv.kind, &self.boundaries[c]) {
            (ConstraintKind::LaneChange { .. }, Some(bp)) => {
                let value = lane_change_residual(x, veh, bp, &self.geometry, 0.0);
                let d1 = smooth_boundary_dpx(x, veh, bp);
                let kk = bp.sharpness;
                let t1 = (kk * (x.px - veh.px + bp.alpha1)).tanh();
                let t2 = (kk * (veh.px - x.px + bp.alpha2)).tanh();
                // d/dpx of (1 - t1^2) is -2 k t1 (1 - t1^2); the t2 term flips sign twice.
                let d2 = 0.5 * bp.alpha0 * kk * kk * (-2.0 * t1 * (1.0 - t1 * t1) - 2.0 * t2 * (1.0 - t2 * t2));
                CollisionEval {
                    value,
                    gx: Vector5::new(bp.beta * d1, -bp.beta, 0.0, 0.0, 0.0),
                    dpx2: bp.beta * d2,
                }
            }
            _ => CollisionEval {
                value: lane_keep_residual(x, veh, &self.safety, &self.geometry, 0.0),
                gx: Vector5::new(1.0, 0.0, self.safety.ts, 0.0, 0.0),
                dpx2: 0.0,
            },
        }
    }

    /// Dynamics defect `f(x_k, u_k) - x_{k+1}` with its Jacobians.
    pub fn defect(&self, plan: &Plan, k: usize) -> Result<(Vector5<f64>, Matrix5<f64>, nalgebra::Matrix5x2<f64>)> {
        let (next, a, b) = ego_step_jacobian(&plan.xs[k], &plan.us[k], &self.geometry, self.horizon.dt)?;
        Ok((next.to_vector() - plan.xs[k + 1].to_vector(), a, b))
    }

    /// Slacks that make every collision row of `plan` feasible at least cost.
    pub fn minimal_slacks(&self, plan: &Plan) -> Vec<Vec<f64>> {
        (1..=self.steps())
            .map(|k| {
                (0..self.constrained())
                    .map(|c| self.collision(k, c, &plan.xs[k]).value.max(0.0))
                    .collect()
            })
            .collect()
    }

    /// Largest violation of dynamics, initial condition, bounds and collision rows.
    pub fn max_violation(&self, plan: &Plan) -> Result<f64> {
        let n = self.steps();
        plan.check(n, self.constrained())?;
        let mut v = (plan.xs[0].to_vector() - self.x0.to_vector()).amax();
        for k in 0..n {
            v = v.max(self.defect(plan, k)?.0.amax());
            for row in self.control_rows(&plan.us[k]) {
                v = v.max(row.value);
            }
        }
        for k in 1..=n {
            for row in self.state_rows(k, &plan.xs[k]) {
                v = v.max(row.value);
            }
            for c in 0..self.constrained() {
                let s = plan.slacks[k - 1][c];
                v = v.max(self.collision(k, c, &plan.xs[k]).value - s).max(-s);
            }
        }
        Ok(v)
    }

    /// Zero-control rollout from `x0`, used when no warm start is available.
    pub fn default_guess(&self) -> Result<Plan> {
        let n = self.steps();
        let us = vec![EgoControl::zero(); n];
        let mut plan = Plan::rollout(&self.x0, &us, &self.geometry, self.horizon.dt, self.constrained())?;
        plan.slacks = self.minimal_slacks(&plan);
        Ok(plan)
    }
}

/// Corridor for each step, widened early on when `x0` starts outside it so
/// the hard rows stay reachable. The widening decays quadratically, which
/// asks for little lateral motion in the first steps.
fn corridor_schedule(lo: f64, hi: f64, x0: &EgoState, n: usize) -> Vec<(f64, f64)> {
    let shrink = (n / 2).max(1) as f64;
    let above = (x0.py - hi).max(0.0);
    let below = (lo - x0.py).max(0.0);
    (1..=n)
        .map(|k| {
            let t = (k - 1) as f64 / shrink;
            let f = (1.0 - t * t).max(0.0);
            let pad = 0.05;
            let h = if above > 0.0 { hi + (above + pad) * f } else { hi };
            let l = if below > 0.0 { lo - (below + pad) * f } else { lo };
            (l, h)
        })
        .collect()
}

/// Build the OCP of controller `tag` around a fixed prediction.
pub fn assemble_nlp(
    tag: ControllerTag,
    x0: &EgoState,
    pred: &PredictionBundle,
    cfg: &OcpConfig,
) -> Result<NlpInstance> {
    assemble_nlp_in_lane(tag, x0, None, pred, cfg)
}

/// As [`assemble_nlp`], with the ego's lane given explicitly.
pub fn assemble_nlp_in_lane(
    tag: ControllerTag,
    x0: &EgoState,
    lane: Option<usize>,
    pred: &PredictionBundle,
    cfg: &OcpConfig,
) -> Result<NlpInstance> {
    let n = cfg.horizon.steps;
    if pred.steps() != n {
        return Err(Error::Dimension(format!("prediction spans {} steps, horizon is {n}", pred.steps())));
    }
    if !x0.is_finite() {
        return Err(Error::Domain(format!("non-finite initial state {x0:?}")));
    }
    let snap = Snapshot { ego: x0, vehicles: &pred.states[0], geometry: &cfg.geometry, lane };
    let constraints = build_constraint_set(tag, &snap, &cfg.safety)?;
    let boundaries = constraints
        .vehicles
        .iter()
        .map(|cv| match cv.kind {
            ConstraintKind::LaneChange { beta } => {
                Some(SmoothBoundaryParams::for_vehicle(&pred.states[0][cv.index], beta, &cfg.geometry, &cfg.safety))
            }
            ConstraintKind::LaneKeep => None,
        })
        .collect();
    let (lo, hi) = corridor(tag, constraints.current_lane, &cfg.safety, &cfg.geometry)?;
    let reference = ReferenceSignal { py: cfg.safety.road.lane_center(constraints.target_lane), vx: cfg.v_ref };
    Ok(NlpInstance {
        tag,
        x0: *x0,
        horizon: cfg.horizon,
        prediction: pred.clone(),
        constraints,
        boundaries,
        weights: cfg.weights,
        terminal: cfg.terminal,
        reference,
        geometry: cfg.geometry,
        safety: cfg.safety,
        bounds: cfg.bounds,
        corridor: corridor_schedule(lo, hi, x0, n),
    })
}
