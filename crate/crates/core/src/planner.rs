//! Coupled prediction and planning: the iterative DMPC loop between the ego
//! planner and the predictor, the decoupled single-pass baseline, and the
//! decision manager choosing among the keep, left and right controllers.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::constraints::ControllerTag;
use crate::error::{Error, Result};
use crate::models::{ego_step, EgoControl, EgoGeometry, EgoState};
use crate::ocp::{assemble_nlp_in_lane, OcpConfig, Plan};
use crate::predictor::{NoiseKey, Observation, PredictionBundle, Predictor, PredictorConfig};
use crate::solver::{solve, NlpSolution, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmpcConfig {
    pub p_max: usize,
    /// Blend weight of a fresh prediction.
    pub w: f64,
    /// Blend weight of a fresh ego optimum.
    pub w_e: f64,
    pub epsilon: f64,
}

impl DmpcConfig {
    /// Weights `1 / (M + 1)` for `m` surrounding vehicles.
    pub fn for_vehicles(m: usize) -> Self {
        let w = 1.0 / (m as f64 + 1.0);
        Self { p_max: 15, w, w_e: w, epsilon: 5.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if self.p_max >= 1 && unit(self.w) && unit(self.w_e) && self.epsilon > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid DMPC config {self:?}")))
        }
    }
}

impl Default for DmpcConfig {
    fn default() -> Self {
        Self::for_vehicles(4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecisionConfig {
    pub q_e: f64,
    pub q_c: f64,
    /// Weight of the exit-distance term.
    pub q_s: f64,
    /// Number of past decisions remembered.
    pub memory: usize,
    /// Longitudinal position of the exit (m).
    pub d_exit: f64,
    pub d_max: f64,
    pub gamma: f64,
    /// Lane the exit leaves from.
    pub exit_lane: usize,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        Self { q_e: 1.0, q_c: 5.0, q_s: 500.0, memory: 10, d_exit: 250.0, d_max: 500.0, gamma: 0.8, exit_lane: 0 }
    }
}

impl DecisionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.q_e > 0.0
            && self.q_c > 0.0
            && self.q_s > 0.0
            && self.d_max > self.d_exit
            && (0.0..=1.0).contains(&self.gamma);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid decision config {self:?}")))
        }
    }

    /// The decision leading toward the exit lane from the ego's lane.
    pub fn exit_decision(&self, lane: usize) -> ControllerTag {
        if lane > self.exit_lane {
            ControllerTag::Rc
        } else if lane < self.exit_lane {
            ControllerTag::Lc
        } else {
            ControllerTag::Nc
        }
    }
}

/// The last `m` decisions, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionHistory {
    capacity: usize,
    entries: VecDeque<ControllerTag>,
}

impl DecisionHistory {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn push(&mut self, tag: ControllerTag) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(tag);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ControllerTag> {
        self.entries.iter()
    }
}

/// Ego part of a DMPC iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoTrajectory {
    pub xs: Vec<EgoState>,
    pub us: Vec<EgoControl>,
}

impl EgoTrajectory {
    pub fn from_plan(plan: &Plan) -> Self {
        Self { xs: plan.xs.clone(), us: plan.us.clone() }
    }

    pub fn state_vector(&self) -> Vec<f64> {
        self.xs.iter().flat_map(|x| x.to_array()).collect()
    }

    pub fn control_vector(&self) -> Vec<f64> {
        self.us.iter().flat_map(|u| u.to_array()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateState {
    pub ego: EgoTrajectory,
    pub prediction: PredictionBundle,
    pub loss: f64,
    pub p: usize,
}

impl IterateState {
    /// First iterate, with the infinite loss sentinel.
    pub fn initial(ego: EgoTrajectory, prediction: PredictionBundle) -> Self {
        Self { ego, prediction, loss: f64::INFINITY, p: 0 }
    }
}

/// Warm start for the next time step: drop the first entry, extend with one
/// zero-control step.
pub fn shift(prev: &Plan, g: &EgoGeometry, dt: f64) -> Result<Plan> {
    if prev.us.is_empty() || prev.xs.len() != prev.us.len() + 1 {
        return Err(Error::Dimension("cannot shift an empty plan".into()));
    }
    let mut xs = prev.xs[1..].to_vec();
    let mut us = prev.us[1..].to_vec();
    xs.push(ego_step(xs.last().unwrap(), &EgoControl::zero(), g, dt)?);
    us.push(EgoControl::zero());
    let mut slacks: Vec<Vec<f64>> = prev.slacks.iter().skip(1).cloned().collect();
    let mc = prev.slacks.first().map_or(0, Vec::len);
    slacks.push(vec![0.0; mc]);
    Ok(Plan { xs, us, slacks })
}

fn blend_slices(opt: &[f64], prev: &[f64], weight: f64) -> Result<Vec<f64>> {
    if opt.len() != prev.len() {
        return Err(Error::Dimension(format!("cannot blend {} with {} entries", opt.len(), prev.len())));
    }
    Ok(opt.iter().zip(prev).map(|(a, b)| weight * a + (1.0 - weight) * b).collect())
}

/// `weight * opt + (1 - weight) * prev` on states and controls.
pub fn convex_update(opt: &EgoTrajectory, prev: &EgoTrajectory, weight: f64) -> Result<EgoTrajectory> {
    if !(weight > 0.0 && weight < 1.0) {
        return Err(Error::Config(format!("blend weight {weight} outside (0, 1)")));
    }
    if opt.xs.len() != prev.xs.len() || opt.us.len() != prev.us.len() {
        return Err(Error::Dimension("ego trajectories differ in length".into()));
    }
    let xs = blend_slices(&opt.state_vector(), &prev.state_vector(), weight)?;
    let us = blend_slices(&opt.control_vector(), &prev.control_vector(), weight)?;
    Ok(EgoTrajectory {
        xs: xs.chunks(5).map(|c| EgoState::new(c[0], c[1], c[2], c[3], c[4])).collect(),
        us: us.chunks(2).map(|c| EgoControl::new(c[0], c[1])).collect(),
    })
}

fn diff_norm(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("loss operands have {} and {} entries", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Sum of the 2-norms of the iterate changes in predicted states, predicted
/// accelerations, ego states and ego controls.
pub fn loss(curr: &IterateState, prev: &IterateState) -> Result<f64> {
    Ok(diff_norm(&curr.prediction.state_vector(), &prev.prediction.state_vector())?
        + diff_norm(&curr.prediction.accel_vector(), &prev.prediction.accel_vector())?
        + diff_norm(&curr.ego.state_vector(), &prev.ego.state_vector())?
        + diff_norm(&curr.ego.control_vector(), &prev.ego.control_vector())?)
}

/// Why a planning call stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Loss fell below the tolerance.
    Converged,
    /// Loss stopped decreasing.
    LossIncrease,
    MaxIter,
    /// A later solve failed; the last good iterate was kept.
    SolveFailed,
    /// Decoupled baseline: one prediction, one solve.
    SinglePass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterateRecord {
    pub p: usize,
    /// `L^{p+1}`; infinite when the iterate never got a loss (`null` in JSON).
    #[serde(with = "loss_json")]
    pub loss: f64,
    pub objective: f64,
    pub solver_iterations: usize,
    /// False for the final iterate whose loss did not decrease.
    pub accepted: bool,
}

/// JSON has no infinity, so a missing loss is written as `null`.
mod loss_json {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub solution: NlpSolution,
    /// Number of OCP solves.
    pub iterations: usize,
    pub termination: Termination,
    pub trace: Vec<IterateRecord>,
}

impl PlanOutcome {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }
}

/// Everything a controller needs besides the current state.
#[derive(Clone, Copy)]
pub struct PlanningContext<'a> {
    pub ocp: &'a OcpConfig,
    pub solver: &'a SolverConfig,
    pub predictor: &'a dyn Predictor,
    pub pred_cfg: &'a PredictorConfig,
}

fn start_trajectory(x0: &EgoState, warm: &Plan) -> EgoTrajectory {
    let mut ego = EgoTrajectory::from_plan(warm);
    if let Some(first) = ego.xs.first_mut() {
        *first = *x0;
    }
    ego
}

/// Iterate planning and prediction until the loss stops decreasing, drops
/// below `epsilon`, or `p_max` solves are spent. The returned solution is
/// always a raw solver output, never a blend.
pub fn dmpc_iterate(
    tag: ControllerTag,
    x0: &EgoState,
    lane: Option<usize>,
    obs: &Observation,
    ctx: &PlanningContext,
    cfg: &DmpcConfig,
    warm: &Plan,
    step: u64,
) -> Result<PlanOutcome> {
    cfg.validate()?;
    let key = |p: usize| NoiseKey { step, iterate: p as u64 };
    let ego0 = start_trajectory(x0, warm);
    let pred0 = ctx.predictor.predict(obs, &ego0.xs, ctx.pred_cfg, key(0))?;
    let mut state = IterateState::initial(ego0, pred0);
    let mut warm_plan = warm.clone();
    let mut best: Option<NlpSolution> = None;
    let mut trace: Vec<IterateRecord> = Vec::new();

    for p in 0..cfg.p_max {
        let solved = assemble_nlp_in_lane(tag, x0, lane, &state.prediction, ctx.ocp)
            .and_then(|nlp| solve(&nlp, Some(&warm_plan), ctx.solver));
        let sol = match solved {
            Ok(s) => s,
            Err(e) => {
                return match best {
                    Some(solution) => Ok(PlanOutcome { solution, iterations: p, termination: Termination::SolveFailed, trace }),
                    None => Err(e),
                };
            }
        };
        let ego = convex_update(&EgoTrajectory::from_plan(&sol.plan), &state.ego, cfg.w_e)?;
        let fresh = ctx.predictor.predict(obs, &ego.xs, ctx.pred_cfg, key(p + 1))?;
        let prediction = fresh.blend(&state.prediction, cfg.w)?;
        let mut next = IterateState { ego, prediction, loss: f64::INFINITY, p: p + 1 };
        next.loss = loss(&next, &state)?;
        let mut record = IterateRecord {
            p,
            loss: next.loss,
            objective: sol.objective,
            solver_iterations: sol.iterations,
            accepted: true,
        };
        // Ties count as a loss increase: continuation needs strict decrease.
        if next.loss >= state.loss {
            record.accepted = false;
            trace.push(record);
            let solution = best.expect("an earlier iterate exists whenever the loss is finite");
            return Ok(PlanOutcome { solution, iterations: p + 1, termination: Termination::LossIncrease, trace });
        }
        trace.push(record);
        if next.loss < cfg.epsilon {
            return Ok(PlanOutcome { solution: sol, iterations: p + 1, termination: Termination::Converged, trace });
        }
        warm_plan = sol.plan.clone();
        best = Some(sol);
        state = next;
    }
    let solution = best.expect("p_max >= 1");
    Ok(PlanOutcome { solution, iterations: cfg.p_max, termination: Termination::MaxIter, trace })
}

/// Decoupled baseline: predict once from the warm start, solve once.
pub fn decoupled_plan(
    tag: ControllerTag,
    x0: &EgoState,
    lane: Option<usize>,
    obs: &Observation,
    ctx: &PlanningContext,
    warm: &Plan,
    step: u64,
) -> Result<PlanOutcome> {
    let ego = start_trajectory(x0, warm);
    let pred = ctx.predictor.predict(obs, &ego.xs, ctx.pred_cfg, NoiseKey { step, iterate: 0 })?;
    let nlp = assemble_nlp_in_lane(tag, x0, lane, &pred, ctx.ocp)?;
    let sol = solve(&nlp, Some(warm), ctx.solver)?;
    let record = IterateRecord {
        p: 0,
        loss: f64::INFINITY,
        objective: sol.objective,
        solver_iterations: sol.iterations,
        accepted: true,
    };
    Ok(PlanOutcome { solution: sol, iterations: 1, termination: Termination::SinglePass, trace: vec![record] })
}

/// Number of remembered decisions that differ from `tag`.
pub fn switching_cost(history: &DecisionHistory, tag: ControllerTag) -> usize {
    history.iter().filter(|h| **h != tag).count()
}

/// Exit-proximity penalty in `[0, 1]` for not taking the exit-directed decision.
pub fn exit_cost(x0: &EgoState, tag: ControllerTag, exit_tag: ControllerTag, cfg: &DecisionConfig) -> f64 {
    if tag == exit_tag {
        return 0.0;
    }
    let remaining = ((cfg.d_exit - x0.px) / cfg.d_max).clamp(0.0, 1.0);
    1.0 - remaining.powf(cfg.gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub tag: ControllerTag,
    pub control: EgoControl,
    /// Weighted total per candidate in `nc, lc, rc` order; `None` if unavailable.
    pub totals: [Option<f64>; 3],
}

/// Pick the candidate with the lowest weighted cost (ties resolved in
/// `nc, lc, rc` order), record it in the history and return its first control.
pub fn decide(
    candidates: &[(ControllerTag, &NlpSolution)],
    history: &mut DecisionHistory,
    x0: &EgoState,
    lane: usize,
    cfg: &DecisionConfig,
) -> Result<Decision> {
    let exit_tag = cfg.exit_decision(lane);
    let mut totals = [None; 3];
    for (tag, sol) in candidates {
        let f_c = switching_cost(history, *tag) as f64;
        let f_s = exit_cost(x0, *tag, exit_tag, cfg);
        let total = cfg.q_e * sol.objective + cfg.q_c * f_c + cfg.q_s * f_s;
        if total.is_finite() {
            totals[tag.index()] = Some(total);
        }
    }
    let mut winner: Option<(ControllerTag, f64)> = None;
    for tag in ControllerTag::ALL {
        if let Some(t) = totals[tag.index()] {
            if winner.is_none_or(|(_, best)| t < best) {
                winner = Some((tag, t));
            }
        }
    }
    let (tag, _) = winner.ok_or_else(|| Error::Decision("no controller produced a plan".into()))?;
    let sol = candidates.iter().find(|(t, _)| *t == tag).map(|(_, s)| *s).expect("winner is a candidate");
    history.push(tag);
    let control = sol.plan.us.first().copied().ok_or_else(|| Error::Decision("empty plan".into()))?;
    Ok(Decision { tag, control, totals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ego_step;
    use approx::assert_abs_diff_eq;

    fn straight(n: usize) -> Plan {
        let g = EgoGeometry::default();
        let x0 = EgoState::new(0.0, 3.5, 8.0, 0.0, 0.0);
        Plan::rollout(&x0, &vec![EgoControl::zero(); n], &g, 0.2, 0).unwrap()
    }

    #[test]
    fn shift_of_straight_line_advances_one_step() {
        let g = EgoGeometry::default();
        let plan = straight(25);
        let s = shift(&plan, &g, 0.2).unwrap();
        let x1 = plan.xs[1];
        let expected = Plan::rollout(&x1, &vec![EgoControl::zero(); 25], &g, 0.2, 0).unwrap();
        for (a, b) in s.xs.iter().zip(&expected.xs) {
            assert_abs_diff_eq!(a.px, b.px, epsilon = 1e-9);
            assert_eq!(a.py, b.py);
        }
    }

    #[test]
    fn shift_pads_zero_control_without_defect() {
        let g = EgoGeometry::default();
        let mut us = vec![EgoControl::new(0.01, 0.3); 25];
        us[24] = EgoControl::new(0.05, -1.0);
        let plan = Plan::rollout(&EgoState::new(0.0, 3.5, 8.0, 0.0, 0.0), &us, &g, 0.2, 0).unwrap();
        let s = shift(&plan, &g, 0.2).unwrap();
        assert_eq!(s.us[24], EgoControl::zero());
        assert_eq!(s.xs[25], ego_step(&s.xs[24], &EgoControl::zero(), &g, 0.2).unwrap());
        assert_eq!(s.xs[24], plan.xs[25]);
    }

    fn trajectory(value: f64) -> EgoTrajectory {
        EgoTrajectory {
            xs: vec![EgoState::new(value, value, value, value, value); 3],
            us: vec![EgoControl::new(value, value); 2],
        }
    }

    #[test]
    fn blend_examples() {
        let w = DmpcConfig::for_vehicles(4).w_e;
        assert_eq!(w, 0.2);
        let b = convex_update(&trajectory(10.0), &trajectory(0.0), w).unwrap();
        assert_abs_diff_eq!(b.xs[1].vx, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.us[0].av, 2.0, epsilon = 1e-15);

        let near_one = convex_update(&trajectory(10.0), &trajectory(0.0), 1.0 - 1e-12).unwrap();
        assert_abs_diff_eq!(near_one.xs[0].px, 10.0, epsilon = 1e-9);
        let same = convex_update(&trajectory(3.0), &trajectory(3.0), 0.37).unwrap();
        assert_eq!(same, trajectory(3.0));
    }

    #[test]
    fn blend_rejects_bad_input() {
        assert!(convex_update(&trajectory(1.0), &trajectory(0.0), 1.0).is_err());
        let mut short = trajectory(0.0);
        short.us.pop();
        assert!(matches!(convex_update(&trajectory(1.0), &short, 0.5), Err(Error::Dimension(_))));
    }

    fn iterate(ego: EgoTrajectory) -> IterateState {
        let prediction = PredictionBundle { states: vec![vec![]; 3], accels: vec![vec![]; 3] };
        IterateState::initial(ego, prediction)
    }

    #[test]
    fn loss_examples() {
        let a = iterate(trajectory(1.0));
        assert_eq!(loss(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.ego.xs[2].theta2 += 1.0;
        assert_abs_diff_eq!(loss(&b, &a).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn switching_and_exit_costs() {
        let mut h = DecisionHistory::new(10);
        assert_eq!(switching_cost(&h, ControllerTag::Rc), 0);
        for t in [ControllerTag::Nc, ControllerTag::Nc, ControllerTag::Rc] {
            h.push(t);
        }
        assert_eq!(switching_cost(&h, ControllerTag::Rc), 2);
        assert_eq!(switching_cost(&h, ControllerTag::Nc), 1);

        let cfg = DecisionConfig { d_exit: 250.0, d_max: 500.0, gamma: 1.0, ..Default::default() };
        let x = EgoState::new(0.0, 3.5, 8.0, 0.0, 0.0);
        assert_abs_diff_eq!(exit_cost(&x, ControllerTag::Nc, ControllerTag::Rc, &cfg), 0.5, epsilon = 1e-15);
        assert_eq!(exit_cost(&x, ControllerTag::Rc, ControllerTag::Rc, &cfg), 0.0);
        let at_exit = EgoState { px: 250.0, ..x };
        assert_eq!(exit_cost(&at_exit, ControllerTag::Lc, ControllerTag::Rc, &cfg), 1.0);
    }

    #[test]
    fn history_is_bounded() {
        let mut h = DecisionHistory::new(3);
        for _ in 0..5 {
            h.push(ControllerTag::Lc);
        }
        h.push(ControllerTag::Nc);
        assert_eq!(h.len(), 3);
        assert_eq!(h.iter().copied().collect::<Vec<_>>(), vec![ControllerTag::Lc, ControllerTag::Lc, ControllerTag::Nc]);
    }
}
