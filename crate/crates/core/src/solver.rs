//! SQP solver for the per-controller OCP.
//!
//! Each iteration linearises dynamics and constraints around the current
//! plan and solves a stage-structured QP (see [`crate::qp`]) whose state is
//! augmented with the previous control so that the comfort term stays
//! banded. The QP Hessian is the exact objective Hessian plus the convex part
//! of the smooth-boundary curvature; steps are globalised with an l1 merit
//! function and backtracking.

use nalgebra::{SMatrix, SVector, Vector2, Vector5};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::models::EgoControl;
use crate::models::EgoState;
use crate::ocp::{NlpInstance, Plan, CONTROL_ROWS, STATE_ROWS};
use crate::qp::{ElasticRow, LinearRow, OcpQp, QpOptions, QpStage, QpStatus, QpTerminal};

const NZ: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub feasibility_tol: f64,
    pub optimality_tol: f64,
    pub max_iter: usize,
    /// Armijo sufficient-decrease fraction.
    pub armijo: f64,
    pub backtrack: f64,
    pub min_step: f64,
    pub penalty_init: f64,
    /// Penalty is kept at least this factor above the largest multiplier.
    pub penalty_margin: f64,
    pub qp_max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            feasibility_tol: 1e-6,
            optimality_tol: 1e-6,
            max_iter: 60,
            armijo: 1e-4,
            backtrack: 0.5,
            min_step: 1e-6,
            penalty_init: 10.0,
            penalty_margin: 1.1,
            qp_max_iter: 80,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.feasibility_tol > 0.0
            && self.optimality_tol > 0.0
            && self.max_iter >= 1
            && self.armijo > 0.0
            && self.armijo < 0.5
            && self.backtrack > 0.0
            && self.backtrack < 1.0;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Config(format!("invalid solver config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    InfeasibleRelaxed,
}

/// Lagrange multipliers in the row order of [`NlpInstance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    /// Multiplier of `f(x_k, u_k) - x_{k+1} = 0`, stored at `k`.
    pub dynamics: Vec<[f64; 5]>,
    pub control: Vec<[f64; CONTROL_ROWS]>,
    /// State rows of step `k >= 1`, stored at `k - 1`.
    pub state: Vec<[f64; STATE_ROWS]>,
    pub collision: Vec<Vec<f64>>,
    pub slack: Vec<Vec<f64>>,
}

impl Multipliers {
    pub fn zeros(n: usize, mc: usize) -> Self {
        Self {
            dynamics: vec![[0.0; 5]; n],
            control: vec![[0.0; CONTROL_ROWS]; n],
            state: vec![[0.0; STATE_ROWS]; n],
            collision: vec![vec![0.0; mc]; n],
            slack: vec![vec![0.0; mc]; n],
        }
    }

    fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for v in self.dynamics.iter().flatten() {
            m = m.max(v.abs());
        }
        for v in self.control.iter().flatten().chain(self.state.iter().flatten()) {
            m = m.max(v.abs());
        }
        for v in self.collision.iter().flatten().chain(self.slack.iter().flatten()) {
            m = m.max(v.abs());
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqpRecord {
    pub iteration: usize,
    pub objective: f64,
    pub violation: f64,
    pub kkt: f64,
    pub step: f64,
    /// Accepted line-search step length (0 if the search failed).
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlpSolution {
    pub plan: Plan,
    pub multipliers: Multipliers,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub max_violation: f64,
    pub kkt: f64,
    pub trace: Vec<SqpRecord>,
}

fn v5(a: &[f64; 5]) -> Vector5<f64> {
    Vector5::from_column_slice(a)
}

fn control_vec(u: &EgoControl) -> Vector2<f64> {
    Vector2::new(u.delta, u.av)
}

/// Norm of the Lagrangian gradient plus complementarity, feasibility and
/// dual-sign violations, all measured in the infinity norm.
pub fn kkt_residual(nlp: &NlpInstance, plan: &Plan, mult: &Multipliers) -> Result<f64> {
    let n = nlp.steps();
    let mc = nlp.constrained();
    plan.check(n, mc)?;
    let grad = nlp.gradient(plan)?;
    let mut gx = grad.xs.clone();
    let mut gu = grad.us.clone();
    let mut stat: f64 = 0.0;
    let mut comp: f64 = 0.0;
    let mut neg: f64 = 0.0;
    for k in 0..n {
        let (_, a, b) = nlp.defect(plan, k)?;
        let lam = v5(&mult.dynamics[k]);
        gx[k] += a.transpose() * lam;
        gx[k + 1] -= lam;
        gu[k] += b.transpose() * lam;
        for (row, mu) in nlp.control_rows(&plan.us[k]).iter().zip(&mult.control[k]) {
            gu[k] += row.gu * *mu;
            comp = comp.max((mu * row.value).abs());
            neg = neg.max(-mu);
        }
    }
    for k in 1..=n {
        for (row, mu) in nlp.state_rows(k, &plan.xs[k]).iter().zip(&mult.state[k - 1]) {
            gx[k] += row.gx * *mu;
            comp = comp.max((mu * row.value).abs());
            neg = neg.max(-mu);
        }
        for c in 0..mc {
            let ev = nlp.collision(k, c, &plan.xs[k]);
            let mu = mult.collision[k - 1][c];
            let nu = mult.slack[k - 1][c];
            let s = plan.slacks[k - 1][c];
            gx[k] += ev.gx * mu;
            stat = stat.max((grad.slacks[k - 1][c] - mu - nu).abs());
            comp = comp.max((mu * (ev.value - s)).abs()).max((nu * s).abs());
            neg = neg.max(-mu).max(-nu);
        }
    }
    // x(0) is pinned, so its stationarity row is absorbed by the initial-condition multiplier.
    for g in gx.iter().skip(1) {
        stat = stat.max(g.amax());
    }
    for g in &gu {
        stat = stat.max(g.amax());
    }
    let feas = nlp.max_violation(plan)?.max(0.0);
    Ok(stat + comp + feas + neg.max(0.0))
}

/// l1 constraint violation used by the merit function; `None` if the plan
/// leaves the domain of the dynamics.
fn l1_violation(nlp: &NlpInstance, plan: &Plan) -> Option<f64> {
    let n = nlp.steps();
    let mut v = 0.0;
    for k in 0..n {
        let next = crate::models::ego_step(&plan.xs[k], &plan.us[k], &nlp.geometry, nlp.horizon.dt).ok()?;
        v += (next.to_vector() - plan.xs[k + 1].to_vector()).abs().sum();
        for row in nlp.control_rows(&plan.us[k]) {
            v += row.value.max(0.0);
        }
    }
    for k in 1..=n {
        for row in nlp.state_rows(k, &plan.xs[k]) {
            v += row.value.max(0.0);
        }
        for c in 0..nlp.constrained() {
            let s = plan.slacks[k - 1][c];
            v += (nlp.collision(k, c, &plan.xs[k]).value - s).max(0.0) + (-s).max(0.0);
        }
    }
    v.is_finite().then_some(v)
}

struct Direction {
    dx: Vec<Vector5<f64>>,
    du: Vec<Vector2<f64>>,
    slacks: Vec<Vec<f64>>,
}

/// Convex part of the Hessian of `lam' f(x, u)` over `(x, u)`, by central
/// differences of the exact Jacobians.
fn dynamics_curvature(
    nlp: &NlpInstance,
    x: &EgoState,
    u: &EgoControl,
    lam: &Vector5<f64>,
) -> Result<SMatrix<f64, 7, 7>> {
    let h = 1e-6;
    let grad = |xv: Vector5<f64>, uv: Vector2<f64>| -> Result<SVector<f64, 7>> {
        let (_, a, b) = crate::models::ego_step_jacobian(
            &EgoState::from_vector(&xv),
            &EgoControl::new(uv[0], uv[1]),
            &nlp.geometry,
            nlp.horizon.dt,
        )?;
        let mut g = SVector::<f64, 7>::zeros();
        g.fixed_rows_mut::<5>(0).copy_from(&(a.transpose() * lam));
        g.fixed_rows_mut::<2>(5).copy_from(&(b.transpose() * lam));
        Ok(g)
    };
    let (xv, uv) = (x.to_vector(), control_vec(u));
    let mut m = SMatrix::<f64, 7, 7>::zeros();
    for j in 0..7 {
        let (mut xp, mut up, mut xm, mut um) = (xv, uv, xv, uv);
        if j < 5 {
            xp[j] += h;
            xm[j] -= h;
        } else {
            up[j - 5] += h;
            um[j - 5] -= h;
        }
        let col = (grad(xp, up)? - grad(xm, um)?) / (2.0 * h);
        m.set_column(j, &col);
    }
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = sym.symmetric_eigen();
    for v in eig.eigenvalues.iter_mut() {
        *v = v.max(0.0);
    }
    Ok(eig.recompose())
}

fn build_qp(nlp: &NlpInstance, plan: &Plan, mult: &Multipliers) -> Result<OcpQp<NZ, 2>> {
    let n = nlp.steps();
    let mc = nlp.constrained();
    let w = &nlp.weights;
    let (q2, r2, rd2) = (w.q() * 2.0, w.r() * 2.0, w.rd() * 2.0);
    let xr = nlp.reference.state();
    let slack_w = 2.0 * w.slack_weight;

    let collision_rows = |k: usize, qblock: &mut SMatrix<f64, NZ, NZ>| -> Vec<ElasticRow<NZ>> {
        (0..mc)
            .map(|c| {
                let ev = nlp.collision(k, c, &plan.xs[k]);
                let curv = mult.collision[k - 1][c] * ev.dpx2;
                if curv > 0.0 {
                    qblock[(0, 0)] += curv;
                }
                let mut gx = SVector::<f64, NZ>::zeros();
                gx.fixed_rows_mut::<5>(0).copy_from(&ev.gx);
                ElasticRow { gx, rhs: -ev.value, lower: 0.0, weight: slack_w, linear: 0.0 }
            })
            .collect()
    };
    let state_rows = |k: usize| -> Vec<(SVector<f64, NZ>, f64)> {
        nlp.state_rows(k, &plan.xs[k])
            .iter()
            .map(|row| {
                let mut gx = SVector::<f64, NZ>::zeros();
                gx.fixed_rows_mut::<5>(0).copy_from(&row.gx);
                (gx, -row.value)
            })
            .collect()
    };

    let mut stages = Vec::with_capacity(n);
    for k in 0..n {
        let mut st = QpStage::<NZ, 2>::zeros();
        let (defect, a, b) = nlp.defect(plan, k)?;
        let u = control_vec(&plan.us[k]);
        st.r = r2;
        st.rv = r2 * u;
        if k >= 1 {
            st.q.fixed_view_mut::<5, 5>(0, 0).copy_from(&q2);
            st.q.fixed_view_mut::<2, 2>(5, 5).copy_from(&rd2);
            st.s.fixed_view_mut::<2, 2>(0, 5).copy_from(&(-rd2));
            st.r += rd2;
            let d = u - control_vec(&plan.us[k - 1]);
            let qx = q2 * (plan.xs[k].to_vector() - xr);
            st.qv.fixed_rows_mut::<5>(0).copy_from(&qx);
            st.qv.fixed_rows_mut::<2>(5).copy_from(&(-(rd2 * d)));
            st.rv += rd2 * d;
            for (gx, rhs) in state_rows(k) {
                st.rows.push(LinearRow { gx, gu: Vector2::zeros(), rhs });
            }
            let mut qb = st.q;
            st.elastic = collision_rows(k, &mut qb);
            st.q = qb;
        }
        for row in nlp.control_rows(&plan.us[k]) {
            st.rows.push(LinearRow { gx: SVector::zeros(), gu: row.gu, rhs: -row.value });
        }
        let lam = v5(&mult.dynamics[k]);
        if lam.amax() > 0.0 {
            let h = dynamics_curvature(nlp, &plan.xs[k], &plan.us[k], &lam)?;
            if k >= 1 {
                let mut qx = st.q.fixed_view::<5, 5>(0, 0).into_owned();
                qx += h.fixed_view::<5, 5>(0, 0);
                st.q.fixed_view_mut::<5, 5>(0, 0).copy_from(&qx);
                let mut sx = st.s.fixed_view::<2, 5>(0, 0).into_owned();
                sx += h.fixed_view::<2, 5>(5, 0);
                st.s.fixed_view_mut::<2, 5>(0, 0).copy_from(&sx);
            }
            st.r += h.fixed_view::<2, 2>(5, 5);
        }
        st.a.fixed_view_mut::<5, 5>(0, 0).copy_from(&a);
        st.b.fixed_view_mut::<5, 2>(0, 0).copy_from(&b);
        st.b.fixed_view_mut::<2, 2>(5, 0).copy_from(&nalgebra::Matrix2::identity());
        st.c.fixed_rows_mut::<5>(0).copy_from(&defect);
        stages.push(st);
    }

    let p2 = (nlp.terminal + nlp.terminal.transpose()) * 1.0;
    let mut tq = SMatrix::<f64, NZ, NZ>::zeros();
    tq.fixed_view_mut::<5, 5>(0, 0).copy_from(&p2);
    let mut tqv = SVector::<f64, NZ>::zeros();
    tqv.fixed_rows_mut::<5>(0).copy_from(&(p2 * (plan.xs[n].to_vector() - xr)));
    let elastic = collision_rows(n, &mut tq);
    let terminal = QpTerminal { q: tq, qv: tqv, rows: state_rows(n), elastic };
    Ok(OcpQp { x0: SVector::zeros(), stages, terminal })
}

fn extract(nlp: &NlpInstance, sol: &crate::qp::QpSolution<NZ, 2>) -> (Direction, Multipliers) {
    let n = nlp.steps();
    let mc = nlp.constrained();
    let dx = sol.xs.iter().map(|z| z.fixed_rows::<5>(0).into_owned()).collect();
    let du = sol.us.clone();
    let slacks = (1..=n).map(|k| sol.elastic[k].clone()).collect();
    let mut m = Multipliers::zeros(n, mc);
    for k in 0..n {
        let c = &sol.costates[k];
        m.dynamics[k] = [c[0], c[1], c[2], c[3], c[4]];
        let rows = &sol.row_duals[k];
        let off = if k >= 1 { STATE_ROWS } else { 0 };
        if k >= 1 {
            m.state[k - 1].copy_from_slice(&rows[..STATE_ROWS]);
        }
        m.control[k].copy_from_slice(&rows[off..off + CONTROL_ROWS]);
    }
    m.state[n - 1].copy_from_slice(&sol.row_duals[n][..STATE_ROWS]);
    for k in 1..=n {
        for c in 0..mc {
            let (zc, zb) = sol.elastic_duals[k][c];
            m.collision[k - 1][c] = zc;
            m.slack[k - 1][c] = zb;
        }
    }
    (Direction { dx, du, slacks }, m)
}

/// The QP only reaches its slack bounds approximately; pick the bound
/// multipliers that best fit slack stationarity at the current plan.
fn settle_slack_duals(nlp: &NlpInstance, plan: &Plan, mult: &mut Multipliers) {
    let w = 2.0 * nlp.weights.slack_weight;
    for (k, row) in plan.slacks.iter().enumerate() {
        for (c, s) in row.iter().enumerate() {
            mult.slack[k][c] = (w * s - mult.collision[k][c]).max(0.0);
        }
    }
}

fn step_plan(plan: &Plan, d: &Direction, alpha: f64) -> Plan {
    let xs = plan
        .xs
        .iter()
        .zip(&d.dx)
        .map(|(x, dx)| EgoState::from_vector(&(x.to_vector() + dx * alpha)))
        .collect();
    let us = plan
        .us
        .iter()
        .zip(&d.du)
        .map(|(u, du)| EgoControl::new(u.delta + alpha * du[0], u.av + alpha * du[1]))
        .collect();
    let slacks = plan
        .slacks
        .iter()
        .zip(&d.slacks)
        .map(|(s, t)| s.iter().zip(t).map(|(a, b)| (a + alpha * (b - a)).max(0.0)).collect())
        .collect();
    Plan { xs, us, slacks }
}

fn directional_objective(nlp: &NlpInstance, plan: &Plan, d: &Direction) -> Result<f64> {
    let g = nlp.gradient(plan)?;
    let mut acc = 0.0;
    for (gx, dx) in g.xs.iter().zip(&d.dx) {
        acc += gx.dot(dx);
    }
    for (gu, du) in g.us.iter().zip(&d.du) {
        acc += gu.dot(du);
    }
    for ((gs, s), t) in g.slacks.iter().zip(&plan.slacks).zip(&d.slacks) {
        for i in 0..gs.len() {
            acc += gs[i] * (t[i] - s[i]);
        }
    }
    Ok(acc)
}

/// Prepare a starting plan: pin `x(0)`, fix shapes and use the cheapest feasible slacks.
fn initial_plan(nlp: &NlpInstance, warm: Option<&Plan>) -> Result<Plan> {
    let n = nlp.steps();
    let mut plan = match warm {
        Some(w) if w.xs.len() == n + 1 && w.us.len() == n => w.clone(),
        _ => nlp.default_guess()?,
    };
    plan.xs[0] = nlp.x0;
    plan.slacks = nlp.minimal_slacks(&plan);
    Ok(plan)
}

fn rollout_trial(nlp: &NlpInstance, trial: &Plan) -> Option<Plan> {
    let mut p = Plan::rollout(&nlp.x0, &trial.us, &nlp.geometry, nlp.horizon.dt, nlp.constrained()).ok()?;
    if !is_usable(nlp, &p) {
        return None;
    }
    p.slacks = nlp.minimal_slacks(&p);
    Some(p)
}

fn is_usable(nlp: &NlpInstance, plan: &Plan) -> bool {
    plan.xs.iter().all(|x| x.is_finite() && x.theta1.abs() < 1.2) && l1_violation(nlp, plan).is_some()
}

/// Solve the OCP from an optional warm start.
pub fn solve(nlp: &NlpInstance, warm: Option<&Plan>, cfg: &SolverConfig) -> Result<NlpSolution> {
    let n = nlp.steps();
    let mc = nlp.constrained();
    let mut plan = initial_plan(nlp, warm)?;
    if !is_usable(nlp, &plan) {
        plan = initial_plan(nlp, None)?;
    }

    let warm_eval = match warm {
        Some(w) if w.check(n, mc).is_ok() && w.xs[0] == nlp.x0 => {
            let viol = nlp.max_violation(w).ok();
            let obj = nlp.objective(w).ok();
            match (viol, obj) {
                (Some(v), Some(f)) if v <= cfg.feasibility_tol => Some((w.clone(), f)),
                _ => None,
            }
        }
        _ => None,
    };

    let qp_opts = QpOptions { max_iter: cfg.qp_max_iter, ..QpOptions::default() };
    let mut mult = Multipliers::zeros(n, mc);
    let mut rho = cfg.penalty_init;
    let mut trace = Vec::new();
    let mut best: Option<(Plan, Multipliers, f64, f64)> = None;
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;
    let mut last_kkt = f64::INFINITY;

    for it in 0..cfg.max_iter {
        iterations = it + 1;
        let qp = build_qp(nlp, &plan, &mult)?;
        let qsol = qp.solve(&qp_opts);
        if qsol.status == QpStatus::Failed
            || (qsol.status == QpStatus::MaxIter && qsol.primal_residual > 1e-6)
        {
            if it == 0 {
                status = SolveStatus::InfeasibleRelaxed;
            }
            break;
        }
        let (dir, new_mult) = extract(nlp, &qsol);
        mult = new_mult;
        settle_slack_duals(nlp, &plan, &mut mult);

        let objective = nlp.objective(&plan)?;
        let violation = nlp.max_violation(&plan)?;
        let kkt = kkt_residual(nlp, &plan, &mult)?;
        last_kkt = kkt;
        let step = dir
            .dx
            .iter()
            .map(|d| d.amax())
            .chain(dir.du.iter().map(|d| d.amax()))
            .fold(0.0f64, f64::max);
        trace.push(SqpRecord { iteration: it, objective, violation, kkt, step, alpha: 0.0 });
        log::trace!("sqp it={it} f={objective:.6e} viol={violation:.2e} kkt={kkt:.2e} step={step:.2e}");

        if violation <= cfg.feasibility_tol {
            if best.as_ref().is_none_or(|b| objective < b.2) {
                best = Some((plan.clone(), mult.clone(), objective, kkt));
            }
            // A vanishing step means the QP sees a KKT point; the residual
            // floor then comes from the QP tolerance.
            if kkt <= cfg.optimality_tol || step <= 1e-9 {
                status = SolveStatus::Converged;
                break;
            }
        }

        rho = rho.max(cfg.penalty_margin * mult.max_abs());
        let Some(v0) = l1_violation(nlp, &plan) else { break };
        let phi0 = objective + rho * v0;
        let slope = directional_objective(nlp, &plan, &dir)? - rho * v0;
        // Below this the merit difference is rounding noise from the defects.
        let noise = 1e-10 * (1.0 + phi0.abs());
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= cfg.min_step {
            let trial = step_plan(&plan, &dir, alpha);
            if let Some(v) = l1_violation(nlp, &trial) {
                let f = nlp.objective(&trial)?;
                if f + rho * v <= phi0 + cfg.armijo * alpha * slope.min(0.0) + noise {
                    accepted = Some(trial);
                    break;
                }
                if alpha == 1.0 {
                    // Second-order correction: re-simulate the full-step controls
                    // so the dynamics defects vanish.
                    if let Some(soc) = rollout_trial(nlp, &trial) {
                        if let Some(v) = l1_violation(nlp, &soc) {
                            let f = nlp.objective(&soc)?;
                            if f + rho * v <= phi0 + cfg.armijo * slope.min(0.0) + noise {
                                accepted = Some(soc);
                                break;
                            }
                        }
                    }
                }
            }
            alpha *= cfg.backtrack;
        }
        match accepted {
            Some(mut p) => {
                if let Some(r) = trace.last_mut() {
                    r.alpha = alpha;
                }
                // Given the states, the cheapest admissible slack is optimal.
                p.slacks = nlp.minimal_slacks(&p);
                plan = p;
            }
            None => break,
        }
    }

    // Re-evaluate the final iterate if the loop ended on an accepted step.
    let violation = nlp.max_violation(&plan)?;
    let objective = nlp.objective(&plan)?;
    if status != SolveStatus::Converged
        && violation <= cfg.feasibility_tol
        && best.as_ref().is_none_or(|b| objective < b.2)
    {
        best = Some((plan.clone(), mult.clone(), objective, last_kkt));
    }

    let (mut out_plan, mut out_mult, mut out_obj, mut out_kkt) = match (status, best) {
        (SolveStatus::Converged, _) => (plan, mult, objective, last_kkt),
        (_, Some(b)) => b,
        (_, None) => (plan, mult, objective, last_kkt),
    };
    if let Some((w, fw)) = warm_eval {
        if out_obj > fw {
            out_plan = w;
            out_obj = fw;
            out_mult = Multipliers::zeros(n, mc);
            out_kkt = f64::INFINITY;
            if status == SolveStatus::Converged {
                status = SolveStatus::MaxIter;
            }
        }
    }
    let max_violation = nlp.max_violation(&out_plan)?;
    if status == SolveStatus::MaxIter && max_violation > cfg.feasibility_tol && iterations <= 1 {
        status = SolveStatus::InfeasibleRelaxed;
    }
    Ok(NlpSolution {
        plan: out_plan,
        multipliers: out_mult,
        objective: out_obj,
        status,
        iterations,
        max_violation,
        kkt: out_kkt,
        trace,
    })
}
