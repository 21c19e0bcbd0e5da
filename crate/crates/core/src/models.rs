//! Vehicle dynamics and the behavioural policy of surrounding traffic.
//!
//! The ego vehicle is a kinematic tractor-trailer with five states
//! `(px, py, vx, theta1, theta2)` driven by steering angle and body-frame
//! acceleration. Surrounding vehicles follow a straight-line kinematic
//! model whose acceleration comes from [`traffic_policy`].

use nalgebra::{Matrix5, Matrix5x2, Vector5};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

/// Physical acceleration limit applied to every surrounding vehicle (m/s^2).
pub const TRAFFIC_ACCEL_LIMIT: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoState {
    /// Longitudinal position of the tractor-trailer joint (m).
    pub px: f64,
    /// Lateral position of the joint (m).
    pub py: f64,
    /// Longitudinal speed at the joint (m/s).
    pub vx: f64,
    /// Tractor heading (rad).
    pub theta1: f64,
    /// Trailer heading (rad).
    pub theta2: f64,
}

impl EgoState {
    pub fn new(px: f64, py: f64, vx: f64, theta1: f64, theta2: f64) -> Self {
        Self { px, py, vx, theta1, theta2 }
    }

    pub fn to_vector(&self) -> Vector5<f64> {
        Vector5::new(self.px, self.py, self.vx, self.theta1, self.theta2)
    }

    pub fn from_vector(v: &Vector5<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.px, self.py, self.vx, self.theta1, self.theta2]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoControl {
    /// Steering angle (rad).
    pub delta: f64,
    /// Longitudinal acceleration in the body frame (m/s^2).
    pub av: f64,
}

impl EgoControl {
    pub fn new(delta: f64, av: f64) -> Self {
        Self { delta, av }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_array(&self) -> [f64; 2] {
        [self.delta, self.av]
    }
}

/// Dimensions of the tractor-trailer. The tractor extends `l1` ahead of the
/// joint; the trailer body extends `length - l1` behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EgoGeometry {
    pub l1: f64,
    pub l2: f64,
    pub width: f64,
    /// Maximum lateral half-span used by the lateral constraints.
    pub dwe: f64,
    pub length: f64,
}

impl Default for EgoGeometry {
    fn default() -> Self {
        Self { l1: 4.0, l2: 8.0, width: 2.5, dwe: 1.4, length: 16.0 }
    }
}

impl EgoGeometry {
    /// Distance from the joint to the rear of the trailer.
    pub fn rear_overhang(&self) -> f64 {
        self.length - self.l1
    }

    /// Longitudinal offset of the footprint centre relative to the joint.
    pub fn center_offset(&self) -> f64 {
        0.5 * (self.l1 - self.rear_overhang())
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.l1 > 0.0
            && self.l2 > 0.0
            && self.width > 0.0
            && self.length > self.l1
            && self.dwe >= 0.5 * self.width;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid ego geometry {self:?}")))
        }
    }
}

/// Straight multi-lane road; lane 0 is the rightmost lane and is centred at y = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Road {
    pub lane_width: f64,
    pub lane_count: usize,
}

impl Default for Road {
    fn default() -> Self {
        Self { lane_width: 3.5, lane_count: 3 }
    }
}

impl Road {
    pub fn lane_center(&self, lane: usize) -> f64 {
        lane as f64 * self.lane_width
    }

    pub fn lane_centers(&self) -> Vec<f64> {
        (0..self.lane_count).map(|i| self.lane_center(i)).collect()
    }

    /// Nearest lane to a lateral position.
    pub fn lane_of(&self, py: f64) -> usize {
        let idx = (py / self.lane_width).round();
        idx.clamp(0.0, (self.lane_count - 1) as f64) as usize
    }

    pub fn lane_lower_edge(&self, lane: usize) -> f64 {
        self.lane_center(lane) - 0.5 * self.lane_width
    }

    pub fn lane_upper_edge(&self, lane: usize) -> f64 {
        self.lane_center(lane) + 0.5 * self.lane_width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficVehicleState {
    /// Longitudinal position of the vehicle centre (m).
    pub px: f64,
    /// Lateral position of the vehicle centre (m).
    pub py: f64,
    pub vx: f64,
    pub theta: f64,
    pub width: f64,
    pub length: f64,
    pub lane: usize,
}

impl TrafficVehicleState {
    pub fn new(px: f64, lane: usize, vx: f64, road: &Road) -> Self {
        Self {
            px,
            py: road.lane_center(lane),
            vx,
            theta: 0.0,
            width: 1.8,
            length: 4.5,
            lane,
        }
    }

    pub fn rear(&self) -> f64 {
        self.px - 0.5 * self.length
    }

    pub fn front(&self) -> f64 {
        self.px + 0.5 * self.length
    }
}

/// Per-vehicle behaviour parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrafficParams {
    pub v_ref: f64,
    /// Desired time headway to the leader (s).
    pub time_headway: f64,
    /// Standstill bumper gap (m).
    pub standstill_gap: f64,
    /// Maximum tracking acceleration (m/s^2).
    pub accel_gain: f64,
    /// Willingness to open a gap for the ego vehicle, in [0, 1].
    pub cooperativeness: f64,
    pub a_min: f64,
    pub a_max: f64,
}

impl Default for TrafficParams {
    fn default() -> Self {
        Self {
            v_ref: 30.0 / 3.6,
            time_headway: 1.0,
            standstill_gap: 2.0,
            accel_gain: 1.5,
            cooperativeness: 0.5,
            a_min: -TRAFFIC_ACCEL_LIMIT,
            a_max: TRAFFIC_ACCEL_LIMIT,
        }
    }
}

impl TrafficParams {
    pub fn as_vector(&self) -> [f64; 5] {
        [
            self.v_ref,
            self.time_headway,
            self.standstill_gap,
            self.accel_gain,
            self.cooperativeness,
        ]
    }

    pub fn from_vector(v: [f64; 5]) -> Self {
        Self {
            v_ref: v[0],
            time_headway: v[1],
            standstill_gap: v[2],
            accel_gain: v[3],
            cooperativeness: v[4],
            ..Self::default()
        }
    }
}

/// Constants of the behavioural policy shared by all vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Comfortable deceleration in the closing-speed part of the desired gap.
    pub comfort_decel: f64,
    /// Acceleration magnitude of a fully cooperative vehicle (m/s^2).
    pub coop_gain: f64,
    /// Lateral overlap (m) at which encroachment starts to count; negative
    /// overlap down to `-encroach_threshold` already triggers cooperation.
    pub encroach_threshold: f64,
    /// Lateral distance over which the encroachment activation ramps to 1.
    pub encroach_ramp: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { comfort_decel: 2.0, coop_gain: 2.0, encroach_threshold: 0.25, encroach_ramp: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyContext<'a> {
    pub road: &'a Road,
    pub ego: &'a EgoGeometry,
    pub policy: &'a PolicyConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonConfig {
    pub steps: usize,
    pub dt: f64,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self { steps: 25, dt: 0.2 }
    }
}

impl HorizonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps >= 2 && self.dt > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid horizon {self:?}")))
        }
    }
}

fn check_heading(theta1: f64) -> Result<()> {
    if theta1.abs() >= FRAC_PI_2 || !theta1.is_finite() {
        Err(Error::Domain(format!("tractor heading {theta1} outside (-pi/2, pi/2)")))
    } else {
        Ok(())
    }
}

fn derivative_unchecked(x: &Vector5<f64>, u: &EgoControl, g: &EgoGeometry) -> Vector5<f64> {
    let (vx, th1, th2) = (x[2], x[3], x[4]);
    let c1 = th1.cos();
    Vector5::new(
        vx,
        vx * th1.tan(),
        u.av * c1,
        vx * u.delta.tan() / (g.l1 * c1),
        vx * (th1 - th2).sin() / (g.l2 * c1),
    )
}

fn derivative_jacobians(
    x: &Vector5<f64>,
    u: &EgoControl,
    g: &EgoGeometry,
) -> (Matrix5<f64>, Matrix5x2<f64>) {
    let (vx, th1, th2) = (x[2], x[3], x[4]);
    let (s1, c1) = th1.sin_cos();
    let tan1 = s1 / c1;
    let tand = u.delta.tan();
    let d12 = th1 - th2;
    let (sd, cd) = d12.sin_cos();

    let mut jx = Matrix5::zeros();
    jx[(0, 2)] = 1.0;
    jx[(1, 2)] = tan1;
    jx[(1, 3)] = vx / (c1 * c1);
    jx[(2, 3)] = -u.av * s1;
    jx[(3, 2)] = tand / (g.l1 * c1);
    jx[(3, 3)] = vx * tand * s1 / (g.l1 * c1 * c1);
    jx[(4, 2)] = sd / (g.l2 * c1);
    // d/dtheta1 [sin(t1 - t2) / cos t1] = cos t2 / cos^2 t1
    jx[(4, 3)] = vx * th2.cos() / (g.l2 * c1 * c1);
    jx[(4, 4)] = -vx * cd / (g.l2 * c1);

    let mut ju = Matrix5x2::zeros();
    ju[(2, 1)] = c1;
    let cdel = u.delta.cos();
    ju[(3, 0)] = vx / (g.l1 * c1 * cdel * cdel);
    (jx, ju)
}

/// Continuous-time tractor-trailer dynamics.
pub fn ego_derivative(x: &EgoState, u: &EgoControl, g: &EgoGeometry) -> Result<Vector5<f64>> {
    check_heading(x.theta1)?;
    Ok(derivative_unchecked(&x.to_vector(), u, g))
}

/// One explicit RK4 step of [`ego_derivative`].
/// Longest internal RK4 step (s); longer steps are split evenly.
pub const MAX_RK4_STEP: f64 = 0.05;

fn substeps(dt: f64) -> (usize, f64) {
    let n = ((dt / MAX_RK4_STEP) - 1e-9).ceil().max(1.0) as usize;
    (n, dt / n as f64)
}

/// Advance the ego by `dt` with classical RK4, split into substeps of at most [`MAX_RK4_STEP`].
pub fn ego_step(x: &EgoState, u: &EgoControl, g: &EgoGeometry, dt: f64) -> Result<EgoState> {
    let v = rk4_vector(&x.to_vector(), u, g, dt)?;
    Ok(EgoState::from_vector(&v))
}

pub(crate) fn rk4_vector(
    x: &Vector5<f64>,
    u: &EgoControl,
    g: &EgoGeometry,
    dt: f64,
) -> Result<Vector5<f64>> {
    let (n, h) = substeps(dt);
    let mut x = *x;
    for _ in 0..n {
        x = rk4_single(&x, u, g, h)?;
    }
    Ok(x)
}

fn rk4_single(x: &Vector5<f64>, u: &EgoControl, g: &EgoGeometry, dt: f64) -> Result<Vector5<f64>> {
    check_heading(x[3])?;
    let k1 = derivative_unchecked(x, u, g);
    let x2 = x + k1 * (0.5 * dt);
    check_heading(x2[3])?;
    let k2 = derivative_unchecked(&x2, u, g);
    let x3 = x + k2 * (0.5 * dt);
    check_heading(x3[3])?;
    let k3 = derivative_unchecked(&x3, u, g);
    let x4 = x + k3 * dt;
    check_heading(x4[3])?;
    let k4 = derivative_unchecked(&x4, u, g);
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// [`ego_step`] together with its exact Jacobians with respect to state and control.
pub fn ego_step_jacobian(
    x: &EgoState,
    u: &EgoControl,
    g: &EgoGeometry,
    dt: f64,
) -> Result<(EgoState, Matrix5<f64>, Matrix5x2<f64>)> {
    let (n, h) = substeps(dt);
    let mut xv = x.to_vector();
    let mut jac_x = Matrix5::identity();
    let mut jac_u = Matrix5x2::zeros();
    for _ in 0..n {
        let (next, a, b) = rk4_single_jacobian(&xv, u, g, h)?;
        jac_x = a * jac_x;
        jac_u = a * jac_u + b;
        xv = next;
    }
    Ok((EgoState::from_vector(&xv), jac_x, jac_u))
}

fn rk4_single_jacobian(
    x1: &Vector5<f64>,
    u: &EgoControl,
    g: &EgoGeometry,
    dt: f64,
) -> Result<(Vector5<f64>, Matrix5<f64>, Matrix5x2<f64>)> {
    check_heading(x1[3])?;
    let k1 = derivative_unchecked(x1, u, g);
    let (dk1x, dk1u) = derivative_jacobians(x1, u, g);

    let x2 = x1 + k1 * (0.5 * dt);
    check_heading(x2[3])?;
    let k2 = derivative_unchecked(&x2, u, g);
    let (a2, b2) = derivative_jacobians(&x2, u, g);
    let dk2x = a2 * (Matrix5::identity() + dk1x * (0.5 * dt));
    let dk2u = a2 * dk1u * (0.5 * dt) + b2;

    let x3 = x1 + k2 * (0.5 * dt);
    check_heading(x3[3])?;
    let k3 = derivative_unchecked(&x3, u, g);
    let (a3, b3) = derivative_jacobians(&x3, u, g);
    let dk3x = a3 * (Matrix5::identity() + dk2x * (0.5 * dt));
    let dk3u = a3 * dk2u * (0.5 * dt) + b3;

    let x4 = x1 + k3 * dt;
    check_heading(x4[3])?;
    let k4 = derivative_unchecked(&x4, u, g);
    let (a4, b4) = derivative_jacobians(&x4, u, g);
    let dk4x = a4 * (Matrix5::identity() + dk3x * dt);
    let dk4u = a4 * dk3u * dt + b4;

    let next = x1 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let jac_x = Matrix5::identity() + (dk1x + dk2x * 2.0 + dk3x * 2.0 + dk4x) * (dt / 6.0);
    let jac_u = (dk1u + dk2u * 2.0 + dk3u * 2.0 + dk4u) * (dt / 6.0);
    Ok((next, jac_x, jac_u))
}

/// Advance a surrounding vehicle with zero steering under a held acceleration.
///
/// The acceleration is clamped to the physical limit and the vehicle stops
/// instead of reversing.
pub fn traffic_step(v: &TrafficVehicleState, a: f64, dt: f64) -> TrafficVehicleState {
    let a = a.clamp(-TRAFFIC_ACCEL_LIMIT, TRAFFIC_ACCEL_LIMIT);
    let mut next = *v;
    let v_end = v.vx + a * dt;
    if v_end >= 0.0 {
        next.px = v.px + v.vx * dt + 0.5 * a * dt * dt;
        next.vx = v_end;
    } else {
        // Comes to rest inside the step.
        next.px = v.px + 0.5 * v.vx * v.vx / (-a);
        next.vx = 0.0;
    }
    next
}

/// Index of the closest vehicle ahead in the same lane.
pub fn leader_of(all: &[TrafficVehicleState], i: usize) -> Option<usize> {
    let me = &all[i];
    all.iter()
        .enumerate()
        .filter(|(j, o)| *j != i && o.lane == me.lane && o.px > me.px)
        .min_by(|a, b| a.1.px.total_cmp(&b.1.px))
        .map(|(j, _)| j)
}

fn desired_gap(v: f64, dv: f64, p: &TrafficParams, policy: &PolicyConfig) -> f64 {
    let dynamic = v * p.time_headway + v * dv / (2.0 * (p.accel_gain * policy.comfort_decel).sqrt());
    p.standstill_gap + dynamic.max(0.0)
}

/// Lateral overlap between the ego footprint and a lane; negative values
/// give the clearance to the lane edge.
fn lane_overlap(ego: &EgoState, lane: usize, ctx: &PolicyContext) -> f64 {
    let lo = ctx.road.lane_lower_edge(lane);
    let hi = ctx.road.lane_upper_edge(lane);
    (ego.py + ctx.ego.dwe).min(hi) - (ego.py - ctx.ego.dwe).max(lo)
}

/// Encroachment activation in [0, 1] of the ego vehicle toward a lane.
pub fn encroachment(ego: &EgoState, lane: usize, ctx: &PolicyContext) -> f64 {
    let ov = lane_overlap(ego, lane, ctx);
    ((ov + ctx.policy.encroach_threshold) / ctx.policy.encroach_ramp).clamp(0.0, 1.0)
}

fn cooperation_term(
    me: &TrafficVehicleState,
    lead: Option<&TrafficVehicleState>,
    p: &TrafficParams,
    ego: &EgoState,
    ctx: &PolicyContext,
) -> f64 {
    if p.cooperativeness <= 0.0 {
        return 0.0;
    }
    let act = encroachment(ego, me.lane, ctx);
    if act <= 0.0 {
        return 0.0;
    }
    let s_star = p.standstill_gap + me.vx * p.time_headway;
    let ego_center = ego.px + ctx.ego.center_offset();
    // A vehicle boxed in by its own leader cannot clear the tractor front.
    let room_ahead = lead.is_none_or(|l| l.rear() - (ego.px + ctx.ego.l1) >= me.length + s_star);
    if me.px <= ego_center || !room_ahead {
        // Fall back behind the trailer.
        let gap = (ego.px - ctx.ego.rear_overhang()) - me.front();
        let deficit = ((s_star - gap) / s_star).clamp(0.0, 1.0);
        -p.cooperativeness * ctx.policy.coop_gain * act * deficit
    } else {
        // Pull away from the tractor front.
        let gap = me.rear() - (ego.px + ctx.ego.l1);
        let deficit = ((s_star - gap) / s_star).clamp(0.0, 1.0);
        p.cooperativeness * ctx.policy.coop_gain * act * deficit
    }
}

/// Acceleration of every surrounding vehicle: reference-speed tracking plus
/// gap keeping to the in-lane leader (intelligent-driver form) plus a linear
/// cooperation term toward an encroaching ego vehicle.
pub fn traffic_policy(
    all: &[TrafficVehicleState],
    ego: &EgoState,
    params: &[TrafficParams],
    ctx: &PolicyContext,
) -> Vec<f64> {
    debug_assert_eq!(all.len(), params.len());
    (0..all.len())
        .map(|i| {
            let me = &all[i];
            let p = &params[i];
            let free = p.accel_gain * (1.0 - (me.vx / p.v_ref).powi(4));
            let lead = leader_of(all, i).map(|l| &all[l]);
            let interaction = match lead {
                Some(lead) => {
                    let gap = (lead.rear() - me.front()).max(0.1);
                    let s_star = desired_gap(me.vx, me.vx - lead.vx, p, ctx.policy);
                    -p.accel_gain * (s_star / gap).powi(2)
                }
                None => 0.0,
            };
            let coop = cooperation_term(me, lead, p, ego, ctx);
            let a_lo = p.a_min.max(-TRAFFIC_ACCEL_LIMIT);
            let a_hi = p.a_max.min(TRAFFIC_ACCEL_LIMIT);
            (free + interaction + coop).clamp(a_lo, a_hi)
        })
        .collect()
}
