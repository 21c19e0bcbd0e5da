//! Collision-avoidance residuals for the three lane controllers.
//!
//! Every residual is written as `r <= 0` (feasible). Slack enters as a
//! nonnegative magnitude `s` that is always subtracted, so it can only relax.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::models::{EgoGeometry, EgoState, Road, TrafficVehicleState};

/// Half-width (m) of the longitudinal band around each end of the smooth
/// boundary inside which it departs noticeably from the exact rectangle.
pub const TRANSITION_BAND: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerTag {
    Nc,
    Lc,
    Rc,
}

impl ControllerTag {
    pub const ALL: [ControllerTag; 3] = [ControllerTag::Nc, ControllerTag::Lc, ControllerTag::Rc];

    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerTag::Nc => "nc",
            ControllerTag::Lc => "lc",
            ControllerTag::Rc => "rc",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            ControllerTag::Nc => 0,
            ControllerTag::Lc => 1,
            ControllerTag::Rc => 2,
        }
    }

    /// Lane the controller steers toward, if the road has one.
    pub fn target_lane(&self, current: usize, road: &Road) -> Option<usize> {
        match self {
            ControllerTag::Nc => Some(current),
            ControllerTag::Lc => (current + 1 < road.lane_count).then_some(current + 1),
            ControllerTag::Rc => current.checked_sub(1),
        }
    }
}

impl fmt::Display for ControllerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ControllerTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nc" => Ok(ControllerTag::Nc),
            "lc" => Ok(ControllerTag::Lc),
            "rc" => Ok(ControllerTag::Rc),
            other => Err(Error::Config(format!("unknown controller tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyParams {
    /// Longitudinal distance margin in the lane-keeping constraint (m).
    pub ds: f64,
    /// Time headway in the lane-keeping constraint (s).
    pub ts: f64,
    /// Longitudinal margin added to both ends of the lane-change obstacle (m).
    pub long_margin: f64,
    /// Lateral margin added to the neighbour's side (m).
    pub lat_margin: f64,
    /// How far beyond the neighbour's lane edge the far-field bound sits (m).
    pub far_field_offset: f64,
    /// tanh argument scale (1/m).
    pub sharpness: f64,
    /// Longitudinal window for selecting constrained neighbours (m).
    pub window: f64,
    pub max_target_vehicles: usize,
    pub road: Road,
}

impl Default for SafetyParams {
    fn default() -> Self {
        Self {
            ds: 2.0,
            ts: 1.0,
            long_margin: 2.5,
            lat_margin: 0.3,
            far_field_offset: 0.5,
            sharpness: 0.5,
            window: 40.0,
            max_target_vehicles: 4,
            road: Road::default(),
        }
    }
}

impl SafetyParams {
    pub fn lane_width(&self) -> f64 {
        self.road.lane_width
    }

    pub fn lane_centers(&self) -> Vec<f64> {
        self.road.lane_centers()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ds >= 0.0 && self.ts >= 0.0 && self.road.lane_width > 0.0 && self.sharpness > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid safety params {self:?}")))
        }
    }
}

/// Shape of one smooth lane-change obstacle boundary.
///
/// `alpha0` is signed: positive for obstacles bounding the ego from below
/// (`beta = +1`), negative for obstacles above (`beta = -1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothBoundaryParams {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub beta: f64,
    pub sharpness: f64,
}

impl SmoothBoundaryParams {
    /// Boundary for a neighbour, sized from both vehicles' footprints and the margins.
    pub fn for_vehicle(
        veh: &TrafficVehicleState,
        beta: f64,
        g: &EgoGeometry,
        p: &SafetyParams,
    ) -> Self {
        let half_lane = 0.5 * p.road.lane_width;
        let alpha1 = 0.5 * veh.length + g.l1 + p.long_margin;
        let alpha2 = 0.5 * veh.length + g.rear_overhang() + p.long_margin;
        let (alpha0, alpha3) = if beta > 0.0 {
            let far = veh.py - half_lane - p.far_field_offset;
            let near = veh.py + 0.5 * veh.width + p.lat_margin;
            (near - far, far)
        } else {
            // The residual adds dwe for both signs of beta, so the upper
            // bound on py is shifted down by 2 dwe here.
            let far = veh.py + half_lane - 2.0 * g.dwe + p.far_field_offset;
            let near = veh.py - 0.5 * veh.width - p.lat_margin - 2.0 * g.dwe;
            (near - far, far)
        };
        Self { alpha0, alpha1, alpha2, alpha3, beta, sharpness: p.sharpness }
    }

    /// Longitudinal interval of ego joint positions where the plateau is active.
    pub fn interval(&self, veh_px: f64) -> (f64, f64) {
        (veh_px - self.alpha1, veh_px + self.alpha2)
    }
}

/// Smooth lateral boundary built from two opposing tanh ramps.
pub fn smooth_boundary(ego: &EgoState, veh: &TrafficVehicleState, p: &SmoothBoundaryParams) -> f64 {
    let k = p.sharpness;
    let t1 = (k * (ego.px - veh.px + p.alpha1)).tanh();
    let t2 = (k * (veh.px - ego.px + p.alpha2)).tanh();
    0.5 * p.alpha0 * (t1 + t2) + p.alpha3
}

/// Derivative of [`smooth_boundary`] with respect to the ego longitudinal position.
pub fn smooth_boundary_dpx(ego: &EgoState, veh: &TrafficVehicleState, p: &SmoothBoundaryParams) -> f64 {
    let k = p.sharpness;
    let t1 = (k * (ego.px - veh.px + p.alpha1)).tanh();
    let t2 = (k * (veh.px - ego.px + p.alpha2)).tanh();
    0.5 * p.alpha0 * k * ((1.0 - t1 * t1) - (1.0 - t2 * t2))
}

/// Longitudinal headway residual toward a leader in the ego lane, measured
/// from the tractor front to the leader's rear bumper.
pub fn lane_keep_residual(
    ego: &EgoState,
    lead: &TrafficVehicleState,
    p: &SafetyParams,
    g: &EgoGeometry,
    s: f64,
) -> f64 {
    ego.px - lead.rear() + g.l1 + p.ds + p.ts * ego.vx - s
}

/// Gradient of [`lane_keep_residual`] with respect to the ego state.
pub fn lane_keep_gradient(p: &SafetyParams) -> [f64; 5] {
    [1.0, 0.0, p.ts, 0.0, 0.0]
}

pub fn lane_change_residual(
    ego: &EgoState,
    veh: &TrafficVehicleState,
    p: &SmoothBoundaryParams,
    g: &EgoGeometry,
    s: f64,
) -> f64 {
    p.beta * (smooth_boundary(ego, veh, p) + g.dwe - ego.py) - s
}

/// Gradient of [`lane_change_residual`] with respect to the ego state.
pub fn lane_change_gradient(
    ego: &EgoState,
    veh: &TrafficVehicleState,
    p: &SmoothBoundaryParams,
) -> [f64; 5] {
    [p.beta * smooth_boundary_dpx(ego, veh, p), -p.beta, 0.0, 0.0, 0.0]
}

/// Allowed lateral corridor `[lo, hi]` of the joint for a controller.
pub fn corridor(
    tag: ControllerTag,
    current_lane: usize,
    p: &SafetyParams,
    g: &EgoGeometry,
) -> Result<(f64, f64)> {
    let road = &p.road;
    let target = tag
        .target_lane(current_lane, road)
        .ok_or_else(|| Error::NoTargetLane(tag.to_string()))?;
    let low_lane = current_lane.min(target);
    let high_lane = current_lane.max(target);
    Ok((road.lane_lower_edge(low_lane) + g.dwe, road.lane_upper_edge(high_lane) - g.dwe))
}

/// Residual pair `(py - hi, lo - py)` keeping the joint inside the corridor.
pub fn lane_limit_residuals(
    ego: &EgoState,
    p: &SafetyParams,
    g: &EgoGeometry,
    tag: ControllerTag,
    current_lane: usize,
) -> Result<[f64; 2]> {
    let (lo, hi) = corridor(tag, current_lane, p, g)?;
    Ok([ego.py - hi, lo - ego.py])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintKind {
    /// Longitudinal headway toward an in-lane leader.
    LaneKeep,
    /// Smooth lateral boundary; `beta = +1` keeps the ego above the neighbour.
    LaneChange { beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedVehicle {
    pub index: usize,
    pub kind: ConstraintKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub tag: ControllerTag,
    pub current_lane: usize,
    pub target_lane: usize,
    pub vehicles: Vec<ConstrainedVehicle>,
}

impl ConstraintSet {
    pub fn len(&self) -> usize {
        self.vehicles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.vehicles.iter().map(|c| c.index).collect()
    }
}

/// Everything needed to select constrained neighbours at one instant.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    pub ego: &'a EgoState,
    pub vehicles: &'a [TrafficVehicleState],
    pub geometry: &'a EgoGeometry,
    /// Lane the ego is considered to drive in; the nearest lane when `None`.
    pub lane: Option<usize>,
}

fn nearest_leader(snap: &Snapshot, lane: usize) -> Option<usize> {
    snap.vehicles
        .iter()
        .enumerate()
        .filter(|(_, v)| v.lane == lane && v.px > snap.ego.px)
        .min_by(|a, b| a.1.px.total_cmp(&b.1.px))
        .map(|(i, _)| i)
}

/// Choose the constrained neighbours of a controller.
///
/// `nc` keeps only the nearest in-lane leader. `lc`/`rc` take the in-lane
/// leader inside the window (bounding the ego toward the target side) and
/// the target-lane vehicles closest to the ego footprint centre.
pub fn build_constraint_set(
    tag: ControllerTag,
    snap: &Snapshot,
    p: &SafetyParams,
) -> Result<ConstraintSet> {
    let road = &p.road;
    let current = snap.lane.unwrap_or_else(|| road.lane_of(snap.ego.py));
    let target = tag
        .target_lane(current, road)
        .ok_or_else(|| Error::NoTargetLane(tag.to_string()))?;
    let mut vehicles = Vec::new();
    match tag {
        ControllerTag::Nc => {
            if let Some(i) = nearest_leader(snap, current) {
                vehicles.push(ConstrainedVehicle { index: i, kind: ConstraintKind::LaneKeep });
            }
        }
        ControllerTag::Lc | ControllerTag::Rc => {
            // Target lane above the current one means neighbours there bound the ego from above.
            let target_beta = if target > current { -1.0 } else { 1.0 };
            let center = snap.ego.px + snap.geometry.center_offset();
            if let Some(i) = nearest_leader(snap, current) {
                if snap.vehicles[i].px - snap.ego.px <= p.window {
                    vehicles.push(ConstrainedVehicle {
                        index: i,
                        kind: ConstraintKind::LaneChange { beta: -target_beta },
                    });
                }
            }
            let mut near: Vec<(usize, f64)> = snap
                .vehicles
                .iter()
                .enumerate()
                .filter(|(_, v)| v.lane == target)
                .map(|(i, v)| (i, (v.px - center).abs()))
                .filter(|(_, d)| *d <= p.window)
                .collect();
            near.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            for (i, _) in near.into_iter().take(p.max_target_vehicles) {
                vehicles.push(ConstrainedVehicle {
                    index: i,
                    kind: ConstraintKind::LaneChange { beta: target_beta },
                });
            }
        }
    }
    vehicles.sort_by_key(|c| c.index);
    Ok(ConstraintSet { tag, current_lane: current, target_lane: target, vehicles })
}
