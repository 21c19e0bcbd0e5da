//! Surrounding-vehicle prediction conditioned on a planned ego trajectory.
//!
//! [`ModelPredictor`] rolls the ground-truth traffic model forward with the
//! planned ego state fed in at every step, optionally perturbing each
//! acceleration with Gaussian noise. Past observations are part of the
//! [`Predictor`] interface so that learned predictors can use them; the
//! model-based predictor ignores them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    traffic_policy, traffic_step, EgoState, PolicyConfig, PolicyContext, EgoGeometry, Road, TrafficParams,
    TrafficVehicleState, TRAFFIC_ACCEL_LIMIT,
};

/// Predicted states and accelerations, indexed `[step][vehicle]` for steps `0..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub states: Vec<Vec<TrafficVehicleState>>,
    pub accels: Vec<Vec<f64>>,
}

impl PredictionBundle {
    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn vehicle_count(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// States flattened as `(px, py, vx, theta)` per vehicle and step.
    pub fn state_vector(&self) -> Vec<f64> {
        self.states
            .iter()
            .flat_map(|row| row.iter().flat_map(|v| [v.px, v.py, v.vx, v.theta]))
            .collect()
    }

    pub fn accel_vector(&self) -> Vec<f64> {
        self.accels.iter().flatten().copied().collect()
    }

    /// `w * self + (1 - w) * prev` on positions, speeds and accelerations.
    pub fn blend(&self, prev: &PredictionBundle, w: f64) -> Result<PredictionBundle> {
        if self.steps() != prev.steps() || self.vehicle_count() != prev.vehicle_count() {
            return Err(Error::Dimension("prediction shapes differ".into()));
        }
        let mix = |a: f64, b: f64| w * a + (1.0 - w) * b;
        let states = self
            .states
            .iter()
            .zip(&prev.states)
            .map(|(ra, rb)| {
                ra.iter()
                    .zip(rb)
                    .map(|(a, b)| TrafficVehicleState {
                        px: mix(a.px, b.px),
                        py: mix(a.py, b.py),
                        vx: mix(a.vx, b.vx),
                        theta: mix(a.theta, b.theta),
                        ..*a
                    })
                    .collect()
            })
            .collect();
        let accels = self
            .accels
            .iter()
            .zip(&prev.accels)
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(a, b)| mix(*a, *b)).collect())
            .collect();
        Ok(PredictionBundle { states, accels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    /// Standard deviation of the acceleration noise (m/s^2).
    pub sigma_a: f64,
    pub seed: u64,
    /// Redraw the noise at every DMPC iterate instead of once per time step.
    pub redraw_per_iterate: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { sigma_a: 0.0, seed: 0, redraw_per_iterate: true }
    }
}

/// Position of a prediction call inside the closed loop; selects the noise stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NoiseKey {
    pub step: u64,
    pub iterate: u64,
}

/// What a predictor may observe about the surrounding traffic.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub current: &'a [TrafficVehicleState],
    /// Earlier snapshots, oldest first.
    pub history: &'a [Vec<TrafficVehicleState>],
    pub params: &'a [TrafficParams],
}

pub trait Predictor {
    /// Predict all vehicles over the horizon of `ego_states` (`N + 1` entries).
    fn predict(
        &self,
        obs: &Observation,
        ego_states: &[EgoState],
        cfg: &PredictorConfig,
        key: NoiseKey,
    ) -> Result<PredictionBundle>;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard normal draw addressed by `(seed, key, vehicle, step)`.
pub fn noise_draw(cfg: &PredictorConfig, key: NoiseKey, vehicle: usize, step: usize) -> f64 {
    let iterate = if cfg.redraw_per_iterate { key.iterate } else { 0 };
    let mut h = splitmix(cfg.seed);
    for part in [key.step, iterate, vehicle as u64, step as u64] {
        h = splitmix(h ^ part);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    StandardNormal.sample(&mut rng)
}

/// Advance all vehicles by one step under the traffic policy, given the ego state.
pub fn advance_traffic(
    vehicles: &[TrafficVehicleState],
    accels: &[f64],
    dt: f64,
) -> Vec<TrafficVehicleState> {
    vehicles.iter().zip(accels).map(|(v, a)| traffic_step(v, *a, dt)).collect()
}

/// The ground-truth traffic model used as a predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelPredictor {
    pub road: Road,
    pub geometry: EgoGeometry,
    pub policy: PolicyConfig,
    pub dt: f64,
}

impl Predictor for ModelPredictor {
    fn predict(
        &self,
        obs: &Observation,
        ego_states: &[EgoState],
        cfg: &PredictorConfig,
        key: NoiseKey,
    ) -> Result<PredictionBundle> {
        if ego_states.len() < 2 {
            return Err(Error::Dimension("ego plan must span at least one step".into()));
        }
        if obs.params.len() != obs.current.len() {
            return Err(Error::Dimension("one parameter vector per vehicle is required".into()));
        }
        if !(cfg.sigma_a >= 0.0) {
            return Err(Error::Config(format!("sigma_a must be nonnegative, got {}", cfg.sigma_a)));
        }
        let ctx = PolicyContext { road: &self.road, ego: &self.geometry, policy: &self.policy };
        let n = ego_states.len() - 1;
        let mut states = Vec::with_capacity(n + 1);
        let mut accels = Vec::with_capacity(n + 1);
        states.push(obs.current.to_vec());
        for (k, ego) in ego_states.iter().enumerate() {
            let cur = states.last().unwrap();
            let mut a = traffic_policy(cur, ego, obs.params, &ctx);
            if cfg.sigma_a > 0.0 {
                for (i, ai) in a.iter_mut().enumerate() {
                    let e = cfg.sigma_a * noise_draw(cfg, key, i, k);
                    *ai = (*ai + e).clamp(-TRAFFIC_ACCEL_LIMIT, TRAFFIC_ACCEL_LIMIT);
                }
            }
            if k < n {
                let next = advance_traffic(cur, &a, self.dt);
                states.push(next);
            }
            accels.push(a);
        }
        Ok(PredictionBundle { states, accels })
    }
}
