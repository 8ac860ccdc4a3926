//! Collision-probability risk assessment and alert policy.
//!
//! With a connected vehicle the decision is quantitative: the pedestrian's
//! time to reach the crossing (t_p) is compared with each vehicle's arrival
//! time (t_c); the slack min(t_c) − t_p is the user warning time. After
//! subtracting communication delay and the vehicle's skid time, whatever
//! slack remains must cover the driver's reaction time — modelled as
//! log-normal — and the probability that it does not is the collision
//! probability. Without connectivity, simpler screen/viewing/direction
//! heuristics (three nested stand-alone levels) drive the alert.

use crate::context::Motion;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Standard gravity used in the resistance force, m/s².
pub const GRAVITY: f64 = 9.81;

/// Errors reported by the risk operations.
#[derive(Debug, Error)]
pub enum RiskError {
    #[error("speed must be positive")]
    ZeroSpeed,
    #[error("no vehicle arrival times supplied")]
    NoVehicles,
}

/// Kinematic state and physical constants of one approaching vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleKinematics {
    pub id: String,
    /// Current speed v_c, m/s.
    pub speed: f64,
    /// Vehicle mass, kg.
    pub mass: f64,
    /// Cross-sectional area, m².
    pub area: f64,
    /// Time for the vehicle to reach the crossing, s.
    pub t_c: f64,
    /// Aerodynamic drag coefficient.
    pub drag_cd: f64,
    /// Kinetic friction coefficient tire/road.
    pub mu_k: f64,
    /// Residual resistance force, N.
    pub f0: f64,
    /// Air density, kg/m³.
    pub rho: f64,
}

/// Pedestrian-side inputs to the alert decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedestrianRiskState {
    /// Shortest geodetic distance to the crossing, m.
    pub d_p: f64,
    /// Measured walking speed, m/s.
    pub v_p: f64,
    pub motion: Motion,
    pub viewing: bool,
    pub ignored_alert_count: u32,
}

/// Log-normal driver reaction-time model (log-scale parameters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReactionModel {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for ReactionModel {
    fn default() -> Self {
        Self {
            mu: 1.14,   // log-scale mean of driver reaction time
            sigma: 0.32, // log-scale std of driver reaction time
        }
    }
}

/// Tunable thresholds of the alert policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskConfig {
    /// Collision probability above which the pedestrian is alerted.
    pub probability_threshold: f64,
    /// Slack added to max(t_c) before the pedestrian is deemed far too
    /// early to conflict with any vehicle, s.
    pub margin: f64,
    /// Ignored pedestrian alerts before escalating to the driver.
    pub escalation_after: u32,
    /// Crossing speed assumed for a walking pedestrian, m/s.
    pub brisk_speed: f64,
    /// Crossing speed assumed for a running pedestrian, m/s.
    pub running_speed: f64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            probability_threshold: 0.5,
            margin: 5.0,
            escalation_after: 3,
            brisk_speed: 2.0,
            running_speed: 3.0,
        }
    }
}

/// Who gets alerted, if anyone. The probability backing an alert travels in
/// [`AlertDecision::probability`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlertAction {
    None,
    AlertPedestrian,
    AlertDriver,
}

/// Outcome of one risk evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlertDecision {
    pub action: AlertAction,
    /// min(t_c) − t_p, when the quantitative path was evaluated.
    pub t_warning: Option<f64>,
    /// Collision probability, when the quantitative path was evaluated.
    pub probability: Option<f64>,
}

impl AlertDecision {
    fn none() -> Self {
        Self { action: AlertAction::None, t_warning: None, probability: None }
    }
}

/// Safety operating mode: connected to vehicles, or stand-alone heuristics
/// at one of three strictness levels (Level 1 alerts least often).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyMode {
    Connected,
    StandAlone(StandAloneLevel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandAloneLevel {
    Level1,
    Level2,
    Level3,
}

/// Time for the pedestrian to reach the crossing: d_p / v_p.
pub fn time_to_cross_ped(d_p: f64, v_p: f64) -> Result<f64, RiskError> {
    if v_p <= 0.0 {
        return Err(RiskError::ZeroSpeed);
    }
    Ok(d_p / v_p)
}

/// User warning time: min(t_c) − t_p. Negative when every vehicle arrives
/// after the pedestrian has already crossed... or rather before the
/// pedestrian gets there; the sign carries meaning, so it is not clamped.
pub fn user_warning_time(t_c_list: &[f64], t_p: f64) -> Result<f64, RiskError> {
    let min_tc = t_c_list
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !min_tc.is_finite() && t_c_list.is_empty() {
        return Err(RiskError::NoVehicles);
    }
    Ok(min_tc - t_p)
}

/// Total resistance force opposing the vehicle at relative speed `v_r`:
/// kinetic friction + aerodynamic drag + residual term.
pub fn resistance_force(k: &VehicleKinematics, v_r: f64) -> f64 {
    k.mu_k * k.mass * GRAVITY + k.rho * k.area * k.drag_cd * v_r * v_r / 2.0 + k.f0
}

/// Skid distance from the vehicle's current speed: m·v² / (2f).
pub fn skid_distance(k: &VehicleKinematics) -> Result<f64, RiskError> {
    if k.speed <= 0.0 {
        return Err(RiskError::ZeroSpeed);
    }
    let f = resistance_force(k, k.speed);
    Ok(k.mass * k.speed * k.speed / (2.0 * f))
}

/// Time from braking to full stop: d_skid / v = m·v / (2f).
pub fn skid_time(k: &VehicleKinematics) -> Result<f64, RiskError> {
    Ok(skid_distance(k)? / k.speed)
}

/// P(reaction time > x) under the log-normal model; 1 for x ≤ 0 since the
/// reaction time is always positive.
pub fn reaction_exceedance(x: f64, rm: &ReactionModel) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let z = (x.ln() - rm.mu) / rm.sigma;
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Probability that delay + reaction + skid exceeds the warning time,
/// i.e. that the vehicle cannot stop in time.
pub fn collision_probability(t_warning: f64, t_delay: f64, t_skid: f64, rm: &ReactionModel) -> f64 {
    reaction_exceedance(t_warning - t_delay - t_skid, rm)
}

/// Evaluate the alert policy. The caller is responsible for invoking this
/// only when the pedestrian is inside an alert zone.
///
/// Connected mode alerts when the pedestrian is walking or running while
/// viewing the phone and the collision probability against the foremost
/// vehicle exceeds the threshold; after `escalation_after` ignored alerts
/// the alert goes to the driver instead. Pedestrians far too early to
/// conflict with any vehicle (t_p > max t_c + margin) are left alone.
///
/// Stand-alone mode ignores vehicles: Level 3 alerts whenever the screen is
/// on, Level 2 additionally requires viewing, Level 1 additionally requires
/// walking toward the crossing.
#[allow(clippy::too_many_arguments)]
pub fn decide(
    ped: &PedestrianRiskState,
    vehicles: &[VehicleKinematics],
    t_delay: f64,
    rm: &ReactionModel,
    cfg: &RiskConfig,
    mode: SafetyMode,
    screen_on: bool,
    walking_toward_crossing: bool,
) -> AlertDecision {
    match mode {
        SafetyMode::StandAlone(level) => {
            let alert = match level {
                StandAloneLevel::Level3 => screen_on,
                StandAloneLevel::Level2 => screen_on && ped.viewing,
                StandAloneLevel::Level1 => {
                    screen_on && ped.viewing && walking_toward_crossing
                }
            };
            AlertDecision {
                action: if alert { AlertAction::AlertPedestrian } else { AlertAction::None },
                t_warning: None,
                probability: None,
            }
        }
        SafetyMode::Connected => {
            if vehicles.is_empty() {
                return AlertDecision::none();
            }
            let crossing_speed = match ped.motion {
                Motion::Stationary => return AlertDecision::none(),
                Motion::Walking => cfg.brisk_speed,
                Motion::Running => cfg.running_speed,
            };
            if !ped.viewing {
                return AlertDecision::none();
            }
            let t_p = match time_to_cross_ped(ped.d_p, crossing_speed) {
                Ok(t) => t,
                Err(_) => return AlertDecision::none(),
            };
            let max_tc = vehicles.iter().map(|v| v.t_c).fold(f64::NEG_INFINITY, f64::max);
            if t_p > max_tc + cfg.margin {
                return AlertDecision::none();
            }
            // Foremost vehicle: smallest arrival time, first wins ties.
            let foremost = vehicles
                .iter()
                .min_by(|a, b| a.t_c.total_cmp(&b.t_c))
                .expect("vehicles checked non-empty");
            let t_warning = foremost.t_c - t_p;
            let t_skid = skid_time(foremost).unwrap_or(0.0);
            let probability = collision_probability(t_warning, t_delay, t_skid, rm);
            let action = if probability > cfg.probability_threshold {
                if ped.ignored_alert_count >= cfg.escalation_after {
                    AlertAction::AlertDriver
                } else {
                    AlertAction::AlertPedestrian
                }
            } else {
                AlertAction::None
            };
            AlertDecision {
                action,
                t_warning: Some(t_warning),
                probability: Some(probability),
            }
        }
    }
}
