//! Shared scenario-building helpers for integration tests. Geometry is laid
//! out in meters on a local east/north grid anchored at a fixed origin, then
//! converted to coordinates.

#![allow(dead_code)]

use pedsafe_core::engine::scenario::{
    AlertResponse, CommsSpec, MapSpec, Movement, NoiseSpec, PedestrianSpec, RiskSpec, Scenario,
    SegmentSpec, TimeInterval, VehicleSpec,
};
use pedsafe_core::geo::{GeoPoint, LocalFrame};
use pedsafe_core::{HmmModel, MotionThresholds, PowerModel, SyntheticAccel, ViewingModel};

pub fn origin() -> GeoPoint {
    GeoPoint::new(40.0, -75.0)
}

/// (east, north) meters from the origin -> coordinate.
pub fn at(x: f64, y: f64) -> GeoPoint {
    LocalFrame::new(origin()).from_local(x, y)
}

/// A bare scenario: one 200 m sidewalk along the east axis through the
/// origin, no crossings, no actors, zero GPS noise, fixed seed.
pub fn base_scenario(duration: f64) -> Scenario {
    Scenario {
        map: MapSpec {
            segments: vec![SegmentSpec {
                id: 0,
                start: at(-100.0, 0.0),
                end: at(100.0, 0.0),
                width: 3.0,
            }],
            crossings: vec![],
            zone_radius: 20.0,
        },
        pedestrians: vec![],
        vehicles: vec![],
        tick: 0.1,
        duration,
        seed: 42,
        noise: NoiseSpec { gps_sigma: 0.0, accel: SyntheticAccel::default() },
        comms: CommsSpec::default(),
        risk: RiskSpec::default(),
        power: PowerModel::default(),
        hmm: HmmModel::default(),
        motion: MotionThresholds::default(),
        viewing: ViewingModel::default(),
        accel_rate_hz: 50.0,
        alert_interval: 1.0,
    }
}

/// A pedestrian walking east along the sidewalk at `speed` from `x0` to
/// `x1`, looking at the phone the whole time.
pub fn walker(id: &str, x0: f64, x1: f64, speed: f64, response: AlertResponse) -> PedestrianSpec {
    PedestrianSpec {
        id: id.to_string(),
        movement: Movement::Route {
            path: vec![at(x0, 0.0), at(x1, 0.0)],
            speed_mps: speed,
            start_time: 0.0,
        },
        viewing_intervals: vec![TimeInterval { start: 0.0, end: 1.0e6 }],
        screen_on_intervals: vec![],
        accel: Default::default(),
        alert_response: response,
    }
}

/// A vehicle driving north through crossing 0 (at the origin), timed to pass
/// it at `pass_time`. It approaches from 120 m south and continues 30 m past.
pub fn car(id: &str, speed_mps: f64, pass_time: f64) -> VehicleSpec {
    let start_time = pass_time - 120.0 / speed_mps;
    VehicleSpec {
        id: id.to_string(),
        movement: Movement::Route {
            path: vec![at(0.0, -120.0), at(0.0, 30.0)],
            speed_mps,
            start_time,
        },
        crossing: 0,
        mass: 1400.0,
        area: 2.7,
    }
}

/// The standard crossing-conflict layout: one crossing at the origin with a
/// 20 m alert zone, a distracted pedestrian walking toward it at the brisk
/// crossing speed (so estimated and true crossing times agree), and one car
/// timed to reach the crossing 1.5 s after the pedestrian would.
pub fn conflict_scenario(vehicle_speed_kmh: f64, response: AlertResponse) -> Scenario {
    let mut sc = base_scenario(45.0);
    sc.map.crossings = vec![at(0.0, 0.0)];
    // Walker: 60 m out, at 2.0 m/s, reaches the crossing at t = 30.
    sc.pedestrians = vec![walker("walker", -60.0, 40.0, 2.0, response)];
    sc.vehicles = vec![car("car", vehicle_speed_kmh / 3.6, 31.5)];
    sc
}
