//! Pedestrian crossing safety: algorithms and a deterministic simulation engine.
//!
//! The library models a smartphone-based system that warns distracted
//! pedestrians (and, when they fail to react, approaching drivers) before a
//! road crossing turns into an accident. It is organized as independently
//! testable modules that the simulation engine composes into a per-tick
//! pipeline:
//!
//! - [`geo`] — geodetic primitives and the sidewalk map model
//! - [`mapmatch`] — HMM map matching that calibrates noisy GPS fixes
//! - [`powermgr`] — adaptive GPS duty cycling around alert zones
//! - [`context`] — accelerometer-based phone-viewing detection
//! - [`risk`] — collision probability and alert decisions
//! - [`p2p`] — simulated device-to-device group communication
//! - [`engine`] — scenario loading, the tick loop, reports and metrics
//!
//! Everything is deterministic given a scenario and a seed: repeated runs
//! produce byte-identical reports.

pub mod context;
pub mod engine;
pub mod geo;
pub mod mapmatch;
pub mod p2p;
pub mod powermgr;
pub mod risk;

pub use context::{
    classify_motion, AccelSample, AccelWindow, ContextError, LowPassFilter, Motion,
    MotionThresholds, SyntheticAccel, ViewingModel,
};
pub use engine::{
    run, train_viewing_threshold, EngineError, EventKind, Metrics, Movement, PedTickRecord,
    Scenario, SimEvent, SimReport, Trajectory, VehTickRecord,
};
pub use geo::{
    geodetic_distance, in_alert_zone, project_to_segment, AlertZone, GeoError, GeoPoint,
    LocalFrame, SegmentId, SidewalkGraph, SidewalkSegment,
};
pub use mapmatch::{CalibratedFix, FixOutcome, HmmModel, MapMatchError, MapMatcher};
pub use p2p::{
    deliver, formation_delay, measure_t_delay, ChannelId, DeliveryOutcome, DeviceId, Envelope,
    FormationMode, Group, LinkModel, P2pError, P2pLayer, Payload, RepMsg, ReqMsg,
};
pub use powermgr::{
    energy_consumed, next_wake_delay, step_power_state, GpsPowerState, PowerError, PowerMode,
    PowerModel,
};
pub use risk::{
    collision_probability, decide, reaction_exceedance, resistance_force, skid_time,
    AlertAction, AlertDecision, PedestrianRiskState, ReactionModel, RiskConfig, RiskError,
    SafetyMode, StandAloneLevel, VehicleKinematics,
};
