//! Simulation output: per-tick records for every actor, a chronological
//! event log, and summary metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::context::Motion;
use crate::geo::GeoPoint;
use crate::powermgr::PowerMode;

use super::metrics::Metrics;

/// Everything a run produces. Serializes deterministically: map keys are
/// sorted and vectors preserve emission order, so the same seed yields the
/// same bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub seed: u64,
    pub tick: f64,
    pub duration: f64,
    /// Detector threshold actually used (trained at startup when the
    /// scenario leaves it unset).
    pub viewing_gamma: f64,
    pub pedestrians: BTreeMap<String, Vec<PedTickRecord>>,
    pub vehicles: BTreeMap<String, Vec<VehTickRecord>>,
    pub events: Vec<SimEvent>,
    pub metrics: Metrics,
}

/// One pedestrian snapshot per tick.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PedTickRecord {
    pub t: f64,
    pub truth: GeoPoint,
    pub speed: f64,
    /// Raw GPS fix, present only on fix ticks while the receiver is awake.
    pub raw_fix: Option<GeoPoint>,
    /// Current position estimate after calibration.
    pub estimate: Option<GeoPoint>,
    /// Distance from the raw fix to the true path, on fix ticks.
    pub raw_error: Option<f64>,
    /// Distance from the estimate to the true path, on fix ticks.
    pub estimate_error: Option<f64>,
    pub power: PowerMode,
    /// Alert-zone index the device believes it is in (from the estimate).
    pub zone: Option<usize>,
    /// Alert-zone index the pedestrian is truly in.
    pub zone_truth: Option<usize>,
    pub viewing_truth: bool,
    /// Detector output; None whenever the detector is idle or warming up.
    pub viewing_detected: Option<bool>,
    pub motion: Motion,
    /// Vehicles currently in the device's knowledge set.
    pub known_vehicles: usize,
    /// True while the device is in a formed, ready group.
    pub connected: bool,
}

/// One vehicle snapshot per tick.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VehTickRecord {
    pub t: f64,
    pub truth: GeoPoint,
    pub speed: f64,
    /// Arc length travelled along the route, meters.
    pub arc: f64,
    /// True once the vehicle has passed its crossing.
    pub passed: bool,
}

/// A timestamped occurrence attributed to one actor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub t: f64,
    pub actor: String,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    /// A pedestrian became group owner on a channel; members can join once
    /// `ready_at` passes.
    GroupFormed { channel: u32, ready_at: f64 },
    /// A device joined an existing group.
    GroupJoined { channel: u32 },
    /// A pedestrian joined by overhearing; the owner will forward vehicle
    /// replies to it.
    Overheard { channel: u32, go: String },
    /// The owner departed and the group dissolved.
    GroupDissolved { channel: u32 },
    /// The group owner beaconed a request to a vehicle.
    ReqSent { to: String },
    /// A pedestrian received (directly or by forwarding) a vehicle reply.
    RepReceived { vehicle: String, t_c: f64, hops: u32 },
    /// The pedestrian's device raised an alert.
    AlertPedestrian {
        t_warning: f64,
        probability: f64,
        /// Warning time recomputed from ground-truth trajectories, when a
        /// live vehicle approaches the same crossing.
        gt_t_warning: Option<f64>,
        complied: bool,
    },
    /// Repeatedly ignored alerts escalated to the approaching vehicle.
    AlertDriver { vehicle: String, probability: f64 },
    /// A stand-alone (no connectivity) alert with no vehicle knowledge.
    AlertStandAlone,
    /// The vehicle passed its crossing and left the group.
    VehiclePassed,
    /// Ground-truth crossing of an alert-zone boundary, inward.
    ZoneEntered { zone: usize, gps_active: bool },
    /// Ground-truth crossing of an alert-zone boundary, outward.
    ZoneExited { zone: usize },
    /// The GPS receiver woke from duty-cycled sleep. `boundary_distance` is
    /// how many meters remained to the nearest zone edge (negative once
    /// inside).
    Woke { boundary_distance: f64 },
}

impl SimReport {
    /// Events of one kind, in order.
    pub fn events_of<'a>(
        &'a self,
        pred: impl Fn(&EventKind) -> bool + 'a,
    ) -> impl Iterator<Item = &'a SimEvent> {
        self.events.iter().filter(move |e| pred(&e.kind))
    }

    pub fn pedestrian_alerts(&self) -> Vec<&SimEvent> {
        self.events_of(|k| matches!(k, EventKind::AlertPedestrian { .. }))
            .collect()
    }

    pub fn driver_alerts(&self) -> Vec<&SimEvent> {
        self.events_of(|k| matches!(k, EventKind::AlertDriver { .. })).collect()
    }
}
