//! Discrete-time simulation engine. Drives pedestrians and vehicles along
//! their trajectories and runs the full device pipeline each tick —
//! positioning, receiver power management, phone-viewing detection,
//! device-to-device exchange, and collision-risk alerting — producing a
//! deterministic, replayable report.

pub mod metrics;
pub mod report;
pub mod scenario;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::context::{
    classify_motion, AccelSample, AccelWindow, LowPassFilter, SyntheticAccel, ViewingModel,
};
use crate::geo::{
    geodetic_distance, heading_difference_deg, in_alert_zone, initial_bearing_deg, GeoPoint,
    LocalFrame,
};
use crate::mapmatch::MapMatcher;
use crate::p2p::{
    measure_t_delay, ChannelId, DeliveryOutcome, DeviceId, P2pLayer, Payload, RepMsg, ReqMsg,
};
use crate::powermgr::{GpsPowerState, PowerMode};
use crate::risk::{
    decide, AlertAction, PedestrianRiskState, RiskConfig, SafetyMode, VehicleKinematics,
};

pub use metrics::{
    collect_errors, error_cdf, CommsMetrics, EnergyMetrics, LocationMetrics, Metrics,
    ViewingMetrics, WarningMetrics,
};
pub use report::{EventKind, PedTickRecord, SimEvent, SimReport, VehTickRecord};
pub use scenario::{
    AccelRow, AccelSource, AlertResponse, CommsSpec, MapSpec, Movement, NoiseSpec,
    PedestrianSpec, RiskSpec, Scenario, SegmentSpec, TimeInterval, TimedPoint, Trajectory,
    VehicleSpec,
};

// ====== Errors ======

#[derive(Debug, Error)]
pub enum EngineError {
    /// The scenario file (or a CSV it references) could not be parsed.
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    /// The scenario parsed but violates structural rules; every violation is
    /// listed.
    #[error("invalid scenario:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
    /// The simulation itself failed mid-run.
    #[error("tick {tick}, actor '{actor}': {message}")]
    Runtime { tick: u64, actor: String, message: String },
}

// ====== Detector pre-training ======

/// Learn the viewing/not-viewing decision threshold from synthetic
/// recordings when the scenario does not pin one. Each recording is one
/// detector window of accelerometer data with a random gait phase.
pub fn train_viewing_threshold<R: Rng + ?Sized>(
    accel: &SyntheticAccel,
    model: &ViewingModel,
    rate_hz: f64,
    rng: &mut R,
) -> Result<f64, EngineError> {
    const RECORDINGS_PER_CLASS: usize = 40;
    let samples_per_window = (model.window_span_s * rate_hz).round().max(1.0) as usize;
    let mut mads = [Vec::new(), Vec::new()];
    for (slot, viewing) in [(0usize, true), (1usize, false)] {
        for _ in 0..RECORDINGS_PER_CLASS {
            let mut filter = LowPassFilter::new(model.filter_alpha);
            let mut window = AccelWindow::with_span(model.window_span_s, rate_hz);
            let phase = rng.random::<f64>(); // decorrelate gait cycles
            for k in 0..samples_per_window {
                let t = phase + k as f64 / rate_hz;
                let s = accel.sample(t, viewing, rng);
                window.push(filter.apply(s).magnitude());
            }
            let mad = window.mad().map_err(|e| EngineError::Runtime {
                tick: 0,
                actor: "detector-training".to_string(),
                message: e.to_string(),
            })?;
            mads[slot].push(mad);
        }
    }
    let mut trained = model.clone();
    trained
        .train(&mads[0], &mads[1])
        .map_err(|e| EngineError::Runtime {
            tick: 0,
            actor: "detector-training".to_string(),
            message: e.to_string(),
        })
}

// ====== Per-actor runtime state ======

#[derive(Debug, Clone, Copy, PartialEq)]
enum GroupRole {
    None,
    Owner { channel: u32, ready_at: f64 },
    Member { channel: u32 },
}

impl GroupRole {
    fn channel(&self) -> Option<u32> {
        match self {
            GroupRole::None => None,
            GroupRole::Owner { channel, .. } | GroupRole::Member { channel } => Some(*channel),
        }
    }

    fn connected(&self, now: f64) -> bool {
        match self {
            GroupRole::None => false,
            GroupRole::Owner { ready_at, .. } => now >= *ready_at,
            GroupRole::Member { .. } => true,
        }
    }
}

struct PedRuntime {
    id: String,
    device: DeviceId,
    traj: Trajectory,
    viewing_intervals: Vec<TimeInterval>,
    screen_on_intervals: Vec<TimeInterval>,
    accel: AccelSource,
    // Positioning.
    matcher: MapMatcher,
    next_fix_at: f64,
    last_fix_at: Option<f64>,
    /// Start of the current Active period; sleep decisions need a fix taken
    /// after this.
    last_wake_at: f64,
    last_raw: Option<GeoPoint>,
    estimate: Option<GeoPoint>,
    // Fix data captured during sensing for this tick's record.
    tick_raw_fix: Option<GeoPoint>,
    tick_raw_error: Option<f64>,
    tick_estimate_error: Option<f64>,
    // Receiver power.
    power: GpsPowerState,
    // Viewing detection.
    filter: LowPassFilter,
    window: AccelWindow,
    next_accel_t: f64,
    accel_cursor: usize,
    viewing_detected: Option<bool>,
    suppressed_from: Option<f64>,
    // Alerts.
    ignores_left: u32,
    ignored_count: u32,
    alert_latched: bool,
    last_alert_at: Option<f64>,
    // Comms.
    role: GroupRole,
    next_req_at: f64,
    known_reps: BTreeMap<String, RepMsg>,
    rtt_samples: Vec<f64>,
    // Zone presence.
    zone_est: Option<usize>,
    zone_truth: Option<usize>,
    records: Vec<PedTickRecord>,
}

impl PedRuntime {
    fn viewing_truth(&self, t: f64) -> bool {
        if let Some(s) = self.suppressed_from {
            if t >= s {
                return false;
            }
        }
        self.viewing_intervals.iter().any(|iv| iv.contains(t))
    }

    fn screen_on(&self, t: f64) -> bool {
        self.viewing_truth(t) || self.screen_on_intervals.iter().any(|iv| iv.contains(t))
    }
}

struct VehRuntime {
    id: String,
    device: DeviceId,
    traj: Trajectory,
    channel: u32,
    mass: f64,
    area: f64,
    crossing_arc: f64,
    crossing_pass_time: f64,
    joined: bool,
    passed: bool,
    records: Vec<VehTickRecord>,
}

// ====== The run loop ======

const TIME_EPS: f64 = 1e-9;

/// Run a scenario to completion.
pub fn run(scenario: &Scenario) -> Result<SimReport, EngineError> {
    // Callers may build a Scenario in code rather than through `load`.
    scenario.validate()?;

    let graph = scenario.map.build_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);

    // Detector threshold: pinned by the scenario or trained now, before any
    // simulation randomness, so the draw order is stable.
    let mut viewing_model = scenario.viewing.clone();
    let gamma = match viewing_model.gamma {
        Some(g) => g,
        None => train_viewing_threshold(
            &scenario.noise.accel,
            &viewing_model,
            scenario.accel_rate_hz,
            &mut rng,
        )?,
    };
    viewing_model.gamma = Some(gamma);

    let gps_noise = if scenario.noise.gps_sigma > 0.0 {
        Some(Normal::new(0.0, scenario.noise.gps_sigma).expect("validated sigma"))
    } else {
        None
    };

    let risk_cfg = RiskConfig {
        probability_threshold: scenario.risk.probability_threshold,
        margin: scenario.risk.margin,
        escalation_after: scenario.risk.escalation_after,
        brisk_speed: scenario.risk.brisk_speed,
        running_speed: scenario.risk.running_speed,
    };

    let mut peds: Vec<PedRuntime> = scenario
        .pedestrians
        .iter()
        .map(|spec| {
            let traj = Trajectory::from_movement(&spec.movement);
            let heading0 = traj.heading(traj.start_time());
            PedRuntime {
                id: spec.id.clone(),
                device: DeviceId(spec.id.clone()),
                viewing_intervals: spec.viewing_intervals.clone(),
                screen_on_intervals: spec.screen_on_intervals.clone(),
                accel: spec.accel.clone(),
                matcher: MapMatcher::new(scenario.hmm.clone()),
                next_fix_at: 0.0,
                last_fix_at: None,
                last_wake_at: 0.0,
                last_raw: None,
                estimate: None,
                tick_raw_fix: None,
                tick_raw_error: None,
                tick_estimate_error: None,
                power: GpsPowerState::new_active(heading0),
                filter: LowPassFilter::new(viewing_model.filter_alpha),
                window: AccelWindow::with_span(viewing_model.window_span_s, scenario.accel_rate_hz),
                next_accel_t: 0.0,
                accel_cursor: 0,
                viewing_detected: None,
                suppressed_from: None,
                ignores_left: match spec.alert_response {
                    AlertResponse::Comply => 0,
                    AlertResponse::Ignore { times } => times,
                },
                ignored_count: 0,
                alert_latched: false,
                last_alert_at: None,
                role: GroupRole::None,
                next_req_at: 0.0,
                known_reps: BTreeMap::new(),
                rtt_samples: Vec::new(),
                zone_est: None,
                zone_truth: None,
                records: Vec::new(),
                traj,
            }
        })
        .collect();

    let mut vehicles: Vec<VehRuntime> = scenario
        .vehicles
        .iter()
        .map(|spec| {
            let traj = Trajectory::from_movement(&spec.movement);
            let crossing = scenario.map.crossings[spec.crossing];
            let (crossing_arc, crossing_pass_time, _) = traj.closest_approach(crossing);
            VehRuntime {
                id: spec.id.clone(),
                device: DeviceId(spec.id.clone()),
                channel: spec.crossing as u32,
                mass: spec.mass,
                area: spec.area,
                crossing_arc,
                crossing_pass_time,
                joined: false,
                passed: false,
                records: Vec::new(),
                traj,
            }
        })
        .collect();

    let ped_index: BTreeMap<DeviceId, usize> =
        peds.iter().enumerate().map(|(i, p)| (p.device.clone(), i)).collect();
    let veh_index: BTreeMap<DeviceId, usize> =
        vehicles.iter().enumerate().map(|(i, v)| (v.device.clone(), i)).collect();

    let mut layer = P2pLayer::new(scenario.comms.link.clone());
    let mut events: Vec<SimEvent> = Vec::new();
    let mut messages_attempted = 0usize;
    let mut messages_dropped = 0usize;

    let steps = (scenario.duration / scenario.tick).round() as u64;
    for k in 0..=steps {
        let now = k as f64 * scenario.tick;

        // --- Stage 1: vehicles advance, join groups, pass crossings. ---
        for veh in vehicles.iter_mut() {
            let truth = veh.traj.position(now);
            let speed = veh.traj.speed(now);
            let arc = veh.traj.arc(now);

            if !veh.passed && arc + TIME_EPS >= veh.crossing_arc && veh.crossing_arc > 0.0 {
                veh.passed = true;
                if veh.joined {
                    layer.depart(&veh.device);
                    veh.joined = false;
                }
                events.push(SimEvent {
                    t: now,
                    actor: veh.id.clone(),
                    kind: EventKind::VehiclePassed,
                });
            }

            if !veh.passed && !veh.joined && speed > 0.0 {
                let channel = ChannelId(veh.channel);
                let ready = layer.group_on(channel).is_some_and(|g| g.is_ready(now));
                if ready && layer.join_group(veh.device.clone(), channel).is_ok() {
                    veh.joined = true;
                    events.push(SimEvent {
                        t: now,
                        actor: veh.id.clone(),
                        kind: EventKind::GroupJoined { channel: veh.channel },
                    });
                }
            }

            veh.records.push(VehTickRecord { t: now, truth, speed, arc, passed: veh.passed });
        }

        // --- Stage 2: pedestrian sensing pipeline. ---
        for ped in peds.iter_mut() {
            let truth = ped.traj.position(now);
            let heading = ped.traj.heading(now);

            // 2a. GPS fix on schedule, only while the receiver is awake.
            ped.tick_raw_fix = None;
            ped.tick_raw_error = None;
            ped.tick_estimate_error = None;
            let mut fixed_this_tick = false;
            while now + TIME_EPS >= ped.next_fix_at {
                if matches!(ped.power.mode, PowerMode::Active) && !fixed_this_tick {
                    let raw = match gps_noise {
                        Some(n) => {
                            let frame = LocalFrame::new(truth);
                            let (dx, dy) = (n.sample(&mut rng), n.sample(&mut rng));
                            frame.from_local(dx, dy)
                        }
                        None => truth,
                    };
                    // The matcher models consecutive 1 Hz fixes; after a
                    // duty-cycle sleep the stream has a gap, so restart it
                    // rather than judge the new fix against a stale anchor.
                    let gap = ped
                        .last_fix_at
                        .is_some_and(|t| now - t > scenario.hmm.gps_interval * 1.5);
                    if gap {
                        ped.matcher = MapMatcher::new(scenario.hmm.clone());
                    }
                    ped.last_raw = Some(raw);
                    ped.last_fix_at = Some(now);
                    ped.tick_raw_fix = Some(raw);
                    ped.tick_raw_error = Some(ped.traj.distance_to_path(raw));
                    // Inside an alert zone the matcher keeps its segment
                    // instead of re-estimating.
                    let reuse = ped.zone_est.is_some();
                    match ped.matcher.process_fix(now, raw, &graph, reuse) {
                        Ok(fix) => {
                            if let Some(p) = fix.position() {
                                ped.estimate = Some(p);
                            }
                        }
                        Err(_) => {
                            // No candidate near this outlier: keep the last
                            // estimate, exactly like a rejected fix.
                        }
                    }
                    ped.tick_estimate_error =
                        ped.estimate.map(|p| ped.traj.distance_to_path(p));
                    fixed_this_tick = true;
                }
                ped.next_fix_at += scenario.hmm.gps_interval;
            }

            // 2b. Receiver power step. The sleep decision needs a position the
            // device actually believes, so while awake it only runs on a fix
            // taken during the current Active period; a receiver that just
            // woke stays awake until its next fix lands.
            let believed = ped.estimate.or(ped.last_raw).unwrap_or(truth);
            let fresh = ped.last_fix_at.is_some_and(|t| {
                t + TIME_EPS >= ped.last_wake_at && now - t <= scenario.hmm.gps_interval + TIME_EPS
            });
            let was_sleeping = matches!(ped.power.mode, PowerMode::Sleeping { .. });
            if was_sleeping || fresh {
                ped.power = crate::powermgr::step_power_state(
                    ped.power,
                    now,
                    heading,
                    believed,
                    &graph.zones,
                    scenario.hmm.v_max,
                );
            } else {
                ped.power.last_direction = heading;
            }
            if was_sleeping && matches!(ped.power.mode, PowerMode::Active) {
                ped.last_wake_at = now;
                let boundary = graph
                    .zones
                    .iter()
                    .map(|z| geodetic_distance(truth, z.crossing) - z.radius)
                    .fold(f64::INFINITY, f64::min);
                events.push(SimEvent {
                    t: now,
                    actor: ped.id.clone(),
                    kind: EventKind::Woke { boundary_distance: boundary },
                });
            }

            // 2c. Zone presence: believed (gates the pipeline) and true
            // (grounds the safety record).
            let zone_est_now = ped
                .estimate
                .and_then(|p| graph.zones.iter().position(|z| in_alert_zone(p, z)));
            let zone_truth_now =
                graph.zones.iter().position(|z| in_alert_zone(truth, z));
            if zone_truth_now != ped.zone_truth {
                if let Some(z) = ped.zone_truth {
                    events.push(SimEvent {
                        t: now,
                        actor: ped.id.clone(),
                        kind: EventKind::ZoneExited { zone: z },
                    });
                }
                if let Some(z) = zone_truth_now {
                    events.push(SimEvent {
                        t: now,
                        actor: ped.id.clone(),
                        kind: EventKind::ZoneEntered {
                            zone: z,
                            gps_active: matches!(ped.power.mode, PowerMode::Active),
                        },
                    });
                }
                ped.zone_truth = zone_truth_now;
            }

            // 2d. Viewing detection, active only while the device believes it
            // is near a crossing.
            if zone_est_now.is_some() {
                if ped.zone_est.is_none() {
                    // Fresh zone entry: restart the detector.
                    ped.filter = LowPassFilter::new(viewing_model.filter_alpha);
                    ped.window =
                        AccelWindow::with_span(viewing_model.window_span_s, scenario.accel_rate_hz);
                    ped.next_accel_t = now;
                    ped.viewing_detected = None;
                }
                let accel_dt = 1.0 / scenario.accel_rate_hz;
                match &ped.accel {
                    AccelSource::Synthetic => {
                        while ped.next_accel_t <= now + TIME_EPS {
                            let t = ped.next_accel_t;
                            let viewing = if let Some(s) = ped.suppressed_from {
                                t < s && ped.viewing_intervals.iter().any(|iv| iv.contains(t))
                            } else {
                                ped.viewing_intervals.iter().any(|iv| iv.contains(t))
                            };
                            let s = scenario.noise.accel.sample(t, viewing, &mut rng);
                            ped.window.push(ped.filter.apply(s).magnitude());
                            ped.next_accel_t += accel_dt;
                        }
                    }
                    AccelSource::Inline { samples } => {
                        while ped.accel_cursor < samples.len()
                            && samples[ped.accel_cursor].t <= now + TIME_EPS
                        {
                            let row = samples[ped.accel_cursor];
                            let s = AccelSample { t: row.t, ax: row.ax, ay: row.ay, az: row.az };
                            ped.window.push(ped.filter.apply(s).magnitude());
                            ped.accel_cursor += 1;
                        }
                    }
                    AccelSource::Csv { .. } => unreachable!("CSV resolved at load"),
                }
                if ped.window.is_full() {
                    if let Ok(mad) = ped.window.mad() {
                        ped.viewing_detected = viewing_model.detect(mad).ok();
                    }
                }
            } else {
                // Outside: detector idle, but trace-based sources still
                // consume their timeline.
                if let AccelSource::Inline { samples } = &ped.accel {
                    while ped.accel_cursor < samples.len()
                        && samples[ped.accel_cursor].t <= now + TIME_EPS
                    {
                        ped.accel_cursor += 1;
                    }
                }
                ped.viewing_detected = None;
            }

            // Alert latch releases once the pedestrian demonstrably stopped
            // viewing.
            if ped.alert_latched && ped.viewing_detected == Some(false) {
                ped.alert_latched = false;
            }

            // 2e. Group membership follows believed zone presence.
            if zone_est_now != ped.zone_est {
                if let Some(old_channel) = ped.role.channel() {
                    let orphans = layer.depart(&ped.device);
                    if matches!(ped.role, GroupRole::Owner { .. }) {
                        events.push(SimEvent {
                            t: now,
                            actor: ped.id.clone(),
                            kind: EventKind::GroupDissolved { channel: old_channel },
                        });
                    }
                    for orphan in &orphans {
                        if let Some(&vi) = veh_index.get(orphan) {
                            vehicles[vi].joined = false;
                        }
                    }
                    // Orphaned pedestrians are fixed up after this loop; a
                    // device cannot orphan itself.
                    debug_assert!(!orphans.contains(&ped.device));
                    ped.role = GroupRole::None;
                    ped.known_reps.clear();
                    ped.alert_latched = false;
                    ped.ignored_count = 0;
                    // Orphan bookkeeping for other pedestrians happens via
                    // the shared layer: their role is refreshed below.
                }
                ped.zone_est = zone_est_now;
            }
            // Reconcile role with the shared layer (covers being orphaned by
            // someone else's departure this tick).
            if let Some(ch) = ped.role.channel() {
                let still_in = layer
                    .group_on(ChannelId(ch))
                    .is_some_and(|g| g.owner == ped.device || g.contains(&ped.device));
                if !still_in {
                    ped.role = GroupRole::None;
                    ped.known_reps.clear();
                    ped.alert_latched = false;
                    ped.ignored_count = 0;
                }
            }
            if let (Some(z), GroupRole::None) = (ped.zone_est, ped.role) {
                let channel = ChannelId(z as u32);
                match layer.group_on(channel) {
                    Some(g) => {
                        if g.is_ready(now) {
                            let go = g.owner.clone();
                            if layer.overhear_and_join(ped.device.clone(), channel).is_ok() {
                                ped.role = GroupRole::Member { channel: z as u32 };
                                events.push(SimEvent {
                                    t: now,
                                    actor: ped.id.clone(),
                                    kind: EventKind::Overheard {
                                        channel: z as u32,
                                        go: go.0,
                                    },
                                });
                            }
                        }
                        // Not ready yet: retry next tick.
                    }
                    None => {
                        if let Ok(ready_at) = layer.form_group(
                            ped.device.clone(),
                            channel,
                            scenario.comms.formation,
                            now,
                            &mut rng,
                        ) {
                            ped.role = GroupRole::Owner { channel: z as u32, ready_at };
                            ped.next_req_at = ready_at;
                            events.push(SimEvent {
                                t: now,
                                actor: ped.id.clone(),
                                kind: EventKind::GroupFormed { channel: z as u32, ready_at },
                            });
                        }
                    }
                }
            }

            // 2f. Group owner beacons vehicles on schedule.
            if let GroupRole::Owner { channel, ready_at } = ped.role {
                if now + TIME_EPS >= ready_at && now + TIME_EPS >= ped.next_req_at {
                    let members: Vec<DeviceId> = layer
                        .group_on(ChannelId(channel))
                        .map(|g| g.members.iter().cloned().collect())
                        .unwrap_or_default();
                    for member in members {
                        let Some(&vi) = veh_index.get(&member) else { continue };
                        let veh_pos = vehicles[vi].traj.position(now);
                        messages_attempted += 1;
                        let outcome = layer.send(
                            ped.device.clone(),
                            member.clone(),
                            Payload::Req(ReqMsg { sender: ped.device.clone(), timestamp: now }),
                            truth,
                            veh_pos,
                            now,
                            Some(now),
                            1,
                            &mut rng,
                        );
                        if matches!(outcome, DeliveryOutcome::Dropped) {
                            messages_dropped += 1;
                        }
                        events.push(SimEvent {
                            t: now,
                            actor: ped.id.clone(),
                            kind: EventKind::ReqSent { to: member.0.clone() },
                        });
                    }
                    ped.next_req_at = now + scenario.comms.req_interval;
                }
            }
        }

        // --- Stage 3: message pump. Replies triggered by deliveries may be
        // due within the same tick, so pump until quiet. ---
        loop {
            let envelopes = layer.poll(now);
            if envelopes.is_empty() {
                break;
            }
            for env in envelopes {
                match &env.payload {
                    Payload::Req(_) => {
                        let Some(&vi) = veh_index.get(&env.to) else { continue };
                        let arrival = env.deliver_at;
                        let (reply, veh_pos) = {
                            let veh = &vehicles[vi];
                            if veh.passed {
                                continue;
                            }
                            let speed = veh.traj.speed(arrival);
                            let remaining = veh.crossing_arc - veh.traj.arc(arrival);
                            if speed <= 0.0 || remaining <= 0.0 {
                                continue;
                            }
                            (
                                RepMsg {
                                    vehicle: veh.device.clone(),
                                    v_c: speed,
                                    m_v: veh.mass,
                                    a_v: veh.area,
                                    t_c: remaining / speed,
                                    timestamp: arrival,
                                },
                                veh.traj.position(arrival),
                            )
                        };
                        let go_pos = ped_index
                            .get(&env.from)
                            .map(|&pi| peds[pi].traj.position(arrival))
                            .unwrap_or(veh_pos);
                        messages_attempted += 1;
                        let outcome = layer.send(
                            env.to.clone(),
                            env.from.clone(),
                            Payload::Rep(reply),
                            veh_pos,
                            go_pos,
                            arrival,
                            env.req_sent_at,
                            env.hops,
                            &mut rng,
                        );
                        if matches!(outcome, DeliveryOutcome::Dropped) {
                            messages_dropped += 1;
                        }
                    }
                    Payload::Rep(rep) => {
                        let Some(&pi) = ped_index.get(&env.to) else { continue };
                        let Some(channel) = peds[pi].role.channel() else { continue };
                        // Round trip: a direct reply measures it off its own
                        // delivery; a forwarded one carries the owner's
                        // measurement in its send timestamp.
                        let rtt = env.req_sent_at.map(|req_at| {
                            if env.hops == 1 {
                                env.deliver_at - req_at
                            } else {
                                env.sent_at - req_at
                            }
                        });
                        if let Some(rtt) = rtt {
                            peds[pi].rtt_samples.push(rtt);
                        }
                        peds[pi].known_reps.insert(rep.vehicle.0.clone(), rep.clone());
                        events.push(SimEvent {
                            t: now,
                            actor: peds[pi].id.clone(),
                            kind: EventKind::RepReceived {
                                vehicle: rep.vehicle.0.clone(),
                                t_c: rep.t_c,
                                hops: env.hops,
                            },
                        });
                        // The owner relays fresh replies to overhearing
                        // members, timestamps intact.
                        let is_owner = layer
                            .group_on(ChannelId(channel))
                            .is_some_and(|g| g.owner == env.to);
                        if is_owner {
                            let go_pos = peds[pi].traj.position(env.deliver_at);
                            for target in layer.forward_targets(ChannelId(channel)) {
                                if target == env.to {
                                    continue;
                                }
                                let Some(&ti) = ped_index.get(&target) else { continue };
                                let target_pos = peds[ti].traj.position(env.deliver_at);
                                messages_attempted += 1;
                                let outcome = layer.send(
                                    env.to.clone(),
                                    target.clone(),
                                    env.payload.clone(),
                                    go_pos,
                                    target_pos,
                                    env.deliver_at,
                                    env.req_sent_at,
                                    env.hops + 1,
                                    &mut rng,
                                );
                                if matches!(outcome, DeliveryOutcome::Dropped) {
                                    messages_dropped += 1;
                                }
                            }
                        }
                    }
                }
            }
        }

        // --- Stage 4: risk assessment and alerting. ---
        for ped in peds.iter_mut() {
            let truth = ped.traj.position(now);
            let speed = ped.traj.speed(now);
            let heading = ped.traj.heading(now);
            let motion = classify_motion(speed, &scenario.motion);

            if let Some(z) = ped.zone_est {
                // Age vehicle knowledge to the present; anything already at
                // the crossing drops out.
                let mut vehicle_list: Vec<VehicleKinematics> = Vec::new();
                ped.known_reps.retain(|vid, rep| {
                    let aged = rep.t_c - (now - rep.timestamp);
                    if aged <= 0.0 {
                        return false;
                    }
                    vehicle_list.push(VehicleKinematics {
                        id: vid.clone(),
                        speed: rep.v_c,
                        mass: rep.m_v,
                        area: rep.a_v,
                        t_c: aged,
                        drag_cd: scenario.risk.drag_cd,
                        mu_k: scenario.risk.mu_k,
                        f0: scenario.risk.f0,
                        rho: scenario.risk.rho,
                    });
                    true
                });

                let crossing = scenario.map.crossings[z];
                let believed = ped.estimate.unwrap_or(truth);
                let d_p = geodetic_distance(believed, crossing);
                let toward = speed > 0.0
                    && heading_difference_deg(heading, initial_bearing_deg(believed, crossing))
                        < 90.0;
                let state = PedestrianRiskState {
                    d_p,
                    v_p: speed,
                    motion,
                    viewing: ped.viewing_detected == Some(true),
                    ignored_alert_count: ped.ignored_count,
                };
                let t_delay = measure_t_delay(&ped.rtt_samples)
                    .unwrap_or(scenario.comms.link.delay_mean);
                let mode = if ped.role.connected(now) {
                    SafetyMode::Connected
                } else {
                    SafetyMode::StandAlone(scenario.risk.standalone_level)
                };
                let decision = decide(
                    &state,
                    &vehicle_list,
                    t_delay,
                    &scenario.risk.reaction,
                    &risk_cfg,
                    mode,
                    ped.screen_on(now),
                    toward,
                );

                let cooled =
                    ped.last_alert_at.is_none_or(|t| now - t + TIME_EPS >= scenario.alert_interval);
                if decision.action != AlertAction::None && !ped.alert_latched && cooled {
                    ped.last_alert_at = Some(now);
                    match decision.action {
                        AlertAction::AlertPedestrian => {
                            match (decision.t_warning, decision.probability) {
                                (Some(t_warning), Some(probability)) => {
                                    let gt_t_warning = ground_truth_warning(
                                        &ped.traj, &vehicles, z, crossing, now,
                                    );
                                    let complied = ped.ignores_left == 0;
                                    events.push(SimEvent {
                                        t: now,
                                        actor: ped.id.clone(),
                                        kind: EventKind::AlertPedestrian {
                                            t_warning,
                                            probability,
                                            gt_t_warning,
                                            complied,
                                        },
                                    });
                                    if complied {
                                        ped.suppressed_from = Some(now);
                                        ped.alert_latched = true;
                                    } else {
                                        ped.ignores_left -= 1;
                                        ped.ignored_count += 1;
                                    }
                                }
                                _ => {
                                    // Stand-alone alert: no vehicle knowledge
                                    // behind it.
                                    let complied = ped.ignores_left == 0;
                                    events.push(SimEvent {
                                        t: now,
                                        actor: ped.id.clone(),
                                        kind: EventKind::AlertStandAlone,
                                    });
                                    if complied {
                                        ped.suppressed_from = Some(now);
                                        ped.alert_latched = true;
                                    } else {
                                        ped.ignores_left -= 1;
                                        ped.ignored_count += 1;
                                    }
                                }
                            }
                        }
                        AlertAction::AlertDriver => {
                            let foremost = vehicle_list
                                .iter()
                                .min_by(|a, b| a.t_c.total_cmp(&b.t_c))
                                .map(|v| v.id.clone())
                                .unwrap_or_default();
                            events.push(SimEvent {
                                t: now,
                                actor: ped.id.clone(),
                                kind: EventKind::AlertDriver {
                                    vehicle: foremost,
                                    probability: decision.probability.unwrap_or(1.0),
                                },
                            });
                            ped.alert_latched = true;
                        }
                        AlertAction::None => unreachable!(),
                    }
                }
            }
            ped.records.push(PedTickRecord {
                t: now,
                truth,
                speed,
                raw_fix: ped.tick_raw_fix,
                estimate: ped.estimate,
                raw_error: ped.tick_raw_error,
                estimate_error: ped.tick_estimate_error,
                power: ped.power.mode,
                zone: ped.zone_est,
                zone_truth: ped.zone_truth,
                viewing_truth: ped.viewing_truth(now),
                viewing_detected: ped.viewing_detected,
                motion,
                known_vehicles: ped.known_reps.len(),
                connected: ped.role.connected(now),
            });
        }
    }

    let pedestrians: BTreeMap<String, Vec<PedTickRecord>> =
        peds.iter().map(|p| (p.id.clone(), p.records.clone())).collect();
    let vehicles_map: BTreeMap<String, Vec<VehTickRecord>> =
        vehicles.iter().map(|v| (v.id.clone(), v.records.clone())).collect();

    let mut round_trips = Vec::new();
    for p in &peds {
        round_trips.extend_from_slice(&p.rtt_samples);
    }

    let metrics = metrics::compute(metrics::MetricsInput {
        pedestrians: &pedestrians,
        events: &events,
        power: &scenario.power,
        tick: scenario.tick,
        messages_attempted,
        messages_dropped,
        round_trips: &round_trips,
    });

    Ok(SimReport {
        seed: scenario.seed,
        tick: scenario.tick,
        duration: scenario.duration,
        viewing_gamma: gamma,
        pedestrians,
        vehicles: vehicles_map,
        events,
        metrics,
    })
}

/// Warning time recomputed from ground truth at alert time: how long until
/// the nearest live vehicle truly reaches the crossing, minus how long until
/// the pedestrian truly does.
fn ground_truth_warning(
    ped_traj: &Trajectory,
    vehicles: &[VehRuntime],
    zone: usize,
    crossing: GeoPoint,
    now: f64,
) -> Option<f64> {
    let veh_eta = vehicles
        .iter()
        .filter(|v| v.channel == zone as u32 && !v.passed)
        .map(|v| v.crossing_pass_time - now)
        .min_by(f64::total_cmp)?;
    let ped_eta = ped_traj.next_pass_after(crossing, now) - now;
    Some(veh_eta - ped_eta)
}
