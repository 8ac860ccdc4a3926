//! Simulated WiFi-Direct-style device-to-device communication.
//!
//! Pedestrian phones form groups with nearby vehicles: one device owns the
//! group (GO) and the rest join as members (GM). A pedestrian GO polls
//! vehicles with REQ messages; vehicles answer with REP messages carrying
//! the kinematic fields the risk assessment needs. Late-arriving pedestrians
//! overhear the channel, join as members, and have the GO forward them every
//! REP it receives — the "virtual n-to-n" topology that spares a second
//! group formation.
//!
//! Radio behaviour is reduced to two knobs: a distance-dependent packet
//! delivery ratio (flat near, linear decay far) and a one-way delay drawn
//! around half the round-trip mean. All randomness flows through the
//! caller's RNG and all queued traffic is ordered by (delivery time,
//! sequence number), so a seed fully determines the traffic.

use crate::geo::{geodetic_distance, GeoPoint};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use thiserror::Error;

/// Errors reported by the communication layer.
#[derive(Debug, Error)]
pub enum P2pError {
    #[error("channel {0} already carries a group")]
    AlreadyOwner(u32),
    #[error("device {0} is already in the group")]
    AlreadyMember(String),
    #[error("no group is active on channel {0}")]
    NoGroupFound(u32),
    #[error("no completed round trips to average")]
    NoSamples,
}

/// Stable identifier of a phone or vehicle unit.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceId(pub String);

impl std::fmt::Display for DeviceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Radio channel; at most one group operates per channel in this model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChannelId(pub u32);

/// One formed group: the owner plus its members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub owner: DeviceId,
    pub members: BTreeSet<DeviceId>,
    pub channel: ChannelId,
    /// Simulation time at which formation completes and traffic may flow.
    pub formed_at: f64,
}

impl Group {
    pub fn is_ready(&self, now: f64) -> bool {
        now >= self.formed_at
    }

    pub fn contains(&self, device: &DeviceId) -> bool {
        self.owner == *device || self.members.contains(device)
    }
}

/// Pedestrian poll asking nearby vehicles for their kinematic state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReqMsg {
    pub sender: DeviceId,
    pub timestamp: f64,
}

/// Vehicle reply: exactly the fields the risk assessment consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepMsg {
    pub vehicle: DeviceId,
    /// Current vehicle speed, m/s.
    pub v_c: f64,
    /// Vehicle mass, kg.
    pub m_v: f64,
    /// Cross-sectional area, m².
    pub a_v: f64,
    /// Time for the vehicle to reach the crossing, s.
    pub t_c: f64,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Req(ReqMsg),
    Rep(RepMsg),
}

/// Distance-dependent link quality: a flat delivery ratio out to
/// `pdr_range`, then a linear decay of `pdr_far_slope` per meter down to
/// zero. Delays are one-way samples around half the round-trip mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkModel {
    pub pdr_near: f64,
    pub pdr_range: f64,
    pub pdr_far_slope: f64,
    /// Mean round-trip delay of a single hop, s.
    pub delay_mean: f64,
    /// Uniform jitter applied to each one-way delay, s.
    pub delay_jitter: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            pdr_near: 0.9,      // delivery ratio within pdr_range
            pdr_range: 60.0,    // meters of flat delivery ratio
            pdr_far_slope: 0.03, // delivery loss per meter beyond the range
            delay_mean: 0.02,   // single-hop round trip, s
            delay_jitter: 0.005, // one-way jitter bound, s
        }
    }
}

impl LinkModel {
    /// Packet delivery ratio at the given distance.
    pub fn pdr(&self, distance: f64) -> f64 {
        if distance <= self.pdr_range {
            self.pdr_near
        } else {
            (self.pdr_near - (distance - self.pdr_range) * self.pdr_far_slope).max(0.0)
        }
    }
}

/// How the group forms, which sets the formation latency distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormationMode {
    /// Owner predetermined; latency is Gaussian around 2.8 s.
    Autonomous,
    /// Full owner negotiation; latency is uniform in [8, 9] s.
    Negotiated,
}

/// Spread of the autonomous formation latency around its 2.8 s mean.
pub const AUTONOMOUS_SIGMA_S: f64 = 0.5;

/// Sample a group-formation latency; never negative.
pub fn formation_delay<R: Rng + ?Sized>(mode: FormationMode, rng: &mut R) -> f64 {
    match mode {
        FormationMode::Autonomous => Normal::new(2.8, AUTONOMOUS_SIGMA_S)
            .expect("constant parameters are valid")
            .sample(rng)
            .max(0.0),
        FormationMode::Negotiated => Uniform::new_inclusive(8.0, 9.0)
            .expect("constant parameters are valid")
            .sample(rng),
    }
}

/// Outcome of one transmission attempt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DeliveryOutcome {
    /// Will arrive after this one-way delay, s.
    Delivered(f64),
    Dropped,
}

/// Single transmission: succeed with probability pdr(distance); on success
/// the one-way delay is delay_mean/2 plus uniform jitter, floored at zero.
pub fn deliver<R: Rng + ?Sized>(
    from: GeoPoint,
    to: GeoPoint,
    lm: &LinkModel,
    rng: &mut R,
) -> DeliveryOutcome {
    let distance = geodetic_distance(from, to);
    if rng.random::<f64>() >= lm.pdr(distance) {
        return DeliveryOutcome::Dropped;
    }
    let jitter = if lm.delay_jitter > 0.0 {
        rng.random_range(-lm.delay_jitter..=lm.delay_jitter)
    } else {
        0.0
    };
    DeliveryOutcome::Delivered((lm.delay_mean / 2.0 + jitter).max(0.0))
}

/// A message in flight or delivered; `req_sent_at` lets the receiver of a
/// Rep close the round trip opened by its own Req without polluting the
/// payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub seq: u64,
    pub from: DeviceId,
    pub to: DeviceId,
    pub sent_at: f64,
    pub deliver_at: f64,
    pub payload: Payload,
    pub req_sent_at: Option<f64>,
    /// 1 for a direct transmission, +1 per forwarding hop.
    pub hops: u32,
}

/// Heap ordering: earliest delivery first, sequence number breaking ties.
#[derive(Debug, Clone)]
struct QueuedEnvelope(Envelope);

impl PartialEq for QueuedEnvelope {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for QueuedEnvelope {}
impl PartialOrd for QueuedEnvelope {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueuedEnvelope {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .deliver_at
            .total_cmp(&other.0.deliver_at)
            .then(self.0.seq.cmp(&other.0.seq))
    }
}

/// Forwarding rule installed by overhearing: the GO re-sends every Rep it
/// receives to the overhearing member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardingRoute {
    pub channel: ChannelId,
    pub go: DeviceId,
    pub member: DeviceId,
}

/// Group registry plus the in-flight message queue. The layer holds no
/// positions and no clock of its own: the simulation passes both in, and the
/// same seed therefore reproduces the same traffic byte for byte.
#[derive(Debug, Clone, Default)]
pub struct P2pLayer {
    pub link: LinkModel,
    groups: BTreeMap<ChannelId, Group>,
    forwards: BTreeMap<ChannelId, BTreeSet<DeviceId>>,
    queue: BinaryHeap<Reverse<QueuedEnvelope>>,
    next_seq: u64,
}

impl P2pLayer {
    pub fn new(link: LinkModel) -> Self {
        Self { link, ..Self::default() }
    }

    pub fn group_on(&self, channel: ChannelId) -> Option<&Group> {
        self.groups.get(&channel)
    }

    /// Devices the GO must forward received Reps to on this channel.
    pub fn forward_targets(&self, channel: ChannelId) -> Vec<DeviceId> {
        self.forwards
            .get(&channel)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }

    /// Create a group on a free channel. Returns the time formation
    /// completes (`now` + sampled latency); traffic may flow from then on.
    pub fn form_group<R: Rng + ?Sized>(
        &mut self,
        owner: DeviceId,
        channel: ChannelId,
        mode: FormationMode,
        now: f64,
        rng: &mut R,
    ) -> Result<f64, P2pError> {
        if self.groups.contains_key(&channel) {
            return Err(P2pError::AlreadyOwner(channel.0));
        }
        let ready_at = now + formation_delay(mode, rng);
        self.groups.insert(
            channel,
            Group { owner, members: BTreeSet::new(), channel, formed_at: ready_at },
        );
        Ok(ready_at)
    }

    /// Join an existing group as a member.
    pub fn join_group(&mut self, device: DeviceId, channel: ChannelId) -> Result<(), P2pError> {
        let group = self
            .groups
            .get_mut(&channel)
            .ok_or(P2pError::NoGroupFound(channel.0))?;
        if group.contains(&device) {
            return Err(P2pError::AlreadyMember(device.0));
        }
        group.members.insert(device);
        Ok(())
    }

    /// Overhear an active group, join it, and have the GO forward every Rep
    /// it receives to this device from now on.
    pub fn overhear_and_join(
        &mut self,
        ped: DeviceId,
        channel: ChannelId,
    ) -> Result<ForwardingRoute, P2pError> {
        let go = self
            .groups
            .get(&channel)
            .map(|g| g.owner.clone())
            .ok_or(P2pError::NoGroupFound(channel.0))?;
        self.join_group(ped.clone(), channel)?;
        self.forwards.entry(channel).or_default().insert(ped.clone());
        Ok(ForwardingRoute { channel, go, member: ped })
    }

    /// Remove a device from the network. A departing owner dissolves its
    /// group — queued traffic still delivers, but members must rediscover;
    /// the orphaned member list is returned so the caller can restart them.
    pub fn depart(&mut self, device: &DeviceId) -> Vec<DeviceId> {
        let mut orphans = Vec::new();
        let owned: Vec<ChannelId> = self
            .groups
            .values()
            .filter(|g| g.owner == *device)
            .map(|g| g.channel)
            .collect();
        for channel in owned {
            let group = self.groups.remove(&channel).expect("listed above");
            self.forwards.remove(&channel);
            orphans.extend(group.members);
        }
        for group in self.groups.values_mut() {
            group.members.remove(device);
        }
        for targets in self.forwards.values_mut() {
            targets.remove(device);
        }
        orphans
    }

    /// Attempt a transmission between two positioned devices; on success the
    /// message is queued for delivery. `req_sent_at` correlates a Rep with
    /// the Req that solicited it; `hops` counts forwarding legs.
    #[allow(clippy::too_many_arguments)]
    pub fn send<R: Rng + ?Sized>(
        &mut self,
        from: DeviceId,
        to: DeviceId,
        payload: Payload,
        from_pos: GeoPoint,
        to_pos: GeoPoint,
        now: f64,
        req_sent_at: Option<f64>,
        hops: u32,
        rng: &mut R,
    ) -> DeliveryOutcome {
        let outcome = deliver(from_pos, to_pos, &self.link, rng);
        if let DeliveryOutcome::Delivered(delay) = outcome {
            let envelope = Envelope {
                seq: self.next_seq,
                from,
                to,
                sent_at: now,
                deliver_at: now + delay,
                payload,
                req_sent_at,
                hops,
            };
            self.next_seq += 1;
            self.queue.push(Reverse(QueuedEnvelope(envelope)));
        }
        outcome
    }

    /// Pop every message due at or before `now`, earliest first.
    pub fn poll(&mut self, now: f64) -> Vec<Envelope> {
        let mut out = Vec::new();
        while let Some(Reverse(head)) = self.queue.peek() {
            if head.0.deliver_at > now {
                break;
            }
            out.push(self.queue.pop().expect("peeked").0 .0);
        }
        out
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }
}

/// Average of completed REQ→REP round-trip times; the live estimate of
/// t_delay used by the risk assessment.
pub fn measure_t_delay(round_trips: &[f64]) -> Result<f64, P2pError> {
    if round_trips.is_empty() {
        return Err(P2pError::NoSamples);
    }
    Ok(round_trips.iter().sum::<f64>() / round_trips.len() as f64)
}
