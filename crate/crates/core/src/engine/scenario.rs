//! Scenario description: the JSON schema for a simulation run, loading with
//! CSV trace resolution, validation, and the timed-trajectory machinery that
//! drives every moving actor.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::context::{MotionThresholds, SyntheticAccel, ViewingModel};
use crate::geo::{
    geodetic_distance, initial_bearing_deg, AlertZone, GeoPoint, LocalFrame, SegmentId,
    SidewalkGraph, SidewalkSegment,
};
use crate::mapmatch::HmmModel;
use crate::p2p::{FormationMode, LinkModel};
use crate::powermgr::PowerModel;
use crate::risk::{ReactionModel, StandAloneLevel};

use super::EngineError;

// ====== Map ======

/// Static environment: sidewalk segments, crossing points and their alert
/// zones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapSpec {
    pub segments: Vec<SegmentSpec>,
    /// Crossing points; index `i` is also the D2D channel used around it.
    #[serde(default)]
    pub crossings: Vec<GeoPoint>,
    /// Alert-zone radius around every crossing, meters.
    #[serde(default = "default_zone_radius")]
    pub zone_radius: f64,
}

fn default_zone_radius() -> f64 {
    20.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub id: u32,
    pub start: GeoPoint,
    pub end: GeoPoint,
    #[serde(default = "default_width")]
    pub width: f64,
}

fn default_width() -> f64 {
    3.0
}

impl MapSpec {
    pub fn build_graph(&self) -> SidewalkGraph {
        let segments = self
            .segments
            .iter()
            .map(|s| SidewalkSegment {
                id: SegmentId(s.id),
                start: s.start,
                end: s.end,
                width: s.width,
            })
            .collect();
        let zones = self
            .crossings
            .iter()
            .map(|&c| AlertZone { crossing: c, radius: self.zone_radius })
            .collect();
        SidewalkGraph::new(segments, self.crossings.clone(), zones)
    }
}

// ====== Movement ======

/// How an actor moves. Either a constant-speed walk along a polyline or an
/// explicit timed trajectory (inline or from CSV with `t_sec,lat,lon` rows).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Movement {
    Route {
        path: Vec<GeoPoint>,
        speed_mps: f64,
        #[serde(default)]
        start_time: f64,
    },
    Trajectory {
        points: Vec<TimedPoint>,
    },
    TrajectoryCsv {
        path: String,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TimedPoint {
    pub t: f64,
    pub lat: f64,
    pub lon: f64,
}

// ====== Actors ======

/// What a pedestrian does when an alert fires on their device.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlertResponse {
    /// Stop looking at the phone as soon as the first alert fires.
    #[default]
    Comply,
    /// Keep looking through `times` alerts, then comply.
    Ignore { times: u32 },
}

/// Where a pedestrian's accelerometer stream comes from.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AccelSource {
    /// Generated from the scenario-level synthetic model.
    #[default]
    Synthetic,
    Inline { samples: Vec<AccelRow> },
    Csv { path: String },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AccelRow {
    pub t: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TimeInterval {
    pub start: f64,
    pub end: f64,
}

impl TimeInterval {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PedestrianSpec {
    pub id: String,
    pub movement: Movement,
    /// Within these intervals the pedestrian is truly looking at the phone
    /// (until an alert makes them comply).
    #[serde(default)]
    pub viewing_intervals: Vec<TimeInterval>,
    /// Extra intervals where the screen is on without active viewing.
    #[serde(default)]
    pub screen_on_intervals: Vec<TimeInterval>,
    #[serde(default)]
    pub accel: AccelSource,
    #[serde(default)]
    pub alert_response: AlertResponse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub id: String,
    pub movement: Movement,
    /// Index into `map.crossings` this vehicle drives through.
    pub crossing: usize,
    /// Curb mass, kg.
    #[serde(default = "default_vehicle_mass")]
    pub mass: f64,
    /// Frontal area, square meters.
    #[serde(default = "default_vehicle_area")]
    pub area: f64,
}

fn default_vehicle_mass() -> f64 {
    1400.0 // mid-size sedan
}

fn default_vehicle_area() -> f64 {
    2.7 // mid-size sedan frontal area
}

// ====== Sensing, comms and risk knobs ======

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Isotropic GPS noise standard deviation, meters.
    pub gps_sigma: f64,
    /// Synthetic accelerometer model used by `AccelSource::Synthetic`
    /// pedestrians and for detector-threshold pre-training.
    pub accel: SyntheticAccel,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { gps_sigma: 1.0, accel: SyntheticAccel::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CommsSpec {
    pub link: LinkModel,
    pub formation: FormationMode,
    /// Seconds between beacon rounds issued by a group owner.
    pub req_interval: f64,
}

impl Default for CommsSpec {
    fn default() -> Self {
        CommsSpec {
            link: LinkModel::default(),
            formation: FormationMode::Autonomous,
            req_interval: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskSpec {
    pub probability_threshold: f64,
    /// Seconds of spare time above which no alert is needed.
    pub margin: f64,
    /// Ignored-alert count at which the alert escalates to the driver.
    pub escalation_after: u32,
    /// Assumed crossing speed for a walking pedestrian, m/s.
    pub brisk_speed: f64,
    /// Assumed crossing speed for a running pedestrian, m/s.
    pub running_speed: f64,
    pub reaction: ReactionModel,
    /// Receiver-side assumptions about vehicle braking physics.
    pub drag_cd: f64,
    pub mu_k: f64,
    pub f0: f64,
    pub rho: f64,
    /// Sensing level used whenever a pedestrian has no group connectivity.
    pub standalone_level: StandAloneLevel,
}

impl Default for RiskSpec {
    fn default() -> Self {
        RiskSpec {
            probability_threshold: 0.5,
            margin: 5.0,
            escalation_after: 3,
            brisk_speed: 2.0,
            running_speed: 3.0,
            reaction: ReactionModel::default(),
            drag_cd: 0.25,  // mid-size sedan drag coefficient
            mu_k: 0.8,      // dry-asphalt kinetic friction
            f0: 0.0,        // constant rolling-resistance term
            rho: 1.23,      // air density at sea level, kg/m^3
            standalone_level: StandAloneLevel::Level1,
        }
    }
}

// ====== Scenario root ======

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub map: MapSpec,
    #[serde(default)]
    pub pedestrians: Vec<PedestrianSpec>,
    #[serde(default)]
    pub vehicles: Vec<VehicleSpec>,
    #[serde(default = "default_tick")]
    pub tick: f64,
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub comms: CommsSpec,
    #[serde(default)]
    pub risk: RiskSpec,
    #[serde(default)]
    pub power: PowerModel,
    #[serde(default)]
    pub hmm: HmmModel,
    #[serde(default)]
    pub motion: MotionThresholds,
    #[serde(default)]
    pub viewing: ViewingModel,
    /// Accelerometer sampling rate fed to the viewing detector, Hz.
    #[serde(default = "default_accel_rate")]
    pub accel_rate_hz: f64,
    /// Minimum seconds between successive alerts to the same pedestrian.
    #[serde(default = "default_alert_interval")]
    pub alert_interval: f64,
}

fn default_tick() -> f64 {
    0.1
}

fn default_accel_rate() -> f64 {
    50.0
}

fn default_alert_interval() -> f64 {
    1.0
}

impl Scenario {
    /// Load a scenario from a JSON file, resolving any CSV trace references
    /// relative to the file's directory, and validate it.
    pub fn load(path: &Path) -> Result<Scenario, EngineError> {
        let text = std::fs::read_to_string(path).map_err(|e| EngineError::Parse {
            path: path.display().to_string(),
            line: 0,
            column: 0,
            message: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf);
        Scenario::from_json_str(&text, base.as_deref(), &path.display().to_string())
    }

    /// Parse a scenario from a JSON string. `base_dir` anchors relative CSV
    /// paths; `origin` labels parse errors.
    pub fn from_json_str(
        text: &str,
        base_dir: Option<&Path>,
        origin: &str,
    ) -> Result<Scenario, EngineError> {
        let mut scenario: Scenario =
            serde_json::from_str(text).map_err(|e| EngineError::Parse {
                path: origin.to_string(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
        scenario.resolve_csv(base_dir)?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Replace every CSV reference with its inline equivalent.
    fn resolve_csv(&mut self, base_dir: Option<&Path>) -> Result<(), EngineError> {
        for ped in &mut self.pedestrians {
            resolve_movement(&mut ped.movement, base_dir)?;
            if let AccelSource::Csv { path } = &ped.accel {
                let full = join_base(base_dir, path);
                let samples = read_accel_csv(&full)?;
                ped.accel = AccelSource::Inline { samples };
            }
        }
        for veh in &mut self.vehicles {
            resolve_movement(&mut veh.movement, base_dir)?;
        }
        Ok(())
    }

    /// Check every structural rule and report all violations at once.
    // Negated comparisons like `!(x > 0.0)` are deliberate: they treat NaN as
    // a violation, which `x <= 0.0` would silently accept.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), EngineError> {
        let mut problems = Vec::new();

        if !(self.tick > 0.0) || !self.tick.is_finite() {
            problems.push(format!("tick must be a positive duration, got {}", self.tick));
        }
        if !(self.duration >= 0.0) || !self.duration.is_finite() {
            problems.push(format!("duration must be non-negative, got {}", self.duration));
        }
        if !(self.accel_rate_hz > 0.0) {
            problems.push(format!(
                "accel_rate_hz must be positive, got {}",
                self.accel_rate_hz
            ));
        }
        if !(self.alert_interval >= 0.0) {
            problems.push(format!(
                "alert_interval must be non-negative, got {}",
                self.alert_interval
            ));
        }

        if self.map.segments.is_empty() {
            problems.push("map.segments must not be empty".to_string());
        }
        let mut seen_ids = BTreeSet::new();
        for seg in &self.map.segments {
            if !seen_ids.insert(seg.id) {
                problems.push(format!("duplicate segment id {}", seg.id));
            }
            if !(seg.width > 0.0) {
                problems.push(format!("segment {} width must be positive, got {}", seg.id, seg.width));
            }
            for (label, p) in [("start", seg.start), ("end", seg.end)] {
                if !coord_ok(p) {
                    problems.push(format!(
                        "segment {} {label} has invalid coordinates ({}, {})",
                        seg.id, p.lat, p.lon
                    ));
                }
            }
        }
        if !(self.map.zone_radius > 0.0) {
            problems.push(format!(
                "map.zone_radius must be positive, got {}",
                self.map.zone_radius
            ));
        }
        for (i, c) in self.map.crossings.iter().enumerate() {
            if !coord_ok(*c) {
                problems.push(format!("crossing {i} has invalid coordinates ({}, {})", c.lat, c.lon));
            }
        }

        let mut ped_ids = BTreeSet::new();
        for ped in &self.pedestrians {
            if !ped_ids.insert(ped.id.clone()) {
                problems.push(format!("duplicate pedestrian id '{}'", ped.id));
            }
            validate_movement(&ped.movement, &ped.id, &mut problems);
            for iv in ped.viewing_intervals.iter().chain(&ped.screen_on_intervals) {
                if !(iv.end >= iv.start) {
                    problems.push(format!(
                        "pedestrian '{}' has interval with end {} before start {}",
                        ped.id, iv.end, iv.start
                    ));
                }
            }
            if let AccelSource::Inline { samples } = &ped.accel {
                if samples.windows(2).any(|w| w[1].t <= w[0].t) {
                    problems.push(format!(
                        "pedestrian '{}' accel samples must be strictly increasing in time",
                        ped.id
                    ));
                }
            }
        }

        let mut veh_ids = BTreeSet::new();
        for veh in &self.vehicles {
            if !veh_ids.insert(veh.id.clone()) {
                problems.push(format!("duplicate vehicle id '{}'", veh.id));
            }
            if ped_ids.contains(&veh.id) {
                problems.push(format!("id '{}' used by both a pedestrian and a vehicle", veh.id));
            }
            validate_movement(&veh.movement, &veh.id, &mut problems);
            if veh.crossing >= self.map.crossings.len() {
                problems.push(format!(
                    "vehicle '{}' references crossing {} but the map has {}",
                    veh.id,
                    veh.crossing,
                    self.map.crossings.len()
                ));
            }
            if !(veh.mass > 0.0) {
                problems.push(format!("vehicle '{}' mass must be positive, got {}", veh.id, veh.mass));
            }
            if !(veh.area > 0.0) {
                problems.push(format!("vehicle '{}' area must be positive, got {}", veh.id, veh.area));
            }
        }

        if !(self.noise.gps_sigma >= 0.0) {
            problems.push(format!("noise.gps_sigma must be non-negative, got {}", self.noise.gps_sigma));
        }
        for (name, v) in [
            ("comms.link.pdr_near", self.comms.link.pdr_near),
        ] {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.comms.req_interval > 0.0) {
            problems.push(format!(
                "comms.req_interval must be positive, got {}",
                self.comms.req_interval
            ));
        }
        if !(self.risk.reaction.sigma > 0.0) {
            problems.push(format!(
                "risk.reaction.sigma must be positive, got {}",
                self.risk.reaction.sigma
            ));
        }
        if !(0.0..=1.0).contains(&self.risk.probability_threshold) {
            problems.push(format!(
                "risk.probability_threshold must lie in [0, 1], got {}",
                self.risk.probability_threshold
            ));
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(EngineError::Validation(problems))
        }
    }
}

fn coord_ok(p: GeoPoint) -> bool {
    p.lat.is_finite() && p.lon.is_finite() && p.lat.abs() <= 90.0 && p.lon.abs() <= 180.0
}

fn validate_movement(movement: &Movement, id: &str, problems: &mut Vec<String>) {
    match movement {
        Movement::Route { path, speed_mps, start_time } => {
            if path.is_empty() {
                problems.push(format!("actor '{id}' route path must not be empty"));
            }
            if path.len() > 1 && !(*speed_mps > 0.0) {
                problems.push(format!(
                    "actor '{id}' route speed must be positive, got {speed_mps}"
                ));
            }
            if !start_time.is_finite() {
                problems.push(format!("actor '{id}' start_time must be finite"));
            }
            for p in path {
                if !coord_ok(*p) {
                    problems.push(format!(
                        "actor '{id}' route has invalid coordinates ({}, {})",
                        p.lat, p.lon
                    ));
                }
            }
        }
        Movement::Trajectory { points } => {
            if points.is_empty() {
                problems.push(format!("actor '{id}' trajectory must not be empty"));
            }
            if points.windows(2).any(|w| w[1].t <= w[0].t) {
                problems.push(format!(
                    "actor '{id}' trajectory timestamps must be strictly increasing"
                ));
            }
            for p in points {
                if !coord_ok(GeoPoint::new(p.lat, p.lon)) {
                    problems.push(format!(
                        "actor '{id}' trajectory has invalid coordinates ({}, {})",
                        p.lat, p.lon
                    ));
                }
            }
        }
        Movement::TrajectoryCsv { path } => {
            problems.push(format!(
                "actor '{id}' still references unresolved trajectory file '{path}'"
            ));
        }
    }
}

fn resolve_movement(movement: &mut Movement, base_dir: Option<&Path>) -> Result<(), EngineError> {
    if let Movement::TrajectoryCsv { path } = movement {
        let full = join_base(base_dir, path);
        let points = read_trajectory_csv(&full)?;
        *movement = Movement::Trajectory { points };
    }
    Ok(())
}

fn join_base(base_dir: Option<&Path>, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        match base_dir {
            Some(base) => base.join(p),
            None => p.to_path_buf(),
        }
    }
}

fn read_trajectory_csv(path: &Path) -> Result<Vec<TimedPoint>, EngineError> {
    #[derive(Deserialize)]
    struct Row {
        t_sec: f64,
        lat: f64,
        lon: f64,
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, &e))?;
    let mut out = Vec::new();
    for record in reader.deserialize::<Row>() {
        let row = record.map_err(|e| csv_error(path, &e))?;
        out.push(TimedPoint { t: row.t_sec, lat: row.lat, lon: row.lon });
    }
    Ok(out)
}

fn read_accel_csv(path: &Path) -> Result<Vec<AccelRow>, EngineError> {
    #[derive(Deserialize)]
    struct Row {
        t_sec: f64,
        ax: f64,
        ay: f64,
        az: f64,
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, &e))?;
    let mut out = Vec::new();
    for record in reader.deserialize::<Row>() {
        let row = record.map_err(|e| csv_error(path, &e))?;
        out.push(AccelRow { t: row.t_sec, ax: row.ax, ay: row.ay, az: row.az });
    }
    Ok(out)
}

fn csv_error(path: &Path, e: &csv::Error) -> EngineError {
    let line = match e.position() {
        Some(pos) => pos.line() as usize,
        None => 0,
    };
    EngineError::Parse {
        path: path.display().to_string(),
        line,
        column: 0,
        message: e.to_string(),
    }
}

// ====== Timed trajectories ======

/// A piecewise-linear path through time. Positions clamp to the endpoints
/// outside the recorded span, so actors stand still before departure and
/// after arrival.
#[derive(Debug, Clone)]
pub struct Trajectory {
    times: Vec<f64>,
    points: Vec<GeoPoint>,
    /// Cumulative arc length at each waypoint, meters.
    cum: Vec<f64>,
}

impl Trajectory {
    pub fn from_movement(movement: &Movement) -> Trajectory {
        match movement {
            Movement::Route { path, speed_mps, start_time } => {
                Trajectory::from_route(path, *speed_mps, *start_time)
            }
            Movement::Trajectory { points } => {
                let times: Vec<f64> = points.iter().map(|p| p.t).collect();
                let pts: Vec<GeoPoint> =
                    points.iter().map(|p| GeoPoint::new(p.lat, p.lon)).collect();
                Trajectory::from_timed(times, pts)
            }
            Movement::TrajectoryCsv { .. } => {
                unreachable!("CSV movements are resolved at load time")
            }
        }
    }

    pub fn from_route(path: &[GeoPoint], speed_mps: f64, start_time: f64) -> Trajectory {
        let mut times = Vec::with_capacity(path.len());
        let mut t = start_time;
        times.push(t);
        for w in path.windows(2) {
            let d = geodetic_distance(w[0], w[1]);
            t += d / speed_mps;
            times.push(t);
        }
        Trajectory::from_timed(times, path.to_vec())
    }

    fn from_timed(times: Vec<f64>, points: Vec<GeoPoint>) -> Trajectory {
        assert_eq!(times.len(), points.len());
        assert!(!points.is_empty(), "a trajectory needs at least one point");
        let mut cum = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in points.windows(2) {
            acc += geodetic_distance(w[0], w[1]);
            cum.push(acc);
        }
        Trajectory { times, points, cum }
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn total_length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Index of the leg containing time `t`, or None outside the span.
    fn leg_at(&self, t: f64) -> Option<usize> {
        if self.times.len() < 2 || t < self.start_time() || t > self.end_time() {
            return None;
        }
        // partition_point finds the first waypoint time strictly after t.
        let idx = self.times.partition_point(|&w| w <= t);
        Some(idx.clamp(1, self.times.len() - 1) - 1)
    }

    pub fn position(&self, t: f64) -> GeoPoint {
        match self.leg_at(t) {
            None => {
                if t <= self.start_time() {
                    self.points[0]
                } else {
                    *self.points.last().unwrap()
                }
            }
            Some(i) => {
                let (t0, t1) = (self.times[i], self.times[i + 1]);
                let frac = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
                lerp(self.points[i], self.points[i + 1], frac)
            }
        }
    }

    /// Instantaneous speed, m/s. Zero outside the recorded span.
    pub fn speed(&self, t: f64) -> f64 {
        match self.leg_at(t) {
            None => 0.0,
            Some(i) => {
                let dt = self.times[i + 1] - self.times[i];
                let d = self.cum[i + 1] - self.cum[i];
                if dt > 0.0 {
                    d / dt
                } else {
                    0.0
                }
            }
        }
    }

    /// Heading of travel in degrees clockwise from north. Falls back to the
    /// closest leg's bearing outside the span.
    pub fn heading(&self, t: f64) -> f64 {
        if self.points.len() < 2 {
            return 0.0;
        }
        let i = self
            .leg_at(t)
            .unwrap_or(if t <= self.start_time() { 0 } else { self.points.len() - 2 });
        initial_bearing_deg(self.points[i], self.points[i + 1])
    }

    /// Arc length travelled by time `t`, meters.
    pub fn arc(&self, t: f64) -> f64 {
        match self.leg_at(t) {
            None => {
                if t <= self.start_time() {
                    0.0
                } else {
                    self.total_length()
                }
            }
            Some(i) => {
                let (t0, t1) = (self.times[i], self.times[i + 1]);
                let frac = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
                self.cum[i] + frac * (self.cum[i + 1] - self.cum[i])
            }
        }
    }

    /// Shortest distance from `p` to the path polyline, meters. This is the
    /// positioning-error yardstick: how far a reported location sits from the
    /// path actually walked.
    pub fn distance_to_path(&self, p: GeoPoint) -> f64 {
        if self.points.len() == 1 {
            return geodetic_distance(p, self.points[0]);
        }
        let mut best = f64::INFINITY;
        for w in self.points.windows(2) {
            let (_, _, dist) = project_on_leg(w[0], w[1], p);
            if dist < best {
                best = dist;
            }
        }
        best
    }

    /// Closest approach of the path to `target`: (arc length, time, distance)
    /// at the global minimum. Earliest of equally close passes wins.
    pub fn closest_approach(&self, target: GeoPoint) -> (f64, f64, f64) {
        if self.points.len() == 1 {
            return (0.0, self.times[0], geodetic_distance(target, self.points[0]));
        }
        let mut best = (0.0, self.times[0], f64::INFINITY);
        for (i, w) in self.points.windows(2).enumerate() {
            let (s, _, dist) = project_on_leg(w[0], w[1], target);
            if dist < best.2 - 1e-9 {
                let arc = self.cum[i] + s * (self.cum[i + 1] - self.cum[i]);
                let t = self.times[i] + s * (self.times[i + 1] - self.times[i]);
                best = (arc, t, dist);
            }
        }
        best
    }

    /// Every time the path passes its point of closest approach to `target`.
    /// A pass is a per-leg minimum within half a meter of the global minimum;
    /// an out-and-back route therefore yields one pass per visit.
    pub fn pass_times(&self, target: GeoPoint) -> Vec<f64> {
        if self.points.len() == 1 {
            return vec![self.times[0]];
        }
        let (_, _, min_dist) = self.closest_approach(target);
        let mut times = Vec::new();
        for (i, w) in self.points.windows(2).enumerate() {
            let (s, _, dist) = project_on_leg(w[0], w[1], target);
            if dist <= min_dist + 0.5 {
                // Interior minima only: an endpoint minimum (s at 0 or 1)
                // continues into the neighbouring leg and would be counted
                // twice, except at the very ends of the path.
                let interior = s > 1e-9 && s < 1.0 - 1e-9;
                let at_path_start = i == 0 && s <= 1e-9;
                let at_path_end = i == self.points.len() - 2 && s >= 1.0 - 1e-9;
                let at_joint_ahead = s >= 1.0 - 1e-9 && i + 2 < self.points.len();
                if interior || at_path_start || at_path_end || at_joint_ahead {
                    let t = self.times[i] + s * (self.times[i + 1] - self.times[i]);
                    if times.last().is_none_or(|&last: &f64| t > last + 1e-6) {
                        times.push(t);
                    }
                }
            }
        }
        times
    }

    /// Time of the next pass by `target` at or after `now`; falls back to the
    /// final pass when the actor has already gone by.
    pub fn next_pass_after(&self, target: GeoPoint, now: f64) -> f64 {
        let passes = self.pass_times(target);
        passes
            .iter()
            .copied()
            .find(|&t| t >= now)
            .unwrap_or_else(|| *passes.last().unwrap())
    }
}

fn lerp(a: GeoPoint, b: GeoPoint, frac: f64) -> GeoPoint {
    GeoPoint::new(a.lat + (b.lat - a.lat) * frac, a.lon + (b.lon - a.lon) * frac)
}

/// Project `target` onto the leg `a -> b` in a local tangent frame.
/// Returns (clamped parameter, projected point, distance to target).
fn project_on_leg(a: GeoPoint, b: GeoPoint, target: GeoPoint) -> (f64, GeoPoint, f64) {
    let frame = LocalFrame::new(a);
    let (bx, by) = frame.to_local(b);
    let (tx, ty) = frame.to_local(target);
    let len2 = bx * bx + by * by;
    let s = if len2 > 0.0 { ((tx * bx + ty * by) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (px, py) = (s * bx, s * by);
    let projected = frame.from_local(px, py);
    let dist = ((tx - px).powi(2) + (ty - py).powi(2)).sqrt();
    (s, projected, dist)
}

// ====== Tests ======

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon)
    }

    /// Meters per degree of arc on the model sphere; at the equator this
    /// holds for both latitude and longitude.
    const M_PER_DEG: f64 = 2.0 * std::f64::consts::PI * 6_371_000.0 / 360.0;
    const DEG: f64 = 1e-5;

    #[test]
    fn route_trajectory_walks_at_constant_speed() {
        // 100 m east at 2 m/s starting at t = 5.
        let a = pt(0.0, 0.0);
        let b = pt(0.0, 100.0 / M_PER_DEG);
        let traj = Trajectory::from_route(&[a, b], 2.0, 5.0);
        assert_relative_eq!(traj.start_time(), 5.0);
        assert_relative_eq!(traj.end_time(), 55.0, epsilon = 1e-6);
        assert_relative_eq!(traj.total_length(), 100.0, epsilon = 1e-3);
        assert_relative_eq!(traj.speed(30.0), 2.0, epsilon = 1e-6);
        assert_relative_eq!(traj.arc(30.0), 50.0, epsilon = 1e-3);
        // Before departure and after arrival the actor stands still.
        assert_relative_eq!(traj.speed(0.0), 0.0);
        assert_relative_eq!(traj.speed(60.0), 0.0);
        let mid = traj.position(30.0);
        assert_relative_eq!(mid.lon, 50.0 / M_PER_DEG, epsilon = 1e-9);
        let early = traj.position(0.0);
        assert_relative_eq!(early.lon, 0.0);
        let late = traj.position(99.0);
        assert_relative_eq!(late.lon, b.lon);
    }

    #[test]
    fn heading_follows_leg_direction() {
        let a = pt(0.0, 0.0);
        let b = pt(0.0, 10.0 * DEG); // east
        let c = pt(10.0 * DEG, 10.0 * DEG); // then north
        let traj = Trajectory::from_route(&[a, b, c], 1.0, 0.0);
        assert_relative_eq!(traj.heading(1.0), 90.0, epsilon = 0.1);
        let leg2_start = traj.total_length() / 2.0 + 1.0;
        assert_relative_eq!(traj.heading(leg2_start), 0.0, epsilon = 0.1);
        // Outside the span the nearest leg's bearing is reported.
        assert_relative_eq!(traj.heading(-5.0), 90.0, epsilon = 0.1);
        assert_relative_eq!(traj.heading(1e9), 0.0, epsilon = 0.1);
    }

    #[test]
    fn stationary_trajectory_is_a_point() {
        let traj = Trajectory::from_route(&[pt(1.0, 2.0)], 1.4, 3.0);
        assert_relative_eq!(traj.speed(10.0), 0.0);
        assert_relative_eq!(traj.position(10.0).lat, 1.0);
        assert_relative_eq!(traj.total_length(), 0.0);
        assert_relative_eq!(traj.heading(10.0), 0.0);
    }

    #[test]
    fn distance_to_path_measures_perpendicular_offset() {
        let a = pt(0.0, 0.0);
        let b = pt(0.0, 100.0 * DEG);
        let traj = Trajectory::from_route(&[a, b], 1.0, 0.0);
        // 5 "units" north of the midpoint.
        let off = pt(5.0 * DEG, 50.0 * DEG);
        let d = traj.distance_to_path(off);
        assert_relative_eq!(d, 5.0 * DEG * M_PER_DEG, epsilon = 0.5);
        // A point on the path is at distance ~0.
        assert!(traj.distance_to_path(pt(0.0, 30.0 * DEG)) < 1e-6);
    }

    #[test]
    fn closest_approach_finds_crossing_time() {
        // 100 m walk east at 1 m/s; target sits beside the 40 m mark.
        let a = pt(0.0, 0.0);
        let b = pt(0.0, 100.0 / M_PER_DEG);
        let traj = Trajectory::from_route(&[a, b], 1.0, 0.0);
        let target = pt(3.0 / M_PER_DEG, 40.0 / M_PER_DEG);
        let (arc, t, dist) = traj.closest_approach(target);
        assert_relative_eq!(arc, 40.0, epsilon = 0.05);
        assert_relative_eq!(t, 40.0, epsilon = 0.05);
        assert_relative_eq!(dist, 3.0, epsilon = 0.05);
    }

    #[test]
    fn pass_times_sees_every_lap_of_an_out_and_back_route() {
        // Walk 0 -> 100 m -> 0 -> 100 m at 1 m/s; target besides the 50 m
        // mark is passed at t = 50, 150, 250.
        let a = pt(0.0, 0.0);
        let b = pt(0.0, 100.0 / M_PER_DEG);
        let traj = Trajectory::from_route(&[a, b, a, b], 1.0, 0.0);
        let target = pt(2.0 / M_PER_DEG, 50.0 / M_PER_DEG);
        let passes = traj.pass_times(target);
        assert_eq!(passes.len(), 3, "passes: {passes:?}");
        assert_relative_eq!(passes[0], 50.0, epsilon = 0.1);
        assert_relative_eq!(passes[1], 150.0, epsilon = 0.1);
        assert_relative_eq!(passes[2], 250.0, epsilon = 0.1);
        assert_relative_eq!(traj.next_pass_after(target, 60.0), 150.0, epsilon = 0.1);
        assert_relative_eq!(traj.next_pass_after(target, 0.0), 50.0, epsilon = 0.1);
        // After the last pass the final one is reported.
        assert_relative_eq!(traj.next_pass_after(target, 400.0), 250.0, epsilon = 0.1);
    }

    #[test]
    fn pass_at_path_endpoint_is_counted_once() {
        let a = pt(0.0, 0.0);
        let b = pt(0.0, 100.0 / M_PER_DEG);
        let traj = Trajectory::from_route(&[a, b], 1.0, 0.0);
        // Target ahead of the end of the path: closest approach is at b.
        let target = pt(0.0, 120.0 / M_PER_DEG);
        let passes = traj.pass_times(target);
        assert_eq!(passes.len(), 1);
        assert_relative_eq!(passes[0], 100.0, epsilon = 0.05);
    }

    #[test]
    fn minimal_scenario_parses_with_defaults() {
        let text = r#"{
            "map": {"segments": [{"id": 0, "start": [0.0, 0.0], "end": [0.0, 0.001]}]},
            "pedestrians": [{"id": "p1", "movement": {"kind": "route", "path": [[0.0, 0.0]], "speed_mps": 1.4}}],
            "duration": 1.0
        }"#;
        let sc = Scenario::from_json_str(text, None, "inline").expect("minimal scenario loads");
        assert_eq!(sc.pedestrians.len(), 1);
        assert_eq!(sc.vehicles.len(), 0);
        assert_relative_eq!(sc.tick, 0.1);
        assert_relative_eq!(sc.noise.gps_sigma, 1.0);
        assert_eq!(sc.comms.formation, FormationMode::Autonomous);
        assert_relative_eq!(sc.risk.probability_threshold, 0.5);
    }

    #[test]
    fn validation_collects_every_problem() {
        let text = r#"{
            "map": {"segments": []},
            "pedestrians": [
                {"id": "p1", "movement": {"kind": "route", "path": [], "speed_mps": 0.0}},
                {"id": "p1", "movement": {"kind": "trajectory", "points": [{"t": 1.0, "lat": 0.0, "lon": 0.0}, {"t": 1.0, "lat": 0.0, "lon": 0.0}]}}
            ],
            "vehicles": [{"id": "v1", "movement": {"kind": "route", "path": [[0,0]], "speed_mps": 5.0}, "crossing": 3, "mass": -1.0}],
            "tick": -0.5,
            "duration": 10.0
        }"#;
        let err = Scenario::from_json_str(text, None, "inline").unwrap_err();
        match err {
            EngineError::Validation(problems) => {
                let joined = problems.join("\n");
                for needle in [
                    "tick must be a positive duration",
                    "map.segments must not be empty",
                    "route path must not be empty",
                    "duplicate pedestrian id 'p1'",
                    "strictly increasing",
                    "references crossing 3",
                    "mass must be positive",
                ] {
                    assert!(joined.contains(needle), "missing '{needle}' in:\n{joined}");
                }
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_reports_position() {
        let err = Scenario::from_json_str("{ not json", None, "broken.json").unwrap_err();
        match err {
            EngineError::Parse { path, line, .. } => {
                assert_eq!(path, "broken.json");
                assert_eq!(line, 1);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_trajectory_resolves_relative_to_scenario_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("walk.csv"),
            "t_sec,lat,lon\n0.0,0.0,0.0\n10.0,0.0,0.0001\n",
        )
        .unwrap();
        let scenario_path = dir.path().join("scn.json");
        std::fs::write(
            &scenario_path,
            r#"{
                "map": {"segments": [{"id": 0, "start": [0.0, 0.0], "end": [0.0, 0.001]}]},
                "pedestrians": [{"id": "p1", "movement": {"kind": "trajectory_csv", "path": "walk.csv"}}],
                "duration": 1.0
            }"#,
        )
        .unwrap();
        let sc = Scenario::load(&scenario_path).expect("scenario with CSV loads");
        match &sc.pedestrians[0].movement {
            Movement::Trajectory { points } => {
                assert_eq!(points.len(), 2);
                assert_relative_eq!(points[1].t, 10.0);
                assert_relative_eq!(points[1].lon, 0.0001);
            }
            other => panic!("expected resolved trajectory, got {other:?}"),
        }
    }

    #[test]
    fn malformed_csv_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bad.csv"), "t_sec,lat,lon\n0.0,oops,0.0\n").unwrap();
        let scenario_path = dir.path().join("scn.json");
        std::fs::write(
            &scenario_path,
            r#"{
                "map": {"segments": [{"id": 0, "start": [0.0, 0.0], "end": [0.0, 0.001]}]},
                "pedestrians": [{"id": "p1", "movement": {"kind": "trajectory_csv", "path": "bad.csv"}}],
                "duration": 1.0
            }"#,
        )
        .unwrap();
        let err = Scenario::load(&scenario_path).unwrap_err();
        match err {
            EngineError::Parse { path, line, .. } => {
                assert!(path.ends_with("bad.csv"));
                assert_eq!(line, 2);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn interval_contains_is_half_open() {
        let iv = TimeInterval { start: 1.0, end: 2.0 };
        assert!(iv.contains(1.0));
        assert!(iv.contains(1.999));
        assert!(!iv.contains(2.0));
        assert!(!iv.contains(0.5));
    }
}
