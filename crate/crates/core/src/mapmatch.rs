//! HMM map matching for pedestrian GPS traces on a sidewalk graph.
//!
//! A sliding window of noisy fixes is matched to the most likely sidewalk
//! segment with an online forward (filtering) recursion:
//!
//! - the observation term scores how close the window's fixes lie to a
//!   candidate segment (Gaussian in the point-to-segment distance, averaged
//!   over the window),
//! - the transition term scores how consistent the recent displacement is
//!   with walking along the graph: δ is the absolute difference between the
//!   on-graph moving distance and the straight-line geodetic distance, and
//!   larger δ is exponentially less likely.
//!
//! Once a segment is chosen, the newest fix is checked against a small
//! "valid region" rectangle around the previous calibrated position: fixes
//! inside pass through, moderate outliers are projected back onto the
//! region, and gross outliers (beyond a rejection threshold) are discarded.

use crate::geo::{
    geodetic_distance, project_to_segment, GeoError, GeoPoint, LocalFrame, SegmentId,
    SidewalkGraph, SidewalkSegment,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

/// Errors reported by the map-matching operations.
#[derive(Debug, Error)]
pub enum MapMatchError {
    #[error("GPS window is empty")]
    EmptyWindow,
    #[error("no candidate segment within {radius_m:.0} m of fix ({lat}, {lon})")]
    NoCandidates { lat: f64, lon: f64, radius_m: f64 },
    #[error("sigma update needs at least {needed} samples, have {have}")]
    InsufficientSamples { needed: usize, have: usize },
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// Parameters of the map-matching model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmmModel {
    /// GPS standard deviation σ_z in meters; re-estimated online.
    pub sigma_z: f64,
    /// Scale β of the exponential transition density, in meters.
    /// The initial value only matters during warm-up; after
    /// [`BETA_WARMUP_FIXES`] fixes it is replaced by the mean observed δ.
    pub beta: f64,
    /// Sliding-window size ω in fixes.
    pub omega: usize,
    /// Look-back ε for the transition term, in fixes.
    pub epsilon: usize,
    /// Tolerance multiplier α for the valid-region extents.
    pub alpha: f64,
    /// Maximum brisk walking speed in m/s.
    pub v_max: f64,
    /// GPS measurement interval in seconds.
    pub gps_interval: f64,
    /// Fixes farther than this from the valid region are rejected (meters).
    pub reject_threshold: f64,
}

impl Default for HmmModel {
    fn default() -> Self {
        Self {
            sigma_z: 5.0,          // conservative prior; updated from data
            beta: 1.0,             // warm-up placeholder, see BETA_WARMUP_FIXES
            omega: 5,              // fixes per window
            epsilon: 3,            // look-back for the transition term
            alpha: 2.0,            // valid-region tolerance
            v_max: 2.0,            // m/s, brisk walk
            gps_interval: 1.0,     // s
            reject_threshold: 15.0, // m
        }
    }
}

impl HmmModel {
    /// Candidate segments are searched within this radius of the newest fix.
    pub fn search_radius(&self) -> f64 {
        3.0 * self.sigma_z + 30.0
    }
}

/// Number of fixes used to estimate β before the estimate is frozen.
pub const BETA_WARMUP_FIXES: usize = 20;

/// Number of projection distances kept for σ_z re-estimation.
pub const SIGMA_WINDOW: usize = 30;

/// Minimum samples before σ_z is re-estimated.
pub const SIGMA_MIN_SAMPLES: usize = 10;

/// Bounds applied to the re-estimated σ_z, in meters.
pub const SIGMA_CLAMP: (f64, f64) = (1.0, 50.0);

/// After this many consecutive rejections the track is declared lost and the
/// valid-region anchor re-initializes from the next fix's segment projection.
/// Without this, heavy noise can strand the anchor: once the walker outruns
/// the region every later fix is rejected and the calibrated output freezes.
pub const REACQUIRE_AFTER_REJECTS: usize = 2;

/// A sliding window of timestamped GPS fixes, oldest first.
#[derive(Debug, Clone, Default)]
pub struct GpsWindow {
    fixes: VecDeque<(f64, GeoPoint)>,
    capacity: usize,
}

impl GpsWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "window capacity must be at least 1");
        Self {
            fixes: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    /// Append a fix, dropping the oldest when the window is full.
    /// Timestamps must be strictly increasing.
    pub fn push(&mut self, timestamp: f64, point: GeoPoint) {
        if let Some(&(last, _)) = self.fixes.back() {
            assert!(timestamp > last, "GPS timestamps must strictly increase");
        }
        if self.fixes.len() == self.capacity {
            self.fixes.pop_front();
        }
        self.fixes.push_back((timestamp, point));
    }

    pub fn len(&self) -> usize {
        self.fixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixes.is_empty()
    }

    pub fn newest(&self) -> Option<(f64, GeoPoint)> {
        self.fixes.back().copied()
    }

    /// The fix `epsilon` positions before the newest, clamped to the oldest.
    pub fn look_back(&self, epsilon: usize) -> Option<(f64, GeoPoint)> {
        if self.fixes.is_empty() {
            return None;
        }
        let idx = (self.fixes.len() - 1).saturating_sub(epsilon);
        self.fixes.get(idx).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(f64, GeoPoint)> {
        self.fixes.iter()
    }
}

/// What happened to a raw fix during calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FixOutcome {
    /// The fix fell inside the valid region and is used as-is.
    Accepted(GeoPoint),
    /// The fix was outside but close; replaced by the nearest region point.
    Projected(GeoPoint),
    /// The fix was farther than the rejection threshold and is discarded.
    Rejected,
}

/// A raw fix together with its calibration verdict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedFix {
    pub raw: GeoPoint,
    pub result: FixOutcome,
    pub segment: SegmentId,
    /// Distance from the raw fix to the valid region, in meters.
    pub error_estimate: f64,
}

impl CalibratedFix {
    /// The usable position, if any (rejected fixes yield none).
    pub fn position(&self) -> Option<GeoPoint> {
        match self.result {
            FixOutcome::Accepted(p) | FixOutcome::Projected(p) => Some(p),
            FixOutcome::Rejected => None,
        }
    }
}

/// Gaussian density of the point-to-segment distance for a single fix.
pub fn observation_prob_point(z: GeoPoint, r: &SidewalkSegment, sigma_z: f64) -> f64 {
    let (_, d) = project_to_segment(z, r);
    gaussian_density(d, sigma_z)
}

fn gaussian_density(d: f64, sigma: f64) -> f64 {
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
    norm * (-0.5 * (d / sigma).powi(2)).exp()
}

/// Mean of the per-fix observation densities over the window.
pub fn observation_prob_window(
    w: &GpsWindow,
    r: &SidewalkSegment,
    sigma_z: f64,
) -> Result<f64, MapMatchError> {
    if w.is_empty() {
        return Err(MapMatchError::EmptyWindow);
    }
    let sum: f64 = w
        .iter()
        .map(|&(_, z)| observation_prob_point(z, r, sigma_z))
        .sum();
    Ok(sum / w.len() as f64)
}

/// Exponential density of δ, the absolute difference between the on-graph
/// moving distance and the geodetic distance between two fixes.
pub fn transition_prob(
    z_now: GeoPoint,
    z_past: GeoPoint,
    g: &SidewalkGraph,
    beta: f64,
) -> Result<f64, MapMatchError> {
    let moving = g.moving_distance(z_past, z_now)?;
    let geodetic = geodetic_distance(z_past, z_now);
    let delta = (moving - geodetic).abs();
    Ok((1.0 / beta) * (-delta / beta).exp())
}

/// One step of the forward recursion: update per-segment beliefs from the
/// window and return the most likely segment.
///
/// Candidates are the segments within the model's search radius of the
/// newest fix. On the first call (empty beliefs) the posterior is the
/// initial-state probability times the observation, both given by the
/// window-averaged observation density. Afterwards each candidate's
/// posterior is prior × transition × observation, where the transition δ is
/// computed with the newest fix constrained to that candidate and the
/// look-back fix snapped freely — a candidate the walker could not have
/// reached along the graph scores zero. Beliefs are renormalized to sum
/// to 1 over the candidate set; ties in the arg-max break toward the
/// smallest segment id.
pub fn estimate_segment(
    w: &GpsWindow,
    beliefs: &mut BTreeMap<SegmentId, f64>,
    g: &SidewalkGraph,
    m: &HmmModel,
) -> Result<SegmentId, MapMatchError> {
    let (_, z_now) = w.newest().ok_or(MapMatchError::EmptyWindow)?;
    let radius = m.search_radius();
    let candidates = g.segments_within(z_now, radius);
    if candidates.is_empty() {
        return Err(MapMatchError::NoCandidates {
            lat: z_now.lat,
            lon: z_now.lon,
            radius_m: radius,
        });
    }

    let first_call = beliefs.is_empty();
    let uniform = 1.0 / candidates.len() as f64;
    let z_past = w.look_back(m.epsilon).map(|(_, p)| p);
    // When the look-back fix cannot be snapped onto the graph at all, the
    // transition term carries no information and is dropped for this step.
    let past_on_graph = z_past.map(|p| g.snap(p).is_ok()).unwrap_or(false);

    let mut posteriors: BTreeMap<SegmentId, f64> = BTreeMap::new();
    for seg in &candidates {
        let obs = observation_prob_window(w, seg, m.sigma_z)?;
        let posterior = if first_call {
            // π × observation, with π computed from the same window.
            obs * obs
        } else {
            let prior = beliefs.get(&seg.id).copied().unwrap_or(uniform);
            let trans = match z_past {
                Some(past) if past_on_graph => {
                    match g.moving_distance_via(past, z_now, seg.id) {
                        Ok(moving) => {
                            let geo = geodetic_distance(past, z_now);
                            let delta = (moving - geo).abs();
                            (1.0 / m.beta) * (-delta / m.beta).exp()
                        }
                        // Unreachable along the graph: the walker cannot
                        // have moved onto this candidate.
                        Err(GeoError::Unreachable) => 0.0,
                        Err(e) => return Err(e.into()),
                    }
                }
                _ => 1.0,
            };
            prior * trans * obs
        };
        posteriors.insert(seg.id, posterior);
    }

    let mut total: f64 = posteriors.values().sum();
    if total <= 0.0 {
        // Every candidate was unreachable (e.g. the walker was teleported in
        // a synthetic trace). Fall back to the observation term alone.
        for seg in &candidates {
            let obs = observation_prob_window(w, seg, m.sigma_z)?;
            posteriors.insert(seg.id, obs);
        }
        total = posteriors.values().sum();
    }

    beliefs.clear();
    for (id, p) in &posteriors {
        beliefs.insert(*id, p / total);
    }

    // Arg-max; BTreeMap iterates in ascending id order, so strict `>`
    // keeps the smallest id on ties.
    let mut best = (SegmentId(u32::MAX), f64::NEG_INFINITY);
    for (&id, &p) in beliefs.iter() {
        if p > best.1 {
            best = (id, p);
        }
    }
    Ok(best.0)
}

/// Check a raw fix against the valid region: a rectangle centered on the
/// walker's last calibrated position, oriented along the matched segment,
/// with along-track extent α·v_max·gps_interval and cross-track extent
/// α·(segment width).
pub fn calibrate(
    z: GeoPoint,
    seg: &SidewalkSegment,
    anchor: GeoPoint,
    m: &HmmModel,
) -> CalibratedFix {
    let frame = LocalFrame::new(anchor);
    let (ex, ey) = {
        let (sx, sy) = frame.to_local(seg.start);
        let (tx, ty) = frame.to_local(seg.end);
        (tx - sx, ty - sy)
    };
    let len = (ex * ex + ey * ey).sqrt();
    // Unit vectors along and across the segment.
    let (ux, uy) = if len == 0.0 { (1.0, 0.0) } else { (ex / len, ey / len) };
    let (wx, wy) = (-uy, ux);

    let (zx, zy) = frame.to_local(z);
    let along = zx * ux + zy * uy;
    let cross = zx * wx + zy * wy;

    let along_half = m.alpha * m.v_max * m.gps_interval / 2.0;
    let cross_half = m.alpha * seg.width / 2.0;

    let clamped_along = along.clamp(-along_half, along_half);
    let clamped_cross = cross.clamp(-cross_half, cross_half);
    let distance = ((along - clamped_along).powi(2) + (cross - clamped_cross).powi(2)).sqrt();

    let result = if distance == 0.0 {
        FixOutcome::Accepted(z)
    } else if distance > m.reject_threshold {
        FixOutcome::Rejected
    } else {
        let px = clamped_along * ux + clamped_cross * wx;
        let py = clamped_along * uy + clamped_cross * wy;
        FixOutcome::Projected(frame.from_local(px, py))
    };

    CalibratedFix {
        raw: z,
        result,
        segment: seg.id,
        error_estimate: distance,
    }
}

/// Sample standard deviation of recent projection distances, clamped to
/// [1 m, 50 m]. Requires at least [`SIGMA_MIN_SAMPLES`] samples.
pub fn update_sigma(recent_errors: &[f64]) -> Result<f64, MapMatchError> {
    if recent_errors.len() < SIGMA_MIN_SAMPLES {
        return Err(MapMatchError::InsufficientSamples {
            needed: SIGMA_MIN_SAMPLES,
            have: recent_errors.len(),
        });
    }
    let n = recent_errors.len() as f64;
    let mean = recent_errors.iter().sum::<f64>() / n;
    let var = recent_errors
        .iter()
        .map(|e| (e - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    Ok(var.sqrt().clamp(SIGMA_CLAMP.0, SIGMA_CLAMP.1))
}

/// Stateful matcher for one pedestrian: owns the window, the belief state,
/// the σ_z samples and the β warm-up.
#[derive(Debug, Clone)]
pub struct MapMatcher {
    model: HmmModel,
    window: GpsWindow,
    beliefs: BTreeMap<SegmentId, f64>,
    current_segment: Option<SegmentId>,
    last_calibrated: Option<GeoPoint>,
    recent_errors: VecDeque<f64>,
    delta_samples: Vec<f64>,
    fixes_seen: usize,
    consecutive_rejects: usize,
}

impl MapMatcher {
    pub fn new(model: HmmModel) -> Self {
        let window = GpsWindow::new(model.omega);
        Self {
            model,
            window,
            beliefs: BTreeMap::new(),
            current_segment: None,
            last_calibrated: None,
            recent_errors: VecDeque::with_capacity(SIGMA_WINDOW),
            delta_samples: Vec::with_capacity(BETA_WARMUP_FIXES),
            fixes_seen: 0,
            consecutive_rejects: 0,
        }
    }

    pub fn model(&self) -> &HmmModel {
        &self.model
    }

    pub fn current_segment(&self) -> Option<SegmentId> {
        self.current_segment
    }

    /// Last accepted or projected position, if any.
    pub fn last_position(&self) -> Option<GeoPoint> {
        self.last_calibrated
    }

    /// Ingest one raw fix: match it to a segment (or reuse the current one
    /// when `reuse_segment` is set, e.g. inside an alert zone) and calibrate
    /// it against the valid region.
    pub fn process_fix(
        &mut self,
        timestamp: f64,
        z: GeoPoint,
        g: &SidewalkGraph,
        reuse_segment: bool,
    ) -> Result<CalibratedFix, MapMatchError> {
        self.window.push(timestamp, z);
        self.fixes_seen += 1;

        let segment_id = match (reuse_segment, self.current_segment) {
            (true, Some(id)) => id,
            _ => estimate_segment(&self.window, &mut self.beliefs, g, &self.model)?,
        };
        let segment = g
            .segment(segment_id)
            .expect("estimated segment exists in graph")
            .clone();

        // Feed the σ_z estimator with the raw projection distance.
        let (_, projection_distance) = project_to_segment(z, &segment);
        if self.recent_errors.len() == SIGMA_WINDOW {
            self.recent_errors.pop_front();
        }
        self.recent_errors.push_back(projection_distance);
        if self.recent_errors.len() >= SIGMA_MIN_SAMPLES {
            let errors: Vec<f64> = self.recent_errors.iter().copied().collect();
            self.model.sigma_z = update_sigma(&errors)?;
        }

        // β warm-up: collect observed δ between the newest fix and the
        // look-back fix, then freeze β as their mean.
        if self.delta_samples.len() < BETA_WARMUP_FIXES && self.window.len() >= 2 {
            if let Some((_, past)) = self.window.look_back(self.model.epsilon) {
                if let Ok(moving) = g.moving_distance(past, z) {
                    let delta = (moving - geodetic_distance(past, z)).abs();
                    self.delta_samples.push(delta);
                    if self.delta_samples.len() == BETA_WARMUP_FIXES {
                        let mean =
                            self.delta_samples.iter().sum::<f64>() / BETA_WARMUP_FIXES as f64;
                        // Guard against a degenerate zero scale.
                        self.model.beta = mean.max(0.1);
                    }
                }
            }
        }

        let anchor = self
            .last_calibrated
            .unwrap_or_else(|| project_to_segment(z, &segment).0);
        let fix = calibrate(z, &segment, anchor, &self.model);

        if let Some(p) = fix.position() {
            self.last_calibrated = Some(p);
            self.consecutive_rejects = 0;
        } else {
            self.consecutive_rejects += 1;
            if self.consecutive_rejects >= REACQUIRE_AFTER_REJECTS {
                // Track lost: drop the anchor so the next fix re-acquires
                // from its own segment projection.
                self.last_calibrated = None;
                self.consecutive_rejects = 0;
            }
        }
        self.current_segment = Some(segment_id);
        Ok(fix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LocalFrame;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const ORIGIN: GeoPoint = GeoPoint { lat: 44.31, lon: -96.79 };

    fn frame() -> LocalFrame {
        LocalFrame::new(ORIGIN)
    }

    fn local(x: f64, y: f64) -> GeoPoint {
        frame().from_local(x, y)
    }

    fn segment(id: u32, a: (f64, f64), b: (f64, f64), width: f64) -> SidewalkSegment {
        SidewalkSegment {
            id: SegmentId(id),
            start: local(a.0, a.1),
            end: local(b.0, b.1),
            width,
        }
    }

    fn graph(segs: Vec<SidewalkSegment>) -> SidewalkGraph {
        SidewalkGraph::new(segs, vec![], vec![])
    }

    fn window(points: &[(f64, f64)]) -> GpsWindow {
        let mut w = GpsWindow::new(points.len().max(1));
        for (i, &(x, y)) in points.iter().enumerate() {
            w.push(i as f64, local(x, y));
        }
        w
    }

    // ====== OBSERVATION DENSITY ======

    #[test]
    fn observation_density_at_zero_distance() {
        // 1 / (σ √(2π)) evaluated by hand for σ = 5.
        let seg = segment(1, (0.0, 0.0), (0.0, 100.0), 3.0);
        let z = local(0.0, 50.0); // on the segment
        let p = observation_prob_point(z, &seg, 5.0);
        assert_relative_eq!(p, 0.07978845608028654, max_relative = 1e-6);
    }

    #[test]
    fn observation_density_ratio_at_one_sigma() {
        let seg = segment(1, (0.0, 0.0), (0.0, 100.0), 3.0);
        for sigma in [2.0, 5.0, 13.0] {
            let p0 = observation_prob_point(local(0.0, 50.0), &seg, sigma);
            let p1 = observation_prob_point(local(sigma, 50.0), &seg, sigma);
            assert_relative_eq!(p1 / p0, (-0.5f64).exp(), max_relative = 1e-4);
        }
    }

    #[test]
    fn observation_density_far_tail_vanishes() {
        let seg = segment(1, (0.0, 0.0), (0.0, 100.0), 3.0);
        let p = observation_prob_point(local(100.0, 50.0), &seg, 5.0);
        assert!(p < 1e-80, "got {p}");
    }

    #[test]
    fn window_density_is_mean_of_point_densities() {
        let seg = segment(1, (0.0, 0.0), (0.0, 100.0), 3.0);
        // Distances 0 and σ_z = 5: mean of the two hand-evaluated densities.
        let w = window(&[(0.0, 40.0), (5.0, 60.0)]);
        let p = observation_prob_window(&w, &seg, 5.0).unwrap();
        assert_relative_eq!(p, (0.07978845608028654 + 0.04839414490382867) / 2.0, max_relative = 1e-4);

        // Single-fix window degenerates to the point density.
        let w1 = window(&[(3.0, 50.0)]);
        let p1 = observation_prob_window(&w1, &seg, 5.0).unwrap();
        assert_relative_eq!(p1, observation_prob_point(local(3.0, 50.0), &seg, 5.0), max_relative = 1e-12);
    }

    #[test]
    fn empty_window_is_an_error() {
        let seg = segment(1, (0.0, 0.0), (0.0, 100.0), 3.0);
        let w = GpsWindow::new(5);
        assert!(matches!(
            observation_prob_window(&w, &seg, 5.0),
            Err(MapMatchError::EmptyWindow)
        ));
    }

    // ====== TRANSITION DENSITY ======

    #[test]
    fn transition_density_on_straight_segment() {
        // Walking along one straight segment: moving == geodetic, δ = 0.
        let g = graph(vec![segment(1, (0.0, 0.0), (0.0, 100.0), 3.0)]);
        let p = transition_prob(local(0.0, 60.0), local(0.0, 20.0), &g, 1.0).unwrap();
        assert_relative_eq!(p, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn transition_density_frozen_values() {
        // δ = 2 m with β = 0.5 m: (1/β)·e^(−δ/β) = 2·e^(−4), evaluated
        // independently of the implementation.
        let expected = 2.0 * (-4.0f64).exp();
        assert_relative_eq!(expected, 0.03663127777746836, max_relative = 1e-9);

        // Build δ = 2 with a corner: legs 3 and 4 give moving 7, geodetic 5.
        let g = graph(vec![
            segment(1, (0.0, 0.0), (0.0, 3.0), 3.0),
            segment(2, (0.0, 3.0), (4.0, 3.0), 3.0),
        ]);
        let p = transition_prob(local(4.0, 3.0), local(0.0, 0.0), &g, 0.5).unwrap();
        assert_relative_eq!(p, expected, max_relative = 1e-3);

        // δ = β → e^(−1)/β for any β.
        let p2 = transition_prob(local(4.0, 3.0), local(0.0, 0.0), &g, 2.0).unwrap();
        assert_relative_eq!(p2, (-1.0f64).exp() / 2.0, max_relative = 1e-3);
    }

    #[test]
    fn transition_propagates_snap_failure() {
        let g = graph(vec![segment(1, (0.0, 0.0), (0.0, 100.0), 3.0)]);
        let err = transition_prob(local(500.0, 0.0), local(0.0, 20.0), &g, 1.0).unwrap_err();
        assert!(matches!(err, MapMatchError::Geo(GeoError::SnapFailure { .. })));
    }

    // ====== SEGMENT ESTIMATION ======

    #[test]
    fn single_candidate_wins_regardless() {
        let g = graph(vec![segment(7, (0.0, 0.0), (0.0, 100.0), 3.0)]);
        let w = window(&[(30.0, 50.0)]); // 30 m off but within search radius
        let mut beliefs = BTreeMap::new();
        let id = estimate_segment(&w, &mut beliefs, &g, &HmmModel::default()).unwrap();
        assert_eq!(id, SegmentId(7));
        assert_relative_eq!(beliefs.values().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn no_candidates_is_an_error() {
        let g = graph(vec![segment(1, (0.0, 0.0), (0.0, 100.0), 3.0)]);
        let w = window(&[(300.0, 50.0)]);
        let mut beliefs = BTreeMap::new();
        let err = estimate_segment(&w, &mut beliefs, &g, &HmmModel::default()).unwrap_err();
        assert!(matches!(err, MapMatchError::NoCandidates { .. }));
    }

    #[test]
    fn observation_separates_parallel_segments() {
        // Two parallel segments 20 m apart; every fix within 2 m of A.
        // Per fix the density ratio A:B is e^((19²−2²)/(2·5²)) ≥ e^6, so A's
        // posterior dominates no matter the priors.
        let g = graph(vec![
            segment(1, (0.0, 0.0), (0.0, 100.0), 3.0),
            segment(2, (20.0, 0.0), (20.0, 100.0), 3.0),
        ]);
        let w = window(&[(1.2, 10.0), (-0.8, 14.0), (1.5, 18.0)]);
        let mut beliefs = BTreeMap::new();
        let id = estimate_segment(&w, &mut beliefs, &g, &HmmModel::default()).unwrap();
        assert_eq!(id, SegmentId(1));
        assert!(beliefs[&SegmentId(1)] > 0.99);
    }

    #[test]
    fn transition_resolves_corner_turns() {
        // L-shaped graph: A runs north to a corner, B runs east from it.
        // The walker turns onto B; the newest fix sits 20 m past the corner.
        // Matching it to A would imply a moving distance far shorter than
        // the geodetic displacement (δ large), while B is consistent (δ
        // small), so B must win even though earlier fixes favored A.
        let g = graph(vec![
            segment(1, (0.0, 0.0), (0.0, 30.0), 3.0),
            segment(2, (0.0, 30.0), (40.0, 30.0), 3.0),
        ]);
        let m = HmmModel::default();
        let fixes = [
            (0.3, 24.0),
            (-0.4, 28.0),
            (0.2, 29.8),
            (20.0, 30.2), // well onto B
        ];

        // Oracle: enumerate both candidate posteriors step by step with the
        // stated formulas, independent of estimate_segment's plumbing.
        let oracle_choice = {
            let segs = [g.segments()[0].clone(), g.segments()[1].clone()];
            let mut w = GpsWindow::new(m.omega);
            let mut belief = [0.0f64; 2];
            let mut first = true;
            let mut choice = SegmentId(0);
            for (i, &(x, y)) in fixes.iter().enumerate() {
                w.push(i as f64, local(x, y));
                let mut post = [0.0f64; 2];
                for (k, seg) in segs.iter().enumerate() {
                    let obs = observation_prob_window(&w, seg, m.sigma_z).unwrap();
                    post[k] = if first {
                        obs * obs
                    } else {
                        let (_, past) = w.look_back(m.epsilon).unwrap();
                        let (_, now) = w.newest().unwrap();
                        let moving = g.moving_distance_via(past, now, seg.id).unwrap();
                        let delta = (moving - geodetic_distance(past, now)).abs();
                        let trans = (1.0 / m.beta) * (-delta / m.beta).exp();
                        belief[k] * trans * obs
                    };
                }
                first = false;
                let total = post[0] + post[1];
                belief = [post[0] / total, post[1] / total];
                choice = if post[1] > post[0] { SegmentId(2) } else { SegmentId(1) };
            }
            choice
        };
        assert_eq!(oracle_choice, SegmentId(2), "oracle enumeration must pick B");

        // Implementation must agree at every step's end state.
        let mut w = GpsWindow::new(m.omega);
        let mut beliefs = BTreeMap::new();
        let mut id = SegmentId(0);
        for (i, &(x, y)) in fixes.iter().enumerate() {
            w.push(i as f64, local(x, y));
            id = estimate_segment(&w, &mut beliefs, &g, &m).unwrap();
        }
        assert_eq!(id, SegmentId(2));
    }

    // ====== CALIBRATION ======

    fn calib_model() -> HmmModel {
        HmmModel {
            alpha: 2.0,
            v_max: 2.0,
            gps_interval: 1.0,
            reject_threshold: 15.0,
            ..HmmModel::default()
        }
    }

    #[test]
    fn fix_inside_region_is_accepted() {
        let seg = segment(1, (0.0, 0.0), (0.0, 100.0), 3.0);
        let anchor = local(0.0, 50.0);
        let z = local(1.0, 51.0); // 1 m cross, 1 m along: inside 2 m × 3 m halves
        let fix = calibrate(z, &seg, anchor, &calib_model());
        assert_eq!(fix.result, FixOutcome::Accepted(z));
        assert_eq!(fix.error_estimate, 0.0);
    }

    #[test]
    fn moderate_outlier_is_projected_onto_region_edge() {
        // Cross-track half-extent α·width/2 = 2 m for a 2 m wide sidewalk;
        // a fix 10 m cross-track is 8 m outside and gets projected back.
        let seg = segment(1, (0.0, 0.0), (0.0, 100.0), 2.0);
        let anchor = local(0.0, 50.0);
        let z = local(10.0, 50.0);
        let fix = calibrate(z, &seg, anchor, &calib_model());
        assert_relative_eq!(fix.error_estimate, 8.0, epsilon = 1e-3);
        match fix.result {
            FixOutcome::Projected(p) => {
                let (x, y) = frame().to_local(p);
                assert_relative_eq!(x, 2.0, epsilon = 1e-3);
                assert_relative_eq!(y, 50.0, epsilon = 1e-3);
            }
            other => panic!("expected projection, got {other:?}"),
        }
    }

    #[test]
    fn gross_outlier_is_rejected() {
        // 20 m cross-track against a 15 m threshold.
        let seg = segment(1, (0.0, 0.0), (0.0, 100.0), 3.0);
        let anchor = local(0.0, 50.0);
        let fix = calibrate(local(20.0, 50.0), &seg, anchor, &calib_model());
        assert_eq!(fix.result, FixOutcome::Rejected);
        assert!(fix.error_estimate > calib_model().reject_threshold);
    }

    #[test]
    fn rejection_boundary_within_a_centimeter() {
        let m = calib_model();
        let seg = segment(1, (0.0, 0.0), (0.0, 100.0), 3.0);
        let anchor = local(0.0, 50.0);
        let cross_half = m.alpha * seg.width / 2.0;
        let just_inside = local(cross_half + m.reject_threshold - 0.01, 50.0);
        let just_outside = local(cross_half + m.reject_threshold + 0.01, 50.0);
        assert!(matches!(
            calibrate(just_inside, &seg, anchor, &m).result,
            FixOutcome::Projected(_)
        ));
        assert!(matches!(
            calibrate(just_outside, &seg, anchor, &m).result,
            FixOutcome::Rejected
        ));
    }

    #[test]
    fn track_reacquires_after_consecutive_rejections() {
        // One long straight sidewalk; the walker teleports 200 m ahead of
        // where the matcher last calibrated, so every fix lands far outside
        // the valid region. After REACQUIRE_AFTER_REJECTS rejections the
        // anchor resets and the stream calibrates again.
        let seg = segment(0, (0.0, 0.0), (0.0, 500.0), 3.0);
        let g = SidewalkGraph::new(vec![seg], vec![], vec![]);
        let mut matcher = MapMatcher::new(HmmModel::default());

        // Establish a track near the start.
        for k in 0..3 {
            let fix = matcher
                .process_fix(k as f64, local(0.0, k as f64 * 1.4), &g, false)
                .unwrap();
            assert!(fix.position().is_some());
        }

        // Jump far ahead: rejected while the streak builds.
        let mut outcomes = Vec::new();
        for k in 3..8 {
            let fix = matcher
                .process_fix(k as f64, local(0.0, 200.0 + k as f64 * 1.4), &g, false)
                .unwrap();
            outcomes.push(fix.position().is_some());
        }
        assert_eq!(
            outcomes,
            [false, false, true, true, true],
            "two rejections, then the anchor resets and fixes flow again"
        );

        // The re-acquired positions follow the new location, not the old one.
        let p = matcher.last_position().unwrap();
        let (_, y) = frame().to_local(p);
        assert!((y - 209.8).abs() < 1.0, "re-acquired near the jump target, got y={y}");
    }

    // ====== SIGMA UPDATE ======

    #[test]
    fn sigma_update_frozen_value() {
        // {0, 10} repeated 10×: mean 5, squared deviations 20·25,
        // sample variance 500/19, std ≈ 5.130 — computed by hand.
        let errors: Vec<f64> = (0..10).flat_map(|_| [0.0, 10.0]).collect();
        let sigma = update_sigma(&errors).unwrap();
        assert_relative_eq!(sigma, (500.0f64 / 19.0).sqrt(), max_relative = 1e-12);
        assert!((sigma - 5.13).abs() < 0.01);
    }

    #[test]
    fn sigma_update_clamps_and_rejects_small_samples() {
        let identical = vec![7.0; 12];
        assert_eq!(update_sigma(&identical).unwrap(), 1.0); // clamp floor

        let err = update_sigma(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap_err();
        assert!(matches!(err, MapMatchError::InsufficientSamples { .. }));
    }

    // ====== PROPERTIES ======

    /// Exhaustive posterior enumeration over all segments, mirroring the
    /// documented recursion; used as the brute-force reference.
    fn brute_force_run(
        fix_seq: &[GeoPoint],
        g: &SidewalkGraph,
        m: &HmmModel,
    ) -> Vec<SegmentId> {
        let mut w = GpsWindow::new(m.omega);
        let mut belief: BTreeMap<SegmentId, f64> = BTreeMap::new();
        let mut out = Vec::new();
        for (i, &z) in fix_seq.iter().enumerate() {
            w.push(i as f64, z);
            let uniform = 1.0 / g.segments().len() as f64;
            let mut post: BTreeMap<SegmentId, f64> = BTreeMap::new();
            for seg in g.segments() {
                let obs = observation_prob_window(&w, seg, m.sigma_z).unwrap();
                let p = if belief.is_empty() {
                    obs * obs
                } else {
                    let (_, past) = w.look_back(m.epsilon).unwrap();
                    let (_, now) = w.newest().unwrap();
                    let trans = match g.moving_distance_via(past, now, seg.id) {
                        Ok(moving) => {
                            let delta = (moving - geodetic_distance(past, now)).abs();
                            (1.0 / m.beta) * (-delta / m.beta).exp()
                        }
                        Err(_) => 0.0,
                    };
                    belief.get(&seg.id).copied().unwrap_or(uniform) * trans * obs
                };
                post.insert(seg.id, p);
            }
            let total: f64 = post.values().sum();
            belief = post.iter().map(|(k, v)| (*k, v / total)).collect();
            let best = belief
                .iter()
                .fold((SegmentId(u32::MAX), f64::NEG_INFINITY), |acc, (&k, &v)| {
                    if v > acc.1 {
                        (k, v)
                    } else {
                        acc
                    }
                });
            out.push(best.0);
        }
        out
    }

    proptest! {
        /// On small graphs every segment is a candidate, so the online
        /// filter must agree with brute-force enumeration at every step.
        #[test]
        fn matches_brute_force_on_small_graphs(
            layout in 0usize..3,
            fixes in proptest::collection::vec((-30.0f64..30.0, -30.0f64..30.0), 1..=3),
        ) {
            let segs = match layout {
                0 => vec![
                    segment(1, (0.0, -30.0), (0.0, 30.0), 3.0),
                    segment(2, (0.0, 30.0), (30.0, 30.0), 3.0),
                ],
                1 => vec![
                    segment(1, (-30.0, 0.0), (0.0, 0.0), 3.0),
                    segment(2, (0.0, 0.0), (30.0, 0.0), 3.0),
                    segment(3, (0.0, 0.0), (0.0, 30.0), 3.0),
                ],
                _ => vec![
                    segment(1, (-30.0, -10.0), (30.0, -10.0), 3.0),
                    segment(2, (-30.0, 10.0), (30.0, 10.0), 3.0),
                    segment(3, (-30.0, -10.0), (-30.0, 10.0), 3.0),
                    segment(4, (30.0, -10.0), (30.0, 10.0), 3.0),
                ],
            };
            let g = graph(segs);
            let m = HmmModel { omega: 3, sigma_z: 13.0, ..HmmModel::default() };
            // σ_z = 13 → search radius 69 m. The worst corner-to-segment
            // distance on these boards with fixes in ±30 m is ~67 m, so the
            // candidate set always equals "all segments".
            let points: Vec<GeoPoint> = fixes.iter().map(|&(x, y)| local(x, y)).collect();

            let expected = brute_force_run(&points, &g, &m);

            let mut w = GpsWindow::new(m.omega);
            let mut beliefs = BTreeMap::new();
            let mut got = Vec::new();
            for (i, &z) in points.iter().enumerate() {
                w.push(i as f64, z);
                got.push(estimate_segment(&w, &mut beliefs, &g, &m).unwrap());
                let total: f64 = beliefs.values().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
            prop_assert_eq!(got, expected);
        }

        /// Scaling the observation scale leaves the arg-max of a pure
        /// observation step unchanged (positive rescaling invariance).
        #[test]
        fn first_step_argmax_is_scale_invariant(
            x in -20.0f64..20.0, y in 5.0f64..95.0,
        ) {
            let g = graph(vec![
                segment(1, (0.0, 0.0), (0.0, 100.0), 3.0),
                segment(2, (20.0, 0.0), (20.0, 100.0), 3.0),
            ]);
            let w = window(&[(x, y)]);
            let mut ids = Vec::new();
            for sigma in [4.0, 8.0, 16.0] {
                let m = HmmModel { sigma_z: sigma, ..HmmModel::default() };
                let mut beliefs = BTreeMap::new();
                ids.push(estimate_segment(&w, &mut beliefs, &g, &m).unwrap());
            }
            // Same Gaussian ordering for every σ: nearest segment wins.
            prop_assert!(ids.windows(2).all(|p| p[0] == p[1]));
        }
    }
}
