//! Geodetic primitives and the sidewalk map model.
//!
//! Everything downstream (map matching, power management, risk assessment)
//! works on three spatial ideas defined here:
//!
//! - great-circle distance between WGS84 coordinates (spherical earth),
//! - projection of a point onto a sidewalk segment in a local tangent plane,
//! - shortest *moving* distance between two points along the sidewalk graph,
//!   as opposed to the straight-line geodetic distance.

use serde::{Deserialize, Serialize};
use std::collections::{BinaryHeap, HashMap};
use thiserror::Error;

/// Mean earth radius in meters (spherical model).
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

const DEG2RAD: f64 = std::f64::consts::PI / 180.0;

/// Default maximum distance at which a point may be snapped onto the graph.
pub const DEFAULT_SNAP_RADIUS_M: f64 = 50.0;

/// Errors reported by graph operations.
#[derive(Debug, Error)]
pub enum GeoError {
    /// No sidewalk segment lies within the snap radius of the query point.
    #[error("no segment within {radius_m} m of ({lat}, {lon}); nearest is {nearest_m:.1} m away")]
    SnapFailure {
        lat: f64,
        lon: f64,
        radius_m: f64,
        nearest_m: f64,
    },
    /// The two snapped points lie in disconnected components of the graph.
    #[error("no sidewalk path connects the two points")]
    Unreachable,
    /// The graph has no segments at all.
    #[error("sidewalk graph is empty")]
    EmptyGraph,
}

/// A WGS84 coordinate in decimal degrees.
///
/// Serialized as a `[lat, lon]` pair. Latitude must lie in [-90, 90] and
/// longitude in [-180, 180]; scenario loading validates this.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    /// True when both coordinates are finite and within WGS84 bounds.
    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }
}

impl From<[f64; 2]> for GeoPoint {
    fn from(v: [f64; 2]) -> Self {
        Self { lat: v[0], lon: v[1] }
    }
}

impl From<GeoPoint> for [f64; 2] {
    fn from(p: GeoPoint) -> [f64; 2] {
        [p.lat, p.lon]
    }
}

/// Identifier of a sidewalk segment. Ordering is used to break ties
/// deterministically wherever two segments score equally.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct SegmentId(pub u32);

impl std::fmt::Display for SegmentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "seg#{}", self.0)
    }
}

/// A straight sidewalk segment between two endpoints, with a physical width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidewalkSegment {
    pub id: SegmentId,
    pub start: GeoPoint,
    pub end: GeoPoint,
    /// Sidewalk width in meters (> 0).
    pub width: f64,
}

impl SidewalkSegment {
    /// Great-circle length of the segment in meters.
    pub fn length(&self) -> f64 {
        geodetic_distance(self.start, self.end)
    }
}

/// A circular alert zone around a crossing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertZone {
    pub crossing: GeoPoint,
    /// Zone radius in meters (> 0).
    pub radius: f64,
}

/// Great-circle distance between two coordinates in meters (haversine).
pub fn geodetic_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat_a = a.lat * DEG2RAD;
    let lat_b = b.lat * DEG2RAD;
    let dlat = (b.lat - a.lat) * DEG2RAD;
    let dlon = (b.lon - a.lon) * DEG2RAD;

    let h = (dlat / 2.0).sin().powi(2) + lat_a.cos() * lat_b.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().asin()
}

/// Initial bearing from `a` to `b` in degrees, normalized to [0, 360).
pub fn initial_bearing_deg(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat_a = a.lat * DEG2RAD;
    let lat_b = b.lat * DEG2RAD;
    let dlon = (b.lon - a.lon) * DEG2RAD;

    let y = dlon.sin() * lat_b.cos();
    let x = lat_a.cos() * lat_b.sin() - lat_a.sin() * lat_b.cos() * dlon.cos();
    let deg = y.atan2(x) / DEG2RAD;
    (deg + 360.0) % 360.0
}

/// Smallest absolute difference between two headings, in [0, 180] degrees.
pub fn heading_difference_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

/// Local tangent-plane frame anchored at an origin coordinate.
///
/// Over the sub-kilometer extents this library deals with, an equirectangular
/// approximation (east/north meters with longitude scaled by cos(latitude))
/// is accurate to well under a centimeter, which keeps segment projection and
/// rectangle clamping simple and fast.
#[derive(Debug, Clone, Copy)]
pub struct LocalFrame {
    origin: GeoPoint,
    cos_lat: f64,
}

impl LocalFrame {
    pub fn new(origin: GeoPoint) -> Self {
        Self {
            origin,
            cos_lat: (origin.lat * DEG2RAD).cos(),
        }
    }

    /// Coordinate -> (east, north) meters relative to the origin.
    pub fn to_local(&self, p: GeoPoint) -> (f64, f64) {
        let x = (p.lon - self.origin.lon) * DEG2RAD * self.cos_lat * EARTH_RADIUS_M;
        let y = (p.lat - self.origin.lat) * DEG2RAD * EARTH_RADIUS_M;
        (x, y)
    }

    /// (east, north) meters relative to the origin -> coordinate.
    pub fn from_local(&self, x: f64, y: f64) -> GeoPoint {
        GeoPoint {
            lat: self.origin.lat + y / EARTH_RADIUS_M / DEG2RAD,
            lon: self.origin.lon + x / (EARTH_RADIUS_M * self.cos_lat) / DEG2RAD,
        }
    }
}

/// Orthogonal projection of `z` onto `seg`, computed in a local tangent plane
/// anchored at the segment start and clamped to the segment extent.
///
/// Returns the projected point and its great-circle distance from `z`.
pub fn project_to_segment(z: GeoPoint, seg: &SidewalkSegment) -> (GeoPoint, f64) {
    let (point, _t) = project_with_param(z, seg);
    (point, geodetic_distance(z, point))
}

/// Like [`project_to_segment`] but also returns the normalized position
/// t in [0, 1] of the projection along the segment.
pub fn project_with_param(z: GeoPoint, seg: &SidewalkSegment) -> (GeoPoint, f64) {
    let frame = LocalFrame::new(seg.start);
    let (ex, ey) = frame.to_local(seg.end);
    let (zx, zy) = frame.to_local(z);

    let len_sq = ex * ex + ey * ey;
    let t = if len_sq == 0.0 {
        0.0
    } else {
        ((zx * ex + zy * ey) / len_sq).clamp(0.0, 1.0)
    };
    (frame.from_local(t * ex, t * ey), t)
}

/// True when `p` lies inside the zone; the boundary counts as inside.
pub fn in_alert_zone(p: GeoPoint, zone: &AlertZone) -> bool {
    geodetic_distance(p, zone.crossing) <= zone.radius
}

/// Result of snapping a point onto the graph: the segment, the snapped
/// point, the normalized position along the segment and the snap distance.
#[derive(Debug, Clone)]
pub struct Snap {
    pub segment: SegmentId,
    pub point: GeoPoint,
    pub t: f64,
    pub distance: f64,
}

/// The sidewalk map: segments, their connectivity, crossings and alert zones.
///
/// Connectivity is derived from shared segment endpoints (coordinates equal
/// to within ~1 cm are treated as the same junction), so maps are built from
/// plain segment lists without a separate node table.
#[derive(Debug, Clone)]
pub struct SidewalkGraph {
    segments: Vec<SidewalkSegment>,
    pub crossings: Vec<GeoPoint>,
    pub zones: Vec<AlertZone>,
    /// Maximum snap distance for [`SidewalkGraph::snap`] in meters.
    pub snap_radius: f64,
    /// node id -> adjacent (segment index, other node id, length).
    adjacency: Vec<Vec<(usize, usize, f64)>>,
    /// segment index -> (start node id, end node id).
    seg_nodes: Vec<(usize, usize)>,
}

impl SidewalkGraph {
    pub fn new(
        segments: Vec<SidewalkSegment>,
        crossings: Vec<GeoPoint>,
        zones: Vec<AlertZone>,
    ) -> Self {
        // Merge endpoints into junction nodes by quantizing to ~1 cm.
        let quantize = |p: GeoPoint| -> (i64, i64) {
            ((p.lat * 1e7).round() as i64, (p.lon * 1e7).round() as i64)
        };
        let mut node_ids: HashMap<(i64, i64), usize> = HashMap::new();
        let mut node_count = 0usize;
        let mut seg_nodes = Vec::with_capacity(segments.len());
        for seg in &segments {
            let mut id_of = |p: GeoPoint| {
                *node_ids.entry(quantize(p)).or_insert_with(|| {
                    node_count += 1;
                    node_count - 1
                })
            };
            seg_nodes.push((id_of(seg.start), id_of(seg.end)));
        }

        let mut adjacency = vec![Vec::new(); node_count];
        for (idx, seg) in segments.iter().enumerate() {
            let (a, b) = seg_nodes[idx];
            let len = seg.length();
            adjacency[a].push((idx, b, len));
            adjacency[b].push((idx, a, len));
        }

        Self {
            segments,
            crossings,
            zones,
            snap_radius: DEFAULT_SNAP_RADIUS_M,
            adjacency,
            seg_nodes,
        }
    }

    pub fn segments(&self) -> &[SidewalkSegment] {
        &self.segments
    }

    pub fn segment(&self, id: SegmentId) -> Option<&SidewalkSegment> {
        self.segments.iter().find(|s| s.id == id)
    }

    /// Segments whose projection distance from `p` is at most `radius`,
    /// in ascending segment-id order.
    pub fn segments_within(&self, p: GeoPoint, radius: f64) -> Vec<&SidewalkSegment> {
        let mut found: Vec<&SidewalkSegment> = self
            .segments
            .iter()
            .filter(|s| project_to_segment(p, s).1 <= radius)
            .collect();
        found.sort_by_key(|s| s.id);
        found
    }

    /// Snap `p` onto the nearest segment within the snap radius.
    ///
    /// Ties on distance are broken by the smaller segment id.
    pub fn snap(&self, p: GeoPoint) -> Result<Snap, GeoError> {
        if self.segments.is_empty() {
            return Err(GeoError::EmptyGraph);
        }
        let mut best: Option<Snap> = None;
        let mut nearest = f64::INFINITY;
        for seg in &self.segments {
            let (point, t) = project_with_param(p, seg);
            let d = geodetic_distance(p, point);
            nearest = nearest.min(d);
            let better = match &best {
                None => true,
                Some(b) => d < b.distance || (d == b.distance && seg.id < b.segment),
            };
            if better {
                best = Some(Snap {
                    segment: seg.id,
                    point,
                    t,
                    distance: d,
                });
            }
        }
        let best = best.unwrap();
        if best.distance > self.snap_radius {
            return Err(GeoError::SnapFailure {
                lat: p.lat,
                lon: p.lon,
                radius_m: self.snap_radius,
                nearest_m: nearest,
            });
        }
        Ok(best)
    }

    /// Shortest distance from `a` to `b` along the sidewalk graph, in meters.
    ///
    /// Both points are first snapped onto the graph; the walk then follows
    /// segments through shared junctions. This is the "moving distance" that
    /// a walker constrained to sidewalks actually covers, and is compared
    /// against the straight-line geodetic distance during map matching.
    pub fn moving_distance(&self, a: GeoPoint, b: GeoPoint) -> Result<f64, GeoError> {
        let sa = self.snap(a)?;
        let sb = self.snap(b)?;
        self.moving_distance_snapped(&sa, &sb)
    }

    /// Moving distance with the newest point forced onto a given segment.
    ///
    /// Used by the map matcher to score candidate segments: the older point
    /// snaps freely while the newer one is projected onto the candidate.
    pub fn moving_distance_via(
        &self,
        a: GeoPoint,
        b: GeoPoint,
        b_segment: SegmentId,
    ) -> Result<f64, GeoError> {
        let sa = self.snap(a)?;
        let seg = self
            .segment(b_segment)
            .ok_or(GeoError::EmptyGraph)?;
        let (point, t) = project_with_param(b, seg);
        let sb = Snap {
            segment: b_segment,
            point,
            t,
            distance: geodetic_distance(b, point),
        };
        self.moving_distance_snapped(&sa, &sb)
    }

    fn moving_distance_snapped(&self, sa: &Snap, sb: &Snap) -> Result<f64, GeoError> {
        let ia = self.segment_index(sa.segment);
        let ib = self.segment_index(sb.segment);
        let len_a = self.segments[ia].length();
        let len_b = self.segments[ib].length();

        // Direct walk along a shared segment.
        let mut best = if ia == ib {
            (sa.t - sb.t).abs() * len_a
        } else {
            f64::INFINITY
        };

        // Dijkstra over junction nodes, seeded with the walk from the
        // snapped start point to either end of its segment.
        let (a0, a1) = self.seg_nodes[ia];
        let (b0, b1) = self.seg_nodes[ib];
        let mut dist = vec![f64::INFINITY; self.adjacency.len()];
        let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::new();
        for (node, d) in [(a0, sa.t * len_a), (a1, (1.0 - sa.t) * len_a)] {
            if d < dist[node] {
                dist[node] = d;
                heap.push(HeapEntry { cost: d, node });
            }
        }
        while let Some(HeapEntry { cost, node }) = heap.pop() {
            if cost > dist[node] {
                continue;
            }
            for &(_seg, next, len) in &self.adjacency[node] {
                let nd = cost + len;
                if nd < dist[next] {
                    dist[next] = nd;
                    heap.push(HeapEntry { cost: nd, node: next });
                }
            }
        }

        for (node, tail) in [(b0, sb.t * len_b), (b1, (1.0 - sb.t) * len_b)] {
            if dist[node].is_finite() {
                best = best.min(dist[node] + tail);
            }
        }

        if best.is_finite() {
            Ok(best)
        } else {
            Err(GeoError::Unreachable)
        }
    }

    fn segment_index(&self, id: SegmentId) -> usize {
        self.segments
            .iter()
            .position(|s| s.id == id)
            .expect("segment id present in graph")
    }
}

/// Min-heap entry for Dijkstra; reversed ordering on cost.
#[derive(Debug, PartialEq)]
struct HeapEntry {
    cost: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| self.node.cmp(&other.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
