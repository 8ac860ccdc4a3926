//! Summary metrics distilled from a finished run: positioning quality,
//! receiver energy, detector accuracy, warning statistics and traffic
//! counters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::powermgr::{energy_consumed, PowerMode, PowerModel};

use super::report::{EventKind, PedTickRecord, SimEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub location: LocationMetrics,
    pub energy: EnergyMetrics,
    pub viewing: ViewingMetrics,
    pub warnings: WarningMetrics,
    pub comms: CommsMetrics,
}

/// Positioning error statistics over GPS fix ticks, pooled across
/// pedestrians. Errors are distances to the ground-truth path, meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationMetrics {
    pub fix_count: usize,
    pub mean_raw_error: Option<f64>,
    pub mean_estimate_error: Option<f64>,
    pub p95_raw_error: Option<f64>,
    pub p95_estimate_error: Option<f64>,
}

/// GPS receiver energy, pooled across pedestrians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyMetrics {
    /// Joules actually consumed under duty cycling.
    pub duty_joules: f64,
    /// Joules an always-on receiver would have consumed over the same time.
    pub always_on_joules: f64,
    /// 1 - duty/always-on; None when nothing ran.
    pub savings_fraction: Option<f64>,
    /// Ground-truth alert-zone entries, and how many found the GPS awake.
    pub zone_entries: usize,
    pub zone_entries_gps_active: usize,
    /// Wake-up events, and the tightest boundary margin seen (meters left to
    /// the zone edge at wake; negative means the receiver woke inside).
    pub wake_events: usize,
    pub min_wake_boundary_distance: Option<f64>,
}

/// Viewing-detector accuracy over ticks where the detector produced output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewingMetrics {
    pub evaluated_ticks: usize,
    pub correct_ticks: usize,
    pub accuracy: Option<f64>,
}

/// Alert statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarningMetrics {
    pub pedestrian_alerts: usize,
    pub driver_alerts: usize,
    pub standalone_alerts: usize,
    pub mean_t_warning: Option<f64>,
    pub mean_probability: Option<f64>,
    /// Mean |estimated - ground truth| warning time over alerts where the
    /// ground truth was defined, seconds.
    pub mean_abs_warning_error: Option<f64>,
}

/// Device-to-device traffic counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommsMetrics {
    pub messages_attempted: usize,
    pub messages_dropped: usize,
    pub reqs_sent: usize,
    pub reps_received: usize,
    pub mean_round_trip: Option<f64>,
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    Some(sorted[idx.min(sorted.len() - 1)])
}

pub(crate) struct MetricsInput<'a> {
    pub pedestrians: &'a BTreeMap<String, Vec<PedTickRecord>>,
    pub events: &'a [SimEvent],
    pub power: &'a PowerModel,
    pub tick: f64,
    pub messages_attempted: usize,
    pub messages_dropped: usize,
    pub round_trips: &'a [f64],
}

pub(crate) fn compute(input: MetricsInput<'_>) -> Metrics {
    let MetricsInput {
        pedestrians,
        events,
        power,
        tick,
        messages_attempted,
        messages_dropped,
        round_trips,
    } = input;

    // Location: pool fix-tick errors.
    let mut raw_errors = Vec::new();
    let mut est_errors = Vec::new();
    for records in pedestrians.values() {
        for r in records {
            if let Some(e) = r.raw_error {
                raw_errors.push(e);
            }
            if let Some(e) = r.estimate_error {
                est_errors.push(e);
            }
        }
    }
    let mut raw_sorted = raw_errors.clone();
    raw_sorted.sort_by(f64::total_cmp);
    let mut est_sorted = est_errors.clone();
    est_sorted.sort_by(f64::total_cmp);
    let location = LocationMetrics {
        fix_count: raw_errors.len(),
        mean_raw_error: mean(&raw_errors),
        mean_estimate_error: mean(&est_errors),
        p95_raw_error: percentile(&raw_sorted, 0.95),
        p95_estimate_error: percentile(&est_sorted, 0.95),
    };

    // Energy: rebuild each receiver's timeline from its per-tick power mode.
    let mut duty = 0.0;
    let mut always_on = 0.0;
    for records in pedestrians.values() {
        let timeline: Vec<(f64, PowerMode)> = records.iter().map(|r| (tick, r.power)).collect();
        duty += energy_consumed(&timeline, power);
        always_on += records.len() as f64 * tick * power.active_watts;
    }
    let mut zone_entries = 0;
    let mut zone_entries_active = 0;
    let mut wake_events = 0;
    let mut min_wake: Option<f64> = None;
    for e in events {
        match e.kind {
            EventKind::ZoneEntered { gps_active, .. } => {
                zone_entries += 1;
                if gps_active {
                    zone_entries_active += 1;
                }
            }
            EventKind::Woke { boundary_distance } => {
                wake_events += 1;
                min_wake = Some(match min_wake {
                    Some(m) => m.min(boundary_distance),
                    None => boundary_distance,
                });
            }
            _ => {}
        }
    }
    let energy = EnergyMetrics {
        duty_joules: duty,
        always_on_joules: always_on,
        savings_fraction: if always_on > 0.0 { Some(1.0 - duty / always_on) } else { None },
        zone_entries,
        zone_entries_gps_active: zone_entries_active,
        wake_events,
        min_wake_boundary_distance: min_wake,
    };

    // Viewing accuracy over evaluated ticks.
    let mut evaluated = 0;
    let mut correct = 0;
    for records in pedestrians.values() {
        for r in records {
            if let Some(flag) = r.viewing_detected {
                evaluated += 1;
                if flag == r.viewing_truth {
                    correct += 1;
                }
            }
        }
    }
    let viewing = ViewingMetrics {
        evaluated_ticks: evaluated,
        correct_ticks: correct,
        accuracy: if evaluated > 0 { Some(correct as f64 / evaluated as f64) } else { None },
    };

    // Warnings.
    let mut t_warnings = Vec::new();
    let mut probabilities = Vec::new();
    let mut abs_errors = Vec::new();
    let mut ped_alerts = 0;
    let mut driver_alerts = 0;
    let mut standalone_alerts = 0;
    let mut reqs = 0;
    let mut reps = 0;
    for e in events {
        match &e.kind {
            EventKind::AlertPedestrian { t_warning, probability, gt_t_warning, .. } => {
                ped_alerts += 1;
                t_warnings.push(*t_warning);
                probabilities.push(*probability);
                if let Some(gt) = gt_t_warning {
                    abs_errors.push((t_warning - gt).abs());
                }
            }
            EventKind::AlertDriver { probability, .. } => {
                driver_alerts += 1;
                probabilities.push(*probability);
            }
            EventKind::AlertStandAlone => standalone_alerts += 1,
            EventKind::ReqSent { .. } => reqs += 1,
            EventKind::RepReceived { .. } => reps += 1,
            _ => {}
        }
    }
    let warnings = WarningMetrics {
        pedestrian_alerts: ped_alerts,
        driver_alerts,
        standalone_alerts,
        mean_t_warning: mean(&t_warnings),
        mean_probability: mean(&probabilities),
        mean_abs_warning_error: mean(&abs_errors),
    };

    let comms = CommsMetrics {
        messages_attempted,
        messages_dropped,
        reqs_sent: reqs,
        reps_received: reps,
        mean_round_trip: mean(round_trips),
    };

    Metrics { location, energy, viewing, warnings, comms }
}

/// Empirical CDF of an error series: sorted (value, cumulative fraction)
/// pairs suitable for plotting or CSV export.
pub fn error_cdf(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<f64> = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, (i + 1) as f64 / n))
        .collect()
}

/// Pull one error series out of a report's pedestrian records.
pub fn collect_errors(
    pedestrians: &BTreeMap<String, Vec<PedTickRecord>>,
    raw: bool,
) -> Vec<f64> {
    let mut out = Vec::new();
    for records in pedestrians.values() {
        for r in records {
            let e = if raw { r.raw_error } else { r.estimate_error };
            if let Some(e) = e {
                out.push(e);
            }
        }
    }
    out
}
