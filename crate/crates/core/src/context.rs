//! Phone-viewing detection and motion classification from accelerometer data.
//!
//! A phone held up for viewing is nearly still, so the magnitude of its
//! acceleration barely spreads around gravity; a phone carried while walking
//! sways with the gait. The detector low-pass filters the raw samples,
//! reduces each to its magnitude, and thresholds the median absolute
//! deviation (MAD) of a short sliding window: below the trained threshold
//! means viewing. The threshold itself is the midpoint between MAD values
//! observed in labelled viewing and non-viewing recordings.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

/// Errors reported by the context-detection operations.
#[derive(Debug, Error)]
pub enum ContextError {
    #[error("accelerometer window is empty")]
    EmptyWindow,
    #[error("training sets differ in length: {x} vs {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("training sets are empty")]
    EmptySets,
    #[error("viewing model has not been trained")]
    Untrained,
}

/// One accelerometer reading, axes in m/s².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelSample {
    pub t: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
}

impl AccelSample {
    pub fn magnitude(&self) -> f64 {
        (self.ax * self.ax + self.ay * self.ay + self.az * self.az).sqrt()
    }
}

/// Streaming per-axis exponential low-pass filter: y_i = αx_i + (1-α)y_{i-1},
/// seeded with the first sample.
#[derive(Debug, Clone)]
pub struct LowPassFilter {
    alpha: f64,
    state: Option<(f64, f64, f64)>,
}

impl LowPassFilter {
    pub fn new(alpha: f64) -> Self {
        Self { alpha, state: None }
    }

    pub fn apply(&mut self, s: AccelSample) -> AccelSample {
        let (px, py, pz) = match self.state {
            Some(prev) => prev,
            None => (s.ax, s.ay, s.az),
        };
        let a = self.alpha;
        let out = (
            a * s.ax + (1.0 - a) * px,
            a * s.ay + (1.0 - a) * py,
            a * s.az + (1.0 - a) * pz,
        );
        self.state = Some(out);
        AccelSample { t: s.t, ax: out.0, ay: out.1, az: out.2 }
    }
}

/// Low-pass filter a whole trace at once.
pub fn low_pass(samples: &[AccelSample], alpha: f64) -> Vec<AccelSample> {
    let mut f = LowPassFilter::new(alpha);
    samples.iter().map(|&s| f.apply(s)).collect()
}

/// Fixed-capacity sliding window of acceleration magnitudes.
#[derive(Debug, Clone)]
pub struct AccelWindow {
    mags: VecDeque<f64>,
    capacity: usize,
}

impl AccelWindow {
    /// Window spanning `span_s` seconds of samples at `rate_hz`.
    pub fn with_span(span_s: f64, rate_hz: f64) -> Self {
        let capacity = ((span_s * rate_hz).round() as usize).max(1);
        Self { mags: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, magnitude: f64) {
        if self.mags.len() == self.capacity {
            self.mags.pop_front();
        }
        self.mags.push_back(magnitude);
    }

    pub fn is_full(&self) -> bool {
        self.mags.len() == self.capacity
    }

    pub fn len(&self) -> usize {
        self.mags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mags.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.mags.iter().copied().collect()
    }

    pub fn mad(&self) -> Result<f64, ContextError> {
        mad(&self.values())
    }
}

/// Mean absolute deviation: mean of |x_i - mean(x)|. Quantifies how much
/// the magnitudes shake around their average.
pub fn mad(values: &[f64]) -> Result<f64, ContextError> {
    if values.is_empty() {
        return Err(ContextError::EmptyWindow);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok(values.iter().map(|v| (v - mean).abs()).sum::<f64>() / n)
}

/// Train the viewing threshold Γ from index-paired MAD observations: the
/// mean of the pairwise midpoints (x_i + y_i) / 2.
pub fn train_threshold(viewing_mads: &[f64], other_mads: &[f64]) -> Result<f64, ContextError> {
    if viewing_mads.len() != other_mads.len() {
        return Err(ContextError::LengthMismatch {
            x: viewing_mads.len(),
            y: other_mads.len(),
        });
    }
    if viewing_mads.is_empty() {
        return Err(ContextError::EmptySets);
    }
    let sum: f64 = viewing_mads
        .iter()
        .zip(other_mads)
        .map(|(x, y)| (x + y) / 2.0)
        .sum();
    Ok(sum / viewing_mads.len() as f64)
}

/// Mean absolute pairwise separation between two equal-length MAD sets; a
/// larger value means the two behaviours are easier to tell apart.
pub fn delta_metric(viewing_mads: &[f64], other_mads: &[f64]) -> Result<f64, ContextError> {
    if viewing_mads.len() != other_mads.len() {
        return Err(ContextError::LengthMismatch {
            x: viewing_mads.len(),
            y: other_mads.len(),
        });
    }
    if viewing_mads.is_empty() {
        return Err(ContextError::EmptySets);
    }
    let sum: f64 = viewing_mads
        .iter()
        .zip(other_mads)
        .map(|(x, y)| (y - x).abs())
        .sum();
    Ok(sum / viewing_mads.len() as f64)
}

/// Trained viewing detector: filter constant, window span, and threshold Γ.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewingModel {
    pub gamma: Option<f64>,
    pub filter_alpha: f64,
    pub window_span_s: f64,
}

impl Default for ViewingModel {
    fn default() -> Self {
        Self {
            gamma: None,
            filter_alpha: 0.2,  // smooths hand tremor, keeps gait sway
            window_span_s: 3.0, // seconds of magnitudes per MAD window
        }
    }
}

impl ViewingModel {
    /// Fit Γ from labelled MAD sets and store it. Recordings rarely come out
    /// the same length, so the longer set is truncated to its partner before
    /// pairing.
    pub fn train(&mut self, viewing_mads: &[f64], other_mads: &[f64]) -> Result<f64, ContextError> {
        let n = viewing_mads.len().min(other_mads.len());
        let gamma = train_threshold(&viewing_mads[..n], &other_mads[..n])?;
        self.gamma = Some(gamma);
        Ok(gamma)
    }

    /// Viewing is declared when the window MAD falls strictly below Γ.
    pub fn detect(&self, window_mad: f64) -> Result<bool, ContextError> {
        match self.gamma {
            Some(g) => Ok(window_mad < g),
            None => Err(ContextError::Untrained),
        }
    }
}

/// Walking-speed class used to pick a crossing speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Stationary,
    Walking,
    Running,
}

/// Speed thresholds separating the motion classes, m/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionThresholds {
    pub stationary_below: f64,
    pub running_above: f64,
}

impl Default for MotionThresholds {
    fn default() -> Self {
        Self {
            stationary_below: 0.3, // below this the subject is standing
            running_above: 2.5,    // at or above this the subject is running
        }
    }
}

/// Classify a ground speed into a motion class.
pub fn classify_motion(speed: f64, t: &MotionThresholds) -> Motion {
    if speed < t.stationary_below {
        Motion::Stationary
    } else if speed < t.running_above {
        Motion::Walking
    } else {
        Motion::Running
    }
}

/// Synthetic accelerometer: viewing traces are gravity plus sensor noise;
/// carried traces add a dominant gait oscillation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticAccel {
    pub sample_rate_hz: f64,
    pub noise_std: f64,
    pub gait_amplitude: f64,
    pub gait_freq_hz: f64,
}

impl Default for SyntheticAccel {
    fn default() -> Self {
        Self {
            sample_rate_hz: 50.0, // phone accelerometer rate
            noise_std: 0.05,      // sensor noise, m/s²
            gait_amplitude: 1.0,  // step-sway amplitude, m/s²
            gait_freq_hz: 2.0,    // step cadence
        }
    }
}

/// Standard gravity, m/s².
pub const GRAVITY_MPS2: f64 = 9.81;

impl SyntheticAccel {
    /// Sample at time `t`; `viewing` suppresses the gait component.
    pub fn sample<R: Rng + ?Sized>(&self, t: f64, viewing: bool, rng: &mut R) -> AccelSample {
        let noise = Normal::new(0.0, self.noise_std)
            .expect("noise_std must be finite and non-negative")
            .sample(rng);
        let gait = if viewing {
            0.0
        } else {
            self.gait_amplitude * (2.0 * std::f64::consts::PI * self.gait_freq_hz * t).sin()
        };
        AccelSample { t, ax: 0.0, ay: 0.0, az: GRAVITY_MPS2 + gait + noise }
    }
}
