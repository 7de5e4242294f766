//! Sensor conditioning: exponential smoothing for temperature and humidity,
//! a five-sample median for distance, and range validation with fallback to
//! the last valid reading.
//!
//! Everything here is generic over the float type so the same code serves an
//! `f32` firmware build and the `f64` simulator.

use std::collections::VecDeque;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Weight of the newest sample in the smoothing recurrence.
pub const EMA_WEIGHT_NEW: f64 = 0.7;
/// Weight of the previous filtered value.
pub const EMA_WEIGHT_PREV: f64 = 0.3;
pub const MEDIAN_WINDOW: usize = 5;

pub const TEMPERATURE_RANGE: (f64, f64) = (0.0, 50.0);
pub const HUMIDITY_RANGE: (f64, f64) = (0.0, 100.0);
pub const DISTANCE_RANGE: (f64, f64) = (2.0, 400.0);

fn lit<S: Float>(x: f64) -> S {
    S::from(x).expect("constant representable in every float type")
}

/// One raw acquisition: °C, %RH, cm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame<S = f64> {
    pub t_raw: S,
    pub h_raw: S,
    pub d_raw: S,
    pub sample_time_ms: u64,
}

/// A filtered, range-checked reading ready to transmit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessedFrame<S = f64> {
    pub t: S,
    pub h: S,
    pub d: S,
    pub sample_time_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Valid,
    Invalid,
}

impl Verdict {
    fn of(ok: bool) -> Self {
        if ok {
            Verdict::Valid
        } else {
            Verdict::Invalid
        }
    }

    pub fn is_valid(self) -> bool {
        self == Verdict::Valid
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RangeVerdicts {
    pub t: Verdict,
    pub h: Verdict,
    pub d: Verdict,
}

impl RangeVerdicts {
    pub fn all_valid(&self) -> bool {
        self.t.is_valid() && self.h.is_valid() && self.d.is_valid()
    }
}

fn within<S: Float>(x: S, (lo, hi): (f64, f64)) -> bool {
    x >= lit(lo) && x <= lit(hi)
}

/// Inclusive range check per channel; NaN is never valid.
pub fn validate_ranges<S: Float>(t: S, h: S, d: S) -> RangeVerdicts {
    RangeVerdicts {
        t: Verdict::of(within(t, TEMPERATURE_RANGE)),
        h: Verdict::of(within(h, HUMIDITY_RANGE)),
        d: Verdict::of(within(d, DISTANCE_RANGE)),
    }
}

/// One step of the smoothing recurrence.
pub fn ema_step<S: Float>(raw: S, prev: S) -> S {
    lit::<S>(EMA_WEIGHT_NEW) * raw + lit::<S>(EMA_WEIGHT_PREV) * prev
}

/// Median of an odd-length window.
pub fn median<S: Float>(window: &[S]) -> S {
    let mut sorted = window.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("window holds finite samples"));
    sorted[sorted.len() / 2]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FilterError {
    #[error("no valid reading yet; frame skipped")]
    NoValidReadingYet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState<S = f64> {
    t_filtered: Option<S>,
    h_filtered: Option<S>,
    d_buffer: VecDeque<S>,
    d_filtered: Option<S>,
    last_valid: Option<ProcessedFrame<S>>,
    last_verdicts: Option<RangeVerdicts>,
}

impl<S: Float> Default for FilterState<S> {
    fn default() -> Self {
        Self {
            t_filtered: None,
            h_filtered: None,
            d_buffer: VecDeque::with_capacity(MEDIAN_WINDOW),
            d_filtered: None,
            last_valid: None,
            last_verdicts: None,
        }
    }
}

impl<S: Float> FilterState<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Both smoothing channels have seen a finite sample.
    pub fn initialized(&self) -> bool {
        self.t_filtered.is_some() && self.h_filtered.is_some()
    }

    pub fn t_filtered(&self) -> Option<S> {
        self.t_filtered
    }

    pub fn h_filtered(&self) -> Option<S> {
        self.h_filtered
    }

    pub fn d_filtered(&self) -> Option<S> {
        self.d_filtered
    }

    pub fn d_buffer(&self) -> impl ExactSizeIterator<Item = &S> {
        self.d_buffer.iter()
    }

    pub fn last_valid(&self) -> Option<&ProcessedFrame<S>> {
        self.last_valid.as_ref()
    }

    /// Verdicts of the most recent frame, before substitution.
    pub fn last_verdicts(&self) -> Option<RangeVerdicts> {
        self.last_verdicts
    }

    /// Seeds the smoothing state, for tests and warm restarts.
    pub fn with_previous(t_prev: S, h_prev: S) -> Self {
        Self {
            t_filtered: Some(t_prev),
            h_filtered: Some(h_prev),
            ..Self::default()
        }
    }

    /// Runs one frame through the filters and validation. Out-of-range fields
    /// are replaced with the matching field of the last valid reading; with no
    /// valid reading yet the frame is skipped.
    pub fn acquire_and_filter(&mut self, frame: &SensorFrame<S>) -> Result<ProcessedFrame<S>, FilterError> {
        let smooth = |state: &mut Option<S>, raw: S| {
            if raw.is_finite() {
                *state = Some(match *state {
                    Some(prev) => ema_step(raw, prev),
                    None => raw,
                });
            }
        };
        smooth(&mut self.t_filtered, frame.t_raw);
        smooth(&mut self.h_filtered, frame.h_raw);

        if frame.d_raw.is_finite() {
            self.d_buffer.push_back(frame.d_raw);
            if self.d_buffer.len() >= MEDIAN_WINDOW {
                self.d_filtered = Some(median(self.d_buffer.make_contiguous()));
                self.d_buffer.pop_front();
            } else {
                self.d_filtered = Some(frame.d_raw);
            }
        }

        let nan = S::nan();
        let t = self.t_filtered.unwrap_or(nan);
        let h = self.h_filtered.unwrap_or(nan);
        let d = self.d_filtered.unwrap_or(nan);
        let verdicts = validate_ranges(t, h, d);
        self.last_verdicts = Some(verdicts);

        let out = if verdicts.all_valid() {
            ProcessedFrame {
                t,
                h,
                d,
                sample_time_ms: frame.sample_time_ms,
            }
        } else {
            let last = self.last_valid.ok_or(FilterError::NoValidReadingYet)?;
            ProcessedFrame {
                t: if verdicts.t.is_valid() { t } else { last.t },
                h: if verdicts.h.is_valid() { h } else { last.h },
                d: if verdicts.d.is_valid() { d } else { last.d },
                sample_time_ms: frame.sample_time_ms,
            }
        };
        self.last_valid = Some(out);
        Ok(out)
    }
}
