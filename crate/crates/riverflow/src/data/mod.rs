//! Multichannel node signals, preprocessing and sample extraction.
//!
//! A [`NodeSignal`] holds five hourly channels per gauge (discharge first,
//! then precipitation, topsoil moisture, air temperature, surface pressure).
//! Missing values are NaN markers and may occur in the discharge channel
//! only; short gaps are linearly interpolated, longer ones reported so the
//! affected gauges can be filtered out of the graph.

pub mod io;

use std::collections::BTreeSet;

use chrono::{Datelike, NaiveDateTime, TimeDelta};
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::graph::GaugeId;

pub const CHANNELS: usize = 5;
pub const DISCHARGE: usize = 0;
pub const CHANNEL_COLUMNS: [&str; CHANNELS] = [
    "discharge_m3s",
    "precip_mm",
    "topsoil_moisture",
    "air_temp_c",
    "surface_pressure_hpa",
];

/// Longest run of missing discharge values that is still filled by linear
/// interpolation; anything longer is reported instead.
pub const MAX_INTERPOLATED_GAP: usize = 6;

/// Hourly multichannel measurements for a set of gauges on a shared time axis.
#[derive(Clone, Debug)]
pub struct NodeSignal {
    /// Ascending gauge ids; the row order of `values`.
    pub gauges: Vec<GaugeId>,
    /// First instant; subsequent instants follow in exact one-hour steps.
    pub start: NaiveDateTime,
    /// Shape (gauge, time, channel).
    pub values: Array3<f64>,
}

impl NodeSignal {
    pub fn gauge_count(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn hours(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + TimeDelta::hours(t as i64)
    }

    pub fn gauge_index(&self, id: GaugeId) -> Option<usize> {
        self.gauges.binary_search(&id).ok()
    }

    /// Restricts to the given gauges (ascending subset of the current ones).
    pub fn select_gauges(&self, keep: &BTreeSet<GaugeId>) -> Result<NodeSignal> {
        let mut rows = Vec::new();
        let mut gauges = Vec::new();
        for (i, g) in self.gauges.iter().enumerate() {
            if keep.contains(g) {
                rows.push(i);
                gauges.push(*g);
            }
        }
        if rows.is_empty() {
            return Err(Error::data("gauge selection is empty"));
        }
        let values = self.values.select(Axis(0), &rows);
        Ok(NodeSignal { gauges, start: self.start, values })
    }

    /// True if any channel other than discharge carries a missing marker.
    pub fn meteorology_complete(&self) -> bool {
        for c in 1..CHANNELS {
            if self
                .values
                .index_axis(Axis(2), c)
                .iter()
                .any(|x| x.is_nan())
            {
                return false;
            }
        }
        true
    }
}

/// Per-gauge, per-channel standardization parameters (sample std, T - 1).
#[derive(Clone, Debug)]
pub struct NormalizationParams {
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
}

/// A discharge gap that was too long to interpolate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LongGap {
    pub gauge: GaugeId,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GapReport {
    pub filled_values: usize,
    pub long_gaps: Vec<LongGap>,
}

impl GapReport {
    /// Gauges that still carry missing discharge values.
    pub fn affected_gauges(&self) -> BTreeSet<GaugeId> {
        self.long_gaps.iter().map(|g| g.gauge).collect()
    }
}

/// Fills discharge gaps of up to [`MAX_INTERPOLATED_GAP`] hours by linear
/// interpolation between the flanking observations. Longer gaps, and gaps
/// touching the series boundary, are left in place and reported.
pub fn interpolate_gaps(signal: &mut NodeSignal) -> Result<GapReport> {
    if !signal.meteorology_complete() {
        return Err(Error::data(
            "missing values outside the discharge channel; meteorology must be complete",
        ));
    }
    let mut report = GapReport::default();
    let hours = signal.hours();
    for gi in 0..signal.gauge_count() {
        let gauge = signal.gauges[gi];
        let mut t = 0;
        while t < hours {
            if !signal.values[[gi, t, DISCHARGE]].is_nan() {
                t += 1;
                continue;
            }
            let gap_start = t;
            while t < hours && signal.values[[gi, t, DISCHARGE]].is_nan() {
                t += 1;
            }
            let gap_len = t - gap_start;
            let left = gap_start.checked_sub(1);
            let right = if t < hours { Some(t) } else { None };
            match (left, right) {
                (Some(l), Some(r)) if gap_len <= MAX_INTERPOLATED_GAP => {
                    let a = signal.values[[gi, l, DISCHARGE]];
                    let b = signal.values[[gi, r, DISCHARGE]];
                    let span = (r - l) as f64;
                    for k in gap_start..t {
                        let frac = (k - l) as f64 / span;
                        signal.values[[gi, k, DISCHARGE]] = a + (b - a) * frac;
                    }
                    report.filled_values += gap_len;
                }
                _ => report.long_gaps.push(LongGap { gauge, start: gap_start, len: gap_len }),
            }
        }
    }
    Ok(report)
}

/// Standard-score normalization per gauge and channel. Requires a complete
/// signal; a constant channel is a domain error naming the gauge.
pub fn zscore_normalize(signal: &NodeSignal) -> Result<(NodeSignal, NormalizationParams)> {
    let (n, hours, channels) = signal.values.dim();
    if hours < 2 {
        return Err(Error::domain("normalization needs at least two time steps"));
    }
    let mut mu = Array2::<f64>::zeros((n, channels));
    let mut sigma = Array2::<f64>::zeros((n, channels));
    let mut out = signal.values.clone();
    for g in 0..n {
        for c in 0..channels {
            let series = signal.values.slice(ndarray::s![g, .., c]);
            if series.iter().any(|x| x.is_nan()) {
                return Err(Error::domain(format!(
                    "gauge {} has missing values; interpolate or filter first",
                    signal.gauges[g]
                )));
            }
            let mean = series.sum() / hours as f64;
            let var = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                / (hours - 1) as f64;
            let std = var.sqrt();
            if std == 0.0 {
                return Err(Error::domain(format!(
                    "gauge {} channel {} is constant; cannot normalize",
                    signal.gauges[g], CHANNEL_COLUMNS[c]
                )));
            }
            mu[[g, c]] = mean;
            sigma[[g, c]] = std;
            for t in 0..hours {
                out[[g, t, c]] = (signal.values[[g, t, c]] - mean) / std;
            }
        }
    }
    Ok((
        NodeSignal { gauges: signal.gauges.clone(), start: signal.start, values: out },
        NormalizationParams { mu, sigma },
    ))
}

/// Inverse of the per-gauge affine map on the discharge channel.
pub fn unnormalize(v: ArrayView1<f64>, params: &NormalizationParams) -> Array1<f64> {
    let mut out = Array1::zeros(v.len());
    for g in 0..v.len() {
        out[g] = params.sigma[[g, DISCHARGE]] * v[g] + params.mu[[g, DISCHARGE]];
    }
    out
}

/// Re-expresses an already-normalized signal with parameters estimated on the
/// selected hours only (per gauge and channel). Used by the train-only
/// normalization mode.
pub fn renormalize_with_mask(
    signal: &NodeSignal,
    params: &NormalizationParams,
    hour_mask: &[bool],
) -> Result<(NodeSignal, NormalizationParams)> {
    let (n, hours, channels) = signal.values.dim();
    if hour_mask.len() != hours {
        return Err(Error::domain("hour mask length mismatch"));
    }
    let selected = hour_mask.iter().filter(|&&m| m).count();
    if selected < 2 {
        return Err(Error::domain("train-only normalization needs at least two hours"));
    }
    let mut raw = signal.values.clone();
    for g in 0..n {
        for c in 0..channels {
            for t in 0..hours {
                raw[[g, t, c]] = params.sigma[[g, c]] * signal.values[[g, t, c]] + params.mu[[g, c]];
            }
        }
    }
    let mut mu = Array2::<f64>::zeros((n, channels));
    let mut sigma = Array2::<f64>::zeros((n, channels));
    let mut out = raw.clone();
    for g in 0..n {
        for c in 0..channels {
            let mut sum = 0.0;
            for t in 0..hours {
                if hour_mask[t] {
                    sum += raw[[g, t, c]];
                }
            }
            let mean = sum / selected as f64;
            let mut ss = 0.0;
            for t in 0..hours {
                if hour_mask[t] {
                    let d = raw[[g, t, c]] - mean;
                    ss += d * d;
                }
            }
            let std = (ss / (selected - 1) as f64).sqrt();
            if std == 0.0 {
                return Err(Error::domain(format!(
                    "gauge {} channel {} is constant on the training hours",
                    signal.gauges[g], CHANNEL_COLUMNS[c]
                )));
            }
            mu[[g, c]] = mean;
            sigma[[g, c]] = std;
            for t in 0..hours {
                out[[g, t, c]] = (raw[[g, t, c]] - mean) / std;
            }
        }
    }
    Ok((
        NodeSignal { gauges: signal.gauges.clone(), start: signal.start, values: out },
        NormalizationParams { mu, sigma },
    ))
}

/// Windowed samples over a signal: index `t` is the (0-based) last hour of
/// the input window, the window covers `t-W+1 ..= t` and the target is the
/// normalized discharge at `t+L`. Samples are views; nothing is copied until
/// a window is materialized.
#[derive(Clone, Debug)]
pub struct SampleSet<'a> {
    pub signal: &'a NodeSignal,
    pub window: usize,
    pub lead: usize,
    pub indices: Vec<usize>,
}

impl<'a> SampleSet<'a> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Input window flattened per node to `n x (W * C)`, channel-major per
    /// hour (hour 0 channels first, then hour 1, ...).
    pub fn window_flat(&self, t: usize) -> Array2<f64> {
        let n = self.signal.gauge_count();
        let w = self.window;
        let mut out = Array2::zeros((n, w * CHANNELS));
        for g in 0..n {
            for h in 0..w {
                let src = t + 1 - w + h;
                for c in 0..CHANNELS {
                    out[[g, h * CHANNELS + c]] = self.signal.values[[g, src, c]];
                }
            }
        }
        out
    }

    /// Normalized discharge rows of the window, `n x W`.
    pub fn discharge_window(&self, t: usize) -> Array2<f64> {
        let n = self.signal.gauge_count();
        let w = self.window;
        let mut out = Array2::zeros((n, w));
        for g in 0..n {
            for h in 0..w {
                out[[g, h]] = self.signal.values[[g, t + 1 - w + h, DISCHARGE]];
            }
        }
        out
    }

    /// Normalized discharge at the target instant, `n`.
    pub fn target(&self, t: usize) -> Array1<f64> {
        let n = self.signal.gauge_count();
        Array1::from_shape_fn(n, |g| self.signal.values[[g, t + self.lead, DISCHARGE]])
    }

    pub fn target_time(&self, t: usize) -> NaiveDateTime {
        self.signal.timestamp(t + self.lead)
    }

    pub fn window_start_time(&self, t: usize) -> NaiveDateTime {
        self.signal.timestamp(t + 1 - self.window)
    }

    fn with_indices(&self, indices: Vec<usize>) -> SampleSet<'a> {
        SampleSet { signal: self.signal, window: self.window, lead: self.lead, indices }
    }
}

/// All extractable samples: exactly `T - L - W + 1` of them.
pub fn extract_samples(signal: &NodeSignal, window: usize, lead: usize) -> Result<SampleSet<'_>> {
    let hours = signal.hours();
    if window == 0 || lead == 0 {
        return Err(Error::domain("window and lead time must be positive"));
    }
    if hours < window + lead {
        return Err(Error::domain(format!(
            "series of {hours} hours is too short for window {window} + lead {lead}"
        )));
    }
    let indices: Vec<usize> = (window - 1..hours - lead).collect();
    Ok(SampleSet { signal, window, lead, indices })
}

/// A named train/test split over calendar years. Canonical constructors
/// reproduce the three cross-validation folds; any custom year sets are
/// accepted as long as the train years all precede the test years.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub name: String,
    pub train_years: BTreeSet<i32>,
    pub test_years: BTreeSet<i32>,
}

impl SplitSpec {
    pub fn even() -> Self {
        SplitSpec {
            name: "even".into(),
            train_years: (2000..=2014).step_by(2).collect(),
            test_years: [2016, 2017].into_iter().collect(),
        }
    }

    pub fn odd() -> Self {
        SplitSpec {
            name: "odd".into(),
            train_years: (2001..=2015).step_by(2).collect(),
            test_years: [2016, 2017].into_iter().collect(),
        }
    }

    pub fn contiguous() -> Self {
        SplitSpec {
            name: "contiguous".into(),
            train_years: (2008..=2015).collect(),
            test_years: [2016, 2017].into_iter().collect(),
        }
    }

    pub fn canonical_folds() -> Vec<SplitSpec> {
        vec![SplitSpec::even(), SplitSpec::odd(), SplitSpec::contiguous()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_years.is_empty() || self.test_years.is_empty() {
            return Err(Error::config("split needs non-empty train and test year sets"));
        }
        if !self.train_years.is_disjoint(&self.test_years) {
            return Err(Error::config("train and test years overlap"));
        }
        let max_train = *self.train_years.iter().next_back().expect("non-empty");
        let min_test = *self.test_years.iter().next().expect("non-empty");
        if max_train >= min_test {
            return Err(Error::config(format!(
                "every train year must precede every test year (got train {max_train} vs test {min_test})"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitReport {
    /// Samples whose target year belongs to neither partition.
    pub dropped_outside: usize,
    /// Train-year samples whose window or target touches a test year.
    pub dropped_leakage: usize,
}

/// Partitions samples by the calendar year of their target instant.
pub fn make_splits<'a>(
    samples: &SampleSet<'a>,
    spec: &SplitSpec,
) -> Result<(SampleSet<'a>, SampleSet<'a>, SplitReport)> {
    spec.validate()?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut report = SplitReport::default();
    for &t in &samples.indices {
        let target_year = samples.target_time(t).year();
        if spec.test_years.contains(&target_year) {
            test.push(t);
        } else if spec.train_years.contains(&target_year) {
            let first_year = samples.window_start_time(t).year();
            let touches_test =
                (first_year..=target_year).any(|y| spec.test_years.contains(&y));
            if touches_test {
                report.dropped_leakage += 1;
            } else {
                train.push(t);
            }
        } else {
            report.dropped_outside += 1;
        }
    }
    if report.dropped_outside > 0 {
        log::warn!(
            "split '{}': {} samples fall outside the declared year sets",
            spec.name,
            report.dropped_outside
        );
    }
    if train.is_empty() && test.is_empty() {
        log::warn!("split '{}' produced empty partitions", spec.name);
    }
    Ok((samples.with_indices(train), samples.with_indices(test), report))
}

/// Per-gauge relevancy of a normalized discharge window: squared mean
/// relative rate of change times the relative integrated discharge, on the
/// unnormalized values. The derivative uses second-order central differences
/// with matching one-sided stencils at the ends; the integral uses the
/// trapezoidal rule at unit spacing. Clamped to be non-negative.
pub fn relevancy_score(
    discharge_window: ArrayView2<f64>,
    params: &NormalizationParams,
) -> Result<Array1<f64>> {
    let (n, w) = discharge_window.dim();
    if w < 3 {
        return Err(Error::domain(format!(
            "relevancy score needs a window of at least 3 hours, got {w}"
        )));
    }
    let mut scores = Array1::zeros(n);
    for g in 0..n {
        let mu = params.mu[[g, DISCHARGE]];
        if !(mu > 0.0) {
            return Err(Error::domain(format!(
                "relevancy score requires a positive mean discharge (gauge row {g} has {mu})"
            )));
        }
        let sigma = params.sigma[[g, DISCHARGE]];
        let x = |h: usize| sigma * discharge_window[[g, h]] + mu;

        let mut rate_sum = 0.0;
        rate_sum += (-3.0 * x(0) + 4.0 * x(1) - x(2)) / 2.0 / mu;
        for h in 1..w - 1 {
            rate_sum += (x(h + 1) - x(h - 1)) / 2.0 / mu;
        }
        rate_sum += (3.0 * x(w - 1) - 4.0 * x(w - 2) + x(w - 3)) / 2.0 / mu;
        let mean_rate = rate_sum / w as f64;

        let mut integral = 0.0;
        for h in 0..w - 1 {
            integral += (x(h) + x(h + 1)) / 2.0;
        }

        scores[g] = (mean_rate * mean_rate * (integral / mu)).max(0.0);
    }
    Ok(scores)
}
