//! Evaluation metrics, test-case segment selection and signal alignment.
//!
//! All decibel metrics are capped to +/-100 dB so reports never carry
//! infinities.

use std::collections::BTreeMap;
use std::path::Path;

use num_complex::Complex64;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DB_CAP: f64 = 100.0;
pub const SEG_SNR_FRAME_S: f64 = 0.030;
pub const SEG_SNR_MIN_DB: f64 = -10.0;
pub const SEG_SNR_MAX_DB: f64 = 35.0;

/// Sorted, non-overlapping `[start, end)` activity intervals in seconds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VaSegments {
    pub participant_id: String,
    segments: Vec<(f64, f64)>,
}

impl VaSegments {
    /// Sorts the intervals and merges any that overlap or touch.
    pub fn new(participant_id: impl Into<String>, mut segments: Vec<(f64, f64)>) -> Result<Self> {
        if let Some(s) = segments
            .iter()
            .find(|(a, b)| !(a.is_finite() && b.is_finite() && a < b))
        {
            return Err(Error::invalid(
                "VA segment",
                format!("[{}, {}) is not a valid interval", s.0, s.1),
            ));
        }
        segments.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(segments.len());
        for (a, b) in segments {
            match merged.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => merged.push((a, b)),
            }
        }
        Ok(Self {
            participant_id: participant_id.into(),
            segments: merged,
        })
    }

    pub fn empty(participant_id: impl Into<String>) -> Self {
        Self {
            participant_id: participant_id.into(),
            segments: Vec::new(),
        }
    }

    pub fn segments(&self) -> &[(f64, f64)] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|(a, b)| b - a).sum()
    }

    pub fn contains(&self, t: f64) -> bool {
        let k = self.segments.partition_point(|s| s.0 <= t);
        k > 0 && t < self.segments[k - 1].1
    }

    pub fn union(&self, other: &VaSegments) -> VaSegments {
        let all = self
            .segments
            .iter()
            .chain(&other.segments)
            .copied()
            .collect();
        Self::new(self.participant_id.clone(), all).expect("valid inputs stay valid")
    }

    /// Portions of `self` not covered by `other`.
    pub fn subtract(&self, other: &VaSegments) -> VaSegments {
        let mut out = Vec::new();
        let cuts = &other.segments;
        let mut k = 0;
        for &(a, b) in &self.segments {
            let mut cur = a;
            while k < cuts.len() && cuts[k].1 <= cur {
                k += 1;
            }
            let mut j = k;
            while j < cuts.len() && cuts[j].0 < b {
                let (ca, cb) = cuts[j];
                if ca > cur {
                    out.push((cur, ca));
                }
                cur = cur.max(cb);
                if cur >= b {
                    break;
                }
                j += 1;
            }
            if cur < b {
                out.push((cur, b));
            }
        }
        Self {
            participant_id: self.participant_id.clone(),
            segments: out,
        }
    }

    /// `self` and `other` are both active.
    pub fn intersect(&self, other: &VaSegments) -> VaSegments {
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.segments.len() && j < other.segments.len() {
            let (a0, a1) = self.segments[i];
            let (b0, b1) = other.segments[j];
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if lo < hi {
                out.push((lo, hi));
            }
            if a1 < b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self {
            participant_id: self.participant_id.clone(),
            segments: out,
        }
    }

    /// Sample ranges `[start, end)` at `sample_rate`, clipped to `len`.
    pub fn sample_ranges(&self, sample_rate: f64, len: usize) -> Vec<(usize, usize)> {
        self.segments
            .iter()
            .filter_map(|&(a, b)| {
                let s0 = ((a * sample_rate).round().max(0.0) as usize).min(len);
                let s1 = ((b * sample_rate).round().max(0.0) as usize).min(len);
                (s1 > s0).then_some((s0, s1))
            })
            .collect()
    }
}

/// The two evaluation subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestCase {
    /// Target active with no competing talker.
    Noise,
    /// Target active regardless of other talkers.
    NoiseAndInterferer,
}

impl std::str::FromStr for TestCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "noise" => Ok(TestCase::Noise),
            "noiseandinterferer" | "noiseinterferer" => Ok(TestCase::NoiseAndInterferer),
            other => Err(Error::invalid(
                "test case",
                format!("{other:?} (expected noise | noise-and-interferer)"),
            )),
        }
    }
}

/// Target activity for one test case, excluding any time the wearer talks.
pub fn select_segments(
    va: &BTreeMap<String, VaSegments>,
    target_id: &str,
    wearer_id: &str,
    case: TestCase,
) -> Result<VaSegments> {
    let target = va
        .get(target_id)
        .ok_or_else(|| Error::UnknownParticipant(target_id.to_string()))?;
    let mut selected = target.clone();
    if case == TestCase::Noise {
        for (id, segs) in va {
            if id != target_id && id != wearer_id {
                selected = selected.subtract(segs);
            }
        }
    }
    if let Some(wearer) = va.get(wearer_id).filter(|_| wearer_id != target_id) {
        selected = selected.subtract(wearer);
    }
    Ok(selected)
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn ratio_db(num: f64, den: f64) -> Result<f64> {
    match (num > 0.0, den > 0.0) {
        (_, false) if num > 0.0 => Ok(DB_CAP),
        (false, true) => Ok(-DB_CAP),
        (true, true) => Ok((10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)),
        _ => Err(Error::UndefinedMetric(
            "signal and residual are both zero".into(),
        )),
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim("metric inputs", a.len(), b.len()));
    }
    Ok(())
}

/// `10 log10(sum s^2 / sum r^2)`, capped at +/-100 dB.
pub fn snr_db(signal: &[f64], residual: &[f64]) -> Result<f64> {
    check_len(signal, residual)?;
    ratio_db(energy(signal), energy(residual))
}

/// Mean of per-frame SNRs over the active segments. Frames of `frame_s`
/// seconds tile each segment (partial tails are dropped); per-frame values
/// are clamped to [-10, 35] dB and frames with zero signal energy skipped.
pub fn seg_snr_db(
    signal: &[f64],
    residual: &[f64],
    active: &VaSegments,
    frame_s: f64,
    sample_rate: f64,
) -> Result<f64> {
    check_len(signal, residual)?;
    if !(frame_s > 0.0) {
        return Err(Error::invalid("SegSNR frame", format!("{frame_s} s")));
    }
    let frame = ((frame_s * sample_rate).round() as usize).max(1);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (s0, s1) in active.sample_ranges(sample_rate, signal.len()) {
        let mut start = s0;
        while start + frame <= s1 {
            let es = energy(&signal[start..start + frame]);
            if es > 0.0 {
                let er = energy(&residual[start..start + frame]);
                let snr = if er > 0.0 {
                    10.0 * (es / er).log10()
                } else {
                    SEG_SNR_MAX_DB
                };
                sum += snr.clamp(SEG_SNR_MIN_DB, SEG_SNR_MAX_DB);
                count += 1;
            }
            start += frame;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("no active frames for SegSNR".into()));
    }
    Ok(sum / count as f64)
}

/// Scale-invariant SDR of `estimate` against `reference`.
pub fn si_sdr_db(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    check_len(estimate, reference)?;
    let ref_energy = energy(reference);
    if !(ref_energy > 0.0) {
        return Err(Error::UndefinedMetric("zero reference for SI-SDR".into()));
    }
    let alpha = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| e * r)
        .sum::<f64>()
        / ref_energy;
    let target = alpha * alpha * ref_energy;
    let distortion: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| (e - alpha * r).powi(2))
        .sum();
    match (target > 0.0, distortion > 0.0) {
        (true, false) => Ok(DB_CAP),
        (false, _) => Ok(-DB_CAP),
        (true, true) => Ok((10.0 * (target / distortion).log10()).clamp(-DB_CAP, DB_CAP)),
    }
}

/// Lag in `[-max_lag, max_lag]` of the absolute peak of the PHAT-weighted
/// cross-correlation. Positive lag means `y` lags `x`.
pub fn gcc_phat_delay(x: &[f64], y: &[f64], max_lag: usize) -> Result<i64> {
    if max_lag == 0 {
        return Err(Error::invalid("GCC-PHAT", "max_lag must be >= 1"));
    }
    if x.len() < 2 * max_lag || y.len() < 2 * max_lag {
        return Err(Error::invalid(
            "GCC-PHAT",
            format!(
                "inputs ({}, {}) shorter than 2 * max_lag = {}",
                x.len(),
                y.len(),
                2 * max_lag
            ),
        ));
    }
    let n = (x.len() + y.len()).next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let spectrum = |s: &[f64]| {
        let mut buf = fwd.make_input_vec();
        buf[..s.len()].copy_from_slice(s);
        let mut out = fwd.make_output_vec();
        fwd.process(&mut buf, &mut out).expect("plan sizes");
        out
    };
    let xs = spectrum(x);
    let ys = spectrum(y);
    let mut cross: Vec<Complex64> = xs
        .iter()
        .zip(&ys)
        .map(|(a, b)| {
            let c = a.conj() * b;
            let m = c.norm();
            if m < 1e-12 {
                Complex64::new(0.0, 0.0)
            } else {
                c / m
            }
        })
        .collect();
    if cross.iter().all(|c| c.norm() == 0.0) {
        return Err(Error::Degenerate(
            "GCC-PHAT cross-spectrum is all zero".into(),
        ));
    }
    let last = cross.len() - 1;
    cross[0].im = 0.0;
    cross[last].im = 0.0;
    let mut corr = inv.make_output_vec();
    inv.process(&mut cross, &mut corr).expect("plan sizes");
    let max_lag = max_lag.min(n / 2 - 1) as i64;
    let mut best = (0i64, f64::NEG_INFINITY);
    for lag in -max_lag..=max_lag {
        let v = corr[lag.rem_euclid(n as i64) as usize].abs();
        if v > best.1 {
            best = (lag, v);
        }
    }
    Ok(best.0)
}

/// `x` delayed by `shift` samples (negative advances), zero-filled, cut or
/// padded to `len`.
pub fn shift_signal(x: &[f64], shift: i64, len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| {
            let src = n as i64 - shift;
            if src >= 0 && (src as usize) < x.len() {
                x[src as usize]
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// `x` shifted onto `reference`, same length as `reference`.
    pub samples: Vec<f64>,
    /// GCC-PHAT refinement after the coarse shift.
    pub refined_lag: i64,
    /// Total applied delay, `coarse_offset + refined_lag`.
    pub shift: i64,
}

/// Coarse shift by `coarse_offset`, then refine with the GCC-PHAT peak
/// within `max_lag`.
pub fn align_to_reference(
    x: &[f64],
    reference: &[f64],
    coarse_offset: i64,
    max_lag: usize,
) -> Result<Alignment> {
    let coarse = shift_signal(x, coarse_offset, reference.len());
    let refined_lag = gcc_phat_delay(&coarse, reference, max_lag)?;
    let shift = coarse_offset + refined_lag;
    Ok(Alignment {
        samples: shift_signal(x, shift, reference.len()),
        refined_lag,
        shift,
    })
}

/// Concatenation of the samples inside `segments`.
pub fn gather_segments(x: &[f64], segments: &VaSegments, sample_rate: f64) -> Vec<f64> {
    segments
        .sample_ranges(sample_rate, x.len())
        .into_iter()
        .flat_map(|(a, b)| x[a..b].iter().copied())
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VaRow {
    participant_id: String,
    start_s: f64,
    end_s: f64,
}

/// Reads the VA JSON array `[{participant_id, start_s, end_s}, ...]`.
pub fn read_va_json(path: impl AsRef<Path>) -> Result<BTreeMap<String, VaSegments>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_va_json(&text)
}

pub fn parse_va_json(text: &str) -> Result<BTreeMap<String, VaSegments>> {
    let rows: Vec<VaRow> = serde_json::from_str(text)?;
    let mut grouped: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        grouped
            .entry(r.participant_id)
            .or_default()
            .push((r.start_s, r.end_s));
    }
    grouped
        .into_iter()
        .map(|(id, segs)| Ok((id.clone(), VaSegments::new(id, segs)?)))
        .collect()
}

pub fn va_to_json(va: &BTreeMap<String, VaSegments>) -> String {
    let rows: Vec<VaRow> = va
        .values()
        .flat_map(|v| {
            v.segments.iter().map(|&(a, b)| VaRow {
                participant_id: v.participant_id.clone(),
                start_s: a,
                end_s: b,
            })
        })
        .collect();
    serde_json::to_string_pretty(&rows).expect("VA rows serialize")
}
