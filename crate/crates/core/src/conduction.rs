//! QRS detection, P/QRS/T delineation and morphology tagging.
//!
//! These produce the beat-level evidence that the rhythm interpretation
//! works on. Every threshold is a field of [`ConductionParams`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::Record;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConductionParams {
    /// Detection threshold as a fraction of the running peak median.
    pub threshold_factor: f64,
    /// Number of recent accepted peaks in the running median.
    pub threshold_history: usize,
    pub refractory_ms: f64,
    pub integration_ms: f64,
    /// Fraction of peak slope below which the QRS boundary is placed.
    pub slope_fraction: f64,
    pub qrs_max_half_ms: f64,
    /// P/T presence threshold, relative to the beat's QRS amplitude
    /// (0.05 mV for a 1 mV complex).
    pub wave_presence: f64,
    pub p_window_ms: f64,
    pub p_min_ms: f64,
    pub p_max_ms: f64,
    pub t_start_ms: f64,
    pub t_end_ms: f64,
    pub template_ms: f64,
    pub cluster_correlation: f64,
    pub ventricular_distance: f64,
    pub fusion_distance: f64,
    pub wide_qrs_ms: f64,
    pub ventricular_width_ratio: f64,
}

impl Default for ConductionParams {
    fn default() -> Self {
        ConductionParams {
            threshold_factor: 0.4,
            threshold_history: 8,
            refractory_ms: 250.0,
            integration_ms: 150.0,
            slope_fraction: 0.1,
            qrs_max_half_ms: 80.0,
            wave_presence: 0.05,
            p_window_ms: 250.0,
            p_min_ms: 40.0,
            p_max_ms: 150.0,
            t_start_ms: 80.0,
            t_end_ms: 400.0,
            template_ms: 120.0,
            cluster_correlation: 0.8,
            ventricular_distance: 0.5,
            fusion_distance: 0.3,
            wide_qrs_ms: 110.0,
            ventricular_width_ratio: 1.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BeatTag {
    Normal,
    Ventricular,
    Fusion,
    Spurious,
}

impl BeatTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BeatTag::Normal => "NORMAL",
            BeatTag::Ventricular => "VENTRICULAR",
            BeatTag::Fusion => "FUSION",
            BeatTag::Spurious => "SPURIOUS",
        }
    }
}

impl fmt::Display for BeatTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BeatTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NORMAL" => Ok(BeatTag::Normal),
            "VENTRICULAR" => Ok(BeatTag::Ventricular),
            "FUSION" => Ok(BeatTag::Fusion),
            "SPURIOUS" => Ok(BeatTag::Spurious),
            other => Err(Error::InvalidArgument(format!("unknown beat tag {other:?}"))),
        }
    }
}

/// A delineated P or T wave. `amp` is signed, in mV, relative to the local reference level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub onset: usize,
    pub peak: usize,
    pub offset: usize,
    pub amp: f64,
}

impl Wave {
    pub fn duration(&self) -> usize {
        self.offset - self.onset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatObservation {
    pub qrs_onset: usize,
    pub qrs_peak: usize,
    pub qrs_offset: usize,
    /// Absolute amplitude of the main deflection, mV.
    pub qrs_amp: f64,
    /// +1 or -1.
    pub qrs_polarity: i8,
    pub p: Option<Wave>,
    pub t: Option<Wave>,
    pub tag: BeatTag,
    pub morph_dist: f64,
}

impl BeatObservation {
    pub fn qrs_duration(&self) -> usize {
        self.qrs_offset - self.qrs_onset
    }

    pub fn signed_qrs_amp(&self) -> f64 {
        self.qrs_amp * self.qrs_polarity as f64
    }

    /// Checks the fiducial ordering invariants.
    pub fn is_well_formed(&self) -> bool {
        let qrs_ok = self.qrs_onset < self.qrs_peak && self.qrs_peak < self.qrs_offset;
        let p_ok = self.p.map_or(true, |p| {
            p.onset < p.peak && p.peak < p.offset && p.offset <= self.qrs_onset
        });
        let t_ok = self.t.map_or(true, |t| {
            t.onset < t.peak && t.peak < t.offset && t.onset >= self.qrs_offset
        });
        qrs_ok && p_ok && t_ok && self.morph_dist.is_finite()
    }

    /// Tab-separated annotation row: `qrs_onset qrs_peak qrs_offset tag p_peak|- t_peak|-`.
    pub fn annotation_row(&self) -> String {
        let opt = |w: Option<Wave>| w.map_or_else(|| "-".to_string(), |w| w.peak.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.qrs_onset,
            self.qrs_peak,
            self.qrs_offset,
            self.tag,
            opt(self.p),
            opt(self.t)
        )
    }
}

/// Unit-energy, zero-mean QRS waveform centered on the R peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QrsTemplate {
    pub waveform: Vec<f64>,
}

impl QrsTemplate {
    pub fn energy(&self) -> f64 {
        self.waveform.iter().map(|x| x * x).sum()
    }
}

fn ms(fs: u32, ms: f64) -> usize {
    (ms * fs as f64 / 1000.0).round() as usize
}

/// Cascaded difference and moving average: a crude 5-25 Hz band-pass at 300 Hz.
fn band_limit(x: &[f64], fs: u32) -> Vec<f64> {
    let n = x.len();
    let h = ms(fs, 10.0).max(1);
    let d: Vec<f64> = (0..n)
        .map(|i| x[(i + h).min(n - 1)] - x[i.saturating_sub(h)])
        .collect();
    stats::moving_average(&d, ms(fs, 33.0).max(1))
}

/// Pan-Tompkins-style QRS detector. Returns R-peak indices in increasing order.
pub fn detect_qrs(r: &Record, params: &ConductionParams) -> Result<Vec<usize>> {
    if r.duration_s() < 2.0 {
        return Err(Error::Evidence(format!(
            "record {} is {:.2} s long; QRS detection needs at least 2 s",
            r.id,
            r.duration_s()
        )));
    }
    let x = &r.samples;
    let n = x.len();
    let fs = r.fs;
    let squared: Vec<f64> = band_limit(x, fs).iter().map(|v| v * v).collect();
    let mwi = stats::moving_average(&squared, ms(fs, params.integration_ms).max(1));

    // Seed the running median with chunk maxima from the first seconds.
    let chunk = (2 * fs) as usize;
    let mut history: Vec<f64> = mwi
        .chunks(chunk)
        .take(params.threshold_history)
        .map(|c| c.iter().copied().fold(0.0, f64::max))
        .collect();
    let refractory = ms(fs, params.refractory_ms);

    let mut accepted: Vec<(usize, f64)> = Vec::new();
    for i in 1..n.saturating_sub(1) {
        let v = mwi[i];
        if !(v > mwi[i - 1] && v >= mwi[i + 1]) {
            continue;
        }
        let threshold = params.threshold_factor * stats::median_or(&history, 0.0);
        if v <= threshold || v <= 0.0 {
            continue;
        }
        match accepted.last_mut() {
            Some(last) if i - last.0 < refractory => {
                if v > last.1 {
                    *last = (i, v);
                    if let Some(h) = history.last_mut() {
                        *h = v;
                    }
                }
            }
            _ => {
                accepted.push((i, v));
                history.push(v);
                if history.len() > params.threshold_history {
                    history.remove(0);
                }
            }
        }
    }

    // Locate the main deflection around each integrator peak.
    let search = ms(fs, 100.0);
    let mut peaks: Vec<(usize, f64)> = Vec::with_capacity(accepted.len());
    for (i, _) in accepted {
        let lo = i.saturating_sub(search).max(1);
        let hi = (i + search).min(n - 2);
        if lo > hi {
            continue;
        }
        let reference = stats::median_or(&x[lo..=hi], 0.0);
        let (best, dev) = (lo..=hi)
            .map(|k| (k, (x[k] - reference).abs()))
            .fold((lo, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
        match peaks.last_mut() {
            Some(last) if best <= last.0 || best - last.0 < refractory => {
                if dev > last.1 {
                    *last = (best, dev);
                }
            }
            _ => peaks.push((best, dev)),
        }
    }
    // Replacing a peak can shrink the gap to its predecessor; resolve until stable.
    loop {
        let mut changed = false;
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(peaks.len());
        for p in peaks.iter().copied() {
            match out.last_mut() {
                Some(last) if p.0 - last.0 < refractory => {
                    changed = true;
                    if p.1 > last.1 {
                        *last = p;
                    }
                }
                _ => out.push(p),
            }
        }
        peaks = out;
        if !changed {
            break;
        }
    }
    Ok(peaks.into_iter().map(|(i, _)| i).collect())
}

fn slope(x: &[f64], i: usize, h: usize) -> f64 {
    let n = x.len();
    x[(i + h).min(n - 1)] - x[i.saturating_sub(h)]
}

/// Delineates a P or T wave as the largest deflection from `reference` in `[lo, hi]`.
fn find_wave(x: &[f64], lo: usize, hi: usize, reference: f64, threshold: f64) -> Option<Wave> {
    if hi <= lo + 1 {
        return None;
    }
    let (peak, dev) = (lo..=hi)
        .map(|k| (k, x[k] - reference))
        .fold((lo, 0.0f64), |acc, c| if c.1.abs() > acc.1.abs() { c } else { acc });
    if dev.abs() <= threshold {
        return None;
    }
    let level = 0.2 * dev.abs();
    let mut onset = peak;
    while onset > lo && (x[onset] - reference).abs() >= level {
        onset -= 1;
    }
    let mut offset = peak;
    while offset < hi && (x[offset] - reference).abs() >= level {
        offset += 1;
    }
    if onset == peak || offset == peak {
        return None;
    }
    Some(Wave {
        onset,
        peak,
        offset,
        amp: dev,
    })
}

/// Delineates one beat. `prev_offset` and `next_onset` are exclusive bounds
/// the beat's waves must stay within.
pub fn delineate_beat(
    r: &Record,
    qrs_peak: usize,
    prev_offset: usize,
    next_onset: usize,
    params: &ConductionParams,
) -> Result<BeatObservation> {
    let x = &r.samples;
    let n = x.len();
    let next_onset = next_onset.min(n);
    if !(prev_offset < qrs_peak && qrs_peak + 1 < next_onset) {
        return Err(Error::Evidence(format!(
            "beat at {qrs_peak} outside its window ({prev_offset}, {next_onset})"
        )));
    }
    let fs = r.fs;
    let h = ((0.005 * fs as f64).round() as usize).max(1);
    let half = ms(fs, params.qrs_max_half_ms).max(1);
    let lo = qrs_peak.saturating_sub(half).max(prev_offset + 1);
    let hi = (qrs_peak + half).min(next_onset - 1);

    let peak_slope = (lo..=hi).map(|i| slope(x, i, h).abs()).fold(0.0, f64::max);
    let cutoff = params.slope_fraction * peak_slope;

    let left_max = (lo..qrs_peak)
        .map(|i| (i, slope(x, i, h).abs()))
        .fold((qrs_peak, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc })
        .0;
    let mut onset = left_max.min(qrs_peak - 1);
    while onset > lo && slope(x, onset, h).abs() >= cutoff {
        onset -= 1;
    }
    let onset = onset.max(lo).min(qrs_peak - 1);

    let right_max = (qrs_peak + 1..=hi)
        .map(|i| (i, slope(x, i, h).abs()))
        .fold((qrs_peak, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc })
        .0;
    let mut offset = right_max.max(qrs_peak + 1);
    while offset < hi && slope(x, offset, h).abs() >= cutoff {
        offset += 1;
    }
    let offset = offset.min(hi).max(qrs_peak + 1);

    let reference = 0.5 * (x[onset] + x[offset]);
    let dev = x[qrs_peak] - reference;
    let qrs_amp = dev.abs();
    let qrs_polarity = if dev < 0.0 { -1 } else { 1 };
    let presence = params.wave_presence * qrs_amp;

    let t_lo = offset + ms(fs, params.t_start_ms);
    let t_hi = (offset + ms(fs, params.t_end_ms)).min(next_onset - 1);
    let t = if t_lo < t_hi {
        find_wave(x, t_lo, t_hi, x[offset], presence)
    } else {
        None
    };

    let p_lo = onset.saturating_sub(ms(fs, params.p_window_ms)).max(prev_offset + 1);
    let p = if p_lo < onset {
        find_wave(x, p_lo, onset, x[onset], presence).filter(|w| {
            let d = r.samples_to_ms(w.duration() as f64);
            d >= params.p_min_ms && d <= params.p_max_ms
        })
    } else {
        None
    };

    Ok(BeatObservation {
        qrs_onset: onset,
        qrs_peak,
        qrs_offset: offset,
        qrs_amp,
        qrs_polarity,
        p,
        t,
        tag: BeatTag::Normal,
        morph_dist: 0.0,
    })
}

/// Delineates every detected peak, chaining window bounds between neighbours.
pub fn delineate_all(
    r: &Record,
    peaks: &[usize],
    params: &ConductionParams,
) -> Vec<BeatObservation> {
    let n = r.len();
    let guard = ms(r.fs, params.qrs_max_half_ms);
    let mut beats: Vec<BeatObservation> = Vec::with_capacity(peaks.len());
    for (k, &peak) in peaks.iter().enumerate() {
        // The previous beat's last wave bounds this beat's P search.
        let prev = beats
            .last()
            .map(|b| b.t.map_or(b.qrs_offset, |t| t.offset))
            .unwrap_or(0);
        let next = peaks
            .get(k + 1)
            .map(|&q| q.saturating_sub(guard).max(peak + 2))
            .unwrap_or(n);
        if peak == 0 || prev >= peak {
            continue;
        }
        if let Ok(b) = delineate_beat(r, peak, prev, next, params) {
            beats.push(b);
        }
    }
    beats
}

fn snippet(x: &[f64], center: usize, half: usize) -> Vec<f64> {
    let n = x.len() as isize;
    (-(half as isize)..=half as isize)
        .map(|o| {
            let i = (center as isize + o).clamp(0, n - 1);
            x[i as usize]
        })
        .collect()
}

fn unit_energy(v: &[f64]) -> Vec<f64> {
    let m = stats::mean(v).unwrap_or(0.0);
    let centered: Vec<f64> = v.iter().map(|x| x - m).collect();
    let e = centered.iter().map(|x| x * x).sum::<f64>().sqrt();
    if e > 0.0 {
        centered.iter().map(|x| x / e).collect()
    } else {
        // Flat input: fall back to a unit impulse at the center.
        let mut out = vec![0.0; v.len()];
        out[v.len() / 2] = 1.0;
        out
    }
}

/// Result of morphology analysis: template, per-beat distances, per-beat tags.
pub type TemplateAnalysis = (QrsTemplate, Vec<f64>, Vec<BeatTag>);

/// Builds the dominant QRS template and tags each beat by morphology and width.
pub fn dominant_template(
    r: &Record,
    beats: &[BeatObservation],
    params: &ConductionParams,
) -> Result<TemplateAnalysis> {
    if beats.len() < 3 {
        return Err(Error::Evidence(format!(
            "morphology analysis needs at least 3 beats, got {}",
            beats.len()
        )));
    }
    let half = ms(r.fs, params.template_ms / 2.0);
    let snippets: Vec<Vec<f64>> = beats
        .iter()
        .map(|b| snippet(&r.samples, b.qrs_peak, half))
        .collect();

    // Leader clustering on correlation with running cluster sums.
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, s) in snippets.iter().enumerate() {
        let best = sums
            .iter()
            .enumerate()
            .map(|(k, c)| (k, stats::correlation(s, c)))
            .fold(None, |acc: Option<(usize, f64)>, c| match acc {
                Some(a) if a.1 >= c.1 => Some(a),
                _ => Some(c),
            });
        match best {
            Some((k, corr)) if corr >= params.cluster_correlation => {
                for (a, b) in sums[k].iter_mut().zip(s) {
                    *a += b;
                }
                members[k].push(i);
            }
            _ => {
                sums.push(s.clone());
                members.push(vec![i]);
            }
        }
    }
    let largest = (0..members.len())
        .fold(0, |best, k| if members[k].len() > members[best].len() { k } else { best });
    let template = QrsTemplate {
        waveform: unit_energy(&sums[largest]),
    };

    let durations: Vec<f64> = beats
        .iter()
        .map(|b| r.samples_to_ms(b.qrs_duration() as f64))
        .collect();
    let median_duration = stats::median_or(&durations, 0.0);
    let (dists, tags) = beats
        .iter()
        .map(|b| classify_beat(r, b, &template, median_duration, params))
        .unzip();
    Ok((template, dists, tags))
}

/// Morphology distance and tag of one beat against a template, given the
/// record's median QRS duration in ms.
pub fn classify_beat(
    r: &Record,
    beat: &BeatObservation,
    template: &QrsTemplate,
    median_duration_ms: f64,
    params: &ConductionParams,
) -> (f64, BeatTag) {
    let half = template.waveform.len() / 2;
    let s = snippet(&r.samples, beat.qrs_peak, half);
    let d = 1.0 - stats::correlation(&s, &template.waveform);
    let d = if d.abs() < 1e-12 { 0.0 } else { d.clamp(0.0, 2.0) };
    let dur = r.samples_to_ms(beat.qrs_duration() as f64);
    let tag = if d > params.ventricular_distance
        && dur > params.wide_qrs_ms
        && dur > params.ventricular_width_ratio * median_duration_ms
    {
        BeatTag::Ventricular
    } else if d > params.fusion_distance
        && d <= params.ventricular_distance
        && dur > median_duration_ms
    {
        BeatTag::Fusion
    } else {
        BeatTag::Normal
    };
    (d, tag)
}

/// TP segments `[start, end)` between consecutive beats: from the T offset
/// (or QRS offset) of one beat to the P onset (or QRS onset) of the next.
/// Entry `k` lies between beats `k` and `k + 1`; empty segments are `None`.
pub fn tp_segments(beats: &[BeatObservation], record_len: usize) -> Vec<Option<(usize, usize)>> {
    beats
        .windows(2)
        .map(|w| {
            let start = w[0].t.map_or(w[0].qrs_offset, |t| t.offset);
            let end = w[1].p.map_or(w[1].qrs_onset, |p| p.onset).min(record_len);
            (end > start).then_some((start, end))
        })
        .collect()
}

/// Detection, delineation and (with at least 3 beats) morphology tagging.
pub fn observe(r: &Record, params: &ConductionParams) -> Result<Vec<BeatObservation>> {
    let peaks = detect_qrs(r, params)?;
    let mut beats = delineate_all(r, &peaks, params);
    apply_template(r, &mut beats, params);
    Ok(beats)
}

/// Fills `morph_dist` and `tag` in place when there are enough beats.
pub fn apply_template(r: &Record, beats: &mut [BeatObservation], params: &ConductionParams) {
    if let Ok((_, dists, tags)) = dominant_template(r, beats, params) {
        for ((b, d), t) in beats.iter_mut().zip(dists).zip(tags) {
            b.morph_dist = d;
            b.tag = t;
        }
    }
}
