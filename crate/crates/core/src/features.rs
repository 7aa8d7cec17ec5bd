//! Record-level and per-beat feature extraction.
//!
//! The global vector has a fixed 70-entry order ([`GLOBAL_FEATURES`]): 22
//! rhythm, 26 morphological, 14 quality entries and 8 anomaly flags. Each
//! entry declares how it responds to scaling the record's amplitude.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conduction::{self, BeatObservation, BeatTag};
use crate::error::{Error, Result};
use crate::interpretation::{Interpretation, Pattern};
use crate::signal_io::Record;
use crate::spectral::{self, Spectrum, NUM_BINS};
use crate::stats;

pub const NUM_GLOBAL_FEATURES: usize = 70;
pub const NUM_BEAT_FEATURES: usize = 22;
pub const NUM_RR_STATISTICS: usize = 16;

/// Response of a feature to multiplying the record by `c > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scaling {
    /// Multiplied by `c`.
    Amplitude,
    /// Unchanged.
    Invariant,
}

use Scaling::{Amplitude as Amp, Invariant as Inv};

/// Canonical global feature order: `(name, scaling)`.
pub const GLOBAL_FEATURES: [(&str, Scaling); NUM_GLOBAL_FEATURES] = [
    ("r01_rr_min_ms", Inv),
    ("r02_rr_max_ms", Inv),
    ("r03_rr_median_ms", Inv),
    ("r04_rr_mad_ms", Inv),
    ("r05_rr_mean_ms", Inv),
    ("r06_rr_std_ms", Inv),
    ("r07_rmssd_ms", Inv),
    ("r08_pnn5", Inv),
    ("r09_pnn10", Inv),
    ("r10_pnn50", Inv),
    ("r11_pnn100", Inv),
    ("r12_hr_mean_bpm", Inv),
    ("r13_rr_mad_over_median", Inv),
    ("r14_abs_drr_median_ms", Inv),
    ("r15_rr_cv", Inv),
    ("r16_rr_outlier_frac", Inv),
    ("r17_episode_count", Inv),
    ("r18_episode_duration_median_s", Inv),
    ("r19_sinus_beat_frac", Inv),
    ("r20_afib_beat_frac", Inv),
    ("r21_unexplained_beat_frac", Inv),
    ("r22_other_rhythm_beat_frac", Inv),
    ("m01_p_presence_frac", Inv),
    ("m02_p_duration_median_ms", Inv),
    ("m03_p_amp_median", Amp),
    ("m04_pr_median_ms", Inv),
    ("m05_pr_mad_ms", Inv),
    ("m06_qrs_duration_median_ms", Inv),
    ("m07_qrs_duration_mad_ms", Inv),
    ("m08_qrs_amp_median", Amp),
    ("m09_qrs_amp_mad", Amp),
    ("m10_qrs_positive_frac", Inv),
    ("m11_morph_dist_median", Inv),
    ("m12_wide_qrs_frac", Inv),
    ("m13_t_presence_frac", Inv),
    ("m14_t_duration_median_ms", Inv),
    ("m15_t_amp_median", Amp),
    ("m16_qt_median_ms", Inv),
    ("m17_qt_mad_ms", Inv),
    ("m18_t_positive_frac", Inv),
    ("m19_tp_median_ms", Inv),
    ("m20_ventricular_frac", Inv),
    ("m21_fusion_frac", Inv),
    ("m22_long_pr_frac", Inv),
    ("m23_morph_dist_max", Inv),
    ("m24_qrs_spectral_peak_hz", Inv),
    ("m25_tp_spectral_peak_hz", Inv),
    ("m26_tp_spectral_prominence", Inv),
    ("q01_tp_profile_per_s_median", Amp),
    ("q02_p_window_profile_median", Amp),
    ("q03_p_window_over_beat_profile", Inv),
    ("q04_signal_profile_per_s", Amp),
    ("q05_unexplained_time_frac", Inv),
    ("q06_deleted_frac", Inv),
    ("q07_inserted_frac", Inv),
    ("q08_amplitude_range", Amp),
    ("q09_hf_energy_ratio", Inv),
    ("q10_beat_profile_median", Amp),
    ("q11_beat_profile_mad_over_median", Inv),
    ("q12_low_profile_beat_frac", Inv),
    ("q13_noise_over_qrs_per_s", Inv),
    ("q14_duration_s", Inv),
    ("a01_tachycardia", Inv),
    ("a02_bradycardia", Inv),
    ("a03_wide_qrs", Inv),
    ("a04_vent_or_fusion", Inv),
    ("a05_extrasystole", Inv),
    ("a06_long_pr", Inv),
    ("a07_vent_tachy", Inv),
    ("a08_flutter", Inv),
];

/// Per-beat feature order: `(name, scaling)`.
pub const BEAT_FEATURES: [(&str, Scaling); NUM_BEAT_FEATURES] = [
    ("b01_rr_prev_ms", Inv),
    ("b02_rr_next_ms", Inv),
    ("b03_drr_prev_ms", Inv),
    ("b04_drr_next_ms", Inv),
    ("b05_rr_prev_over_median", Inv),
    ("b06_p_present", Inv),
    ("b07_p_duration_ms", Inv),
    ("b08_p_amp", Amp),
    ("b09_pr_ms", Inv),
    ("b10_qrs_duration_ms", Inv),
    ("b11_qrs_amp", Amp),
    ("b12_qrs_polarity", Inv),
    ("b13_morph_dist", Inv),
    ("b14_qt_ms", Inv),
    ("b15_t_duration_ms", Inv),
    ("b16_t_amp", Amp),
    ("b17_t_polarity", Inv),
    ("b18_p_window_profile", Amp),
    ("b19_tp_profile_per_s", Amp),
    ("b20_tag_normal", Inv),
    ("b21_tag_ventricular", Inv),
    ("b22_tag_fusion", Inv),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureParams {
    pub p_window_ms: f64,
    pub beat_window_ms: f64,
    pub wide_qrs_ms: f64,
    pub long_pr_ms: f64,
    pub tachycardia_bpm: f64,
    pub bradycardia_bpm: f64,
    pub extrasystole_short: f64,
    pub extrasystole_long: f64,
    /// RR intervals on each side for local medians.
    pub local_rr_radius: usize,
    pub rr_outlier_tolerance: f64,
    pub low_profile_ratio: f64,
    pub min_tp_segment_ms: f64,
    pub spectrum_min_hz: f64,
    pub spectrum_max_hz: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            p_window_ms: 250.0,
            beat_window_ms: 250.0,
            wide_qrs_ms: 110.0,
            long_pr_ms: 210.0,
            tachycardia_bpm: 100.0,
            bradycardia_bpm: 50.0,
            extrasystole_short: 0.8,
            extrasystole_long: 1.1,
            local_rr_radius: 4,
            rr_outlier_tolerance: 0.2,
            low_profile_ratio: 0.5,
            min_tp_segment_ms: 200.0,
            spectrum_min_hz: 1.0,
            spectrum_max_hz: 40.0,
        }
    }
}

/// Sum of absolute first differences of a segment, in mV.
pub fn profile(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Evidence(format!(
            "profile needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    Ok(samples.windows(2).map(|w| (w[1] - w[0]).abs()).sum())
}

fn rr_ms(fs: u32, beats: &[BeatObservation]) -> Vec<f64> {
    beats
        .windows(2)
        .map(|w| (w[1].qrs_peak - w[0].qrs_peak) as f64 * 1000.0 / fs as f64)
        .collect()
}

fn fraction(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

/// Rhythm statistics r01-r16 from consecutive QRS peaks.
pub fn rr_statistics(fs: u32, beats: &[BeatObservation], params: &FeatureParams) -> Result<[f64; NUM_RR_STATISTICS]> {
    if beats.len() < 3 {
        return Err(Error::Evidence(format!(
            "RR statistics need at least 3 beats, got {}",
            beats.len()
        )));
    }
    let rr = rr_ms(fs, beats);
    let drr: Vec<f64> = rr.windows(2).map(|w| w[1] - w[0]).collect();
    let abs_drr: Vec<f64> = drr.iter().map(|d| d.abs()).collect();
    let pnn = |x: f64| fraction(abs_drr.iter().filter(|&&d| d > x).count(), abs_drr.len());
    let median = stats::median_or(&rr, 0.0);
    let mad = stats::mad(&rr).unwrap_or(0.0);
    let mean = stats::mean(&rr).unwrap_or(0.0);
    let std = stats::std_dev(&rr).unwrap_or(0.0);
    let rmssd = if drr.is_empty() {
        0.0
    } else {
        (drr.iter().map(|d| d * d).sum::<f64>() / drr.len() as f64).sqrt()
    };
    let outliers = rr
        .iter()
        .filter(|&&v| (v / median - 1.0).abs() > params.rr_outlier_tolerance)
        .count();
    Ok([
        rr.iter().copied().fold(f64::INFINITY, f64::min),
        rr.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        median,
        mad,
        mean,
        std,
        rmssd,
        pnn(5.0),
        pnn(10.0),
        pnn(50.0),
        pnn(100.0),
        60000.0 / mean,
        mad / median,
        stats::median_or(&abs_drr, 0.0),
        std / mean,
        fraction(outliers, rr.len()),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AnomalyFlags {
    pub tachycardia: bool,
    pub bradycardia: bool,
    pub wide_qrs: bool,
    pub vent_or_fusion: bool,
    pub extrasystole: bool,
    pub long_pr: bool,
    pub vent_tachy: bool,
    pub flutter: bool,
}

impl AnomalyFlags {
    pub fn to_array(self) -> [bool; 8] {
        [
            self.tachycardia,
            self.bradycardia,
            self.wide_qrs,
            self.vent_or_fusion,
            self.extrasystole,
            self.long_pr,
            self.vent_tachy,
            self.flutter,
        ]
    }
}

/// Morphology summaries the anomaly rules need.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MorphAggregates {
    pub median_qrs_ms: f64,
    /// `None` when no beat has a P wave.
    pub median_pr_ms: Option<f64>,
}

impl MorphAggregates {
    pub fn from_beats(fs: u32, beats: &[BeatObservation]) -> Self {
        let to_ms = |n: usize| n as f64 * 1000.0 / fs as f64;
        let qrs: Vec<f64> = beats.iter().map(|b| to_ms(b.qrs_duration())).collect();
        let pr: Vec<f64> = beats
            .iter()
            .filter_map(|b| b.p.map(|p| to_ms(b.qrs_onset - p.onset)))
            .collect();
        MorphAggregates {
            median_qrs_ms: stats::median_or(&qrs, 0.0),
            median_pr_ms: stats::median(&pr),
        }
    }
}

/// Median of the RR intervals within `radius` of interval `k` (inclusive).
fn local_median(rr: &[f64], k: usize, radius: usize) -> f64 {
    let lo = k.saturating_sub(radius);
    let hi = (k + radius + 1).min(rr.len());
    stats::median_or(&rr[lo..hi], 0.0)
}

pub fn detect_anomalies(itp: &Interpretation, morph: &MorphAggregates, params: &FeatureParams) -> AnomalyFlags {
    let rr = rr_ms(itp.fs, &itp.beats);
    let mean_bpm = stats::mean(&rr).map(|m| 60000.0 / m);
    // Beat k sits between intervals k-1 (before) and k (after).
    let extrasystole = (1..rr.len()).any(|k| {
        let local = local_median(&rr, k, params.local_rr_radius);
        rr[k - 1] < params.extrasystole_short * local && rr[k] > params.extrasystole_long * local
    });
    let has = |p: Pattern| itp.episodes.iter().any(|e| e.pattern == p);
    AnomalyFlags {
        tachycardia: mean_bpm.is_some_and(|h| h > params.tachycardia_bpm),
        bradycardia: mean_bpm.is_some_and(|h| h < params.bradycardia_bpm),
        wide_qrs: !itp.beats.is_empty() && morph.median_qrs_ms > params.wide_qrs_ms,
        vent_or_fusion: itp
            .beats
            .iter()
            .any(|b| matches!(b.tag, BeatTag::Ventricular | BeatTag::Fusion)),
        extrasystole,
        long_pr: morph.median_pr_ms.is_some_and(|pr| pr > params.long_pr_ms),
        vent_tachy: has(Pattern::VentTachy),
        flutter: has(Pattern::Flutter),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalFeatures(#[serde(with = "serde_arrays")] pub [f64; NUM_GLOBAL_FEATURES]);

mod serde_arrays {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::NUM_GLOBAL_FEATURES;

    pub fn serialize<S: Serializer>(v: &[f64; NUM_GLOBAL_FEATURES], s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; NUM_GLOBAL_FEATURES], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into()
            .map_err(|v: Vec<f64>| serde::de::Error::invalid_length(v.len(), &"70 features"))
    }
}

impl GlobalFeatures {
    pub fn get(&self, name: &str) -> Option<f64> {
        GLOBAL_FEATURES
            .iter()
            .position(|(n, _)| *n == name || n.split('_').next() == Some(name))
            .map(|i| self.0[i])
    }
}

fn mean_band_peak(
    fft: &Spectrum,
    x: &[f64],
    segments: &[(usize, usize)],
    fs: u32,
    params: &FeatureParams,
) -> Option<spectral::SpectralPeak> {
    if segments.is_empty() {
        return None;
    }
    let mut acc = vec![0.0; NUM_BINS];
    for &(a, b) in segments {
        for (s, m) in acc.iter_mut().zip(fft.magnitude(&x[a..b])) {
            *s += m;
        }
    }
    for s in acc.iter_mut() {
        *s /= segments.len() as f64;
    }
    spectral::band_peak(&acc, fs, params.spectrum_min_hz, params.spectrum_max_hz)
}

fn window_profile(x: &[f64], lo: usize, hi: usize) -> f64 {
    let hi = hi.min(x.len());
    if hi < lo + 2 {
        0.0
    } else {
        profile(&x[lo..hi]).unwrap_or(0.0)
    }
}

/// Profile of the P window: `p_window_ms` before the QRS onset.
fn p_window_profile(r: &Record, b: &BeatObservation, params: &FeatureParams) -> f64 {
    let w = r.ms_to_samples(params.p_window_ms);
    window_profile(&r.samples, b.qrs_onset.saturating_sub(w), b.qrs_onset + 1)
}

fn beat_profile(r: &Record, b: &BeatObservation, params: &FeatureParams) -> f64 {
    let half = r.ms_to_samples(params.beat_window_ms / 2.0);
    window_profile(&r.samples, b.qrs_peak.saturating_sub(half), b.qrs_peak + half + 1)
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

pub fn global_features(r: &Record, itp: &Interpretation, params: &FeatureParams) -> Result<GlobalFeatures> {
    itp.validate()?;
    let x = &r.samples;
    let fs = r.fs;
    let beats = &itp.beats;
    let nb = beats.len();
    let to_ms = |n: usize| n as f64 * 1000.0 / fs as f64;
    let duration_s = r.duration_s();
    let mut v = Vec::with_capacity(NUM_GLOBAL_FEATURES);

    // Rhythm.
    match rr_statistics(fs, beats, params) {
        Ok(s) => v.extend_from_slice(&s),
        Err(_) => v.extend_from_slice(&[0.0; NUM_RR_STATISTICS]),
    }
    let durations = itp.episode_durations_s();
    let beats_in = |f: &dyn Fn(Pattern) -> bool| -> f64 {
        fraction(
            itp.episodes.iter().filter(|e| f(e.pattern)).map(|e| e.len()).sum(),
            nb,
        )
    };
    v.push(itp.episodes.len() as f64);
    v.push(stats::median_or(&durations, 0.0));
    v.push(beats_in(&|p| p == Pattern::Sinus));
    v.push(beats_in(&|p| p == Pattern::Afib));
    v.push(beats_in(&|p| p == Pattern::Unexplained));
    v.push(beats_in(&|p| {
        !matches!(p, Pattern::Sinus | Pattern::Afib | Pattern::Unexplained)
    }));

    // Morphology.
    let ps: Vec<(&BeatObservation, conduction::Wave)> =
        beats.iter().filter_map(|b| b.p.map(|p| (b, p))).collect();
    let ts: Vec<(&BeatObservation, conduction::Wave)> =
        beats.iter().filter_map(|b| b.t.map(|t| (b, t))).collect();
    let p_dur: Vec<f64> = ps.iter().map(|(_, p)| to_ms(p.duration())).collect();
    let p_amp: Vec<f64> = ps.iter().map(|(_, p)| p.amp).collect();
    let pr: Vec<f64> = ps.iter().map(|(b, p)| to_ms(b.qrs_onset - p.onset)).collect();
    let qrs_dur: Vec<f64> = beats.iter().map(|b| to_ms(b.qrs_duration())).collect();
    let qrs_amp: Vec<f64> = beats.iter().map(|b| b.qrs_amp).collect();
    let dists: Vec<f64> = beats.iter().map(|b| b.morph_dist).collect();
    let t_dur: Vec<f64> = ts.iter().map(|(_, t)| to_ms(t.duration())).collect();
    let t_amp: Vec<f64> = ts.iter().map(|(_, t)| t.amp).collect();
    let qt: Vec<f64> = ts.iter().map(|(b, t)| to_ms(t.offset - b.qrs_onset)).collect();
    let segments: Vec<(usize, usize)> = conduction::tp_segments(beats, x.len())
        .into_iter()
        .flatten()
        .collect();
    let tp_len: Vec<f64> = segments.iter().map(|(a, b)| to_ms(b - a)).collect();
    let count_tag = |t: BeatTag| beats.iter().filter(|b| b.tag == t).count();
    let fft = Spectrum::new();
    let qrs_segments: Vec<(usize, usize)> = beats
        .iter()
        .map(|b| (b.qrs_onset, (b.qrs_offset + 1).min(x.len())))
        .filter(|(a, b)| b > a)
        .collect();
    let min_tp = r.ms_to_samples(params.min_tp_segment_ms);
    let long_tp: Vec<(usize, usize)> =
        segments.iter().copied().filter(|(a, b)| b - a >= min_tp).collect();
    let qrs_peak = mean_band_peak(&fft, x, &qrs_segments, fs, params);
    let tp_peak = mean_band_peak(&fft, x, &long_tp, fs, params);

    v.push(fraction(ps.len(), nb));
    v.push(stats::median_or(&p_dur, 0.0));
    v.push(stats::median_or(&p_amp, 0.0));
    v.push(stats::median_or(&pr, 0.0));
    v.push(stats::mad(&pr).unwrap_or(0.0));
    v.push(stats::median_or(&qrs_dur, 0.0));
    v.push(stats::mad(&qrs_dur).unwrap_or(0.0));
    v.push(stats::median_or(&qrs_amp, 0.0));
    v.push(stats::mad(&qrs_amp).unwrap_or(0.0));
    v.push(fraction(beats.iter().filter(|b| b.qrs_polarity > 0).count(), nb));
    v.push(stats::median_or(&dists, 0.0));
    v.push(fraction(qrs_dur.iter().filter(|&&d| d > params.wide_qrs_ms).count(), nb));
    v.push(fraction(ts.len(), nb));
    v.push(stats::median_or(&t_dur, 0.0));
    v.push(stats::median_or(&t_amp, 0.0));
    v.push(stats::median_or(&qt, 0.0));
    v.push(stats::mad(&qt).unwrap_or(0.0));
    v.push(fraction(t_amp.iter().filter(|&&a| a > 0.0).count(), ts.len()));
    v.push(stats::median_or(&tp_len, 0.0));
    v.push(fraction(count_tag(BeatTag::Ventricular), nb));
    v.push(fraction(count_tag(BeatTag::Fusion), nb));
    v.push(fraction(pr.iter().filter(|&&p| p > params.long_pr_ms).count(), nb));
    v.push(dists.iter().copied().fold(0.0, f64::max));
    v.push(qrs_peak.map_or(0.0, |p| p.freq_hz));
    v.push(tp_peak.map_or(0.0, |p| p.freq_hz));
    v.push(tp_peak.map_or(0.0, |p| p.prominence));

    // Quality.
    let tp_profiles: Vec<f64> = segments
        .iter()
        .filter(|(a, b)| b - a >= 2)
        .map(|&(a, b)| window_profile(x, a, b) / ((b - a) as f64 / fs as f64))
        .collect();
    let p_profiles: Vec<f64> = beats.iter().map(|b| p_window_profile(r, b, params)).collect();
    let beat_profiles: Vec<f64> = beats.iter().map(|b| beat_profile(r, b, params)).collect();
    let median_beat_profile = stats::median_or(&beat_profiles, 0.0);
    let median_p_profile = stats::median_or(&p_profiles, 0.0);
    let median_tp_profile = stats::median_or(&tp_profiles, 0.0);
    let median_qrs_amp = stats::median_or(&qrs_amp, 0.0);
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let centered_energy = {
        let m = stats::mean(x).unwrap_or(0.0);
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
    };
    let diff_energy: f64 = x.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();

    v.push(median_tp_profile);
    v.push(median_p_profile);
    v.push(ratio(median_p_profile, median_beat_profile));
    v.push(ratio(window_profile(x, 0, x.len()), duration_s));
    v.push(itp.unexplained_time_frac);
    v.push(fraction(itp.deleted_count, itp.initial_beat_count));
    v.push(fraction(itp.inserted_count, itp.initial_beat_count));
    v.push(
        stats::percentile(x, 99.0).unwrap_or(0.0) - stats::percentile(x, 1.0).unwrap_or(0.0),
    );
    v.push(ratio(diff_energy, centered_energy));
    v.push(median_beat_profile);
    v.push(ratio(stats::mad(&beat_profiles).unwrap_or(0.0), median_beat_profile));
    v.push(fraction(
        beat_profiles
            .iter()
            .filter(|&&p| p < params.low_profile_ratio * median_beat_profile)
            .count(),
        nb,
    ));
    v.push(ratio(median_tp_profile, median_qrs_amp));
    v.push(duration_s);

    // Anomaly flags.
    let flags = detect_anomalies(itp, &MorphAggregates::from_beats(fs, beats), params);
    v.extend(flags.to_array().iter().map(|&b| flag(b)));

    let arr: [f64; NUM_GLOBAL_FEATURES] = v
        .try_into()
        .map_err(|v: Vec<f64>| Error::Shape(format!("built {} global features", v.len())))?;
    if let Some(i) = arr.iter().position(|f| !f.is_finite()) {
        return Err(Error::Evidence(format!(
            "record {}: non-finite feature {}",
            r.id, GLOBAL_FEATURES[i].0
        )));
    }
    Ok(GlobalFeatures(arr))
}

/// Per-beat feature rows in temporal order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatFeatureSequence {
    pub rows: Vec<[f64; NUM_BEAT_FEATURES]>,
}

impl BeatFeatureSequence {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn beat_features(r: &Record, itp: &Interpretation, params: &FeatureParams) -> Result<BeatFeatureSequence> {
    let beats = &itp.beats;
    let n = beats.len();
    if n < 3 {
        return Err(Error::Evidence(format!(
            "record {}: beat features need at least 3 beats, got {n}",
            r.id
        )));
    }
    let fs = r.fs;
    let to_ms = |k: usize| k as f64 * 1000.0 / fs as f64;
    let rr = rr_ms(fs, beats);
    let median = stats::median_or(&rr, 0.0);
    // rr_prev(k) for k in 0..=n: index n is never read for prev, k = 0 uses the median.
    let prev = |k: usize| if k == 0 { median } else { rr[k - 1] };
    let next = |k: usize| if k + 1 >= n { median } else { rr[k] };
    let segments = conduction::tp_segments(beats, r.len());
    let rows = (0..n)
        .map(|k| {
            let b = &beats[k];
            let rr_prev = prev(k);
            let rr_prev_prev = if k == 0 { median } else { prev(k - 1) };
            let rr_next = next(k);
            let tp = segments
                .get(k)
                .copied()
                .flatten()
                .filter(|(a, c)| c - a >= 2)
                .map_or(0.0, |(a, c)| window_profile(&r.samples, a, c) / ((c - a) as f64 / fs as f64));
            [
                rr_prev,
                rr_next,
                rr_prev - rr_prev_prev,
                rr_next - rr_prev,
                if median > 0.0 { rr_prev / median } else { 0.0 },
                flag(b.p.is_some()),
                b.p.map_or(0.0, |p| to_ms(p.duration())),
                b.p.map_or(0.0, |p| p.amp),
                b.p.map_or(0.0, |p| to_ms(b.qrs_onset - p.onset)),
                to_ms(b.qrs_duration()),
                b.qrs_amp,
                b.qrs_polarity as f64,
                b.morph_dist,
                b.t.map_or(0.0, |t| to_ms(t.offset - b.qrs_onset)),
                b.t.map_or(0.0, |t| to_ms(t.duration())),
                b.t.map_or(0.0, |t| t.amp),
                b.t.map_or(0.0, |t| t.amp.signum()),
                p_window_profile(r, b, params),
                tp,
                flag(b.tag == BeatTag::Normal),
                flag(b.tag == BeatTag::Ventricular),
                flag(b.tag == BeatTag::Fusion),
            ]
        })
        .collect();
    Ok(BeatFeatureSequence { rows })
}

fn fmt_value(v: f64) -> String {
    format!("{v}")
}

/// Writes one global-feature row per record, `record_id` first.
pub fn write_global_csv(path: &Path, rows: &[(String, GlobalFeatures)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["record_id".to_string()];
    header.extend(GLOBAL_FEATURES.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    for (id, f) in rows {
        let mut rec = vec![id.clone()];
        rec.extend(f.0.iter().map(|&v| fmt_value(v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a global-feature CSV written by [`write_global_csv`].
pub fn read_global_csv(path: &Path) -> Result<Vec<(String, GlobalFeatures)>> {
    let mut rd = csv::Reader::from_path(path)?;
    let header = rd.headers()?.clone();
    let expected = std::iter::once("record_id").chain(GLOBAL_FEATURES.iter().map(|(n, _)| *n));
    if !header.iter().eq(expected) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "feature CSV header does not match the canonical order".into(),
        });
    }
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let mut v = [0.0; NUM_GLOBAL_FEATURES];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = rec[k + 1].parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: line + 2,
                msg: format!("bad value for {}", GLOBAL_FEATURES[k].0),
            })?;
        }
        out.push((rec[0].to_string(), GlobalFeatures(v)));
    }
    Ok(out)
}

/// Writes per-beat features keyed by `record_id,beat_idx`.
pub fn write_beat_csv(path: &Path, rows: &[(String, BeatFeatureSequence)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["record_id".to_string(), "beat_idx".to_string()];
    header.extend(BEAT_FEATURES.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    for (id, seq) in rows {
        for (k, row) in seq.rows.iter().enumerate() {
            let mut rec = vec![id.clone(), k.to_string()];
            rec.extend(row.iter().map(|&v| fmt_value(v)));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Renders the canonical order with scaling kinds as a text table.
pub fn describe_features(out: &mut impl Write) -> std::io::Result<()> {
    for (name, s) in GLOBAL_FEATURES.iter().chain(BEAT_FEATURES.iter()) {
        writeln!(out, "{name}\t{s:?}")?;
    }
    Ok(())
}
