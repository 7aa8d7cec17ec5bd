//! Abductive rhythm interpretation.
//!
//! The beat sequence is explained as a tiling of rhythm episodes, each checked
//! against a pattern's hard and soft constraints. A beam search finds the
//! cheapest tiling; [`repair_evidence`] then deletes beats that cannot be
//! explained and inserts beats the rhythm predicts, as long as every edit
//! strictly lowers the total cost.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conduction::{self, BeatObservation, BeatTag, ConductionParams};
use crate::error::{Error, Result};
use crate::features::profile;
use crate::signal_io::Record;
use crate::spectral::{self, Spectrum, NUM_BINS};
use crate::stats;

/// Rhythm patterns, declared in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Pattern {
    Sinus,
    Afib,
    Tachy,
    Brady,
    Flutter,
    Bigeminy,
    Trigeminy,
    VentTachy,
    Unexplained,
}

impl Pattern {
    pub const ALL: [Pattern; 9] = [
        Pattern::Sinus,
        Pattern::Afib,
        Pattern::Tachy,
        Pattern::Brady,
        Pattern::Flutter,
        Pattern::Bigeminy,
        Pattern::Trigeminy,
        Pattern::VentTachy,
        Pattern::Unexplained,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::Sinus => "SINUS",
            Pattern::Afib => "AFIB",
            Pattern::Tachy => "TACHY",
            Pattern::Brady => "BRADY",
            Pattern::Flutter => "FLUTTER",
            Pattern::Bigeminy => "BIGEMINY",
            Pattern::Trigeminy => "TRIGEMINY",
            Pattern::VentTachy => "VENT_TACHY",
            Pattern::Unexplained => "UNEXPLAINED",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown rhythm pattern {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpretationParams {
    pub beam_width: usize,
    pub switch_cost: f64,
    pub min_episode_beats: usize,
    pub unexplained_beat_cost: f64,
    pub max_repair_passes: usize,

    pub sinus_min_bpm: f64,
    pub sinus_max_bpm: f64,
    pub sinus_min_p_fraction: f64,
    pub irregularity_weight: f64,
    pub irregularity_tolerance: f64,
    /// Regular patterns pay `gap_cost` per RR deviating from the span median
    /// by more than this fraction.
    pub gap_tolerance: f64,
    pub gap_cost: f64,
    pub brady_max_bpm: f64,
    pub tachy_min_bpm: f64,
    pub afib_min_irregularity: f64,
    pub afib_max_p_fraction: f64,
    pub afib_p_weight: f64,
    pub flutter_min_hz: f64,
    pub flutter_max_hz: f64,
    pub flutter_min_prominence: f64,
    pub spectrum_min_hz: f64,
    pub spectrum_max_hz: f64,
    pub min_tp_segment_ms: f64,
    pub max_break_fraction: f64,
    pub vent_tachy_min_bpm: f64,
    pub vent_tachy_min_fraction: f64,

    pub beat_window_ms: f64,
    pub delete_profile_ratio: f64,
    pub insert_gap_min: f64,
    pub insert_gap_max: f64,
    pub insert_search_ms: f64,
    pub insert_amp_ratio: f64,
    /// Number of RR intervals on each side used for the local median.
    pub local_rr_radius: usize,
}

impl Default for InterpretationParams {
    fn default() -> Self {
        InterpretationParams {
            beam_width: 8,
            switch_cost: 1.0,
            min_episode_beats: 3,
            unexplained_beat_cost: 2.0,
            max_repair_passes: 10,
            sinus_min_bpm: 50.0,
            sinus_max_bpm: 100.0,
            sinus_min_p_fraction: 0.6,
            irregularity_weight: 4.0,
            irregularity_tolerance: 0.08,
            gap_tolerance: 0.5,
            gap_cost: 1.0,
            brady_max_bpm: 50.0,
            tachy_min_bpm: 100.0,
            afib_min_irregularity: 0.12,
            afib_max_p_fraction: 0.3,
            afib_p_weight: 2.0,
            flutter_min_hz: 4.0,
            flutter_max_hz: 6.0,
            flutter_min_prominence: 2.0,
            spectrum_min_hz: 1.0,
            spectrum_max_hz: 40.0,
            min_tp_segment_ms: 200.0,
            max_break_fraction: 0.25,
            vent_tachy_min_bpm: 100.0,
            vent_tachy_min_fraction: 0.8,
            beat_window_ms: 250.0,
            delete_profile_ratio: 0.5,
            insert_gap_min: 1.5,
            insert_gap_max: 2.5,
            insert_search_ms: 60.0,
            insert_amp_ratio: 0.3,
            local_rr_radius: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhythmEpisode {
    pub pattern: Pattern,
    pub first: usize,
    pub last: usize,
    pub score: f64,
}

impl RhythmEpisode {
    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Per-record quantities the pattern constraints read, precomputed once per
/// beat list.
pub struct Evidence {
    fs: u32,
    rr_ms: Vec<f64>,
    p_present: Vec<bool>,
    ventricular: Vec<bool>,
    /// Prefix sums over TP segments (segment k lies between beats k and k+1).
    tp_sum: Vec<Vec<f64>>,
    tp_count: Vec<usize>,
}

impl Evidence {
    pub fn new(r: &Record, beats: &[BeatObservation], params: &InterpretationParams) -> Self {
        let fft = Spectrum::new();
        let min_len = r.ms_to_samples(params.min_tp_segment_ms);
        let mut tp_sum = vec![vec![0.0; NUM_BINS]];
        let mut tp_count = vec![0];
        for seg in conduction::tp_segments(beats, r.len()) {
            let mut acc = tp_sum.last().unwrap().clone();
            let mut count = *tp_count.last().unwrap();
            if let Some((start, end)) = seg.filter(|(a, b)| b - a >= min_len) {
                for (a, m) in acc.iter_mut().zip(fft.magnitude(&r.samples[start..end])) {
                    *a += m;
                }
                count += 1;
            }
            tp_sum.push(acc);
            tp_count.push(count);
        }
        Evidence {
            fs: r.fs,
            rr_ms: beats
                .windows(2)
                .map(|w| r.samples_to_ms((w[1].qrs_peak - w[0].qrs_peak) as f64))
                .collect(),
            p_present: beats.iter().map(|b| b.p.is_some()).collect(),
            ventricular: beats.iter().map(|b| b.tag == BeatTag::Ventricular).collect(),
            tp_sum,
            tp_count,
        }
    }

    pub fn num_beats(&self) -> usize {
        self.p_present.len()
    }

    /// Average TP-segment spectrum over the span's segments, if any.
    fn tp_peak(&self, first: usize, last: usize, params: &InterpretationParams) -> Option<spectral::SpectralPeak> {
        let count = self.tp_count[last] - self.tp_count[first];
        if count == 0 {
            return None;
        }
        let mean: Vec<f64> = self.tp_sum[last]
            .iter()
            .zip(&self.tp_sum[first])
            .map(|(a, b)| (a - b) / count as f64)
            .collect();
        spectral::band_peak(&mean, self.fs, params.spectrum_min_hz, params.spectrum_max_hz)
    }
}

/// Fewest mismatches against a tag pattern with a ventricular beat every
/// `period` beats, over all phases.
fn periodic_breaks(vent: &[bool], period: usize) -> usize {
    (0..period)
        .map(|phase| {
            vent.iter()
                .enumerate()
                .filter(|(k, &v)| v != (k % period == phase))
                .count()
        })
        .min()
        .unwrap_or(0)
}

/// Evaluates one pattern on the inclusive beat span `(first, last)`.
/// Returns `(admissible, penalty)`.
pub fn match_pattern(
    pattern: Pattern,
    ev: &Evidence,
    span: (usize, usize),
    params: &InterpretationParams,
) -> Result<(bool, f64)> {
    let (first, last) = span;
    if first > last || last >= ev.num_beats() {
        return Err(Error::InvalidArgument(format!(
            "span ({first}, {last}) outside {} beats",
            ev.num_beats()
        )));
    }
    let len = last - first + 1;
    if pattern == Pattern::Unexplained {
        return Ok((true, params.unexplained_beat_cost * len as f64));
    }
    let rr = &ev.rr_ms[first..last];
    if rr.is_empty() {
        return Ok((false, 0.0));
    }
    let median = stats::median_or(rr, 0.0);
    let irregularity = stats::mad(rr).unwrap_or(0.0) / median;
    let mean_bpm = 60000.0 / stats::mean(rr).unwrap_or(f64::INFINITY);
    let p_fraction = ev.p_present[first..=last].iter().filter(|&&p| p).count() as f64 / len as f64;
    let vent = &ev.ventricular[first..=last];
    let regular_penalty = params.irregularity_weight
        * (irregularity - params.irregularity_tolerance).max(0.0)
        + params.gap_cost
            * rr.iter()
                .filter(|&&v| (v / median - 1.0).abs() > params.gap_tolerance)
                .count() as f64;

    let out = match pattern {
        Pattern::Sinus => {
            let bpm = 60000.0 / median;
            (
                bpm >= params.sinus_min_bpm
                    && bpm <= params.sinus_max_bpm
                    && p_fraction >= params.sinus_min_p_fraction,
                regular_penalty,
            )
        }
        Pattern::Brady => (mean_bpm < params.brady_max_bpm, regular_penalty),
        Pattern::Tachy => (mean_bpm > params.tachy_min_bpm, regular_penalty),
        Pattern::Afib => (
            irregularity >= params.afib_min_irregularity
                && p_fraction <= params.afib_max_p_fraction,
            params.afib_p_weight * p_fraction,
        ),
        Pattern::Flutter => {
            let ok = ev.tp_peak(first, last, params).is_some_and(|p| {
                p.freq_hz >= params.flutter_min_hz
                    && p.freq_hz <= params.flutter_max_hz
                    && p.prominence >= params.flutter_min_prominence
            });
            (ok, regular_penalty)
        }
        Pattern::Bigeminy | Pattern::Trigeminy => {
            let period = if pattern == Pattern::Bigeminy { 2 } else { 3 };
            let breaks = periodic_breaks(vent, period);
            let n_vent = vent.iter().filter(|&&v| v).count();
            (
                n_vent >= 2 && breaks as f64 <= params.max_break_fraction * len as f64,
                breaks as f64,
            )
        }
        Pattern::VentTachy => {
            let frac = vent.iter().filter(|&&v| v).count() as f64 / len as f64;
            (
                mean_bpm > params.vent_tachy_min_bpm && frac >= params.vent_tachy_min_fraction,
                0.0,
            )
        }
        Pattern::Unexplained => unreachable!(),
    };
    Ok(out)
}

/// Total cost of a tiling: episode scores plus one switch per boundary.
pub fn tiling_cost(episodes: &[RhythmEpisode], params: &InterpretationParams) -> f64 {
    let mut cost = 0.0;
    for (k, e) in episodes.iter().enumerate() {
        if k > 0 {
            cost += params.switch_cost;
        }
        cost += e.score;
    }
    cost
}

/// Checks that episodes cover `0..n` contiguously with maximal runs.
pub fn is_valid_tiling(episodes: &[RhythmEpisode], n: usize) -> bool {
    let mut next = 0;
    for (k, e) in episodes.iter().enumerate() {
        if e.first != next || e.last < e.first {
            return false;
        }
        if k > 0 && episodes[k - 1].pattern == e.pattern {
            return false;
        }
        next = e.last + 1;
    }
    next == n
}

/// Deterministic preference order between complete or partial tilings of the
/// same prefix: cost, episode count, pattern sequence, then span starts.
pub fn compare_tilings(a: (f64, &[RhythmEpisode]), b: (f64, &[RhythmEpisode])) -> Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1.len().cmp(&b.1.len()))
        .then_with(|| {
            a.1.iter()
                .map(|e| e.pattern)
                .cmp(b.1.iter().map(|e| e.pattern))
        })
        .then_with(|| a.1.iter().map(|e| e.first).cmp(b.1.iter().map(|e| e.first)))
}

#[derive(Clone)]
struct State {
    cost: f64,
    episodes: Vec<RhythmEpisode>,
}

impl State {
    fn cmp(&self, other: &State) -> Ordering {
        compare_tilings((self.cost, &self.episodes), (other.cost, &other.episodes))
    }
}

/// Minimum-cost tiling by left-to-right beam search. Returns the episodes and
/// their total cost; an empty beat list yields no episodes.
pub fn best_tiling(ev: &Evidence, params: &InterpretationParams) -> (Vec<RhythmEpisode>, f64) {
    let n = ev.num_beats();
    let width = params.beam_width.max(2);
    let mut beams: Vec<Vec<State>> = vec![Vec::new(); n + 1];
    beams[0].push(State {
        cost: 0.0,
        episodes: Vec::new(),
    });
    for end in 1..=n {
        let mut best: Vec<Option<State>> = vec![None; Pattern::ALL.len()];
        for start in 0..end {
            if beams[start].is_empty() {
                continue;
            }
            let len = end - start;
            for (pi, &pattern) in Pattern::ALL.iter().enumerate() {
                if pattern != Pattern::Unexplained && len < params.min_episode_beats {
                    continue;
                }
                let Some(prev) = beams[start]
                    .iter()
                    .find(|s| s.episodes.last().map_or(true, |e| e.pattern != pattern))
                else {
                    continue;
                };
                let (ok, penalty) =
                    match_pattern(pattern, ev, (start, end - 1), params).expect("span in range");
                if !ok {
                    continue;
                }
                let switch = if prev.episodes.is_empty() { 0.0 } else { params.switch_cost };
                let cost = prev.cost + switch + penalty;
                if let Some(cur) = &best[pi] {
                    // Cheap pre-check before building the candidate.
                    if cost > cur.cost {
                        continue;
                    }
                }
                let mut episodes = prev.episodes.clone();
                episodes.push(RhythmEpisode {
                    pattern,
                    first: start,
                    last: end - 1,
                    score: penalty,
                });
                let cand = State { cost, episodes };
                if best[pi].as_ref().map_or(true, |cur| cand.cmp(cur) == Ordering::Less) {
                    best[pi] = Some(cand);
                }
            }
        }
        let mut states: Vec<State> = best.into_iter().flatten().collect();
        states.sort_by(State::cmp);
        states.truncate(width);
        beams[end] = states;
    }
    let state = beams[n].swap_remove(0);
    (state.episodes, state.cost)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Del,
    Ins,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub op: EditOp,
    pub sample_index: usize,
    pub pass: usize,
    pub cost_before: f64,
    pub cost_after: f64,
    /// For deletions: the beat's window profile and the median at that time.
    pub window_profile: Option<f64>,
    pub median_profile: Option<f64>,
}

/// Profile of the window of `window_ms` centered on a QRS peak.
pub fn beat_window_profile(r: &Record, peak: usize, window_ms: f64) -> f64 {
    let half = r.ms_to_samples(window_ms / 2.0);
    let lo = peak.saturating_sub(half);
    let hi = (peak + half + 1).min(r.len());
    profile(&r.samples[lo..hi]).unwrap_or(0.0)
}

fn evaluate(r: &Record, beats: &[BeatObservation], params: &InterpretationParams) -> f64 {
    best_tiling(&Evidence::new(r, beats, params), params).1
}

/// Candidate beat near the midpoint of the gap after beat `k`, if the signal
/// holds an extremum large enough to be a missed QRS.
fn insertion_candidate(
    r: &Record,
    beats: &[BeatObservation],
    k: usize,
    median_amp: f64,
    params: &InterpretationParams,
    cparams: &ConductionParams,
) -> Option<BeatObservation> {
    let x = &r.samples;
    let (a, b) = (&beats[k], &beats[k + 1]);
    let pred = (a.qrs_peak + b.qrs_peak) / 2;
    let reach = r.ms_to_samples(params.insert_search_ms);
    let lo = pred.saturating_sub(reach).max(a.qrs_offset + 1);
    let hi = (pred + reach).min(b.qrs_onset.saturating_sub(1)).min(x.len() - 1);
    if hi <= lo + 1 {
        return None;
    }
    let ctx = r.ms_to_samples(200.0);
    let window = &x[pred.saturating_sub(ctx)..(pred + ctx + 1).min(x.len())];
    let reference = stats::median_or(window, 0.0);
    let (peak, dev) = (lo..=hi)
        .map(|i| (i, (x[i] - reference).abs()))
        .fold((lo, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
    if peak == lo || peak == hi || dev < params.insert_amp_ratio * median_amp {
        return None;
    }
    let prev_bound = a.t.map_or(a.qrs_offset, |t| t.offset);
    let prev_bound = if prev_bound < peak { prev_bound } else { a.qrs_offset };
    let guard = r.ms_to_samples(cparams.qrs_max_half_ms);
    let next = b.qrs_peak.saturating_sub(guard).max(peak + 2);
    let mut beat = conduction::delineate_beat(r, peak, prev_bound, next, cparams).ok()?;
    if beat.qrs_onset <= a.qrs_offset || beat.qrs_offset >= b.qrs_onset {
        return None;
    }
    if let Ok((template, _, _)) = conduction::dominant_template(r, beats, cparams) {
        let durations: Vec<f64> = beats
            .iter()
            .map(|b| r.samples_to_ms(b.qrs_duration() as f64))
            .collect();
        let (d, tag) = conduction::classify_beat(
            r,
            &beat,
            &template,
            stats::median_or(&durations, 0.0),
            cparams,
        );
        beat.morph_dist = d;
        beat.tag = tag;
    }
    Some(beat)
}

/// Non-monotonic evidence correction. Each pass applies the single edit that
/// lowers the total cost most (deletions before insertions on ties, then by
/// position); stops when no edit strictly helps or after the pass limit.
pub fn repair_evidence(
    r: &Record,
    beats: &[BeatObservation],
    tiling: &[RhythmEpisode],
    params: &InterpretationParams,
    cparams: &ConductionParams,
) -> (Vec<BeatObservation>, Vec<Edit>) {
    let mut beats = beats.to_vec();
    let mut edits = Vec::new();
    let mut cost = if is_valid_tiling(tiling, beats.len()) {
        tiling_cost(tiling, params)
    } else {
        evaluate(r, &beats, params)
    };
    for pass in 0..params.max_repair_passes {
        let profiles: Vec<f64> = beats
            .iter()
            .map(|b| beat_window_profile(r, b.qrs_peak, params.beat_window_ms))
            .collect();
        let median_profile = stats::median_or(&profiles, 0.0);
        // (cost, op, sample index, new beats, profile)
        let mut best: Option<(f64, EditOp, usize, Vec<BeatObservation>, Option<f64>)> = None;
        let mut consider = |c: f64, op: EditOp, idx: usize, nb: Vec<BeatObservation>, prof| {
            if c >= cost {
                return;
            }
            let better = best.as_ref().map_or(true, |(bc, bop, bidx, _, _)| {
                c.total_cmp(bc)
                    .then(op.cmp_key().cmp(&bop.cmp_key()))
                    .then(idx.cmp(bidx))
                    == Ordering::Less
            });
            if better {
                best = Some((c, op, idx, nb, prof));
            }
        };

        for (k, b) in beats.iter().enumerate() {
            if profiles[k] < params.delete_profile_ratio * median_profile {
                let mut nb = beats.clone();
                nb.remove(k);
                let c = evaluate(r, &nb, params);
                consider(c, EditOp::Del, b.qrs_peak, nb, Some(profiles[k]));
            }
        }

        let rr: Vec<f64> = beats
            .windows(2)
            .map(|w| (w[1].qrs_peak - w[0].qrs_peak) as f64)
            .collect();
        let amps: Vec<f64> = beats.iter().map(|b| b.qrs_amp).collect();
        let median_amp = stats::median_or(&amps, 0.0);
        for k in 0..rr.len() {
            let lo = k.saturating_sub(params.local_rr_radius);
            let hi = (k + params.local_rr_radius + 1).min(rr.len());
            let local = stats::median_or(&rr[lo..hi], 0.0);
            let ratio = rr[k] / local;
            if !(params.insert_gap_min..=params.insert_gap_max).contains(&ratio) {
                continue;
            }
            if let Some(nbeat) = insertion_candidate(r, &beats, k, median_amp, params, cparams) {
                let idx = nbeat.qrs_peak;
                let mut nb = beats.clone();
                nb.insert(k + 1, nbeat);
                let c = evaluate(r, &nb, params);
                consider(c, EditOp::Ins, idx, nb, None);
            }
        }

        let Some((c, op, idx, nb, prof)) = best else {
            break;
        };
        edits.push(Edit {
            op,
            sample_index: idx,
            pass,
            cost_before: cost,
            cost_after: c,
            window_profile: prof,
            median_profile: prof.map(|_| median_profile),
        });
        beats = nb;
        cost = c;
    }
    (beats, edits)
}

impl EditOp {
    fn cmp_key(self) -> u8 {
        match self {
            EditOp::Del => 0,
            EditOp::Ins => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interpretation {
    pub beats: Vec<BeatObservation>,
    pub episodes: Vec<RhythmEpisode>,
    pub deleted_count: usize,
    pub inserted_count: usize,
    pub unexplained_time_frac: f64,
    pub edits: Vec<Edit>,
    pub initial_beat_count: usize,
    pub total_cost: f64,
    pub fs: u32,
    pub num_samples: usize,
}

/// Sample interval owned by each beat: from the midpoint with its predecessor
/// (or the record start) to the midpoint with its successor (or the end).
pub fn beat_territories(beats: &[BeatObservation], num_samples: usize) -> Vec<(usize, usize)> {
    let n = beats.len();
    (0..n)
        .map(|k| {
            let start = if k == 0 {
                0
            } else {
                (beats[k - 1].qrs_peak + beats[k].qrs_peak) / 2
            };
            let end = if k + 1 == n {
                num_samples
            } else {
                (beats[k].qrs_peak + beats[k + 1].qrs_peak) / 2
            };
            (start, end.max(start))
        })
        .collect()
}

impl Interpretation {
    /// Duration of each episode in seconds, using beat territories.
    pub fn episode_durations_s(&self) -> Vec<f64> {
        let t = beat_territories(&self.beats, self.num_samples);
        self.episodes
            .iter()
            .map(|e| (t[e.last].1 - t[e.first].0) as f64 / self.fs as f64)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !is_valid_tiling(&self.episodes, self.beats.len()) {
            return Err(Error::Evidence("episodes do not tile the beat list".into()));
        }
        let del = self.edits.iter().filter(|e| e.op == EditOp::Del).count();
        let ins = self.edits.iter().filter(|e| e.op == EditOp::Ins).count();
        if del != self.deleted_count
            || ins != self.inserted_count
            || self.initial_beat_count + ins != self.beats.len() + del
        {
            return Err(Error::Evidence("edit counters disagree with the edit log".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Ep {
            pattern: Pattern,
            first: usize,
            last: usize,
            score: f64,
        }
        #[derive(Serialize)]
        struct Ed {
            op: EditOp,
            sample_index: usize,
        }
        #[derive(Serialize)]
        struct Out {
            beats: Vec<String>,
            episodes: Vec<Ep>,
            edits: Vec<Ed>,
        }
        let out = Out {
            beats: self.beats.iter().map(|b| b.annotation_row()).collect(),
            episodes: self
                .episodes
                .iter()
                .map(|e| Ep {
                    pattern: e.pattern,
                    first: e.first,
                    last: e.last,
                    score: e.score,
                })
                .collect(),
            edits: self
                .edits
                .iter()
                .map(|e| Ed {
                    op: e.op,
                    sample_index: e.sample_index,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&out)?)
    }
}

/// Full interpretation of a beat list: best tiling, evidence repair, then the
/// final tiling of the corrected beats.
pub fn abstract_rhythms(
    r: &Record,
    beats: &[BeatObservation],
    params: &InterpretationParams,
    cparams: &ConductionParams,
) -> Interpretation {
    let (tiling, _) = best_tiling(&Evidence::new(r, beats, params), params);
    let (fixed, edits) = if beats.len() >= 2 {
        repair_evidence(r, beats, &tiling, params, cparams)
    } else {
        (beats.to_vec(), Vec::new())
    };
    let (episodes, total_cost) = best_tiling(&Evidence::new(r, &fixed, params), params);
    let territories = beat_territories(&fixed, r.len());
    let unexplained: usize = episodes
        .iter()
        .filter(|e| e.pattern == Pattern::Unexplained)
        .map(|e| territories[e.last].1 - territories[e.first].0)
        .sum();
    let unexplained_time_frac = if fixed.is_empty() {
        1.0
    } else if r.is_empty() {
        0.0
    } else {
        (unexplained as f64 / r.len() as f64).clamp(0.0, 1.0)
    };
    Interpretation {
        deleted_count: edits.iter().filter(|e| e.op == EditOp::Del).count(),
        inserted_count: edits.iter().filter(|e| e.op == EditOp::Ins).count(),
        beats: fixed,
        episodes,
        unexplained_time_frac,
        edits,
        initial_beat_count: beats.len(),
        total_cost,
        fs: r.fs,
        num_samples: r.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conduction::Wave;

    fn beat(peak: usize, p: bool, tag: BeatTag) -> BeatObservation {
        BeatObservation {
            qrs_onset: peak - 10,
            qrs_peak: peak,
            qrs_offset: peak + 10,
            qrs_amp: 1.0,
            qrs_polarity: 1,
            p: p.then_some(Wave {
                onset: peak - 60,
                peak: peak - 50,
                offset: peak - 40,
                amp: 0.1,
            }),
            t: None,
            tag,
            morph_dist: 0.0,
        }
    }

    fn beats_from_rr(rr_ms: &[f64], p: bool) -> (Record, Vec<BeatObservation>) {
        let mut peaks = vec![150usize];
        for &v in rr_ms {
            peaks.push(peaks.last().unwrap() + (v * 0.3).round() as usize);
        }
        let r = Record::new("t", 300, vec![0.0; peaks.last().unwrap() + 150]);
        let beats = peaks.iter().map(|&k| beat(k, p, BeatTag::Normal)).collect();
        (r, beats)
    }

    fn check(pattern: Pattern, rr: &[f64], p: bool) -> (bool, f64) {
        let params = InterpretationParams::default();
        let (r, beats) = beats_from_rr(rr, p);
        let ev = Evidence::new(&r, &beats, &params);
        match_pattern(pattern, &ev, (0, beats.len() - 1), &params).unwrap()
    }

    #[test]
    fn textbook_sinus_has_zero_penalty() {
        assert_eq!(check(Pattern::Sinus, &[800.0; 6], true), (true, 0.0));
    }

    #[test]
    fn afib_requires_irregularity() {
        // RR with MAD/median = 0.05.
        let rr = [1000.0, 950.0, 1050.0, 1000.0, 950.0, 1050.0, 1000.0];
        let (ok, _) = check(Pattern::Afib, &rr, false);
        assert!(!ok);
    }

    #[test]
    fn forty_bpm_is_brady() {
        assert!(check(Pattern::Brady, &[1500.0; 5], true).0);
        assert!(!check(Pattern::Sinus, &[1500.0; 5], true).0);
    }

    #[test]
    fn unexplained_costs_two_per_beat() {
        assert_eq!(check(Pattern::Unexplained, &[800.0; 4], true), (true, 10.0));
    }

    #[test]
    fn span_out_of_range_is_rejected() {
        let params = InterpretationParams::default();
        let (r, beats) = beats_from_rr(&[800.0; 3], true);
        let ev = Evidence::new(&r, &beats, &params);
        assert!(match_pattern(Pattern::Sinus, &ev, (0, 4), &params).is_err());
        assert!(match_pattern(Pattern::Sinus, &ev, (2, 1), &params).is_err());
    }

    #[test]
    fn pattern_names_round_trip() {
        for p in Pattern::ALL {
            assert_eq!(p.as_str().parse::<Pattern>().unwrap(), p);
        }
        assert!("JUNCTIONAL".parse::<Pattern>().is_err());
    }

    #[test]
    fn bigeminy_tags_are_recognized() {
        let params = InterpretationParams::default();
        let (r, mut beats) = beats_from_rr(&[800.0; 9], true);
        for (k, b) in beats.iter_mut().enumerate() {
            if k % 2 == 1 {
                b.tag = BeatTag::Ventricular;
            }
        }
        let ev = Evidence::new(&r, &beats, &params);
        assert_eq!(
            match_pattern(Pattern::Bigeminy, &ev, (0, 9), &params).unwrap(),
            (true, 0.0)
        );
        assert!(!match_pattern(Pattern::Trigeminy, &ev, (0, 9), &params).unwrap().0);
    }

    #[test]
    fn degenerate_inputs() {
        let params = InterpretationParams::default();
        let cp = ConductionParams::default();
        let r = Record::new("t", 300, vec![0.0; 900]);
        let none = abstract_rhythms(&r, &[], &params, &cp);
        assert!(none.episodes.is_empty());
        let one = abstract_rhythms(&r, &[beat(400, true, BeatTag::Normal)], &params, &cp);
        assert_eq!(one.episodes.len(), 1);
        assert_eq!(one.episodes[0].pattern, Pattern::Unexplained);
        one.validate().unwrap();
    }

    #[test]
    fn territories_cover_the_record() {
        let (r, beats) = beats_from_rr(&[800.0, 700.0, 900.0], true);
        let t = beat_territories(&beats, r.len());
        assert_eq!(t[0].0, 0);
        assert_eq!(t.last().unwrap().1, r.len());
        assert!(t.windows(2).all(|w| w[0].1 == w[1].0));
    }
}
