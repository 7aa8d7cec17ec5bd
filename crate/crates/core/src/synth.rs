//! Deterministic synthetic ECG records built from Gaussian-bump P/QRS/T waves.
//!
//! Used as test fixtures and as the stand-in corpus for end-to-end runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::class::Class;
use crate::error::{Error, Result};
use crate::signal_io::{Record, CANONICAL_FS};
use crate::stats;

pub const MIN_DURATION_S: f64 = 9.0;
pub const MAX_DURATION_S: f64 = 61.0;

/// Slope-threshold QRS duration of a Gaussian is about 5.5 standard deviations.
const QRS_WIDTH_PER_SIGMA: f64 = 5.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OtherVariant {
    Tachycardia,
    Bradycardia,
    WideQrs,
    Ectopic,
}

impl OtherVariant {
    pub const ALL: [OtherVariant; 4] = [
        OtherVariant::Tachycardia,
        OtherVariant::Bradycardia,
        OtherVariant::WideQrs,
        OtherVariant::Ectopic,
    ];
}

/// Morphology of one synthetic beat. Times in seconds relative to the R peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeatShape {
    pub p_amp: f64,
    pub p_offset_s: f64,
    pub p_sigma_s: f64,
    pub qrs_amp: f64,
    /// Nominal QRS duration in milliseconds.
    pub qrs_ms: f64,
    pub t_amp: f64,
    pub t_offset_s: f64,
    pub t_sigma_s: f64,
}

impl BeatShape {
    pub fn normal() -> Self {
        BeatShape {
            p_amp: 0.15,
            p_offset_s: -0.16,
            p_sigma_s: 0.022,
            qrs_amp: 1.0,
            qrs_ms: 90.0,
            t_amp: 0.3,
            t_offset_s: 0.28,
            t_sigma_s: 0.045,
        }
    }

    /// Wide, inverted, P-less ventricular beat with discordant T.
    pub fn ventricular(base: &BeatShape) -> Self {
        BeatShape {
            p_amp: 0.0,
            qrs_amp: -0.9 * base.qrs_amp,
            qrs_ms: 150.0,
            t_amp: 0.4 * base.qrs_amp,
            t_offset_s: base.t_offset_s + 0.04,
            t_sigma_s: base.t_sigma_s * 1.2,
            ..*base
        }
    }

    pub fn qrs_sigma_s(&self) -> f64 {
        self.qrs_ms / 1000.0 / QRS_WIDTH_PER_SIGMA
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledBeat {
    /// R-peak time in seconds.
    pub time_s: f64,
    pub shape: BeatShape,
    pub ectopic: bool,
}

/// Ground truth of a synthetic record.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub beats: Vec<ScheduledBeat>,
    pub variant: Option<OtherVariant>,
}

impl SynthTruth {
    pub fn peak_indices(&self, fs: u32) -> Vec<usize> {
        self.beats
            .iter()
            .map(|b| (b.time_s * fs as f64).round() as usize)
            .collect()
    }

    pub fn rr_ms(&self) -> Vec<f64> {
        self.beats
            .windows(2)
            .map(|w| (w[1].time_s - w[0].time_s) * 1000.0)
            .collect()
    }
}

/// Additive disturbances on top of the beat waveforms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disturbance {
    pub noise_sd: f64,
    pub wander_amp: f64,
    pub wander_hz: f64,
    /// Amplitude of fibrillatory baseline waves (4-8 Hz), 0 for none.
    pub fwave_amp: f64,
}

impl Disturbance {
    pub fn none() -> Self {
        Disturbance {
            noise_sd: 0.0,
            wander_amp: 0.0,
            wander_hz: 0.0,
            fwave_amp: 0.0,
        }
    }
}

fn gaussian(t: f64, center: f64, sigma: f64) -> f64 {
    let z = (t - center) / sigma;
    (-0.5 * z * z).exp()
}

/// Renders scheduled beats (no noise) into `n` samples at `fs`.
pub fn render_beats(beats: &[ScheduledBeat], fs: u32, n: usize) -> Vec<f64> {
    let mut x = vec![0.0; n];
    let fsf = fs as f64;
    for b in beats {
        let s = &b.shape;
        let mut add = |amp: f64, center: f64, sigma: f64| {
            if amp == 0.0 {
                return;
            }
            let lo = ((center - 6.0 * sigma) * fsf).floor().max(0.0) as usize;
            let hi = (((center + 6.0 * sigma) * fsf).ceil().max(0.0) as usize).min(n);
            for (i, xi) in x.iter_mut().enumerate().take(hi).skip(lo) {
                *xi += amp * gaussian(i as f64 / fsf, center, sigma);
            }
        };
        add(s.p_amp, b.time_s + s.p_offset_s, s.p_sigma_s);
        add(s.qrs_amp, b.time_s, s.qrs_sigma_s());
        add(s.t_amp, b.time_s + s.t_offset_s, s.t_sigma_s);
    }
    x
}

fn add_disturbance(x: &mut [f64], fs: u32, d: &Disturbance, rng: &mut ChaCha8Rng) {
    let fsf = fs as f64;
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let f_components: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(4.0..8.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.5..1.0),
            )
        })
        .collect();
    let norm = f_components.iter().map(|c| c.2).sum::<f64>();
    let noise = Normal::new(0.0, d.noise_sd.max(1e-300)).unwrap();
    for (i, xi) in x.iter_mut().enumerate() {
        let t = i as f64 / fsf;
        if d.wander_amp != 0.0 {
            *xi += d.wander_amp * (std::f64::consts::TAU * d.wander_hz * t + phase).sin();
        }
        if d.fwave_amp != 0.0 {
            let f: f64 = f_components
                .iter()
                .map(|(hz, ph, w)| w * (std::f64::consts::TAU * hz * t + ph).sin())
                .sum();
            *xi += d.fwave_amp * f / norm;
        }
        if d.noise_sd > 0.0 {
            *xi += noise.sample(rng);
        }
    }
}

/// Builds a record from explicit R-peak times (seconds) with one beat shape.
/// Used to construct hand-made cases.
pub fn record_from_beat_times(
    id: &str,
    times_s: &[f64],
    shape: BeatShape,
    duration_s: f64,
    disturbance: Disturbance,
    seed: u64,
) -> (Record, SynthTruth) {
    let beats = times_s
        .iter()
        .map(|&t| ScheduledBeat {
            time_s: t,
            shape,
            ectopic: false,
        })
        .collect();
    finish(id, beats, duration_s, disturbance, seed, None)
}

/// Renders an explicit beat list.
pub fn record_from_beats(
    id: &str,
    beats: Vec<ScheduledBeat>,
    duration_s: f64,
    disturbance: Disturbance,
    seed: u64,
) -> (Record, SynthTruth) {
    finish(id, beats, duration_s, disturbance, seed, None)
}

fn finish(
    id: &str,
    beats: Vec<ScheduledBeat>,
    duration_s: f64,
    disturbance: Disturbance,
    seed: u64,
    variant: Option<OtherVariant>,
) -> (Record, SynthTruth) {
    let n = (duration_s * CANONICAL_FS as f64).round() as usize;
    let mut x = render_beats(&beats, CANONICAL_FS, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    add_disturbance(&mut x, CANONICAL_FS, &disturbance, &mut rng);
    (
        Record::new(id, CANONICAL_FS, x),
        SynthTruth { beats, variant },
    )
}

fn class_salt(c: Class) -> u64 {
    match c {
        Class::Normal => 0x4e,
        Class::AFib => 0x41,
        Class::Other => 0x4f,
        Class::Noisy => 0x7e,
    }
}

fn random_shape(rng: &mut ChaCha8Rng) -> BeatShape {
    BeatShape {
        p_amp: rng.gen_range(0.10..0.22),
        p_offset_s: -rng.gen_range(0.15..0.19),
        p_sigma_s: rng.gen_range(0.018..0.026),
        qrs_amp: rng.gen_range(0.7..1.6),
        qrs_ms: rng.gen_range(80.0..100.0),
        t_amp: rng.gen_range(0.18..0.40),
        t_offset_s: rng.gen_range(0.25..0.30),
        t_sigma_s: rng.gen_range(0.040..0.055),
    }
}

fn random_disturbance(rng: &mut ChaCha8Rng) -> Disturbance {
    Disturbance {
        noise_sd: rng.gen_range(0.005..0.02),
        wander_amp: rng.gen_range(0.0..0.15),
        wander_hz: rng.gen_range(0.15..0.35),
        fwave_amp: 0.0,
    }
}

/// Regular rhythm around `rr_ms` with small jitter and slow respiratory modulation.
fn regular_rr(rng: &mut ChaCha8Rng, rr_ms: f64, count: usize) -> Vec<f64> {
    let jitter: Normal<f64> = Normal::new(0.0, 0.015).unwrap();
    let resp_hz: f64 = rng.gen_range(0.2..0.3);
    let resp_amp: f64 = rng.gen_range(0.0..0.03);
    let mut t = 0.0;
    (0..count)
        .map(|_| {
            let rr = rr_ms
                * (1.0
                    + jitter.sample(rng).clamp(-0.04, 0.04)
                    + resp_amp * (std::f64::consts::TAU * resp_hz * t).sin());
            t += rr / 1000.0;
            rr
        })
        .collect()
}

fn schedule(first_s: f64, rr_ms: &[f64], duration_s: f64, shape: BeatShape) -> Vec<ScheduledBeat> {
    let mut out = Vec::new();
    let mut t = first_s;
    let mut k = 0;
    while t < duration_s - 0.35 {
        out.push(ScheduledBeat {
            time_s: t,
            shape,
            ectopic: false,
        });
        let Some(rr) = rr_ms.get(k) else { break };
        t += rr / 1000.0;
        k += 1;
    }
    out
}

fn max_beats(duration_s: f64, min_rr_ms: f64) -> usize {
    (duration_s * 1000.0 / min_rr_ms).ceil() as usize + 2
}

fn check_duration(duration_s: f64) -> Result<()> {
    if !(MIN_DURATION_S..=MAX_DURATION_S).contains(&duration_s) {
        return Err(Error::InvalidArgument(format!(
            "synthetic duration {duration_s} s outside [{MIN_DURATION_S}, {MAX_DURATION_S}]"
        )));
    }
    Ok(())
}

/// Synthesizes a record of the requested class. Pure in `(target, seed, duration_s)`.
pub fn synth_record(target: Class, seed: u64, duration_s: f64) -> Result<Record> {
    synth_record_with_truth(target, seed, duration_s).map(|(r, _)| r)
}

pub fn synth_record_with_truth(
    target: Class,
    seed: u64,
    duration_s: f64,
) -> Result<(Record, SynthTruth)> {
    check_duration(duration_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x100) ^ class_salt(target));
    let id = format!("{}{}", target.symbol().replace('~', "X"), seed);
    let (mut r, t) = match target {
        Class::Normal => normal(&id, &mut rng, seed, duration_s),
        Class::AFib => afib(&id, &mut rng, seed, duration_s),
        Class::Other => {
            let variant = OtherVariant::ALL[rng.gen_range(0..OtherVariant::ALL.len())];
            other(&id, variant, &mut rng, seed, duration_s)
        }
        Class::Noisy => noisy(&id, &mut rng, seed, duration_s),
    };
    r.label = Some(target);
    Ok((r, t))
}

/// Synthesizes an O-class record of a specific variant.
pub fn synth_other(
    variant: OtherVariant,
    seed: u64,
    duration_s: f64,
) -> Result<(Record, SynthTruth)> {
    check_duration(duration_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x100) ^ 0x4f00 ^ variant as u64);
    let id = format!("O{seed}");
    let (mut r, t) = other(&id, variant, &mut rng, seed, duration_s);
    r.label = Some(Class::Other);
    Ok((r, t))
}

fn normal(id: &str, rng: &mut ChaCha8Rng, seed: u64, duration_s: f64) -> (Record, SynthTruth) {
    let hr: f64 = rng.gen_range(62.0..88.0);
    let shape = random_shape(rng);
    let rr = regular_rr(rng, 60000.0 / hr, max_beats(duration_s, 500.0));
    let first = rng.gen_range(0.25..0.25 + 60.0 / hr);
    let beats = schedule(first, &rr, duration_s, shape);
    let d = random_disturbance(rng);
    finish(id, beats, duration_s, d, seed, None)
}

fn afib(id: &str, rng: &mut ChaCha8Rng, seed: u64, duration_s: f64) -> (Record, SynthTruth) {
    let median_rr: f64 = rng.gen_range(550.0..900.0);
    let mut shape = random_shape(rng);
    shape.p_amp = 0.0;
    let n = max_beats(duration_s, median_rr * 0.4);
    // Redraw until the irregularity constraint holds on the RR series actually used.
    let beats = loop {
        let w: f64 = rng.gen_range(0.45..0.6);
        let rr: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(median_rr * (1.0 - w)..median_rr * (1.0 + w)))
            .collect();
        let first = rng.gen_range(0.25..0.6);
        let beats = schedule(first, &rr, duration_s, shape);
        let used: Vec<f64> = beats
            .windows(2)
            .map(|b| (b[1].time_s - b[0].time_s) * 1000.0)
            .collect();
        let (Some(m), Some(d)) = (stats::median(&used), stats::mad(&used)) else {
            continue;
        };
        if d / m >= 0.2 {
            break beats;
        }
    };
    let mut d = random_disturbance(rng);
    d.fwave_amp = rng.gen_range(0.008..0.025);
    finish(id, beats, duration_s, d, seed, None)
}

fn other(
    id: &str,
    variant: OtherVariant,
    rng: &mut ChaCha8Rng,
    seed: u64,
    duration_s: f64,
) -> (Record, SynthTruth) {
    let mut shape = random_shape(rng);
    let d = random_disturbance(rng);
    let hr: f64 = match variant {
        OtherVariant::Tachycardia => rng.gen_range(110.0..150.0),
        OtherVariant::Bradycardia => rng.gen_range(36.0..46.0),
        _ => rng.gen_range(62.0..88.0),
    };
    let base_rr = 60000.0 / hr;
    match variant {
        OtherVariant::Tachycardia => {
            // Shorter QT and PR at high rates.
            shape.t_offset_s = 0.2;
            shape.p_offset_s = -0.13;
        }
        OtherVariant::WideQrs => shape.qrs_ms = rng.gen_range(135.0..160.0),
        _ => {}
    }
    let rr = regular_rr(rng, base_rr, max_beats(duration_s, base_rr * 0.9));
    let first = rng.gen_range(0.25..0.25 + base_rr / 1000.0);
    let mut beats = schedule(first, &rr, duration_s, shape);
    if variant == OtherVariant::Ectopic && beats.len() > 8 {
        let count = rng.gen_range(1..=3usize).min((beats.len() - 6) / 3);
        let mut picked: Vec<usize> = Vec::new();
        while picked.len() < count {
            let k = rng.gen_range(3..beats.len() - 3);
            if picked.iter().all(|&p| p.abs_diff(k) >= 3) {
                picked.push(k);
            }
        }
        for k in picked {
            // Premature beat with a full compensatory pause: the next beat keeps its slot.
            let prev = beats[k - 1].time_s;
            let next = beats[k + 1].time_s;
            beats[k].time_s = prev + 0.31 * (next - prev);
            beats[k].shape = BeatShape::ventricular(&shape);
            beats[k].ectopic = true;
        }
    }
    finish(id, beats, duration_s, d, seed, Some(variant))
}

fn noisy(id: &str, rng: &mut ChaCha8Rng, seed: u64, duration_s: f64) -> (Record, SynthTruth) {
    let hr: f64 = rng.gen_range(60.0..100.0);
    let shape = random_shape(rng);
    let rr = regular_rr(rng, 60000.0 / hr, max_beats(duration_s, 500.0));
    let first = rng.gen_range(0.25..0.25 + 60.0 / hr);
    let beats = schedule(first, &rr, duration_s, shape);
    let n = (duration_s * CANONICAL_FS as f64).round() as usize;
    let clean = render_beats(&beats, CANONICAL_FS, n);
    let signal_power = clean.iter().map(|x| x * x).sum::<f64>() / n as f64;
    let snr_db: f64 = rng.gen_range(-8.0..-1.0);
    let noise_power = signal_power * 10f64.powf(-snr_db / 10.0);
    // Split the noise budget between white noise and a motion-artifact sinusoid.
    let white_frac: f64 = rng.gen_range(0.4..0.9);
    let d = Disturbance {
        noise_sd: (noise_power * white_frac).sqrt(),
        wander_amp: (2.0 * noise_power * (1.0 - white_frac)).sqrt(),
        wander_hz: rng.gen_range(0.8..3.0),
        fwave_amp: 0.0,
    };
    finish(id, beats, duration_s, d, seed, None)
}

/// One planned corpus record.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedRecord {
    pub id: String,
    pub class: Class,
    pub seed: u64,
    pub duration_s: f64,
}

/// Corpus plan for `per_class` records of each class, interleaved by class.
pub fn corpus_plan(per_class: usize, seed: u64) -> Vec<PlannedRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let mut plan = Vec::with_capacity(per_class * 4);
    for i in 0..per_class {
        for class in Class::ALL {
            let duration_s = if rng.gen_bool(0.7) {
                30.0
            } else {
                rng.gen_range(MIN_DURATION_S..=MAX_DURATION_S).round()
            };
            plan.push(PlannedRecord {
                id: format!("{}{:05}", class.symbol().replace('~', "X"), i + 1),
                class,
                seed: rng.gen(),
                duration_s,
            });
        }
    }
    plan
}

impl PlannedRecord {
    pub fn generate(&self) -> Result<Record> {
        let mut r = synth_record(self.class, self.seed, self.duration_s)?;
        r.id = self.id.clone();
        Ok(r)
    }
}

/// Generates every record of `corpus_plan(per_class, seed)`.
pub fn synth_corpus(per_class: usize, seed: u64) -> Result<Vec<Record>> {
    corpus_plan(per_class, seed).iter().map(PlannedRecord::generate).collect()
}
