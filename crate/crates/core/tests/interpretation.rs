use std::cmp::Ordering;

use ecg_abduction::conduction::{self, BeatObservation, BeatTag, ConductionParams, Wave};
use ecg_abduction::interpretation::{
    abstract_rhythms, best_tiling, compare_tilings, is_valid_tiling, match_pattern, tiling_cost,
    EditOp, Evidence, InterpretationParams, Pattern, RhythmEpisode,
};
use ecg_abduction::preprocess::baseline_filter;
use ecg_abduction::synth::{self, BeatShape, Disturbance, ScheduledBeat};
use ecg_abduction::{Class, Record};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ip() -> InterpretationParams {
    InterpretationParams::default()
}

fn cp() -> ConductionParams {
    ConductionParams::default()
}

/// Every admissible tiling, enumerated recursively; returns the best by the
/// same ordering the search promises.
fn exhaustive(ev: &Evidence, n: usize, params: &InterpretationParams) -> (Vec<RhythmEpisode>, f64) {
    fn go(
        ev: &Evidence,
        n: usize,
        params: &InterpretationParams,
        acc: &mut Vec<RhythmEpisode>,
        best: &mut Option<(Vec<RhythmEpisode>, f64)>,
    ) {
        let start = acc.last().map_or(0, |e| e.last + 1);
        if start == n {
            let cost = tiling_cost(acc, params);
            let better = best.as_ref().map_or(true, |(b, c)| {
                compare_tilings((cost, acc), (*c, b)) == Ordering::Less
            });
            if better {
                *best = Some((acc.clone(), cost));
            }
            return;
        }
        for last in start..n {
            for pattern in Pattern::ALL {
                if acc.last().is_some_and(|e| e.pattern == pattern) {
                    continue;
                }
                if pattern != Pattern::Unexplained && last + 1 - start < params.min_episode_beats {
                    continue;
                }
                let (ok, score) = match_pattern(pattern, ev, (start, last), params).unwrap();
                if !ok {
                    continue;
                }
                acc.push(RhythmEpisode {
                    pattern,
                    first: start,
                    last,
                    score,
                });
                go(ev, n, params, acc, best);
                acc.pop();
            }
        }
    }
    let mut best = None;
    go(ev, n, params, &mut Vec::new(), &mut best);
    best.unwrap_or((Vec::new(), 0.0))
}

fn fake_beat(peak: usize, p: bool, tag: BeatTag) -> BeatObservation {
    BeatObservation {
        qrs_onset: peak - 12,
        qrs_peak: peak,
        qrs_offset: peak + 12,
        qrs_amp: 1.0,
        qrs_polarity: 1,
        p: p.then_some(Wave {
            onset: peak - 60,
            peak: peak - 48,
            offset: peak - 36,
            amp: 0.12,
        }),
        t: None,
        tag,
        morph_dist: 0.0,
    }
}

fn random_case(rng: &mut ChaCha8Rng, n: usize) -> (Record, Vec<BeatObservation>) {
    let regime = rng.gen_range(0..5);
    let base = [800.0, 480.0, 1400.0, 700.0, 600.0][regime];
    let spread = if regime == 3 { 0.45 } else { 0.04 };
    let p_prob = [0.95, 0.8, 0.9, 0.1, 0.5][regime];
    let v_prob = rng.gen_range(0.0..0.6);
    let mut peaks = vec![200usize];
    for _ in 1..n {
        let rr: f64 = base * (1.0 + rng.gen_range(-spread..=spread));
        let rr = if rng.gen_bool(0.1) { rr * 2.0 } else { rr };
        peaks.push(peaks.last().unwrap() + (rr * 0.3).round() as usize);
    }
    let len = peaks.last().unwrap() + 300;
    let hz = rng.gen_range(2.0..8.0);
    let amp = rng.gen_range(0.0..0.2);
    let samples = (0..len)
        .map(|i| {
            amp * (std::f64::consts::TAU * hz * i as f64 / 300.0).sin()
                + rng.gen_range(-0.02..0.02)
        })
        .collect();
    let beats = peaks
        .iter()
        .map(|&k| {
            let tag = if rng.gen_bool(v_prob) { BeatTag::Ventricular } else { BeatTag::Normal };
            fake_beat(k, rng.gen_bool(p_prob), tag)
        })
        .collect();
    (Record::new("fuzz", 300, samples), beats)
}

#[test]
fn beam_search_matches_exhaustive_enumeration() {
    let params = ip();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..160 {
        let n = if case < 8 { 12 } else { rng.gen_range(1..=10) };
        let (r, beats) = random_case(&mut rng, n);
        let ev = Evidence::new(&r, &beats, &params);
        let (beam, beam_cost) = best_tiling(&ev, &params);
        let (oracle, oracle_cost) = exhaustive(&ev, n, &params);
        assert!(is_valid_tiling(&beam, n), "case {case}");
        assert_eq!(beam_cost, tiling_cost(&beam, &params));
        assert_eq!(beam_cost, oracle_cost, "case {case}: {beam:?} vs {oracle:?}");
        assert_eq!(beam, oracle, "case {case}");
    }
}

fn fig2_case() -> (Record, Vec<BeatObservation>) {
    let normal = BeatShape::normal();
    let spurious = BeatShape {
        p_amp: 0.0,
        qrs_amp: 0.12,
        qrs_ms: 40.0,
        t_amp: 0.0,
        ..normal
    };
    let mut beats: Vec<ScheduledBeat> = [0.5, 1.3, 2.1, 2.9]
        .iter()
        .map(|&t| ScheduledBeat {
            time_s: t,
            shape: normal,
            ectopic: false,
        })
        .collect();
    beats.insert(
        3,
        ScheduledBeat {
            time_s: 2.4,
            shape: spurious,
            ectopic: false,
        },
    );
    let (r, truth) = synth::record_from_beats("fig2", beats, 3.6, Disturbance::none(), 0);
    let mut obs = conduction::delineate_all(&r, &truth.peak_indices(r.fs), &cp());
    conduction::apply_template(&r, &mut obs, &cp());
    (r, obs)
}

#[test]
fn spurious_detection_is_deleted() {
    let (r, beats) = fig2_case();
    assert_eq!(beats.len(), 5);
    let itp = abstract_rhythms(&r, &beats, &ip(), &cp());
    itp.validate().unwrap();
    assert_eq!(itp.edits.len(), 1, "{:?}", itp.edits);
    assert_eq!(itp.edits[0].op, EditOp::Del);
    assert_eq!(itp.edits[0].sample_index, 720);
    assert_eq!(itp.deleted_count, 1);
    assert_eq!(itp.beats.len(), 4);
    assert_eq!(itp.episodes.len(), 1);
    assert_eq!(itp.episodes[0].pattern, Pattern::Sinus);
}

#[test]
fn missed_beat_is_inserted() {
    let times = [0.5, 1.3, 2.1, 2.9, 3.7];
    let (r, truth) =
        synth::record_from_beat_times("drop", &times, BeatShape::normal(), 4.4, Disturbance::none(), 0);
    let mut peaks = truth.peak_indices(r.fs);
    let missing = peaks.remove(2);
    let mut obs = conduction::delineate_all(&r, &peaks, &cp());
    conduction::apply_template(&r, &mut obs, &cp());
    let itp = abstract_rhythms(&r, &obs, &ip(), &cp());
    itp.validate().unwrap();
    assert_eq!(itp.inserted_count, 1, "{:?}", itp.edits);
    let inserted = itp.edits[0].sample_index;
    assert!(inserted.abs_diff(missing) <= 6, "{inserted} vs {missing}");
    assert_eq!(itp.beats.len(), 5);
    assert!(itp.beats.iter().all(|b| b.is_well_formed()));
    assert_eq!(itp.episodes.len(), 1);
    assert_eq!(itp.episodes[0].pattern, Pattern::Sinus);
}

fn interpret(r: &Record) -> ecg_abduction::interpretation::Interpretation {
    let f = baseline_filter(r);
    let beats = conduction::observe(&f, &cp()).unwrap();
    abstract_rhythms(&f, &beats, &ip(), &cp())
}

#[test]
fn clean_normal_record_is_one_sinus_episode() {
    for seed in 0..6 {
        let r = synth::synth_record(Class::Normal, seed, 30.0).unwrap();
        let itp = interpret(&r);
        itp.validate().unwrap();
        assert_eq!(itp.episodes.len(), 1, "seed {seed}");
        assert_eq!(itp.episodes[0].pattern, Pattern::Sinus);
        assert_eq!(itp.deleted_count, 0);
        assert!(itp.edits.is_empty());
    }
}

#[test]
fn afib_record_is_mostly_afib() {
    for seed in 0..8 {
        let r = synth::synth_record(Class::AFib, seed, 30.0).unwrap();
        let itp = interpret(&r);
        itp.validate().unwrap();
        let afib: usize = itp
            .episodes
            .iter()
            .filter(|e| e.pattern == Pattern::Afib)
            .map(|e| e.len())
            .sum();
        assert!(
            afib as f64 >= 0.8 * itp.beats.len() as f64,
            "seed {seed}: {afib}/{}",
            itp.beats.len()
        );
    }
}

#[test]
fn repair_never_raises_cost_and_logs_deletions() {
    let params = ip();
    for class in Class::ALL {
        for seed in 0..6 {
            let r = synth::synth_record(class, 100 + seed, 20.0).unwrap();
            let f = baseline_filter(&r);
            let beats = conduction::observe(&f, &cp()).unwrap();
            let initial = best_tiling(&Evidence::new(&f, &beats, &params), &params).1;
            let itp = abstract_rhythms(&f, &beats, &params, &cp());
            itp.validate().unwrap();
            assert!(itp.edits.len() <= params.max_repair_passes);
            let mut cost = initial;
            for e in &itp.edits {
                assert_eq!(e.cost_before, cost);
                assert!(e.cost_after < e.cost_before);
                cost = e.cost_after;
                if e.op == EditOp::Del {
                    let (p, m) = (e.window_profile.unwrap(), e.median_profile.unwrap());
                    assert!(p < params.delete_profile_ratio * m);
                }
            }
            assert!(itp.total_cost <= initial);
            assert_eq!(itp.total_cost, cost);
            assert!((0.0..=1.0).contains(&itp.unexplained_time_frac));
        }
    }
}

#[test]
fn interpretation_is_deterministic() {
    let r = synth::synth_record(Class::Noisy, 4, 30.0).unwrap();
    assert_eq!(interpret(&r), interpret(&r));
}

#[test]
fn json_export_has_the_documented_fields() {
    let (r, beats) = fig2_case();
    let itp = abstract_rhythms(&r, &beats, &ip(), &cp());
    let v: serde_json::Value = serde_json::from_str(&itp.to_json().unwrap()).unwrap();
    assert_eq!(v["beats"].as_array().unwrap().len(), 4);
    assert_eq!(v["episodes"][0]["pattern"], "SINUS");
    assert_eq!(v["episodes"][0]["first"], 0);
    assert_eq!(v["episodes"][0]["last"], 3);
    assert_eq!(v["edits"][0]["op"], "del");
    assert_eq!(v["edits"][0]["sample_index"], 720);
}
