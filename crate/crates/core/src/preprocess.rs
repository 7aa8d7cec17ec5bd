//! Baseline-wander removal and lead-inversion detection.
//!
//! Inversion is decided by a logistic regression over 14 polarity-sensitive
//! features of the raw signal and a tentative delineation. Each feature's
//! behaviour under `negate(record)` is listed in [`INVERSION_FEATURES`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conduction::BeatObservation;
use crate::error::{Error, Result};
use crate::signal_io::Record;
use crate::stats;

pub const NUM_INVERSION_FEATURES: usize = 14;

/// How a feature value transforms when the record is negated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegationRule {
    /// v -> 1 - v
    Complement,
    /// v -> -v
    Negate,
    /// v -> 1 / v
    Reciprocal,
    /// v -> -(value of the named partner feature)
    NegateSwap(usize),
    Unchanged,
}

/// `(name, rule under negation)` for f1..f14, in vector order.
pub const INVERSION_FEATURES: [(&str, NegationRule); NUM_INVERSION_FEATURES] = [
    ("neg_qrs_frac", NegationRule::Complement),
    ("neg_t_frac", NegationRule::Complement),
    ("neg_p_frac", NegationRule::Complement),
    ("median_qrs_signed_amp", NegationRule::Negate),
    ("median_t_signed_amp", NegationRule::Negate),
    ("median_p_signed_amp", NegationRule::Negate),
    ("signal_skewness", NegationRule::Negate),
    ("max_over_abs_min", NegationRule::Reciprocal),
    ("median_qrs_range", NegationRule::Unchanged),
    ("median_r_value", NegationRule::NegateSwap(10)),
    ("median_s_value", NegationRule::NegateSwap(9)),
    ("above_baseline_frac", NegationRule::Complement),
    ("median_qrs_area", NegationRule::Negate),
    ("template_reversal_corr", NegationRule::Unchanged),
];

/// Small offset keeping the extremum ratio finite.
const RATIO_EPS: f64 = 1e-6;

/// Signal minus a two-pass (200 ms then 600 ms) running-median baseline.
/// Records shorter than the first window are returned unchanged.
pub fn baseline_filter(r: &Record) -> Record {
    let odd = |ms: f64| {
        let w = (ms * r.fs as f64 / 1000.0).round() as usize;
        w | 1
    };
    let w1 = odd(200.0);
    if r.samples.len() < w1 {
        return r.clone();
    }
    let first = stats::median_filter(&r.samples, w1);
    let baseline = stats::median_filter(&first, odd(600.0));
    Record {
        samples: r
            .samples
            .iter()
            .zip(&baseline)
            .map(|(x, b)| x - b)
            .collect(),
        ..r.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionFeatures(pub [f64; NUM_INVERSION_FEATURES]);

fn negative_fraction(values: impl Iterator<Item = f64>) -> f64 {
    let (neg, total) = values.fold((0usize, 0usize), |(n, t), v| (n + (v < 0.0) as usize, t + 1));
    if total == 0 {
        0.5
    } else {
        neg as f64 / total as f64
    }
}

pub fn inversion_features(r: &Record, beats: &[BeatObservation]) -> Result<InversionFeatures> {
    if beats.is_empty() {
        return Err(Error::Evidence(format!(
            "record {}: inversion features need at least one beat",
            r.id
        )));
    }
    let x = &r.samples;
    let mut f = [0.0; NUM_INVERSION_FEATURES];

    f[0] = negative_fraction(beats.iter().map(|b| b.qrs_polarity as f64));
    f[1] = negative_fraction(beats.iter().filter_map(|b| b.t.map(|w| w.amp)));
    f[2] = negative_fraction(beats.iter().filter_map(|b| b.p.map(|w| w.amp)));

    let signed_qrs: Vec<f64> = beats.iter().map(BeatObservation::signed_qrs_amp).collect();
    let t_amps: Vec<f64> = beats.iter().filter_map(|b| b.t.map(|w| w.amp)).collect();
    let p_amps: Vec<f64> = beats.iter().filter_map(|b| b.p.map(|w| w.amp)).collect();
    f[3] = stats::median_or(&signed_qrs, 0.0);
    f[4] = stats::median_or(&t_amps, 0.0);
    f[5] = stats::median_or(&p_amps, 0.0);

    f[6] = stats::skewness(x);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    f[7] = (max.max(0.0) + RATIO_EPS) / ((-min).max(0.0) + RATIO_EPS);

    let mut ranges = Vec::with_capacity(beats.len());
    let mut r_values = Vec::with_capacity(beats.len());
    let mut s_values = Vec::with_capacity(beats.len());
    let mut areas = Vec::with_capacity(beats.len());
    let dt_ms = 1000.0 / r.fs as f64;
    for b in beats {
        let w = &x[b.qrs_onset..=b.qrs_offset.min(x.len() - 1)];
        let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
        ranges.push(hi - lo);
        r_values.push(hi);
        s_values.push(lo);
        areas.push(w.iter().sum::<f64>() * dt_ms);
    }
    f[8] = stats::median_or(&ranges, 0.0);
    f[9] = stats::median_or(&r_values, 0.0);
    f[10] = stats::median_or(&s_values, 0.0);

    let above = x.iter().filter(|&&v| v > 0.0).count() as f64;
    let ties = x.iter().filter(|&&v| v == 0.0).count() as f64;
    f[11] = (above + 0.5 * ties) / x.len() as f64;
    f[12] = stats::median_or(&areas, 0.0);

    let half = (0.06 * r.fs as f64).round() as isize;
    let mut mean_snippet = vec![0.0; (2 * half + 1) as usize];
    for b in beats {
        for (k, o) in (-half..=half).enumerate() {
            let i = (b.qrs_peak as isize + o).clamp(0, x.len() as isize - 1) as usize;
            mean_snippet[k] += x[i];
        }
    }
    let reversed: Vec<f64> = mean_snippet.iter().rev().copied().collect();
    f[13] = stats::correlation(&mean_snippet, &reversed);

    Ok(InversionFeatures(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Serialize, Deserialize)]
struct LogRegFile {
    weights: Vec<f64>,
    bias: f64,
    version: u32,
}

impl LogRegModel {
    pub fn zero() -> Self {
        LogRegModel {
            weights: vec![0.0; NUM_INVERSION_FEATURES],
            bias: 0.0,
        }
    }

    pub fn decision(&self, f: &InversionFeatures) -> f64 {
        self.weights.iter().zip(&f.0).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&LogRegFile {
            weights: self.weights.clone(),
            bias: self.bias,
            version: 1,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: LogRegFile = serde_json::from_str(s)?;
        if f.version != 1 || f.weights.len() != NUM_INVERSION_FEATURES {
            return Err(Error::Shape(format!(
                "logistic model: version {} with {} weights",
                f.version,
                f.weights.len()
            )));
        }
        Ok(LogRegModel {
            weights: f.weights,
            bias: f.bias,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub const LOGREG_MAX_ITER: usize = 10_000;
pub const LOGREG_TOL: f64 = 1e-6;

/// Fits an L2-penalized logistic regression by full-batch gradient ascent.
///
/// Features are standardized internally (the penalty acts on standardized
/// weights); the returned model works on raw features. Optimization stops when
/// the gradient max-norm drops below [`LOGREG_TOL`] or after [`LOGREG_MAX_ITER`]
/// iterations.
pub fn train_logreg(x: &[InversionFeatures], y: &[bool], l2: f64) -> Result<LogRegModel> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} rows but {} labels", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::DegenerateData("need at least 2 rows".into()));
    }
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        return Err(Error::DegenerateData("only one class present".into()));
    }
    let d = NUM_INVERSION_FEATURES;
    let n = x.len() as f64;
    let mut mu = [0.0; NUM_INVERSION_FEATURES];
    let mut sd = [0.0; NUM_INVERSION_FEATURES];
    for j in 0..d {
        let col: Vec<f64> = x.iter().map(|r| r.0[j]).collect();
        mu[j] = stats::mean(&col).unwrap_or(0.0);
        let s = stats::std_dev(&col).unwrap_or(0.0);
        sd[j] = if s > 1e-12 { s } else { 1.0 };
    }
    let z: Vec<[f64; NUM_INVERSION_FEATURES]> = x
        .iter()
        .map(|r| std::array::from_fn(|j| (r.0[j] - mu[j]) / sd[j]))
        .collect();
    let targets: Vec<f64> = y.iter().map(|&v| v as u8 as f64).collect();

    // Diagonal step sizes from twice the block-diagonal curvature bound, so the
    // unpenalized bias still moves when l2 is huge.
    let max_sq = z
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max);
    let step_w = 1.0 / (2.0 * (0.25 * max_sq + l2));
    let step_b = 1.0 / (2.0 * 0.25);

    let mut w = [0.0; NUM_INVERSION_FEATURES];
    let mut b = 0.0;
    for _ in 0..LOGREG_MAX_ITER {
        let mut gw = [0.0; NUM_INVERSION_FEATURES];
        let mut gb = 0.0;
        for (row, &t) in z.iter().zip(&targets) {
            let p = sigmoid(row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b);
            let e = t - p;
            for j in 0..d {
                gw[j] += e * row[j];
            }
            gb += e;
        }
        for j in 0..d {
            gw[j] = gw[j] / n - l2 * w[j];
        }
        gb /= n;
        let norm = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
        if norm < LOGREG_TOL {
            break;
        }
        for j in 0..d {
            w[j] += step_w * gw[j];
        }
        b += step_b * gb;
    }

    let weights: Vec<f64> = (0..d).map(|j| w[j] / sd[j]).collect();
    let bias = b - (0..d).map(|j| w[j] * mu[j] / sd[j]).sum::<f64>();
    Ok(LogRegModel { weights, bias })
}

/// Probability of inversion and the decision (strictly above 0.5).
pub fn detect_inversion(m: &LogRegModel, f: &InversionFeatures) -> (f64, bool) {
    let p = sigmoid(m.decision(f));
    (p, p > 0.5)
}
