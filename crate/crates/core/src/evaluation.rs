//! Challenge scoring, stratified folds, answer files and cross-validation
//! reports.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class::{Class, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::pipeline::{self, derive_seed, PipelineConfig, RecordAnalysis, TrainSettings};
use crate::signal_io::Record;

/// Rows are reference classes, columns predictions, both in (N, A, O, ~) order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn add(&mut self, reference: Class, predicted: Class) {
        self.counts[reference.index()][predicted.index()] += 1;
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Class, Class)>) -> Self {
        let mut cm = ConfusionMatrix::default();
        for (r, p) in pairs {
            cm.add(r, p);
        }
        cm
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for i in 0..NUM_CLASSES {
            for j in 0..NUM_CLASSES {
                self.counts[i][j] += other.counts[i][j];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChallengeScore {
    /// Per-class F1 in (N, A, O, ~) order.
    pub f1: [f64; NUM_CLASSES],
    /// Mean F1 over N, A and O.
    pub final_score: f64,
}

/// F1 per class as `2·TP / (reference + predicted)`, 0 for a class that is
/// neither present nor predicted.
pub fn challenge_score(cm: &ConfusionMatrix) -> ChallengeScore {
    let mut f1 = [0.0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let row: u64 = cm.counts[c].iter().sum();
        let col: u64 = (0..NUM_CLASSES).map(|r| cm.counts[r][c]).sum();
        if row + col > 0 {
            f1[c] = 2.0 * cm.counts[c][c] as f64 / (row + col) as f64;
        }
    }
    ChallengeScore {
        f1,
        final_score: (f1[0] + f1[1] + f1[2]) / 3.0,
    }
}

/// Fold index per record. Each class is shuffled with the seeded generator
/// and dealt round-robin, continuing where the previous class stopped so
/// that fold totals stay balanced as well.
pub fn stratified_folds(labels: &[Class], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for class in Class::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub gbt: f64,
    pub rnn: f64,
    pub stacker: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_records: usize,
    pub scores: MethodScores,
    pub confusion: [ConfusionMatrix; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub seed: u64,
    pub config_hash: String,
    pub folds: Vec<FoldResult>,
    pub means: MethodScores,
}

impl CvReport {
    pub fn new(seed: u64, config_hash: String, folds: Vec<FoldResult>) -> Result<Self> {
        if folds.len() < 2 {
            return Err(Error::InvalidArgument("a report needs at least 2 folds".into()));
        }
        let n = folds.len() as f64;
        let mean = |f: fn(&MethodScores) -> f64| folds.iter().map(|r| f(&r.scores)).sum::<f64>() / n;
        let means = MethodScores {
            gbt: mean(|s| s.gbt),
            rnn: mean(|s| s.rnn),
            stacker: mean(|s| s.stacker),
        };
        Ok(CvReport {
            seed,
            config_hash,
            folds,
            means,
        })
    }

    /// One row per method, one column per fold, then the mean.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for f in &self.folds {
            let _ = write!(out, ",fold{}", f.fold + 1);
        }
        out.push_str(",mean\n");
        let rows: [(&str, fn(&MethodScores) -> f64); 3] =
            [("gbt", |s| s.gbt), ("rnn", |s| s.rnn), ("stacker", |s| s.stacker)];
        for (name, get) in rows {
            out.push_str(name);
            for f in &self.folds {
                let _ = write!(out, ",{:.4}", get(&f.scores));
            }
            let _ = writeln!(out, ",{:.4}", get(&self.means));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Writes `record_id,label` rows in the given order.
pub fn format_answers(answers: &[(String, Class)]) -> String {
    let mut out = String::from("record_id,label\n");
    for (id, c) in answers {
        let _ = writeln!(out, "{id},{}", c.symbol());
    }
    out
}

/// Reads `record_id` and `label` columns, located by header name, from an
/// answers file or a manifest. Rows with an empty label are skipped.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<(String, Class)>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!("missing column {name:?}"),
        })
    };
    let (id_col, label_col) = (col("record_id")?, col("label")?);
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let label = row.get(label_col).unwrap_or("").trim();
        if label.is_empty() {
            continue;
        }
        out.push((row.get(id_col).unwrap_or("").trim().to_string(), label.parse()?));
    }
    Ok(out)
}

/// Scores answers against references matched by record id; every reference
/// needs exactly one answer.
pub fn score_answers(answers: &[(String, Class)], reference: &[(String, Class)]) -> Result<(ConfusionMatrix, ChallengeScore)> {
    let mut predicted: HashMap<&str, Class> = HashMap::new();
    for (id, c) in answers {
        if predicted.insert(id, *c).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate answer for {id:?}")));
        }
    }
    let mut cm = ConfusionMatrix::default();
    for (id, truth) in reference {
        let p = predicted
            .get(id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("no answer for record {id:?}")))?;
        cm.add(*truth, *p);
    }
    Ok((cm, challenge_score(&cm)))
}

/// Stratified k-fold evaluation of the whole pipeline. Every fold trains
/// its own polarity detector, base models and stacker on the training part
/// only. `on_fold` sees each fold as it completes.
pub fn run_cv(
    records: &[Record],
    cfg: &PipelineConfig,
    seed: u64,
    mut on_fold: impl FnMut(&FoldResult),
) -> Result<CvReport> {
    let labels = records
        .iter()
        .map(|r| r.label.ok_or_else(|| Error::InvalidArgument(format!("record {} has no label", r.id))))
        .collect::<Result<Vec<Class>>>()?;
    if let Some(c) = Class::ALL.into_iter().find(|c| !labels.contains(c)) {
        return Err(Error::DegenerateData(format!("no record of class {}", c.symbol())));
    }
    let k = cfg.cv.folds;
    let folds = stratified_folds(&labels, k, derive_seed(seed, 10))?;
    let caches = pipeline::build_caches(records, cfg)?;
    let settings = TrainSettings::cv(cfg);
    let mut results = Vec::with_capacity(k);
    for f in 0..k {
        let train: Vec<_> = (0..records.len()).filter(|&i| folds[i] != f).map(|i| &caches[i]).collect();
        let test: Vec<_> = (0..records.len()).filter(|&i| folds[i] == f).map(|i| &caches[i]).collect();
        let logreg = pipeline::train_inversion(&train, cfg)?;
        fn orient<'a>(
            set: &[&'a pipeline::RecordCache],
            logreg: Option<&crate::preprocess::LogRegModel>,
            cfg: &PipelineConfig,
        ) -> Result<Vec<&'a RecordAnalysis>> {
            set.iter().map(|c| c.oriented(logreg, cfg)).collect()
        }
        let train_data = orient(&train, logreg.as_ref(), cfg)?;
        let models = pipeline::train_models(&train_data, &settings, derive_seed(seed, 20 + f as u64))?;
        let mut cms = [ConfusionMatrix::default(); 3];
        for a in orient(&test, logreg.as_ref(), cfg)? {
            let p = pipeline::predict(&models, a)?;
            let truth = a.label.expect("labels checked above");
            cms[0].add(truth, p.gbt.argmax());
            cms[1].add(truth, p.rnn.argmax());
            cms[2].add(truth, p.class);
        }
        let result = FoldResult {
            fold: f,
            test_records: test.len(),
            scores: MethodScores {
                gbt: challenge_score(&cms[0]).final_score,
                rnn: challenge_score(&cms[1]).final_score,
                stacker: challenge_score(&cms[2]).final_score,
            },
            confusion: cms,
        };
        on_fold(&result);
        results.push(result);
    }
    CvReport::new(seed, cfg.hash(), results)
}
