//! End-to-end plumbing: configuration, per-record analysis, model training
//! with out-of-fold stacking, the persisted bundle and prediction.

use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::class::{Class, ClassProbabilities};
use crate::conduction::{self, BeatObservation, ConductionParams};
use crate::ensemble::{self, LdaModel, DEFAULT_SHRINK};
use crate::error::{Error, Result};
use crate::evaluation::stratified_folds;
use crate::features::{self, BeatFeatureSequence, FeatureParams, GlobalFeatures, NUM_BEAT_FEATURES};
use crate::gbt::{self, GbtHyperparams, GbtModel};
use crate::interpretation::{self, Interpretation, InterpretationParams};
use crate::preprocess::{self, InversionFeatures, LogRegModel};
use crate::rnn::{self, RnnConfig, RnnModel};
use crate::signal_io::Record;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub enabled: bool,
    pub l2: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig { enabled: true, l2: 1e-2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub num_rnns: usize,
    /// Internal folds producing out-of-fold predictions for the stacker.
    pub stack_folds: usize,
    pub shrink: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            num_rnns: 3,
            stack_folds: 8,
            shrink: DEFAULT_SHRINK,
        }
    }
}

/// Settings used inside cross-validation, where every fold retrains the
/// whole stack. The sequence model is scaled down there to keep a full run
/// within a desk-top budget; `train` always uses the top-level settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    pub gbt: GbtHyperparams,
    pub rnn: RnnConfig,
    pub ensemble: EnsembleConfig,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 8,
            // Child hessian of 20 leaves a few hundred records almost
            // unsplittable; the full setting targets corpora of thousands.
            gbt: GbtHyperparams {
                min_child_weight: 2.0,
                ..GbtHyperparams::default()
            },
            rnn: RnnConfig {
                mlp_hidden: 16,
                mlp_out: 8,
                lstm_units: 8,
                max_epochs: 25,
                early_stop: 8,
                ..RnnConfig::default()
            },
            ensemble: EnsembleConfig {
                stack_folds: 2,
                ..EnsembleConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub version: u32,
    pub conduction: ConductionParams,
    pub interpretation: InterpretationParams,
    pub features: FeatureParams,
    pub inversion: InversionConfig,
    pub gbt: GbtHyperparams,
    pub rnn: RnnConfig,
    pub ensemble: EnsembleConfig,
    pub cv: CvConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            version: CONFIG_VERSION,
            conduction: ConductionParams::default(),
            interpretation: InterpretationParams::default(),
            features: FeatureParams::default(),
            inversion: InversionConfig::default(),
            gbt: GbtHyperparams::default(),
            rnn: RnnConfig::default(),
            ensemble: EnsembleConfig::default(),
            cv: CvConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Overlays `text` on the defaults, so a partial table keeps the
    /// defaults of its section (the compact `cv.rnn`, for instance). Unknown
    /// keys are rejected at any depth.
    pub fn from_toml(text: &str) -> Result<Self> {
        let err = |e: &dyn std::fmt::Display| Error::InvalidArgument(format!("config: {e}"));
        let user: toml::Table = toml::from_str(text).map_err(|e| err(&e))?;
        let mut merged = toml::Table::try_from(PipelineConfig::default()).map_err(|e| err(&e))?;
        overlay(&mut merged, user, "")?;
        let cfg: PipelineConfig = toml::Value::Table(merged).try_into().map_err(|e| err(&e))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::InvalidArgument(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn overlay(base: &mut toml::Table, user: toml::Table, prefix: &str) -> Result<()> {
    for (key, value) in user {
        let path = format!("{prefix}{key}");
        match (base.get_mut(&key), value) {
            (None, _) => return Err(Error::InvalidArgument(format!("config: unknown key {path:?}"))),
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u, &format!("{path}."))?,
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

/// Independent child seed for a named stage.
pub fn derive_seed(seed: u64, stage: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(stage))
}

/// Baseline-filtered signal with its beat observations in one orientation.
#[derive(Debug, Clone)]
pub struct Observed {
    pub signal: Record,
    pub beats: Vec<BeatObservation>,
    pub inversion: Option<InversionFeatures>,
}

impl Observed {
    /// Too-short or beat-less signals yield no beats rather than an error.
    pub fn new(signal: Record, cfg: &PipelineConfig) -> Result<Self> {
        let beats = match conduction::observe(&signal, &cfg.conduction) {
            Ok(b) => b,
            Err(Error::Evidence(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        let inversion = if beats.is_empty() {
            None
        } else {
            Some(preprocess::inversion_features(&signal, &beats)?)
        };
        Ok(Observed {
            signal,
            beats,
            inversion,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordAnalysis {
    pub id: String,
    pub label: Option<Class>,
    pub inverted: bool,
    pub interpretation: Interpretation,
    pub global: GlobalFeatures,
    pub sequence: BeatFeatureSequence,
}

/// Interprets an observed signal and extracts both feature views. Records
/// with fewer than three beats get a single all-zero beat row.
pub fn analyze_observed(obs: &Observed, inverted: bool, cfg: &PipelineConfig) -> Result<RecordAnalysis> {
    let itp = interpretation::abstract_rhythms(&obs.signal, &obs.beats, &cfg.interpretation, &cfg.conduction);
    let global = features::global_features(&obs.signal, &itp, &cfg.features)?;
    let sequence = if itp.beats.len() >= 3 {
        features::beat_features(&obs.signal, &itp, &cfg.features)?
    } else {
        BeatFeatureSequence {
            rows: vec![[0.0; NUM_BEAT_FEATURES]],
        }
    };
    Ok(RecordAnalysis {
        id: obs.signal.id.clone(),
        label: obs.signal.label,
        inverted,
        interpretation: itp,
        global,
        sequence,
    })
}

/// Both orientations of a record, observed eagerly and analyzed on demand.
pub struct RecordCache {
    pub upright: Observed,
    pub flipped: Option<Observed>,
    analyses: [OnceLock<RecordAnalysis>; 2],
}

impl RecordCache {
    pub fn new(r: &Record, cfg: &PipelineConfig) -> Result<Self> {
        r.validate()?;
        let filtered = preprocess::baseline_filter(r);
        let flipped = if cfg.inversion.enabled {
            Some(Observed::new(filtered.negated(), cfg)?)
        } else {
            None
        };
        Ok(RecordCache {
            upright: Observed::new(filtered, cfg)?,
            flipped,
            analyses: [OnceLock::new(), OnceLock::new()],
        })
    }

    pub fn analysis(&self, inverted: bool, cfg: &PipelineConfig) -> Result<&RecordAnalysis> {
        let slot = &self.analyses[inverted as usize];
        if let Some(a) = slot.get() {
            return Ok(a);
        }
        let obs = if inverted {
            self.flipped
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("inversion handling is disabled".into()))?
        } else {
            &self.upright
        };
        let a = analyze_observed(obs, inverted, cfg)?;
        Ok(slot.get_or_init(|| a))
    }

    /// Whether the detector flags the upright signal as inverted.
    pub fn is_inverted(&self, logreg: Option<&LogRegModel>) -> bool {
        match (logreg, &self.upright.inversion, &self.flipped) {
            (Some(m), Some(f), Some(_)) => preprocess::detect_inversion(m, f).1,
            _ => false,
        }
    }

    pub fn oriented(&self, logreg: Option<&LogRegModel>, cfg: &PipelineConfig) -> Result<&RecordAnalysis> {
        self.analysis(self.is_inverted(logreg), cfg)
    }
}

pub fn build_caches(records: &[Record], cfg: &PipelineConfig) -> Result<Vec<RecordCache>> {
    records.par_iter().map(|r| RecordCache::new(r, cfg)).collect()
}

/// Trains the polarity detector on training records (taken as upright) and
/// their negations. Returns `None` when handling is disabled.
pub fn train_inversion(caches: &[&RecordCache], cfg: &PipelineConfig) -> Result<Option<LogRegModel>> {
    if !cfg.inversion.enabled {
        return Ok(None);
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for c in caches {
        if let (Some(up), Some(Some(down))) = (c.upright.inversion, c.flipped.as_ref().map(|f| f.inversion)) {
            x.push(up);
            y.push(false);
            x.push(down);
            y.push(true);
        }
    }
    if x.is_empty() {
        return Ok(None);
    }
    preprocess::train_logreg(&x, &y, cfg.inversion.l2).map(Some)
}

/// Base models and stacker trained on one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub gbt: GbtModel,
    pub rnns: Vec<RnnModel>,
    pub lda: LdaModel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub gbt: ClassProbabilities,
    pub rnn: ClassProbabilities,
    pub stacked: ClassProbabilities,
    pub class: Class,
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub gbt: GbtHyperparams,
    pub rnn: RnnConfig,
    pub ensemble: EnsembleConfig,
}

impl TrainSettings {
    pub fn full(cfg: &PipelineConfig) -> Self {
        TrainSettings {
            gbt: cfg.gbt,
            rnn: cfg.rnn.clone(),
            ensemble: cfg.ensemble,
        }
    }

    pub fn cv(cfg: &PipelineConfig) -> Self {
        TrainSettings {
            gbt: cfg.cv.gbt,
            rnn: cfg.cv.rnn.clone(),
            ensemble: cfg.cv.ensemble,
        }
    }
}

fn labels_of(data: &[&RecordAnalysis]) -> Result<Vec<Class>> {
    data.iter()
        .map(|a| a.label.ok_or_else(|| Error::InvalidArgument(format!("record {} has no label", a.id))))
        .collect()
}

/// GBT plus the sequence models, which differ only by seed (and therefore
/// by validation split).
fn train_base(data: &[&RecordAnalysis], s: &TrainSettings, seed: u64) -> Result<(GbtModel, Vec<RnnModel>)> {
    let y: Vec<usize> = labels_of(data)?.iter().map(|c| c.index()).collect();
    let x: Vec<Vec<f64>> = data.iter().map(|a| a.global.0.to_vec()).collect();
    let seqs: Vec<BeatFeatureSequence> = data.iter().map(|a| a.sequence.clone()).collect();
    let gbt = gbt::train_gbt(&x, &y, &s.gbt, derive_seed(seed, 100))?;
    let rnns = (0..s.ensemble.num_rnns)
        .into_par_iter()
        .map(|k| rnn::train_rnn(&seqs, &y, &s.rnn, derive_seed(seed, 200 + k as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok((gbt, rnns))
}

fn base_probs(gbt: &GbtModel, rnns: &[RnnModel], a: &RecordAnalysis) -> Result<(ClassProbabilities, ClassProbabilities)> {
    let g = gbt::predict_gbt(gbt, &a.global.0)?;
    let r = rnns
        .iter()
        .map(|m| rnn::forward(m, &a.sequence))
        .collect::<Result<Vec<_>>>()?;
    Ok((g, ensemble::average_probs(&r)))
}

/// Out-of-fold stacking: internal folds train base models whose held-out
/// predictions fit the LDA, then the base models are refit on everything.
pub fn train_models(data: &[&RecordAnalysis], s: &TrainSettings, seed: u64) -> Result<Models> {
    let labels = labels_of(data)?;
    let folds = stratified_folds(&labels, s.ensemble.stack_folds, derive_seed(seed, 1))?;
    let per_fold: Vec<Vec<(usize, [f64; ensemble::STACK_DIM])>> = (0..s.ensemble.stack_folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..data.len()).filter(|&i| folds[i] != f).collect();
            let held: Vec<usize> = (0..data.len()).filter(|&i| folds[i] == f).collect();
            // Leakage guard: no record may feed both a base model and its own
            // stacking row.
            let train_ids: std::collections::HashSet<&str> = train.iter().map(|&i| data[i].id.as_str()).collect();
            if held.iter().any(|&i| train_ids.contains(data[i].id.as_str())) {
                return Err(Error::InvalidArgument("stacking fold leaks records into its own training set".into()));
            }
            if held.is_empty() {
                return Ok(Vec::new());
            }
            let subset: Vec<&RecordAnalysis> = train.iter().map(|&i| data[i]).collect();
            let (g, r) = train_base(&subset, s, derive_seed(seed, 1000 + f as u64))?;
            held.iter()
                .map(|&i| {
                    let (pg, pr) = base_probs(&g, &r, data[i])?;
                    Ok((i, ensemble::stack_features(&pg, &pr)))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut rows = vec![[0.0; ensemble::STACK_DIM]; data.len()];
    for (i, z) in per_fold.into_iter().flatten() {
        rows[i] = z;
    }
    let y: Vec<usize> = labels.iter().map(|c| c.index()).collect();
    let lda = ensemble::fit_lda(&rows, &y, s.ensemble.shrink)?;
    let (gbt, rnns) = train_base(data, s, derive_seed(seed, 2))?;
    Ok(Models { gbt, rnns, lda })
}

pub fn predict(models: &Models, a: &RecordAnalysis) -> Result<Prediction> {
    let (g, r) = base_probs(&models.gbt, &models.rnns, a)?;
    let (stacked, class) = ensemble::predict_stacked(&g, std::slice::from_ref(&r), &models.lda)?;
    Ok(Prediction {
        gbt: g,
        rnn: r,
        stacked,
        class,
    })
}

/// Everything `classify` needs, persisted as a directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub config: PipelineConfig,
    pub seed: u64,
    pub logreg: Option<LogRegModel>,
    pub models: Models,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    version: u32,
    config_hash: String,
    seed: u64,
    num_rnns: usize,
    inversion_model: bool,
    config: PipelineConfig,
}

const BUNDLE_VERSION: u32 = 1;

impl Bundle {
    pub fn train(records: &[Record], cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        let caches = build_caches(records, cfg)?;
        let refs: Vec<&RecordCache> = caches.iter().collect();
        let logreg = train_inversion(&refs, cfg)?;
        let data = caches
            .par_iter()
            .map(|c| c.oriented(logreg.as_ref(), cfg))
            .collect::<Result<Vec<_>>>()?;
        let models = train_models(&data, &TrainSettings::full(cfg), derive_seed(seed, 3))?;
        Ok(Bundle {
            config: cfg.clone(),
            seed,
            logreg,
            models,
        })
    }

    pub fn analyze(&self, r: &Record) -> Result<RecordAnalysis> {
        let cache = RecordCache::new(r, &self.config)?;
        cache.oriented(self.logreg.as_ref(), &self.config).cloned()
    }

    pub fn classify(&self, records: &[Record]) -> Result<Vec<Prediction>> {
        records
            .par_iter()
            .map(|r| predict(&self.models, &self.analyze(r)?))
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = BundleManifest {
            version: BUNDLE_VERSION,
            config_hash: self.config.hash(),
            seed: self.seed,
            num_rnns: self.models.rnns.len(),
            inversion_model: self.logreg.is_some(),
            config: self.config.clone(),
        };
        let path = dir.join("bundle.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        if let Some(m) = &self.logreg {
            m.save(dir.join("logreg.json"))?;
        }
        self.models.gbt.save(dir.join("gbt.json"))?;
        for (k, m) in self.models.rnns.iter().enumerate() {
            m.save(dir.join(format!("rnn_{k}.bin")))?;
        }
        self.models.lda.save(dir.join("lda.json"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("bundle.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: BundleManifest = serde_json::from_str(&text)?;
        if manifest.version != BUNDLE_VERSION {
            return Err(Error::Format {
                path,
                msg: format!("bundle version {} is not supported", manifest.version),
            });
        }
        if manifest.config.hash() != manifest.config_hash {
            return Err(Error::Format {
                path,
                msg: "config hash does not match the stored configuration".into(),
            });
        }
        let logreg = if manifest.inversion_model {
            Some(LogRegModel::load(dir.join("logreg.json"))?)
        } else {
            None
        };
        let rnns = (0..manifest.num_rnns)
            .map(|k| RnnModel::load(dir.join(format!("rnn_{k}.bin"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bundle {
            config: manifest.config,
            seed: manifest.seed,
            logreg,
            models: Models {
                gbt: GbtModel::load(dir.join("gbt.json"))?,
                rnns,
                lda: LdaModel::load(dir.join("lda.json"))?,
            },
        })
    }
}
