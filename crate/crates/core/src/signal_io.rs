//! Record type, the text signal format, manifests and resampling.
//!
//! Signal file layout (UTF-8, LF):
//!
//! ```text
//! fs=300,gain=1000,baseline=0
//! 12
//! -4
//! ...
//! ```
//!
//! Each sample line is an integer ADC value; millivolts are
//! `(adc - baseline) / gain`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::class::Class;
use crate::error::{Error, Result};

/// Internal processing rate; every record is resampled to it on ingest.
pub const CANONICAL_FS: u32 = 300;

/// Gain used when writing records (1 ADC unit = 1 µV).
pub const DEFAULT_GAIN: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub fs: u32,
    /// Amplitudes in millivolts.
    pub samples: Vec<f64>,
    pub label: Option<Class>,
}

impl Record {
    pub fn new(id: impl Into<String>, fs: u32, samples: Vec<f64>) -> Self {
        Record {
            id: id.into(),
            fs,
            samples,
            label: None,
        }
    }

    pub fn with_label(mut self, label: Option<Class>) -> Self {
        self.label = label;
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs as f64
    }

    /// Number of samples spanning `ms` milliseconds, rounded.
    pub fn ms_to_samples(&self, ms: f64) -> usize {
        (ms * self.fs as f64 / 1000.0).round() as usize
    }

    pub fn samples_to_ms(&self, n: f64) -> f64 {
        n * 1000.0 / self.fs as f64
    }

    /// Vertical mirror of the record.
    pub fn negated(&self) -> Record {
        Record {
            id: self.id.clone(),
            fs: self.fs,
            samples: self.samples.iter().map(|x| -x).collect(),
            label: self.label,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fs == 0 {
            return Err(Error::InvalidArgument(format!("record {}: fs must be positive", self.id)));
        }
        if self.samples.is_empty() {
            return Err(Error::InvalidArgument(format!("record {}: no samples", self.id)));
        }
        if let Some(i) = self.samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "record {}: non-finite sample at index {i}",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Header {
    fs: u32,
    gain: f64,
    baseline: f64,
}

fn parse_header(line: &str, path: &Path) -> Result<Header> {
    let fmt_err = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut fs = None;
    let mut gain = None;
    let mut baseline = None;
    for field in line.trim().split(',') {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| fmt_err(format!("header field {field:?} is not key=value")))?;
        let value = value.trim();
        match key.trim() {
            "fs" => {
                fs = Some(
                    value
                        .parse::<u32>()
                        .map_err(|_| fmt_err(format!("fs {value:?} is not a positive integer")))?,
                )
            }
            "gain" => {
                gain = Some(
                    value
                        .parse::<f64>()
                        .map_err(|_| fmt_err(format!("gain {value:?} is not a number")))?,
                )
            }
            "baseline" => {
                baseline = Some(
                    value
                        .parse::<f64>()
                        .map_err(|_| fmt_err(format!("baseline {value:?} is not a number")))?,
                )
            }
            other => return Err(fmt_err(format!("unknown header key {other:?}"))),
        }
    }
    let fs = fs.ok_or_else(|| fmt_err("missing fs".into()))?;
    let gain = gain.ok_or_else(|| fmt_err("missing gain".into()))?;
    let baseline = baseline.ok_or_else(|| fmt_err("missing baseline".into()))?;
    if fs == 0 {
        return Err(fmt_err("fs must be positive".into()));
    }
    if gain == 0.0 || !gain.is_finite() || !baseline.is_finite() {
        return Err(fmt_err("gain must be finite and non-zero, baseline finite".into()));
    }
    Ok(Header { fs, gain, baseline })
}

/// Parses a record from the text signal format. The record id is the file stem.
pub fn parse_record(text: &str, path: &Path, label: Option<Class>) -> Result<Record> {
    let mut lines = text.split('\n');
    let header_line = lines.next().unwrap_or("");
    let header = parse_header(header_line.trim_end_matches('\r'), path)?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim_end_matches('\r').trim();
        if line.is_empty() {
            continue;
        }
        let adc: i64 = line.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg: format!("sample {line:?} is not an integer"),
        })?;
        samples.push((adc as f64 - header.baseline) / header.gain);
    }
    if samples.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "no samples".into(),
        });
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Record {
        id,
        fs: header.fs,
        samples,
        label,
    })
}

pub fn load_record(path: impl AsRef<Path>, manifest_label: Option<Class>) -> Result<Record> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_record(&text, path, manifest_label)
}

/// Serializes a record with the given gain and a zero baseline.
pub fn format_record(r: &Record, gain: f64) -> String {
    let mut out = String::with_capacity(r.samples.len() * 6 + 32);
    out.push_str(&format!("fs={},gain={},baseline=0\n", r.fs, gain));
    for x in &r.samples {
        let adc = (x * gain).round() as i64;
        out.push_str(&adc.to_string());
        out.push('\n');
    }
    out
}

pub fn write_record(r: &Record, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_record(r, DEFAULT_GAIN)).map_err(|e| Error::io(path, e))
}

/// Linear-interpolation resampling. Positions past the last input sample hold
/// the last value.
pub fn resample(r: &Record, target_fs: u32) -> Result<Record> {
    if target_fs == 0 {
        return Err(Error::InvalidArgument("target_fs must be positive".into()));
    }
    if target_fs == r.fs {
        return Ok(r.clone());
    }
    let n = r.samples.len();
    let out_len = ((n as f64) * target_fs as f64 / r.fs as f64).round() as usize;
    let ratio = r.fs as f64 / target_fs as f64;
    let last = n.saturating_sub(1);
    let samples = (0..out_len)
        .map(|j| {
            let t = j as f64 * ratio;
            let i = t.floor() as usize;
            if i >= last {
                return r.samples[last];
            }
            let frac = t - i as f64;
            r.samples[i] + (r.samples[i + 1] - r.samples[i]) * frac
        })
        .collect();
    Ok(Record {
        id: r.id.clone(),
        fs: target_fs,
        samples,
        label: r.label,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub record_id: String,
    pub path: PathBuf,
    pub label: Option<Class>,
}

/// Ordered list of records; ids are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.record_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate record id {:?} in manifest",
                    e.record_id
                )));
            }
        }
        Ok(Manifest { entries })
    }

    /// Reads a `record_id,path,label` CSV. Relative paths resolve against the
    /// manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let mut entries = Vec::new();
        for row in reader.records() {
            let row = row?;
            let id = row.get(0).unwrap_or("").trim().to_string();
            let rel = row.get(1).unwrap_or("").trim();
            if id.is_empty() || rel.is_empty() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("row {:?} lacks record_id or path", row),
                });
            }
            let label = match row.get(2).map(str::trim) {
                None | Some("") => None,
                Some(s) => Some(s.parse()?),
            };
            let p = PathBuf::from(rel);
            let p = if p.is_absolute() { p } else { base.join(p) };
            entries.push(ManifestEntry {
                record_id: id,
                path: p,
                label,
            });
        }
        Manifest::new(entries)
    }

    /// Writes the manifest with paths relative to `dir` when possible.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut out = String::from("record_id,path,label\n");
        for e in &self.entries {
            let rel = e.path.strip_prefix(&base).unwrap_or(&e.path);
            out.push_str(&format!(
                "{},{},{}\n",
                e.record_id,
                rel.display(),
                e.label.map(|c| c.symbol()).unwrap_or("")
            ));
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads every record, resampled to the canonical rate, with manifest ids and labels.
    pub fn load_records(&self) -> Result<Vec<Record>> {
        self.entries
            .iter()
            .map(|e| {
                let mut r = load_record(&e.path, e.label)?;
                r.id = e.record_id.clone();
                resample(&r, CANONICAL_FS)
            })
            .collect()
    }
}
