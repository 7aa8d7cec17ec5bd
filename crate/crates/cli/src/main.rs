use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ecg_abduction::evaluation::{self, format_answers, read_labels, score_answers};
use ecg_abduction::features::{write_beat_csv, write_global_csv};
use ecg_abduction::pipeline::{Bundle, PipelineConfig, RecordAnalysis, RecordCache};
use ecg_abduction::preprocess::LogRegModel;
use ecg_abduction::render::render_interpretation;
use ecg_abduction::signal_io::{load_record, resample, write_record, Manifest, ManifestEntry};
use ecg_abduction::{synth, Error, Record, CANONICAL_FS};
use rayon::prelude::*;

/// Abductive ECG interpretation and rhythm classification.
///
/// Every flag can also be set through an environment variable prefixed with
/// ECGAB_, e.g. ECGAB_SEED or ECGAB_JOBS.
#[derive(Parser)]
#[command(name = "ecgab", version)]
struct Cli {
    /// Seed for every random stage.
    #[arg(long, global = true, env = "ECGAB_SEED", default_value_t = 0)]
    seed: u64,
    /// TOML file overriding the default configuration.
    #[arg(long, global = true, env = "ECGAB_CONFIG")]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores). Outputs do not depend on it.
    #[arg(long, global = true, env = "ECGAB_JOBS", default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labelled synthetic corpus and its manifest.
    Synth {
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        /// Output directory; receives manifest.csv and one file per record.
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
    },
    /// Interpret one record: JSON to stdout or --json, beat annotations to --annotations.
    Interpret {
        record: PathBuf,
        /// Use the polarity detector and configuration of a trained bundle.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Global and per-beat feature tables for a manifest.
    Features {
        manifest: PathBuf,
        #[arg(long, default_value = "features")]
        out: PathBuf,
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Train the detector, boosted trees, sequence models and stacker.
    Train {
        manifest: PathBuf,
        #[arg(long, default_value = "bundle")]
        out: PathBuf,
    },
    /// Label every record of a manifest with a trained bundle.
    Classify {
        manifest: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        /// Answers CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stratified cross-validation of the whole pipeline.
    Cv {
        manifest: PathBuf,
        /// Report CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Full report with confusion matrices.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Challenge score of an answers file against a reference (or manifest).
    Score { answers: PathBuf, reference: PathBuf },
    /// SVG overlay of a record's interpretation.
    Render {
        record: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("ecgab: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Data(e)) => {
            eprintln!("ecgab: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| Failure::Usage(format!("--jobs: {e}")))?;
    }
    let config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let seed = cli.seed;
    match cli.command {
        Command::Synth { per_class, out } => synth_cmd(per_class, seed, &out),
        Command::Interpret {
            record,
            bundle,
            json,
            annotations,
        } => {
            let (cfg, logreg) = analysis_setup(config, bundle.as_deref())?;
            let a = analyze(&load_one(&record)?, &cfg, logreg.as_ref())?;
            emit(json.as_deref(), &a.interpretation.to_json()?)?;
            if let Some(path) = annotations {
                let mut text = String::from("qrs_onset\tqrs_peak\tqrs_offset\ttag\tp_peak\tt_peak\n");
                for b in &a.interpretation.beats {
                    let _ = writeln!(text, "{}", b.annotation_row());
                }
                write_file(&path, &text)?;
            }
            Ok(())
        }
        Command::Features { manifest, out, bundle } => {
            let (cfg, logreg) = analysis_setup(config, bundle.as_deref())?;
            let records = Manifest::load(&manifest)?.load_records()?;
            let analyses = records
                .par_iter()
                .map(|r| analyze(r, &cfg, logreg.as_ref()))
                .collect::<Result<Vec<_>, _>>()?;
            create_dir(&out)?;
            let global: Vec<_> = analyses.iter().map(|a| (a.id.clone(), a.global)).collect();
            write_global_csv(&out.join("global.csv"), &global)?;
            let beats: Vec<_> = analyses.into_iter().map(|a| (a.id, a.sequence)).collect();
            write_beat_csv(&out.join("beats.csv"), &beats)?;
            Ok(())
        }
        Command::Train { manifest, out } => {
            let records = labelled(&manifest)?;
            Bundle::train(&records, &config, seed)?.save(&out)?;
            Ok(())
        }
        Command::Classify { manifest, bundle, out } => {
            let bundle = Bundle::load(&bundle)?;
            let records = Manifest::load(&manifest)?.load_records()?;
            let preds = bundle.classify(&records)?;
            let answers: Vec<_> = records.iter().zip(&preds).map(|(r, p)| (r.id.clone(), p.class)).collect();
            emit(out.as_deref(), &format_answers(&answers))
        }
        Command::Cv { manifest, out, json } => {
            let records = labelled(&manifest)?;
            let report = evaluation::run_cv(&records, &config, seed, |f| {
                eprintln!(
                    "fold {}: gbt {:.4} rnn {:.4} stacker {:.4}",
                    f.fold + 1,
                    f.scores.gbt,
                    f.scores.rnn,
                    f.scores.stacker
                );
            })?;
            if let Some(path) = json {
                write_file(&path, &report.to_json()?)?;
            }
            emit(out.as_deref(), &report.to_csv())
        }
        Command::Score { answers, reference } => {
            let (_, s) = score_answers(&read_labels(&answers)?, &read_labels(&reference)?)?;
            println!("f1_N,f1_A,f1_O,f1_~,final");
            println!("{},{},{},{},{}", s.f1[0], s.f1[1], s.f1[2], s.f1[3], s.final_score);
            Ok(())
        }
        Command::Render { record, out, bundle } => {
            let (cfg, logreg) = analysis_setup(config, bundle.as_deref())?;
            let r = load_one(&record)?;
            let cache = RecordCache::new(&r, &cfg)?;
            let a = cache.oriented(logreg.as_ref(), &cfg)?;
            let shown = if a.inverted {
                cache.flipped.as_ref().map(|o| &o.signal)
            } else {
                Some(&cache.upright.signal)
            };
            write_file(&out, &render_interpretation(&a.interpretation, shown.unwrap_or(&r)))
        }
        Command::Config => {
            print!("# hash {}\n{}", config.hash(), config.to_toml()?);
            Ok(())
        }
    }
}

fn synth_cmd(per_class: usize, seed: u64, out: &Path) -> CliResult {
    if per_class == 0 {
        return Err(Failure::Usage("--per-class must be positive".into()));
    }
    create_dir(out)?;
    let plan = synth::corpus_plan(per_class, seed);
    let entries = plan
        .par_iter()
        .map(|p| {
            let r = p.generate()?;
            let path = out.join(format!("{}.txt", p.id));
            write_record(&r, &path)?;
            Ok(ManifestEntry {
                record_id: p.id.clone(),
                path,
                label: Some(p.class),
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Manifest::new(entries)?.write(out.join("manifest.csv"))?;
    Ok(())
}

fn analysis_setup(config: PipelineConfig, bundle: Option<&Path>) -> CliResult<(PipelineConfig, Option<LogRegModel>)> {
    match bundle {
        Some(dir) => {
            let b = Bundle::load(dir)?;
            Ok((b.config, b.logreg))
        }
        None => Ok((config, None)),
    }
}

fn analyze(r: &Record, cfg: &PipelineConfig, logreg: Option<&LogRegModel>) -> Result<RecordAnalysis, Error> {
    RecordCache::new(r, cfg)?.oriented(logreg, cfg).cloned()
}

fn load_one(path: &Path) -> CliResult<Record> {
    Ok(resample(&load_record(path, None)?, CANONICAL_FS)?)
}

fn labelled(manifest: &Path) -> CliResult<Vec<Record>> {
    let records = Manifest::load(manifest)?.load_records()?;
    if let Some(r) = records.iter().find(|r| r.label.is_none()) {
        return Err(Failure::Usage(format!("record {} has no label in {}", r.id, manifest.display())));
    }
    Ok(records)
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Failure::Data(io_error(dir, e)))
}

fn write_file(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure::Data(io_error(path, e)))
}

fn emit(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
