//! The `egmt` command line: preprocessing, training, fusion, evaluation and
//! report tables over the `egmt` library.

mod report;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use egmt::data_pipeline::{load_dataset, preprocess, DatasetManifest, DEFAULT_CROP, DEFAULT_STRIDE};
use egmt::entity_ingest::{entities_to_labels, load_annotation, LabelVocabulary};
use egmt::metrics::{classification_metrics, evaluate_directory, MetricReport, CLASSIFICATION_COLUMNS};
use egmt::model::Checkpoint;
use egmt::trainer::{fuse_inference, predict_labels, train, train_from, RunConfig, TrainState, LOG_FILE};
use serde::Serialize;

pub use report::{merge_reports, ReportTable};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERIC: i32 = 3;
}

/// File names written under `--out`.
pub const FUSION_REPORT: &str = "fusion_metrics";
pub const CLASSIFICATION_REPORT: &str = "classification_metrics";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "egmt", version, about = "Entity-guided infrared/visible image fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Default, Args, Serialize)]
struct Common {
    /// JSON file overriding the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma list of blocks to switch off: ca, ta, cgha, mt, ti.
    #[arg(long)]
    ablation: Option<String>,
    /// Label vocabulary JSON; the built-in one otherwise.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Crop every pair of a manifest into square patches and write a patch
    /// manifest.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CROP)]
        size: usize,
        #[arg(long, default_value_t = DEFAULT_STRIDE)]
        stride: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train on the pairs of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Exact number of optimizer steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a training checkpoint; its settings are used.
        #[arg(long, conflicts_with_all = ["config", "seed", "ablation"])]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fuse every pair of a manifest with a checkpoint.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the fused luminance only, without the visible chroma.
        #[arg(long)]
        gray: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score fused images against their sources.
    EvalFusion {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vi: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score the classification branch against entity pseudo-labels.
    EvalCls {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Parse and validate every `.json` annotation in a directory.
    ValidateAnnotations {
        dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Merge metric CSVs into one table; inputs are `NAME=PATH` or `PATH`.
    Report {
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-image values in long form for plotting.
        #[arg(long)]
        plot: bool,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(egmt::Error),
}

impl From<egmt::Error> for Failure {
    fn from(e: egmt::Error) -> Self {
        match e {
            egmt::Error::InvalidArgument { .. } => Failure::Usage(e.to_string()),
            e => Failure::Core(e),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

/// Runs one invocation and returns its exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    let result = configure_threads().and_then(|_| dispatch(cli.command));
    match result {
        Ok(()) => exit::OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            exit::USAGE
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                exit::NUMERIC
            } else {
                exit::DATA
            }
        }
    }
}

fn configure_threads() -> Outcome {
    let Ok(value) = std::env::var("EGMT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("EGMT_THREADS must be a positive integer, got {value:?}")))?;
    // A pool already exists when run() is called twice in one process.
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("thread pool already initialised");
    }
    Ok(())
}

fn resolve(common: &Common) -> Outcome<RunConfig> {
    let mut run = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        run.train.seed = seed;
    }
    if let Some(list) = &common.ablation {
        run.apply_ablation(list)?;
    }
    run.validate()?;
    Ok(run)
}

fn vocabulary(common: &Common) -> Outcome<LabelVocabulary> {
    Ok(match &common.vocab {
        Some(p) => LabelVocabulary::load(p)?,
        None => LabelVocabulary::default_vocabulary(),
    })
}

fn show(command: &Command, run: Option<&RunConfig>) -> Outcome {
    #[derive(Serialize)]
    struct Resolved<'a> {
        command: &'a Command,
        #[serde(skip_serializing_if = "Option::is_none")]
        run: Option<&'a RunConfig>,
    }
    let text = serde_json::to_string_pretty(&Resolved { command, run }).map_err(egmt::Error::from)?;
    println!("resolved configuration:\n{text}");
    Ok(())
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| {
        Failure::Core(egmt::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| {
        Failure::Core(egmt::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn dispatch(command: Command) -> Outcome {
    match &command {
        Command::Preprocess {
            manifest,
            out,
            size,
            stride,
            ..
        } => {
            show(&command, None)?;
            let source = DatasetManifest::load(manifest)?;
            create_dir(out)?;
            let patches = preprocess(&source, out, *size, *stride)?;
            patches.save(&out.join("manifest.json"))?;
            println!("{} patches from {} pairs", patches.entries.len(), source.entries.len());
        }
        Command::Train {
            manifest,
            out,
            steps,
            resume,
            common,
        } => {
            let vocab = vocabulary(common)?;
            let (state, mut run) = match resume {
                Some(p) => {
                    let (state, run) = TrainState::from_checkpoint(&Checkpoint::load(p)?)?;
                    (Some(state), run)
                }
                None => (None, resolve(common)?),
            };
            if steps.is_some() {
                run.train.steps = *steps;
            }
            run.validate()?;
            show(&command, Some(&run))?;
            let samples = load_dataset(&DatasetManifest::load(manifest)?, &vocab)?;
            create_dir(out)?;
            let resolved = serde_json::to_string_pretty(&run).map_err(egmt::Error::from)? + "\n";
            write(&out.join(RESOLVED_CONFIG), &resolved)?;
            let outcome = match state {
                Some(state) => train_from(&samples, &run, state, out)?,
                None => train(&samples, &run, out)?,
            };
            if let Some(last) = outcome.log.last() {
                println!("step {} L_total {:.6} L_fus {:.6}", last.step, last.loss.total, last.loss.fusion);
            }
            println!("loss log {}", out.join(LOG_FILE).display());
            println!("checkpoint {}", outcome.final_checkpoint.display());
        }
        Command::Fuse {
            checkpoint,
            manifest,
            out,
            gray,
            common,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let mut run = resolve(common)?;
            run.model = ck.model.clone();
            show(&command, Some(&run))?;
            let samples = load_dataset(&DatasetManifest::load(manifest)?, &vocabulary(common)?)?;
            let written = fuse_inference(&ck, &samples, out, !gray)?;
            println!("fused {} images into {}", written.len(), out.display());
        }
        Command::EvalFusion {
            fused,
            ir,
            vi,
            out,
            common,
        } => {
            let run = resolve(common)?;
            show(&command, Some(&run))?;
            let report = evaluate_directory(fused, ir, vi, &run.metrics)?;
            report.save(out, FUSION_REPORT)?;
            print_mean(&report);
        }
        Command::EvalCls {
            checkpoint,
            manifest,
            out,
            common,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let mut run = resolve(common)?;
            run.model = ck.model.clone();
            show(&command, Some(&run))?;
            let vocab = vocabulary(common)?;
            let samples = load_dataset(&DatasetManifest::load(manifest)?, &vocab)?;
            let scores = samples
                .iter()
                .map(|s| predict_labels(&ck.params, &ck.model, s))
                .collect::<egmt::Result<Vec<_>>>()?;
            let labels: Vec<_> = samples.iter().map(|s| s.label).collect();
            let m = classification_metrics(&scores, &labels, run.metrics.threshold)?;
            let report = MetricReport::new(&CLASSIFICATION_COLUMNS, vec![("all".into(), m.to_row())]);
            report.save(out, CLASSIFICATION_REPORT)?;
            let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
            write(&out.join(PREDICTIONS_FILE), &predictions_csv(&vocab, &ids, &scores, &labels))?;
            print_mean(&report);
        }
        Command::ValidateAnnotations { dir, common } => {
            show(&command, None)?;
            let vocab = vocabulary(common)?;
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| egmt::Error::Io {
                    path: dir.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            let mut failed = 0;
            for f in &files {
                match load_annotation(f) {
                    Ok(a) => {
                        let labels = entities_to_labels(&a, &vocab);
                        log::info!("{}: {} entities, {} labels", f.display(), a.entities.len(), labels.count());
                    }
                    Err(e) => {
                        failed += 1;
                        eprintln!("{}: {e}", f.display());
                    }
                }
            }
            if failed > 0 {
                println!("{} ok, {failed} invalid", files.len() - failed);
                return Err(Failure::Core(egmt::Error::Annotation(format!(
                    "{failed} of {} documents failed validation",
                    files.len()
                ))));
            }
            println!("{} ok", files.len());
        }
        Command::Report { inputs, out, plot } => {
            show(&command, None)?;
            let mut named = Vec::new();
            for input in inputs {
                let (name, path) = match input.split_once('=') {
                    Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                    None => {
                        let p = PathBuf::from(input);
                        let n = p.file_stem().and_then(|s| s.to_str()).unwrap_or(input).to_string();
                        (n, p)
                    }
                };
                let text = fs::read_to_string(&path).map_err(|e| egmt::Error::Io { path: path.clone(), source: e })?;
                named.push((name, MetricReport::from_csv(&text)?));
            }
            let table = merge_reports(&named).map_err(Failure::Usage)?;
            create_dir(out)?;
            write(&out.join("report.csv"), &table.to_csv())?;
            write(&out.join("report.md"), &table.to_markdown())?;
            if *plot {
                write(&out.join("plot_data.csv"), &report::plot_csv(&named))?;
            }
            print!("{}", table.to_markdown());
        }
    }
    Ok(())
}

fn print_mean(report: &MetricReport) {
    if report.is_empty() {
        println!("no images");
        return;
    }
    let cells: Vec<String> = report
        .columns
        .iter()
        .zip(&report.mean)
        .map(|(c, v)| format!("{c} {v:.4}"))
        .collect();
    println!("{} images, mean {}", report.rows.len(), cells.join(", "));
}

fn predictions_csv(
    vocab: &LabelVocabulary,
    ids: &[&str],
    scores: &[[f64; egmt::entity_ingest::NUM_LABELS]],
    labels: &[egmt::entity_ingest::LabelVector],
) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["stem".to_string()];
    header.extend(vocab.categories().iter().map(|c| format!("p_{c}")));
    header.extend(vocab.categories().iter().map(|c| format!("y_{c}")));
    w.write_record(&header).expect("in-memory write");
    for ((id, p), y) in ids.iter().zip(scores).zip(labels) {
        let mut rec = vec![id.to_string()];
        rec.extend(p.iter().map(|v| format!("{v:.6}")));
        rec.extend(y.0.iter().map(|&b| (b as u8).to_string()));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
}
