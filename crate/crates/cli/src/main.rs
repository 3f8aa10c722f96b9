use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atei_core::atei::consistency_accuracy;
use atei_core::checkpoint::{load_into, read_checkpoint};
use atei_core::config::RunConfig;
use atei_core::data::{generate_synthetic, load_dataset, score_text_sentiment, write_dataset, Lexicon, SegmentRecord};
use atei_core::eval::{export_embeddings, run_cross_validation, EmbeddingLayer};
use atei_core::fusion::{joint_train, pretrain_model, DepressionModel};
use atei_core::{Error, ErrorClass, Result};
use clap::{Args, Parser, Subcommand};

/// Acoustic-textual emotion inconsistency pipeline for depression detection.
#[derive(Parser, Debug)]
#[command(name = "atei", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; profile defaults fill missing keys.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides both the training and the synthesis seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with its Bayes oracle summary.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory (created if missing).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Pretrain the inconsistency extractor on consistency labels only.
    PretrainAtei {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Checkpoint file to write.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Train the full model on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Checkpoint file to write.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Start from a `pretrain-atei` checkpoint and skip pretraining.
        #[arg(long, value_name = "FILE")]
        init: Option<PathBuf>,
        /// Also write the training history as JSON.
        #[arg(long, value_name = "FILE")]
        history: Option<PathBuf>,
    },
    /// Speaker-disjoint k-fold cross-validation.
    Cv {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Report file to write.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Number of folds trained at once; results do not depend on it.
        #[arg(long, value_name = "N")]
        parallel_folds: Option<usize>,
    },
    /// Label each line of a whitespace-tokenized text file by lexicon score.
    ScoreText {
        /// Lexicon file with `word<TAB>score` lines.
        #[arg(long, value_name = "FILE")]
        lexicon: PathBuf,
        /// Token file, one segment per line.
        #[arg(long, value_name = "FILE")]
        tokens: PathBuf,
    },
    /// Write per-segment activations of a trained model as JSON lines.
    ExportEmbeddings {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// One of fused, head, fc1, fc2, fc3.
        #[arg(long, default_value = "fc2")]
        layer: String,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::from_json("{}")?,
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    Ok(cfg)
}

fn data_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| Error::Config("no data directory: pass --data or set \"data\" in the config".into()))
}

/// Writes through a sibling temp file so a failed run leaves nothing behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn pretty<T: serde::Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

fn save_model(model: &DepressionModel, path: &Path, stage: &str) -> Result<()> {
    let tmp = path.with_extension("partial");
    model.save(&tmp, stage)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn refs(records: &[SegmentRecord]) -> Vec<&SegmentRecord> {
    records.iter().collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = load_config(&common)?;
            let data = generate_synthetic(&cfg.synth)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_dataset(&out, &data.records)?;
            write_atomic(&out.join("oracle.json"), &pretty(&data.oracle)?)?;
            log::info!(
                "wrote {} segments; Bayes subject accuracy {:.4}",
                data.records.len(),
                data.oracle.bayes_subject_accuracy
            );
        }
        Command::PretrainAtei { common, data, out } => {
            let cfg = load_config(&common)?;
            if cfg.train.atei_mode.is_none() {
                return Err(Error::Config("pretrain-atei needs an atei_mode".into()));
            }
            let records = load_dataset(data_dir(&data, &cfg)?)?;
            let recs = refs(&records);
            let dims = atei_core::data::validate_records(&records)?;
            let mut model = DepressionModel::new(&cfg.train, dims)?;
            let history = pretrain_model(&mut model, &recs)?;
            let net = model.layout.atei.as_ref().expect("checked atei_mode");
            let acc = consistency_accuracy(net, &model.store, &recs, cfg.train.batch_size)?;
            save_model(&model, &out, "pretrained")?;
            let summary = serde_json::json!({ "consistency_accuracy": acc, "epochs": history.epochs });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Train {
            common,
            data,
            out,
            init,
            history,
        } => {
            let cfg = load_config(&common)?;
            let records = load_dataset(data_dir(&data, &cfg)?)?;
            let recs = refs(&records);
            let dims = atei_core::data::validate_records(&records)?;
            let mut model = DepressionModel::new(&cfg.train, dims)?;
            let mut hist = match &init {
                Some(path) => {
                    let ck = read_checkpoint(path)?;
                    let atei: Vec<_> = ck.tensors.into_iter().filter(|(n, _)| n.starts_with("atei.")).collect();
                    if atei.is_empty() || model.layout.atei.is_none() {
                        return Err(Error::Config(format!(
                            "{} holds no extractor weights usable by this configuration",
                            path.display()
                        )));
                    }
                    load_into(&mut model.store, &atei)?;
                    Default::default()
                }
                None => pretrain_model(&mut model, &recs)?,
            };
            hist.append(joint_train(&mut model, &recs)?);
            save_model(&model, &out, "trained")?;
            if let Some(path) = history {
                write_atomic(&path, &pretty(&hist)?)?;
            }
            let last = hist.epochs.last().map(|e| e.accuracy).unwrap_or(0.0);
            println!("{}", serde_json::to_string_pretty(&serde_json::json!({ "train_accuracy": last, "alpha": model.alpha() }))?);
        }
        Command::Cv {
            common,
            data,
            out,
            parallel_folds,
        } => {
            let cfg = load_config(&common)?;
            let records = load_dataset(data_dir(&data, &cfg)?)?;
            let workers = parallel_folds.unwrap_or(cfg.parallel_folds);
            if workers == 0 {
                return Err(Error::Config("--parallel-folds must be at least 1".into()));
            }
            let report = run_cross_validation(&records, &cfg.train, cfg.k_folds, workers)?;
            write_atomic(&out, &pretty(&report)?)?;
            log::info!(
                "mean subject accuracy {:.4}, segment accuracy {:.4}",
                report.mean.subject.accuracy,
                report.mean.segment.accuracy
            );
        }
        Command::ScoreText { lexicon, tokens } => {
            let lex = Lexicon::load(&lexicon)?;
            let text = std::fs::read_to_string(&tokens).map_err(|e| Error::io(&tokens, e))?;
            for line in text.lines() {
                let words: Vec<&str> = line.split_whitespace().collect();
                println!("{}", score_text_sentiment(&words, &lex).as_str());
            }
        }
        Command::ExportEmbeddings {
            checkpoint,
            data,
            layer,
            out,
        } => {
            let layer = EmbeddingLayer::parse(&layer)?;
            let (model, _) = DepressionModel::load(&checkpoint)?;
            let records = load_dataset(&data)?;
            let tmp = out.with_extension("partial");
            let n = export_embeddings(&model, &refs(&records), layer, &tmp)?;
            std::fs::rename(&tmp, &out).map_err(|e| Error::io(&out, e))?;
            log::info!("wrote {n} embeddings");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            })
        }
    }
}
