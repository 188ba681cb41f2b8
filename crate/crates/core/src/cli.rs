//! Command-line surface. Every subcommand reads files, writes files and is
//! deterministic under `--seed`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_vocab, encode_corpus, load_corpus, synthetic_corpus, write_corpus, EncodeOptions, EncodedEssay, SynthConfig, Vocab,
};
use crate::ensemble::{
    assign_folds, bag_predict, bow_features, fold_train, gbm_predict, gbm_train, stack_predict, stack_train, BagSpace,
    BoostedBowModel, EnsembleManifest, GbmConfig, ManifestMember, SparseVec, StackConfig, StackModel, StackRow,
};
use crate::error::{Error, Result};
use crate::eval::{
    attach_truth, build_heatmap, load_checkpoint, log_loss, macro_auc, predict_many, read_predictions, save_checkpoint,
    write_predictions, Aggregation, Averaging, PredictionRecord,
};
use crate::exec::Exec;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::PrecisionMode;
use crate::training::{estimate_memory, pretrain, Accounting, PretrainConfig, PretrainMode, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "discourse-rater", version, about = "Rate argumentative discourse elements")]
struct Cli {
    /// Seed for every random choice a subcommand makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Run batch work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        essays: usize,
        #[arg(long, default_value_t = 0)]
        twins: usize,
        /// Prepended to every essay and element id.
        #[arg(long, default_value = "")]
        prefix: String,
    },
    /// Build a vocabulary and encode a corpus into a data directory.
    Preprocess {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        max_len: usize,
        #[arg(long, default_value_t = 300)]
        vocab_size: usize,
        /// Encode without discourse marker tokens.
        #[arg(long)]
        no_markers: bool,
        /// Reuse an existing vocabulary instead of building one.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Self-supervised pretraining (MLM or replaced-token detection).
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_mode, default_value = "rtd")]
        mode: PretrainMode,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.15)]
        mask_rate: f64,
        /// Weight of the detection loss relative to the MLM loss.
        #[arg(long, default_value_t = 1.0)]
        rtd_weight: f64,
        #[command(flatten)]
        arch: ArchArgs,
    },
    /// Fine-tune a token classifier.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from these weights instead of a random initialization.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Write per-step log lines here.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Write per-element probabilities as CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Average token logits instead of probabilities.
        #[arg(long)]
        logit_average: bool,
    },
    /// Print log loss and macro one-vs-rest AUC of a prediction CSV against a gold corpus.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    #[command(subcommand)]
    Ensemble(EnsembleCommand),
    /// Attention heatmap for one essay as HTML plus a CSV sidecar.
    Heatmap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Essay id; defaults to the first essay.
        #[arg(long)]
        essay: Option<String>,
        /// Layer index; defaults to the last layer.
        #[arg(long)]
        layer: Option<usize>,
        /// Score tokens by the attention they emit rather than receive.
        #[arg(long)]
        emitted: bool,
    },
    /// Training memory for a parameter count.
    Memest {
        #[arg(long)]
        params: u128,
        /// Size with 64-bit storage instead of 32-bit.
        #[arg(long)]
        native64: bool,
    },
}

#[derive(Debug, Subcommand)]
enum EnsembleCommand {
    /// Train one member per fold and write a manifest.
    FoldTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Average member predictions.
    Bag {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log_space: bool,
    },
    /// Boosted trees over bag-of-words features.
    Gbm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        rounds: usize,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[command(flatten)]
        apply: ApplyArgs,
    },
    /// Meta-model over members plus the BoW model, trained on data outside every fold.
    Stack {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        gbm: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[command(flatten)]
        apply: ApplyArgs,
    },
}

#[derive(Debug, Args)]
struct ApplyArgs {
    /// Also predict this data directory...
    #[arg(long, requires = "pred_out")]
    apply: Option<PathBuf>,
    /// ...into this CSV.
    #[arg(long, requires = "apply")]
    pred_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ArchArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    ffn: usize,
    #[arg(long, default_value_t = 8)]
    window: usize,
    #[arg(long, default_value_t = 0.1)]
    hidden_dropout: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long)]
    accum_steps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Full64 or Half16Activations.
    #[arg(long)]
    precision: Option<PrecisionMode>,
    #[arg(long)]
    checkpoint_activations: bool,
    #[arg(long)]
    checkpoint_segment: Option<usize>,
    #[arg(long)]
    awp: bool,
    #[arg(long)]
    awp_threshold: Option<f64>,
    #[arg(long)]
    sift: bool,
}

fn parse_mode(s: &str) -> std::result::Result<PretrainMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "mlm" => Ok(PretrainMode::Mlm),
        "rtd" => Ok(PretrainMode::Rtd),
        _ => Err(format!("unknown pretraining mode `{s}` (expected mlm or rtd)")),
    }
}

impl ArchArgs {
    fn config(&self, data: &Prepared, seed: u64) -> ModelConfig {
        ModelConfig {
            num_layers: self.layers,
            hidden_size: self.hidden,
            num_heads: self.heads,
            ffn_size: self.ffn,
            relative_window: self.window,
            hidden_dropout: self.hidden_dropout,
            vocab_size: data.vocab.len(),
            max_len: data.max_len,
            seed,
            ..ModelConfig::default()
        }
    }
}

impl TrainArgs {
    fn config(&self, seed: u64) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        c.seed = seed;
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(v) = self.micro_batch {
            c.micro_batch_size = v;
        }
        if let Some(v) = self.accum_steps {
            c.accumulation_steps = v;
        }
        if let Some(v) = self.warmup {
            c.warmup_steps = v;
        }
        if let Some(v) = self.precision {
            c.precision = v;
        }
        c.checkpoint_activations |= self.checkpoint_activations;
        if let Some(v) = self.checkpoint_segment {
            c.checkpoint_segment = v;
        }
        c.awp.enabled |= self.awp;
        if self.awp_threshold.is_some() {
            c.awp.loss_threshold = self.awp_threshold;
        }
        c.sift.enabled |= self.sift;
        c.validate()?;
        Ok(c)
    }
}

const VOCAB_FILE: &str = "vocab.txt";
const ENCODED_FILE: &str = "encoded.json";

/// Contents of a preprocessed data directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncodedDump {
    max_len: usize,
    insert_markers: bool,
    essays: Vec<EncodedEssay>,
}

struct Prepared {
    vocab: Vocab,
    max_len: usize,
    essays: Vec<EncodedEssay>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n")?;
    Ok(())
}

fn load_prepared(dir: &Path) -> Result<Prepared> {
    let vocab = Vocab::load(dir.join(VOCAB_FILE))?;
    let dump: EncodedDump = read_json(&dir.join(ENCODED_FILE))?;
    Ok(Prepared {
        vocab,
        max_len: dump.max_len,
        essays: dump.essays,
    })
}

fn check_vocab(m: &ModelParams, data: &Prepared) -> Result<()> {
    if m.config.vocab_size != data.vocab.len() {
        return Err(Error::Config(format!(
            "vocab_size mismatch: model has {}, data has {}",
            m.config.vocab_size,
            data.vocab.len()
        )));
    }
    Ok(())
}

/// A trained BoW model plus the essays it saw, so stacking can check leakage.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GbmArtifact {
    vocab_size: usize,
    essay_ids: Vec<String>,
    model: BoostedBowModel,
}

/// Element-level BoW features and labels for every essay.
fn element_features(data: &Prepared) -> (Vec<SparseVec>, Vec<Option<usize>>, Vec<String>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut ids = Vec::new();
    for e in &data.essays {
        x.extend(bow_features(e, &data.vocab));
        y.extend(e.element_ratings.iter().copied());
        ids.extend(e.element_ids.iter().cloned());
    }
    (x, y, ids)
}

fn record_list(data: &Prepared, probs: &[[f64; 3]]) -> Vec<PredictionRecord> {
    let mut out = Vec::with_capacity(probs.len());
    let mut k = 0;
    for e in &data.essays {
        for (i, id) in e.element_ids.iter().enumerate() {
            out.push(PredictionRecord {
                essay_id: e.essay_id.clone(),
                element_id: id.clone(),
                probs: probs[k],
                truth: e.element_ratings[i],
                missing_tokens: e.element_positions(i).is_empty(),
            });
            k += 1;
        }
    }
    out
}

fn load_members(manifest_path: &Path) -> Result<(EnsembleManifest, Vec<ModelParams>)> {
    let manifest = EnsembleManifest::load(manifest_path)?;
    let members = manifest
        .members
        .iter()
        .map(|m| load_checkpoint(manifest.resolve(manifest_path, &m.path)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, members))
}

/// Stacking rows: one source per member, then the BoW model.
fn stack_rows(
    data: &Prepared,
    manifest: &EnsembleManifest,
    members: &[ModelParams],
    gbm: &GbmArtifact,
    exec: Exec,
) -> Result<Vec<StackRow>> {
    let k = manifest.folds.num_folds;
    let partition = |essay: &str| manifest.folds.fold_of(essay).unwrap_or(k);
    let member_preds = members
        .iter()
        .map(|m| predict_many(m, &data.essays, Averaging::Probability, exec))
        .collect::<Result<Vec<_>>>()?;
    let member_sets: Vec<Vec<usize>> = manifest
        .members
        .iter()
        .map(|m| (0..k).filter(|&f| f != m.fold).collect())
        .collect();
    let mut gbm_set: Vec<usize> = gbm.essay_ids.iter().map(|e| partition(e)).collect();
    gbm_set.sort_unstable();
    gbm_set.dedup();
    let (x, _, _) = element_features(data);
    let bow = gbm_predict(&gbm.model, &x)?;
    let records = record_list(data, &bow);
    Ok(records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut sources: Vec<[f64; 3]> = member_preds.iter().map(|p| p[i].probs).collect();
            sources.push(bow[i]);
            let mut trained_on = member_sets.clone();
            trained_on.push(gbm_set.clone());
            StackRow {
                element_id: r.element_id.clone(),
                partition: partition(&r.essay_id),
                label: r.truth,
                sources,
                trained_on,
            }
        })
        .collect())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Synth {
            out,
            essays,
            twins,
            prefix,
        } => {
            let mut corpus = synthetic_corpus(&SynthConfig {
                num_essays: essays,
                twins,
                seed,
                ..SynthConfig::default()
            });
            for e in &mut corpus {
                e.essay_id.insert_str(0, &prefix);
                for el in &mut e.elements {
                    el.element_id.insert_str(0, &prefix);
                }
            }
            write_corpus(&out, &corpus)?;
            println!("wrote {} essays to {}", corpus.len(), out.display());
        }
        Command::Preprocess {
            corpus,
            out,
            max_len,
            vocab_size,
            no_markers,
            vocab,
        } => {
            let essays = load_corpus(&corpus)?;
            let vocab = match vocab {
                Some(p) => Vocab::load(p)?,
                None => build_vocab(&essays, vocab_size, true)?,
            };
            let opts = EncodeOptions {
                max_len,
                insert_markers: !no_markers,
                ..EncodeOptions::default()
            };
            let encoded = encode_corpus(&essays, &vocab, &opts, exec)?;
            fs::create_dir_all(&out)?;
            vocab.save(out.join(VOCAB_FILE))?;
            let truncated = encoded.iter().filter(|e| e.truncated).count();
            write_json(
                &out.join(ENCODED_FILE),
                &EncodedDump {
                    max_len,
                    insert_markers: !no_markers,
                    essays: encoded,
                },
            )?;
            println!(
                "encoded {} essays ({} truncated), vocab {} -> {}",
                essays.len(),
                truncated,
                vocab.len(),
                out.display()
            );
        }
        Command::Pretrain {
            data,
            out,
            mode,
            epochs,
            lr,
            mask_rate,
            rtd_weight,
            arch,
        } => {
            let data = load_prepared(&data)?;
            let mask = data
                .vocab
                .mask_id()
                .ok_or_else(|| Error::Config("vocabulary has no [MASK] token".into()))?;
            let model = arch.config(&data, seed);
            model.validate()?;
            let cfg = PretrainConfig {
                mode,
                epochs,
                learning_rate: lr,
                mask_rate,
                rtd_weight,
                seed,
                ..PretrainConfig::default()
            };
            let trained = pretrain(&data.essays, &model, &cfg, mask, exec, &mut |r| {
                println!(
                    "epoch={} mlm_loss={:.6} rtd_loss={:.6} rtd_acc={:.4}",
                    r.epoch,
                    r.mlm_loss,
                    r.rtd_loss,
                    r.stats.accuracy()
                );
            })?;
            save_checkpoint(&trained.export(), &out)?;
        }
        Command::Train {
            data,
            out,
            model,
            log,
            arch,
            train,
        } => {
            let data = load_prepared(&data)?;
            let cfg = train.config(seed)?;
            let init = match model {
                Some(p) => {
                    let m = load_checkpoint(p)?;
                    check_vocab(&m, &data)?;
                    m
                }
                None => {
                    let c = arch.config(&data, seed);
                    c.validate()?;
                    ModelParams::new(c, 0)?
                }
            };
            let mut lines = String::new();
            let mut trainer = Trainer::new(init, cfg, exec)?;
            let losses = trainer.fit(&data.essays, &mut |l| {
                lines.push_str(&l.to_string());
                lines.push('\n');
            })?;
            if let Some(p) = log {
                fs::write(p, &lines)?;
            }
            save_checkpoint(&trainer.model, &out)?;
            if let Some(l) = losses.last() {
                println!("final epoch loss {l:.6}");
            }
        }
        Command::Predict {
            model,
            data,
            out,
            logit_average,
        } => {
            let data = load_prepared(&data)?;
            let m = load_checkpoint(model)?;
            check_vocab(&m, &data)?;
            let avg = if logit_average { Averaging::Logit } else { Averaging::Probability };
            let preds = predict_many(&m, &data.essays, avg, exec)?;
            let missing = preds.iter().filter(|p| p.missing_tokens).count();
            if missing > 0 {
                eprintln!("warning: {missing} elements lost to truncation were given uniform probabilities");
            }
            write_predictions(&out, &preds)?;
        }
        Command::Evaluate { pred, gold } => {
            let mut records = read_predictions(pred)?;
            attach_truth(&mut records, &load_corpus(gold)?)?;
            println!("log_loss {:.4}", log_loss(&records)?);
            match macro_auc(&records)? {
                Some(auc) => println!("macro_auc {auc:.4}"),
                None => println!("macro_auc n/a"),
            }
        }
        Command::Ensemble(cmd) => run_ensemble(cmd, seed, exec)?,
        Command::Heatmap {
            model,
            data,
            out,
            essay,
            layer,
            emitted,
        } => {
            let data = load_prepared(&data)?;
            let m = load_checkpoint(model)?;
            check_vocab(&m, &data)?;
            let enc = match &essay {
                Some(id) => data.essays.iter().find(|e| &e.essay_id == id),
                None => data.essays.first(),
            }
            .ok_or_else(|| Error::contract(format!("essay {} not found", essay.as_deref().unwrap_or("<first>"))))?;
            let layer = layer.unwrap_or(m.config.num_layers.saturating_sub(1));
            let agg = if emitted { Aggregation::Emitted } else { Aggregation::Received };
            let doc = build_heatmap(&m, enc, &data.vocab, layer, agg)?;
            fs::write(&out, doc.to_html())?;
            fs::write(out.with_extension("csv"), doc.to_csv()?)?;
        }
        Command::Memest { params, native64 } => {
            let acc = if native64 { Accounting::Native64 } else { Accounting::Fp32 };
            println!("{}", estimate_memory(params, acc));
        }
    }
    Ok(())
}

fn run_ensemble(cmd: EnsembleCommand, seed: u64, exec: Exec) -> Result<()> {
    match cmd {
        EnsembleCommand::FoldTrain {
            data,
            out,
            folds,
            arch,
            train,
        } => {
            let data = load_prepared(&data)?;
            let cfg = train.config(seed)?;
            let model = arch.config(&data, seed);
            model.validate()?;
            let ids: Vec<&str> = data.essays.iter().map(|e| e.essay_id.as_str()).collect();
            let assignment = assign_folds(&ids, folds, seed)?;
            let trained = fold_train(&data.essays, &assignment, &model, &cfg, exec)?;
            fs::create_dir_all(&out)?;
            let mut members = Vec::new();
            for m in &trained {
                let name = PathBuf::from(format!("member_{}.ckpt", m.fold));
                save_checkpoint(&m.model, out.join(&name))?;
                match m.validation_loss {
                    Some(v) => println!("fold={} validation_loss={v:.6}", m.fold),
                    None => println!("fold={} validation_loss=none", m.fold),
                }
                members.push(ManifestMember {
                    path: name,
                    fold: m.fold,
                    seed: m.seed,
                });
            }
            EnsembleManifest {
                members,
                folds: assignment,
                gbm: None,
                stack: None,
            }
            .save(out.join("manifest.json"))?;
        }
        EnsembleCommand::Bag {
            manifest,
            data,
            out,
            log_space,
        } => {
            let data = load_prepared(&data)?;
            let (_, members) = load_members(&manifest)?;
            let preds = members
                .iter()
                .map(|m| {
                    check_vocab(m, &data)?;
                    predict_many(m, &data.essays, Averaging::Probability, exec)
                })
                .collect::<Result<Vec<_>>>()?;
            let space = if log_space { BagSpace::LogProbability } else { BagSpace::Probability };
            write_predictions(&out, &bag_predict(&preds, space)?)?;
        }
        EnsembleCommand::Gbm {
            data,
            out,
            rounds,
            depth,
            lr,
            apply,
        } => {
            let data = load_prepared(&data)?;
            let (x, y, _) = element_features(&data);
            let (x, labels): (Vec<SparseVec>, Vec<usize>) =
                x.into_iter().zip(y).filter_map(|(f, l)| l.map(|l| (f, l))).unzip();
            let cfg = GbmConfig {
                num_rounds: rounds,
                max_depth: depth,
                learning_rate: lr,
                ..GbmConfig::default()
            };
            let model = gbm_train(&x, &labels, data.vocab.len(), &cfg, exec)?;
            if let Some(l) = model.train_loss.last() {
                println!("gbm train loss {l:.6}");
            }
            let artifact = GbmArtifact {
                vocab_size: data.vocab.len(),
                essay_ids: data.essays.iter().map(|e| e.essay_id.clone()).collect(),
                model,
            };
            write_json(&out, &artifact)?;
            if let (Some(dir), Some(pred_out)) = (apply.apply, apply.pred_out) {
                let target = load_prepared(&dir)?;
                let (x, _, _) = element_features(&target);
                let probs = gbm_predict(&artifact.model, &x)?;
                write_predictions(pred_out, &record_list(&target, &probs))?;
            }
        }
        EnsembleCommand::Stack {
            manifest,
            gbm,
            data,
            out,
            epochs,
            apply,
        } => {
            let data = load_prepared(&data)?;
            let (m, members) = load_members(&manifest)?;
            let gbm: GbmArtifact = read_json(&gbm)?;
            if gbm.vocab_size != data.vocab.len() {
                return Err(Error::Config(format!(
                    "vocab_size mismatch: BoW model has {}, data has {}",
                    gbm.vocab_size,
                    data.vocab.len()
                )));
            }
            let rows = stack_rows(&data, &m, &members, &gbm, exec)?;
            let cfg = StackConfig {
                epochs,
                ..StackConfig::default()
            };
            let model = stack_train(&rows, &cfg)?;
            let bow = model.block_l1(model.num_sources - 1);
            let member_mean =
                (0..model.num_sources - 1).map(|s| model.block_l1(s)).sum::<f64>() / (model.num_sources - 1) as f64;
            println!("input weight L1: members {member_mean:.4} (mean), BoW {bow:.4}");
            write_json(&out, &model)?;
            if let (Some(dir), Some(pred_out)) = (apply.apply, apply.pred_out) {
                let target = load_prepared(&dir)?;
                let rows = stack_rows(&target, &m, &members, &gbm, exec)?;
                let model: StackModel = model;
                let probs = stack_predict(&model, &rows)?;
                write_predictions(pred_out, &record_list(&target, &probs))?;
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 on success, 1 on runtime errors, 2 on usage errors.
pub fn cli_run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
