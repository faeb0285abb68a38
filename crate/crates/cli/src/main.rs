//! `prodcat` command-line pipeline.
//!
//! Every successful command prints one summary line `OK <command> key=value ...`
//! on stdout. Exit codes: 0 success, 1 usage, 2 I/O, 3 data or configuration,
//! 4 numerical failure.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prodcat::checkpoint::Checkpoint;
use prodcat::config::ConfigFile;
use prodcat::corpus::{
    clean, load_csv, merge_augmentation, parse_ratios, stratified_split, write_csv, ColumnMap, Corpus,
    HarmonizationMap, Level, TRAIN_SOURCE, VAL_SOURCE,
};
use prodcat::embedding_io::{build_matrix, load_embedding_file};
use prodcat::exec::Exec;
use prodcat::losses_metrics::LossKind;
use prodcat::models::{set_embeddings, Arch, Model};
use prodcat::textnorm::NormConfig;
use prodcat::train::{prepare, retrain, train, write_history, Classifier, Prediction};
use prodcat::vocab::{build_vocabulary, Vocabulary};
use prodcat::{Error, ErrorClass, Result};

#[derive(Parser, Debug)]
#[command(name = "prodcat", version, about = "Multi-level retail product categorization")]
struct Cli {
    /// Seed for splitting, initialization, shuffling and dropout.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the parallel loops (1 = sequential).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML configuration file; flags win over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Csv {
    /// Field delimiter of the CSV files.
    #[arg(long, default_value = ";", value_parser = parse_delimiter)]
    delimiter: u8,
}

fn parse_delimiter(s: &str) -> std::result::Result<u8, String> {
    match s.as_bytes() {
        [b] if b.is_ascii() => Ok(*b),
        _ => Err(format!("delimiter must be one ASCII character, got `{s}`")),
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Clean and normalize a raw dataset.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        csv: Csv,
    },
    /// Stratified train/validation/test split into `train.csv`, `val.csv`
    /// and `test.csv`.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Three comma-separated ratios, e.g. `0.7,0.15,0.15`.
        #[arg(long)]
        ratios: Option<String>,
        #[arg(long)]
        stratify_by: Option<Level>,
        #[command(flatten)]
        csv: Csv,
    },
    /// Append an augmentation corpus, rewriting its labels through a
    /// two-column `from;to` map.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        extra: PathBuf,
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        csv: Csv,
    },
    /// Build the token vocabulary from a training split.
    BuildVocab {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        max_words: Option<usize>,
        #[command(flatten)]
        csv: Csv,
    },
    /// Report dimension, size and vocabulary coverage of an embedding file.
    InspectEmbeddings {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        max_words: Option<usize>,
    },
    /// Train a model; writes the checkpoint, `<out>.vocab` and
    /// `<out>.history.csv`.
    Train {
        #[arg(long)]
        model: Option<Arch>,
        #[arg(long)]
        loss: Option<LossKind>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pre-trained word vectors (word2vec/GloVe text format).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        freeze_embeddings: bool,
        /// After model selection, retrain on train + validation.
        #[arg(long)]
        retrain_with_val: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[command(flatten)]
        csv: Csv,
    },
    /// Per-head precision/recall/F1 of a checkpoint on a labeled CSV.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Vocabulary file (default `<model>.vocab`).
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        csv: Csv,
    },
    /// Classify one product description.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
}

struct Ctx {
    seed: Option<u64>,
    exec: Exec,
    config: ConfigFile,
}

impl Ctx {
    fn norm(&self) -> Result<NormConfig> {
        self.config.norm_config()
    }

    fn seed(&self) -> u64 {
        self.seed.or(self.config.seed).unwrap_or(42)
    }
}

fn ok(command: &str, fields: &[(&str, &dyn Display)]) {
    let mut line = format!("OK {command}");
    for (k, v) in fields {
        let v = v.to_string();
        if v.contains(char::is_whitespace) || v.is_empty() {
            line.push_str(&format!(" {k}={v:?}"));
        } else {
            line.push_str(&format!(" {k}={v}"));
        }
    }
    println!("{line}");
}

fn load_clean(path: &Path, norm: &NormConfig, delimiter: u8, source: &str, exec: Exec) -> Result<Corpus> {
    let raw = load_csv(path, &ColumnMap::default(), delimiter)?;
    let (c, _) = clean(&raw.records, source, norm, exec);
    Ok(c)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn preprocess(ctx: &Ctx, input: &Path, output: &Path, delimiter: u8) -> Result<()> {
    let raw = load_csv(input, &ColumnMap::default(), delimiter)?;
    let (c, stats) = clean(&raw.records, &input.display().to_string(), &ctx.norm()?, ctx.exec);
    write_csv(&c, output, &ColumnMap::default(), delimiter)?;
    ok(
        "preprocess",
        &[
            ("rows", &(raw.records.len() + raw.rejected.len())),
            ("rejected", &raw.rejected.len()),
            ("dropped_missing", &stats.dropped_missing),
            ("dropped_empty", &stats.dropped_empty_text),
            ("dropped_duplicates", &stats.dropped_duplicates),
            ("kept", &c.len()),
        ],
    );
    Ok(())
}

fn split(
    ctx: &Ctx,
    input: &Path,
    out_dir: &Path,
    ratios: Option<&str>,
    stratify: Option<Level>,
    delimiter: u8,
) -> Result<()> {
    let mut spec = ctx.config.split_spec()?;
    if let Some(r) = ratios {
        spec.ratios = parse_ratios(r)?;
    }
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    if let Some(l) = stratify {
        spec.stratify = l;
    }
    spec.validate()?;
    let c = load_clean(input, &ctx.norm()?, delimiter, "input", ctx.exec)?;
    let s = stratified_split(&c, &spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (name, part) in [("train.csv", &s.train), ("val.csv", &s.val), ("test.csv", &s.test)] {
        write_csv(part, &out_dir.join(name), &ColumnMap::default(), delimiter)?;
    }
    ok(
        "split",
        &[
            ("train", &s.train.len()),
            ("val", &s.val.len()),
            ("test", &s.test.len()),
            ("seed", &spec.seed),
            ("stratify_by", &spec.stratify),
        ],
    );
    Ok(())
}

fn merge(ctx: &Ctx, base: &Path, extra: &Path, map: Option<&Path>, output: &Path, delimiter: u8) -> Result<()> {
    let norm = ctx.norm()?;
    let b = load_clean(base, &norm, delimiter, "base", ctx.exec)?;
    let e = load_clean(extra, &norm, delimiter, "extra", ctx.exec)?;
    let map = match map {
        Some(p) => HarmonizationMap::load(p, delimiter)?,
        None => HarmonizationMap::default(),
    };
    let (merged, stats) = merge_augmentation(&b, &e, &map);
    write_csv(&merged, output, &ColumnMap::default(), delimiter)?;
    for l in &stats.unmapped_labels {
        eprintln!("warning: extra-corpus label `{l}` has no harmonization entry");
    }
    ok(
        "merge",
        &[
            ("base", &b.len()),
            ("extra", &e.len()),
            ("rewritten", &stats.rewritten),
            ("unmapped_labels", &stats.unmapped_labels.len()),
            ("dropped_duplicates", &stats.dropped_duplicates),
            ("records", &merged.len()),
        ],
    );
    Ok(())
}

fn build_vocab(ctx: &Ctx, input: &Path, output: &Path, max_words: Option<usize>, delimiter: u8) -> Result<()> {
    let c = load_clean(input, &ctx.norm()?, delimiter, TRAIN_SOURCE, ctx.exec)?;
    let max_words = max_words.unwrap_or(ctx.config.max_words());
    let v = build_vocabulary(c.records().iter().map(|r| r.item_text.as_str()), max_words)?;
    v.save(output)?;
    ok(
        "build-vocab",
        &[("records", &c.len()), ("tokens", &v.len()), ("sha256", &v.sha256_hex())],
    );
    Ok(())
}

fn inspect_embeddings(ctx: &Ctx, file: &Path, vocab: &Path, max_words: Option<usize>) -> Result<()> {
    let table = load_embedding_file(file)?;
    let v = Vocabulary::load(vocab, max_words.unwrap_or(ctx.config.max_words()))?;
    let m = build_matrix(&table, &v, ctx.seed());
    ok(
        "inspect-embeddings",
        &[
            ("dim", &table.dim()),
            ("tokens", &table.len()),
            ("vocab", &v.len()),
            ("found", &m.found),
            ("coverage", &format!("{:.4}", m.coverage)),
        ],
    );
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

struct TrainArgs<'a> {
    model: Option<Arch>,
    loss: Option<LossKind>,
    train: &'a Path,
    val: &'a Path,
    out: &'a Path,
    embeddings: Option<&'a Path>,
    freeze_embeddings: bool,
    retrain_with_val: bool,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    delimiter: u8,
}

/// Returns `Err` only for failures before a checkpoint exists. Divergence
/// still writes the best checkpoint, then reports a numerical failure.
fn train_cmd(ctx: &Ctx, a: TrainArgs<'_>) -> Result<()> {
    let cfg = &ctx.config;
    let arch = match a.model {
        Some(m) => m,
        None => cfg.arch()?.unwrap_or(Arch::BiLstm),
    };
    cfg.validate(arch)?;
    let norm = ctx.norm()?;
    let seed = ctx.seed();
    let mut tcfg = cfg.train_config(arch, a.loss)?;
    tcfg.seed = seed;
    tcfg.exec = ctx.exec;
    tcfg.freeze_embeddings |= a.freeze_embeddings;
    tcfg.retrain_with_val |= a.retrain_with_val;
    if let Some(v) = a.epochs {
        tcfg.max_epochs = v;
    }
    if let Some(v) = a.lr {
        tcfg.optimizer.lr = v;
    }
    if let Some(v) = a.batch_size {
        tcfg.batch_size = v;
    }
    tcfg.validate()?;

    let train_c = load_clean(a.train, &norm, a.delimiter, TRAIN_SOURCE, ctx.exec)?;
    let val_c = load_clean(a.val, &norm, a.delimiter, VAL_SOURCE, ctx.exec)?;
    let p = prepare(&train_c, &val_c, cfg.max_words(), cfg.max_len())?;
    let mcfg = cfg.model_config(arch, p.vocab.len(), p.labels.sizes())?;
    let mut init = Model::new(mcfg, seed)?;
    let emb_path = a.embeddings.map(Path::to_path_buf).or(cfg.embeddings.file.as_ref().map(PathBuf::from));
    let mut coverage = None;
    if let Some(path) = emb_path {
        let table = load_embedding_file(&path)?;
        if table.dim() != init.config.embed_dim {
            return Err(Error::config(
                "model.embed_dim",
                format!("is {}, embedding file has dimension {}", init.config.embed_dim, table.dim()),
            ));
        }
        let m = build_matrix(&table, &p.vocab, seed);
        coverage = Some(m.coverage);
        set_embeddings(&mut init.params, m.weights)?;
    }

    let out = train(init.clone(), &p.train, &p.val, &tcfg)?;
    let mut model = out.model;
    let mut retrained = false;
    if tcfg.retrain_with_val && out.divergence.is_none() {
        if let Some(best) = out.best_epoch {
            model = retrain(init, &p.train.concat(&p.val), best, &tcfg)?.0;
            retrained = true;
        }
    }
    let ck = Checkpoint::new(model, norm, p.labels.clone(), &p.vocab, seed);
    ck.save(a.out, &p.vocab)?;
    write_history(&out.history, &with_suffix(a.out, ".history.csv"))?;
    if let Some(e) = out.divergence {
        eprintln!("training diverged; kept the best checkpoint so far");
        return Err(e);
    }
    let best = out.best_epoch.and_then(|b| out.history.get(b - 1));
    let na = "na".to_string();
    ok(
        "train",
        &[
            ("model", &arch.name()),
            ("loss", &tcfg.loss.kind),
            ("train", &p.train.len()),
            ("val", &p.val.len()),
            ("vocab", &p.vocab.len()),
            ("epochs", &out.history.len()),
            ("best_epoch", &out.best_epoch.map_or(na.clone(), |e| e.to_string())),
            ("val_macro_f1", &best.map_or(na.clone(), |r| format!("{:.4}", r.val_mean))),
            ("coverage", &coverage.map_or(na, |c| format!("{c:.4}"))),
            ("retrained", &retrained),
            ("checkpoint", &a.out.display()),
        ],
    );
    Ok(())
}

fn evaluate_cmd(
    ctx: &Ctx,
    model: &Path,
    data: &Path,
    report: Option<&Path>,
    vocab: Option<&Path>,
    delimiter: u8,
) -> Result<()> {
    let clf = Classifier::load(model, vocab)?;
    let c = load_clean(data, &clf.checkpoint.norm, delimiter, "eval", ctx.exec)?;
    let r = clf.evaluate(&c, ctx.exec)?;
    if let Some(path) = report {
        write_file(path, &r.to_json())?;
    }
    let f: Vec<String> = r.heads.iter().map(|h| format!("{:.4}", h.macro_f1)).collect();
    ok(
        "evaluate",
        &[
            ("samples", &r.samples),
            ("segment", &f[0]),
            ("category", &f[1]),
            ("subcategory", &f[2]),
            ("product", &f[3]),
            ("mean", &format!("{:.4}", r.mean_macro_f1)),
        ],
    );
    Ok(())
}

fn predict_cmd(model: &Path, text: &str, vocab: Option<&Path>) -> Result<()> {
    let clf = Classifier::load(model, vocab)?;
    match clf.predict(text)? {
        Prediction::Unclassifiable { .. } => ok("predict", &[("status", &"unclassifiable")]),
        Prediction::Classified { text, heads } => {
            let picks: Vec<(String, String)> = heads
                .iter()
                .map(|h| (h.level.to_string(), format!("{} ({:.4})", h.label, h.probability)))
                .collect();
            let mut fields: Vec<(&str, &dyn Display)> = vec![("status", &"classified"), ("text", &text)];
            for (k, v) in &picks {
                fields.push((k.as_str(), v));
            }
            ok("predict", &fields);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let exec = match cli.threads {
        Some(0) => return Err(Error::config("--threads", "must be >= 1")),
        Some(1) => Exec::Sequential,
        Some(n) => {
            #[cfg(feature = "parallel")]
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Invalid(e.to_string()))?;
            let _ = n;
            Exec::Parallel
        }
        None => Exec::Parallel,
    };
    let ctx = Ctx {
        seed: cli.seed,
        exec,
        config,
    };
    match cli.command {
        Command::Preprocess { input, output, csv } => preprocess(&ctx, &input, &output, csv.delimiter),
        Command::Split {
            input,
            out_dir,
            ratios,
            stratify_by,
            csv,
        } => split(&ctx, &input, &out_dir, ratios.as_deref(), stratify_by, csv.delimiter),
        Command::Merge {
            base,
            extra,
            map,
            output,
            csv,
        } => merge(&ctx, &base, &extra, map.as_deref(), &output, csv.delimiter),
        Command::BuildVocab {
            input,
            output,
            max_words,
            csv,
        } => build_vocab(&ctx, &input, &output, max_words, csv.delimiter),
        Command::InspectEmbeddings { file, vocab, max_words } => inspect_embeddings(&ctx, &file, &vocab, max_words),
        Command::Train {
            model,
            loss,
            train,
            val,
            out,
            embeddings,
            freeze_embeddings,
            retrain_with_val,
            epochs,
            lr,
            batch_size,
            csv,
        } => train_cmd(
            &ctx,
            TrainArgs {
                model,
                loss,
                train: &train,
                val: &val,
                out: &out,
                embeddings: embeddings.as_deref(),
                freeze_embeddings,
                retrain_with_val,
                epochs,
                lr,
                batch_size,
                delimiter: csv.delimiter,
            },
        ),
        Command::Evaluate {
            model,
            data,
            report,
            vocab,
            csv,
        } => evaluate_cmd(&ctx, &model, &data, report.as_deref(), vocab.as_deref(), csv.delimiter),
        Command::Predict { model, text, vocab } => predict_cmd(&model, &text, vocab.as_deref()),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Io => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
