mod error;
mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use davam::corpus::{length_histogram, write_sentences, CorpusSplits, Dataset, LengthHistogram};
use davam::evalgen::{self, AugmentRow, EvalReport, LengthMode};
use davam::models::ModelKind;
use davam::sweep::{self, SweepAxis};
use davam::synth::SyntheticGrammar;
use davam::train::{self, Checkpoint, EncodedCorpus, TrainConfig};

use crate::error::{CliError, ExitKind};
use crate::manifest::{sha256_hex, RunManifest};

/// Replaces every seed when set: config files, and `--seed` defaults.
const SEED_ENV: &str = "DAVAM_SEED";

#[derive(Debug, Parser)]
#[command(name = "davam", version, about = "Train, sample and evaluate discrete variational attention models")]
struct Cli {
    /// Also write the run manifest to this file.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Stage one: encoder, decoder and code book (any model kind).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding train.txt, valid.txt and test.txt.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage two: fit the latent prior of a discrete stage-one checkpoint.
    Prior {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Output checkpoint; the input is never modified.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample sentences from scratch, one per line on standard output.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        /// Word count, or `auto` to draw lengths from the training corpus.
        #[arg(long, default_value = "auto")]
        length: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Prior sampling temperature; tokens are always drawn at 1.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Corpus for `--length auto`; defaults to lengths.json beside the checkpoint.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rec / PPL / KL of a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Language-model perplexity with and without generated training data.
    Augment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        base_corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 2.0, 4.0])]
        ratio: Vec<f64>,
        /// Leading training sentences used as the base; defaults to all.
        #[arg(long, value_delimiter = ',')]
        base_size: Vec<usize>,
        /// Language-model settings; defaults to the desk-scale lstm-lm config.
        #[arg(long)]
        lm_config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Write a synthetic grammar corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        valid: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
    },
    /// Stage-one sensitivity sweep along one hyperparameter.
    Sweep {
        #[arg(long)]
        corpus: PathBuf,
        /// Base settings; defaults to the desk-scale davam config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        axis: SweepAxis,
        /// Defaults to the reference grid for the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Jsonl,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

/// Config seeds, with the environment override applied.
fn apply_seed_override(cfg: &mut TrainConfig) -> Result<(), CliError> {
    if let Some(s) = env_seed()? {
        cfg.seed = s;
        cfg.shuffle_seed = s.wrapping_add(1);
        cfg.noise_seed = s.wrapping_add(2);
    }
    Ok(())
}

fn flag_seed(flag: Option<u64>, default: u64) -> Result<u64, CliError> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(default),
    })
}

fn config_seeds(m: &mut RunManifest, cfg: &TrainConfig) {
    m.seeds.insert("seed".into(), cfg.seed);
    m.seeds.insert("shuffle_seed".into(), cfg.shuffle_seed);
    m.seeds.insert("noise_seed".into(), cfg.noise_seed);
}

fn load_config(path: &Path) -> Result<TrainConfig, CliError> {
    if !path.is_file() {
        return Err(CliError::config(format!("config file {} not found", path.display())));
    }
    TrainConfig::load(path).map_err(|e| CliError::config(e.to_string()))
}

fn load_checkpoint(m: &mut RunManifest, path: &Path) -> Result<Checkpoint, CliError> {
    let digest = m.input(path)?;
    m.checkpoint_sha256 = Some(digest);
    Ok(Checkpoint::load(path)?)
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<String, CliError> {
    ck.save(path)?;
    Ok(sha256_hex(&ck.to_bytes()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let manifest_path = cli.manifest.as_deref();
    match cli.command {
        Command::Train { config, corpus, out } => cmd_train(&config, &corpus, &out, manifest_path),
        Command::Prior { from, corpus, out } => cmd_prior(&from, &corpus, &out, manifest_path),
        Command::Generate {
            ckpt,
            n,
            length,
            seed,
            temperature,
            corpus,
            out,
        } => {
            let seed = flag_seed(seed, 0)?;
            cmd_generate(&ckpt, n, &length, seed, temperature, corpus.as_deref(), out.as_deref(), manifest_path)
        }
        Command::Eval {
            ckpt,
            corpus,
            split,
            batch_size,
            format,
        } => cmd_eval(&ckpt, &corpus, split, batch_size, format, manifest_path),
        Command::Augment {
            ckpt,
            base_corpus,
            ratio,
            base_size,
            lm_config,
            seed,
            format,
        } => {
            let seed = flag_seed(seed, 0)?;
            cmd_augment(&ckpt, &base_corpus, &ratio, &base_size, lm_config.as_deref(), seed, format, manifest_path)
        }
        Command::Synth {
            out,
            seed,
            train,
            valid,
            test,
        } => {
            let seed = flag_seed(seed, 7)?;
            let mut m = RunManifest::new("synth");
            m.arg("out", out.display())
                .arg("train", train)
                .arg("valid", valid)
                .arg("test", test);
            m.seeds.insert("seed".into(), seed);
            m.emit(manifest_path)?;
            SyntheticGrammar::new(seed).splits(train, valid, test).save(&out)?;
            println!("wrote {} / {} / {} sentences to {}", train, valid, test, out.display());
            Ok(())
        }
        Command::Sweep {
            corpus,
            config,
            axis,
            values,
            epochs,
            format,
        } => cmd_sweep(&corpus, config.as_deref(), axis, values, epochs, format, manifest_path),
    }
}

fn cmd_train(config: &Path, corpus_dir: &Path, out: &Path, manifest_path: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    apply_seed_override(&mut cfg)?;
    let mut m = RunManifest::new("train");
    m.arg("config", config.display())
        .arg("corpus", corpus_dir.display())
        .arg("out", out.display());
    m.config = Some(cfg.to_map());
    config_seeds(&mut m, &cfg);
    m.input(config)?;
    m.corpus(corpus_dir)?;
    let ckpt_path = out.join("checkpoint.davam");
    let log_path = out.join("train_log.jsonl");
    let lengths_path = out.join("lengths.json");
    let own_manifest = out.join("manifest.json");
    for (k, p) in [
        ("checkpoint", &ckpt_path),
        ("train_log", &log_path),
        ("lengths", &lengths_path),
        ("manifest", &own_manifest),
    ] {
        m.artifacts.insert(k.into(), p.display().to_string());
    }
    create_dir(out)?;
    m.emit(manifest_path)?;
    write_text(&own_manifest, &(m.to_json() + "\n"))?;

    let splits = CorpusSplits::load(corpus_dir)?;
    let corpus = EncodedCorpus::new(&splits, cfg.max_vocab, cfg.max_words)?;
    eprintln!(
        "training {} on {} sentences, vocabulary {}",
        cfg.model,
        corpus.train.len(),
        corpus.vocab.len()
    );
    let run = train::train_stage_one(&corpus, &cfg)?;
    for r in &run.log.records {
        eprintln!(
            "epoch {:>3}  rec {:>8.3}  kl {:>7.3}  valid rec {:>8.3}  valid kl {:>7.3}  lr {:.4}",
            r.epoch, r.rec, r.kl, r.valid_rec, r.valid_kl, r.lr
        );
    }
    let hash = save_checkpoint(&run.checkpoint, &ckpt_path)?;
    run.log.save(&log_path)?;
    write_text(&lengths_path, &lengths_json(&length_histogram(&corpus.train)?))?;
    m.checkpoint_sha256 = Some(hash.clone());
    m.emit(manifest_path)?;
    write_text(&own_manifest, &(m.to_json() + "\n"))?;
    println!("best epoch {}; checkpoint {} (sha256 {hash})", run.best_epoch, ckpt_path.display());
    Ok(())
}

fn lengths_json(h: &LengthHistogram) -> String {
    serde_json::to_string_pretty(&h.to_map()).expect("histogram serializes") + "\n"
}

fn cmd_prior(from: &Path, corpus_dir: &Path, out: &Path, manifest_path: Option<&Path>) -> Result<(), CliError> {
    let mut m = RunManifest::new("prior");
    m.arg("from", from.display())
        .arg("corpus", corpus_dir.display())
        .arg("out", out.display());
    m.corpus(corpus_dir)?;
    let mut ck = load_checkpoint(&mut m, from)?;
    apply_seed_override(&mut ck.config)?;
    m.config = Some(ck.config.to_map());
    config_seeds(&mut m, &ck.config);
    m.artifacts.insert("checkpoint".into(), out.display().to_string());
    m.emit(manifest_path)?;
    if !ck.model.kind.is_discrete() {
        return Err(CliError::new(
            ExitKind::Stage,
            format!("stage two needs a davam or davam-q checkpoint, {} is {}", from.display(), ck.model.kind),
        ));
    }
    let splits = CorpusSplits::load(corpus_dir)?;
    let corpus = EncodedCorpus::with_vocab(&splits, ck.vocab.clone(), ck.config.max_words);
    let history = train::train_stage_two(&mut ck, &corpus)?;
    for e in &history {
        eprintln!(
            "epoch {:>3}  prior nll {:>8.3}  valid {:>8.3}  uniform {:>8.3}",
            e.epoch, e.train_nll, e.valid_nll, e.uniform_nll
        );
    }
    let hash = save_checkpoint(&ck, out)?;
    m.checkpoint_sha256 = Some(hash.clone());
    m.emit(manifest_path)?;
    println!("checkpoint {} (sha256 {hash})", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    ckpt: &Path,
    n: usize,
    length: &str,
    seed: u64,
    temperature: f64,
    corpus: Option<&Path>,
    out: Option<&Path>,
    manifest_path: Option<&Path>,
) -> Result<(), CliError> {
    let mut m = RunManifest::new("generate");
    m.arg("ckpt", ckpt.display())
        .arg("n", n)
        .arg("length", length)
        .arg("temperature", temperature);
    m.seeds.insert("seed".into(), seed);
    let ck = load_checkpoint(&mut m, ckpt)?;
    let mode = if length == "auto" {
        let hist = match corpus {
            Some(dir) => {
                m.arg("corpus", dir.display());
                m.corpus(dir)?;
                let splits = CorpusSplits::load(dir)?;
                length_histogram(&Dataset::encode(&splits.train, &ck.vocab, ck.config.max_words))?
            }
            None => {
                let p = ckpt.with_file_name("lengths.json");
                if !p.is_file() {
                    return Err(CliError::new(
                        ExitKind::Data,
                        format!("--length auto needs --corpus or {}", p.display()),
                    ));
                }
                m.input(&p)?;
                let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
                let map: BTreeMap<usize, f64> = serde_json::from_str(&text)
                    .map_err(|e| CliError::new(ExitKind::Data, format!("{}: {e}", p.display())))?;
                LengthHistogram::from_map(map)
            }
        };
        LengthMode::Histogram(hist)
    } else {
        let words = length
            .parse()
            .map_err(|_| CliError::config(format!("--length must be a word count or auto, got {length:?}")))?;
        LengthMode::Fixed(words)
    };
    if let Some(p) = out {
        m.arg("out", p.display());
        m.artifacts.insert("sentences".into(), p.display().to_string());
    }
    m.emit(manifest_path)?;
    let sentences = evalgen::generate_from_scratch(&ck.model, &ck.vocab, n, &mode, seed, temperature)?;
    match out {
        Some(p) => write_sentences(p, &sentences)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            for s in &sentences {
                writeln!(stdout, "{}", s.join(" ")).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
            }
        }
    }
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    corpus_dir: &Path,
    split: Split,
    batch_size: usize,
    format: Format,
    manifest_path: Option<&Path>,
) -> Result<(), CliError> {
    let mut m = RunManifest::new("eval");
    m.arg("ckpt", ckpt.display())
        .arg("corpus", corpus_dir.display())
        .arg("split", format!("{split:?}").to_lowercase())
        .arg("batch_size", batch_size);
    m.corpus(corpus_dir)?;
    let ck = load_checkpoint(&mut m, ckpt)?;
    m.emit(manifest_path)?;
    let splits = CorpusSplits::load(corpus_dir)?;
    let lines = match split {
        Split::Valid => &splits.valid,
        Split::Test => &splits.test,
    };
    let report = evalgen::evaluate_checkpoint(&ck, lines, batch_size)?;
    match format {
        Format::Table => print!("{}", eval_table(ck.model.kind, &report)),
        Format::Jsonl => {
            let mut v = serde_json::to_value(&report).expect("report serializes");
            v["model"] = ck.model.kind.to_string().into();
            println!("{v}");
        }
    }
    Ok(())
}

fn eval_table(kind: ModelKind, r: &EvalReport) -> String {
    format!(
        "{:<10} {:>9} {:>9} {:>9} {:>10} {:>8}\n{:<10} {:>9.2} {:>9.2} {:>9.2} {:>10} {:>8}\n",
        "Model", "Rec", "PPL", "KL", "sentences", "tokens", kind, r.rec, r.ppl, r.kl, r.sentences, r.tokens
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_augment(
    ckpt: &Path,
    base_corpus: &Path,
    ratios: &[f64],
    base_sizes: &[usize],
    lm_config: Option<&Path>,
    seed: u64,
    format: Format,
    manifest_path: Option<&Path>,
) -> Result<(), CliError> {
    let mut m = RunManifest::new("augment");
    m.arg("ckpt", ckpt.display())
        .arg("base_corpus", base_corpus.display())
        .arg("ratio", join(ratios))
        .arg("base_size", join(base_sizes));
    m.seeds.insert("generation_seed".into(), seed);
    m.corpus(base_corpus)?;
    let ck = load_checkpoint(&mut m, ckpt)?;
    let mut cfg = match lm_config {
        Some(p) => {
            m.arg("lm_config", p.display());
            m.input(p)?;
            load_config(p)?
        }
        None => TrainConfig::desk_scale(ModelKind::LstmLm),
    };
    apply_seed_override(&mut cfg)?;
    m.config = Some(cfg.to_map());
    config_seeds(&mut m, &cfg);
    m.emit(manifest_path)?;
    let splits = CorpusSplits::load(base_corpus)?;
    let sizes = if base_sizes.is_empty() {
        vec![splits.train.len()]
    } else {
        base_sizes.to_vec()
    };
    let rows = evalgen::augment_table(&splits, &sizes, ratios, &ck, &cfg, seed)?;
    match format {
        Format::Table => print!("{}", augment_table(&rows)),
        Format::Jsonl => {
            for r in &rows {
                println!("{}", serde_json::to_string(r).expect("row serializes"));
            }
        }
    }
    Ok(())
}

fn augment_table(rows: &[AugmentRow]) -> String {
    let mut s = format!("{:>9} {:>6} {:>10} {:>10}\n", "base_size", "ratio", "ppl_base", "ppl_aug");
    for r in rows {
        s.push_str(&format!(
            "{:>9} {:>6} {:>10.3} {:>10.3}\n",
            r.base_size, r.ratio, r.ppl_base, r.ppl_aug
        ));
    }
    s
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn cmd_sweep(
    corpus_dir: &Path,
    config: Option<&Path>,
    axis: SweepAxis,
    values: Vec<f64>,
    epochs: Option<usize>,
    format: Format,
    manifest_path: Option<&Path>,
) -> Result<(), CliError> {
    let mut m = RunManifest::new("sweep");
    m.arg("corpus", corpus_dir.display()).arg("axis", axis);
    let mut cfg = match config {
        Some(p) => {
            m.arg("config", p.display());
            m.input(p)?;
            load_config(p)?
        }
        None => TrainConfig::desk_scale(ModelKind::Davam),
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
        m.arg("epochs", e);
    }
    apply_seed_override(&mut cfg)?;
    let values = if values.is_empty() { axis.reference_grid() } else { values };
    m.arg("values", join(&values));
    m.config = Some(cfg.to_map());
    config_seeds(&mut m, &cfg);
    m.corpus(corpus_dir)?;
    m.emit(manifest_path)?;
    let splits = CorpusSplits::load(corpus_dir)?;
    let corpus = EncodedCorpus::new(&splits, cfg.max_vocab, cfg.max_words)?;
    if format == Format::Table {
        println!("{:>10} {:>9} {:>9} {:>9}", axis.to_string(), "Rec", "PPL", "KL");
    }
    let points = sweep::run_sweep(&corpus, &cfg, axis, &values, |p| match format {
        Format::Table => println!("{:>10} {:>9.3} {:>9.3} {:>9.3}", p.value, p.rec, p.ppl, p.kl),
        Format::Jsonl => println!("{}", serde_json::to_string(p).expect("point serializes")),
    })?;
    let rec: Vec<f64> = points.iter().map(|p| p.rec).collect();
    let check = sweep::check_trend(&rec, axis.expected_trend());
    eprintln!(
        "trend {:?}: {} ({})",
        axis.expected_trend(),
        if check.holds { "holds" } else { "does not hold" },
        check.detail
    );
    Ok(())
}
