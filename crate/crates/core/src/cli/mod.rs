//! The `critart` command line.

pub mod gradcheck;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::analyze::{build_report, export, format_scores, score, ReportOptions, SCORES_NAME};
use crate::config::{render, KvConfig};
use crate::data::{
    format_oracle, generate_corpus, generate_range, load_corpus, parse_oracle, write_corpus,
    Corpus, SyntheticSpec,
};
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::train::{evaluate, load_pipeline, TrainConfig, Trainer};
use gradcheck::{run_suite, CheckSize};

pub const ORACLE_NAME: &str = "oracle.csv";
pub const CONFIG_ECHO_NAME: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(
    name = "critart",
    version,
    about = "Unsupervised discovery of critical articulators"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus with planted critical articulators.
    Generate(GenerateArgs),
    /// Train the joint model on a corpus.
    Train(TrainArgs),
    /// Report held-out metrics for a checkpoint.
    Evaluate(EvaluateArgs),
    /// Rank articulators per phoneme and export summary and heatmaps.
    Analyze(AnalyzeArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print every configuration key with its default.
    Defaults(DefaultsArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// `key = value` corpus specification; an empty file gives the defaults.
    pub spec_file: PathBuf,
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training utterances.
    #[arg(long)]
    pub utterances: Option<usize>,
    /// Held-out utterances, generated after the training ones.
    #[arg(long)]
    pub test_utterances: Option<usize>,
    #[arg(long)]
    pub phones_per_utt: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    pub manifest: PathBuf,
    /// `key = value` model and training configuration.
    pub config: PathBuf,
    pub out_dir: PathBuf,
    /// Override a configuration key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Held-out manifest for the `eval_acc` column.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    /// Also write the metrics to `<dir>/eval.txt`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    /// Frames per resampled segment in the heatmaps.
    #[arg(long, default_value_t = 10)]
    pub resample: usize,
    #[arg(long, default_value_t = 3)]
    pub top_k: usize,
    /// Feed the classifier the AAI prediction instead of ground truth.
    #[arg(long)]
    pub no_ste: bool,
    /// Planted-channel file; defaults to `oracle.csv` beside the manifest.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "micro", value_parser = ["micro", "small"])]
    pub size: String,
    /// Skew the backward of the named check (exercises the failure path).
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Args, Debug)]
pub struct DefaultsArgs {
    /// `train` or `generate`.
    #[arg(default_value = "train", value_parser = ["train", "generate"])]
    pub which: String,
}

/// Parses arguments, runs, and maps the outcome to an exit status: 0 on
/// success, 1 when a check failed, 2 on error.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns `Ok(false)` when the command ran but a check it performs failed.
pub fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Generate(a) => generate(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Evaluate(a) => evaluate_cmd(a).map(|_| true),
        Command::Analyze(a) => analyze(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Defaults(a) => {
            print!("{}", defaults_text(&a.which));
            Ok(true)
        }
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let mut kv = KvConfig::load(&a.spec_file)?;
    if let Some(s) = a.seed {
        kv.set("seed", &s.to_string());
    }
    let n = a
        .utterances
        .map_or_else(|| kv.take_or("utterances", 200), Ok)?;
    let n_test = a
        .test_utterances
        .map_or_else(|| kv.take_or("test_utterances", 40), Ok)?;
    let phones = a
        .phones_per_utt
        .map_or_else(|| kv.take_or("phones_per_utt", 6), Ok)?;
    for k in ["utterances", "test_utterances", "phones_per_utt"] {
        kv.take_raw(k);
    }
    let spec = SyntheticSpec::from_kv(&mut kv)?;
    kv.finish()?;
    if n == 0 {
        bail!("utterances must be ≥ 1");
    }
    let oracle = format_oracle(&spec)?;
    std::fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    let train = generate_corpus(&spec, n, phones)?;
    let dir = a.out_dir.join("train");
    let manifest = write_corpus(&train, &dir)?;
    write(&dir.join(ORACLE_NAME), &oracle)?;
    println!("train manifest: {} ({n} utterances)", manifest.display());
    if n_test > 0 {
        let test = generate_range(&spec, n..n + n_test, phones)?;
        let dir = a.out_dir.join("test");
        let manifest = write_corpus(&test, &dir)?;
        write(&dir.join(ORACLE_NAME), &oracle)?;
        println!(
            "test manifest: {} ({n_test} utterances)",
            manifest.display()
        );
    }
    let mut echo = spec.to_kv_string();
    echo.push_str(&render([
        ("utterances", n),
        ("test_utterances", n_test),
        ("phones_per_utt", phones),
    ]));
    write(&a.out_dir.join(CONFIG_ECHO_NAME), &echo)
}

/// Model and training settings from a config file plus `KEY=VALUE` overrides.
pub fn load_run_config(
    path: &Path,
    overrides: &[String],
    classes: usize,
) -> anyhow::Result<(PipelineConfig, TrainConfig)> {
    let mut kv = KvConfig::load(path)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
        kv.set(k.trim(), v.trim());
    }
    let model = PipelineConfig::from_kv(&mut kv, classes)?;
    let train = TrainConfig::from_kv(&mut kv)?;
    kv.finish()?;
    Ok((model, train))
}

fn load(manifest: &Path) -> anyhow::Result<Corpus> {
    load_corpus(manifest).with_context(|| format!("loading corpus {}", manifest.display()))
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let corpus = load(&a.manifest)?;
    let eval = a.eval.as_deref().map(load).transpose()?;
    let (model, cfg) = load_run_config(&a.config, &a.overrides, corpus.phonemes.len())?;
    std::fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    write(
        &a.out_dir.join(CONFIG_ECHO_NAME),
        &crate::train::config_echo(&model, &cfg),
    )?;
    let mut trainer = Trainer::new(Pipeline::new(model)?, cfg, &corpus)?;
    let start = Instant::now();
    let quiet = a.quiet;
    trainer
        .run_with(&corpus, eval.as_ref(), |m| {
            if !quiet {
                let eval = m
                    .eval_acc
                    .map(|a| format!(" eval_acc {a:.4}"))
                    .unwrap_or_default();
                println!(
                    "epoch {:>3}  l_aai {:.4}  l_fpc {:.4}  train_acc {:.4}{eval}  [{:.0?}]",
                    m.epoch,
                    m.l_aai,
                    m.l_fpc,
                    m.train_acc,
                    start.elapsed()
                );
            }
        })
        .context("training failed")?;
    trainer.save_outputs(&a.out_dir)?;
    println!("wrote {}", a.out_dir.display());
    Ok(())
}

fn load_model(checkpoint: &Path, corpus: &Corpus) -> anyhow::Result<Pipeline> {
    let (pl, phonemes) = load_pipeline(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    if phonemes != corpus.phonemes {
        bail!(
            "phoneme table mismatch: checkpoint has {:?}, corpus has {:?}",
            phonemes,
            corpus.phonemes
        );
    }
    Ok(pl)
}

fn evaluate_cmd(a: EvaluateArgs) -> anyhow::Result<()> {
    let corpus = load(&a.manifest)?;
    let pl = load_model(&a.checkpoint, &corpus)?;
    let m = evaluate(&pl, &corpus, 8)?;
    let mut pairs: Vec<(String, String)> = vec![
        ("frames".into(), m.frames.to_string()),
        ("accuracy".into(), m.accuracy.to_string()),
        ("accuracy_no_ste".into(), m.accuracy_no_ste.to_string()),
        ("degenerate_rate".into(), m.degenerate_rate.to_string()),
    ];
    for (c, r) in crate::data::ArticulatorChannel::ALL.iter().zip(m.rmse) {
        pairs.push((format!("rmse.{c}"), r.to_string()));
    }
    let text = render(pairs);
    print!("{text}");
    if let Some(dir) = a.out_dir {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write(&dir.join("eval.txt"), &text)?;
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> anyhow::Result<()> {
    if !(1..=crate::data::EMA_DIM).contains(&a.top_k) {
        bail!("--top-k must be in 1..=12");
    }
    let corpus = load(&a.manifest)?;
    let pl = load_model(&a.checkpoint, &corpus)?;
    let opts = ReportOptions {
        resample_len: a.resample,
        use_ste: !a.no_ste,
        ..ReportOptions::default()
    };
    let report = build_report(&pl, &corpus, opts)?;
    export(&report, &a.out_dir)?;
    write(
        &a.out_dir.join(CONFIG_ECHO_NAME),
        &render([
            ("resample", a.resample.to_string()),
            ("top_k", a.top_k.to_string()),
            ("ste", (!a.no_ste).to_string()),
        ]),
    )?;
    for p in &report.phonemes {
        println!("{}", p.top_label(a.top_k)?);
    }
    for s in &report.skipped {
        println!("skipped /{s}/: no frames in corpus");
    }
    println!(
        "mean across-phoneme variance of channel weights: {}",
        report.mean_channel_variance()
    );
    let oracle = a.oracle.clone().or_else(|| {
        let p = a
            .manifest
            .parent()
            .unwrap_or(Path::new("."))
            .join(ORACLE_NAME);
        p.exists().then_some(p)
    });
    if let Some(path) = oracle {
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        let planted = parse_oracle(&text)?;
        let scores = score(&report, &planted, a.top_k)?;
        write(&a.out_dir.join(SCORES_NAME), &format_scores(&scores))?;
        let all = scores.iter().filter(|s| s.all_hit()).count();
        let first = scores.iter().filter(|s| s.strongest_hit()).count();
        println!(
            "planted channels in top-{}: all {all}/{n}, strongest {first}/{n}",
            a.top_k,
            n = scores.len()
        );
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> anyhow::Result<bool> {
    let size: CheckSize = a.size.parse()?;
    let start = Instant::now();
    let results = run_suite(size, a.corrupt.as_deref())?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!(
        "{} checks, {failed} failed, {:.1?}",
        results.len(),
        start.elapsed()
    );
    Ok(failed == 0)
}

const TRAIN_DOCS: &[(&str, &str)] = &[
    ("layers", "encoder blocks per network"),
    ("d_model", "encoder width"),
    ("heads", "attention heads; must divide d_model"),
    ("d_ff", "feed-forward width"),
    ("max_len", "longest utterance the positional table covers"),
    (
        "min_max",
        "weight normalization axis: per_frame or per_channel",
    ),
    ("share_trunk", "AAI and AWP share one encoder"),
    ("init_seed", "parameter initialization seed"),
    ("epochs", "passes over the training corpus"),
    ("batch_size", "utterances per batch"),
    ("learning_rate", "Adam step size"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("eps", "Adam denominator offset"),
    ("lambda_aai", "weight of the articulator regression loss"),
    ("lambda_fpc", "weight of the phoneme classification loss"),
    ("dropout_p", "dropout on the raw AWP output before min-max"),
    ("seed", "shuffling and dropout seed"),
    (
        "eval_every",
        "epochs between held-out evaluations and checkpoints",
    ),
    (
        "checkpoint_dir",
        "write per-epoch checkpoints here (unset: off)",
    ),
    ("clip", "global gradient-norm threshold (unset: off)"),
];

const GENERATE_DOCS: &[(&str, &str)] = &[
    ("seed", "corpus seed; also fixes the acoustic projection"),
    ("phonemes", "comma-separated inventory"),
    (
        "critical.<p>",
        "planted channels for phoneme p as CHANNEL:target pairs",
    ),
    (
        "alpha",
        "smoothing of critical channels toward their targets",
    ),
    ("sigma_a", "acoustic noise"),
    ("sigma_w", "random-walk step of non-critical channels"),
    ("sigma_c", "noise on critical channels"),
    ("wander_bound", "reflecting bound of the random walk"),
    ("seg_min", "shortest segment in frames"),
    ("seg_max", "longest segment in frames"),
    ("subject", "subject id written into each utterance"),
    ("utterances", "training utterances"),
    ("test_utterances", "held-out utterances"),
    ("phones_per_utt", "phones per utterance"),
];

/// Commented default configuration for `train` or `generate`.
pub fn defaults_text(which: &str) -> String {
    let (docs, text) = if which == "generate" {
        let mut t = SyntheticSpec::default_with_seed(0).to_kv_string();
        t.push_str("utterances = 200\ntest_utterances = 40\nphones_per_utt = 6\n");
        (GENERATE_DOCS, t)
    } else {
        let t = crate::train::config_echo(&PipelineConfig::new(2), &TrainConfig::default());
        (TRAIN_DOCS, t + "# checkpoint_dir = ckpt\n# clip = 1.0\n")
    };
    let mut out = String::new();
    let mut last = "";
    for line in text.lines() {
        let key = line
            .trim_start_matches("# ")
            .split(" = ")
            .next()
            .unwrap_or("");
        let key = if key.starts_with("critical.") {
            "critical.<p>"
        } else {
            key
        };
        if let Some((_, doc)) = docs.iter().find(|(k, _)| *k == key && *k != last) {
            out.push_str(&format!("# {doc}\n"));
            last = key;
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}
