//! `mmgcn` — synthesise corpora, train and evaluate models, run ablation
//! sweeps and export adjacency heatmaps.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mmgcn::data::{
    load_corpus, split_corpus, synthesize_corpus, FeatureDims,
    Informativeness, SynthSpec,
};
use mmgcn::evaluation::{evaluate, run_ablation, AblationAxis, AblationGrid};
use mmgcn::graph::export_adjacency_heatmap;
use mmgcn::model::{train_with_observer, FusionKind, LossKind, Model, Regularizer, RunConfig};
use mmgcn::ModalityMask;

#[derive(Parser, Debug)]
#[command(name = "mmgcn", version, about = "Multimodal graph networks for emotion recognition in conversation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus in the JSONL corpus format.
    Synth(SynthArgs),
    /// Train a model; writes a checkpoint and a JSON run report.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus; prints metrics JSON.
    Eval(EvalArgs),
    /// Train and score one configuration per value of an axis, over several seeds.
    Ablate(AblateArgs),
    /// Export one utterance's adjacency rows as CSV.
    Heatmap(HeatmapArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 30)]
    dialogues: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    max_speakers: usize,
    #[arg(long, default_value_t = 5)]
    min_len: usize,
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    /// Feature dimensions as a,v,t.
    #[arg(long, default_value = "8,8,8")]
    dims: String,
    /// Per-modality signal strength as a,v,t, each in [0, 1].
    #[arg(long, default_value = "0.6,0.3,0.9")]
    informativeness: String,
    #[arg(long, default_value_t = 0.7)]
    persistence: f64,
    #[arg(long, default_value_t = 0.0)]
    speaker_bias: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output path (the training part when --test-output is given).
    #[arg(short, long)]
    output: PathBuf,
    /// Also split the corpus and write the held-out dialogues here.
    #[arg(long)]
    test_output: Option<PathBuf>,
    /// Share of dialogues kept for training when splitting.
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
}

/// Hyperparameter overrides; anything unset falls back to the config file,
/// then to the built-in defaults.
#[derive(Args, Debug, Default)]
struct HyperArgs {
    /// JSON file with any subset of the run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    d_s: Option<usize>,
    #[arg(long)]
    d_mlp: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    /// Use the plain norm instead of the squared norm as weight penalty.
    #[arg(long)]
    l2_plain_norm: bool,
    /// ce or focal.
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    focal_gamma: Option<f64>,
    /// mmgcn, early, late or gated.
    #[arg(long)]
    fusion: Option<FusionKind>,
    /// Modality subset such as avt, at or t.
    #[arg(long)]
    modalities: Option<ModalityMask>,
    #[arg(long)]
    no_speaker_embedding: bool,
    #[arg(long)]
    max_speakers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    target_train_accuracy: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl HyperArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $field:ident) => {
                if let Some(v) = self.$flag {
                    c.$field = v;
                }
            };
        }
        set!(layers => num_layers);
        set!(alpha => alpha);
        set!(eta => eta);
        set!(gamma => gamma);
        set!(d_h => d_h);
        set!(d_s => d_s);
        set!(dropout => dropout);
        set!(lr => lr);
        set!(l2 => l2);
        set!(loss => loss);
        set!(focal_gamma => focal_gamma);
        set!(fusion => fusion);
        set!(modalities => modalities);
        set!(epochs => epochs);
        set!(val_fraction => val_fraction);
        set!(seed => seed);
        if self.d_mlp.is_some() {
            c.d_mlp = self.d_mlp;
        }
        if self.max_speakers.is_some() {
            c.max_speakers = self.max_speakers;
        }
        if self.patience.is_some() {
            c.patience = self.patience;
        }
        if self.target_train_accuracy.is_some() {
            c.target_train_accuracy = self.target_train_accuracy;
        }
        if self.l2_plain_norm {
            c.regularizer = Regularizer::Norm;
        }
        if self.no_speaker_embedding {
            c.speaker_embedding = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Directory for the run report and the default checkpoint location.
    #[arg(long, env = "MMGCN_REPORT_DIR", default_value = "reports")]
    report_dir: PathBuf,
    /// Checkpoint path; defaults to <report-dir>/model.json.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Also write the metrics JSON here.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Training corpus, or the whole corpus when --test-corpus is absent.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    test_corpus: Option<PathBuf>,
    /// Training share when splitting --corpus.
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
    /// modalities, layers, speaker or fusion.
    #[arg(long)]
    axis: AblationAxis,
    /// Comma-separated values; the axis's standard values when absent.
    #[arg(long)]
    values: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2,3,4")]
    seeds: String,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long, env = "MMGCN_REPORT_DIR", default_value = "reports")]
    report_dir: PathBuf,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    dialogue: String,
    /// 0-based utterance index within the dialogue.
    #[arg(long)]
    utterance: usize,
    /// CSV destination; standard output when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Heatmap(a) => cmd_heatmap(a),
    }
}

fn parse_triple<T: std::str::FromStr>(s: &str, what: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        bail!("{what} needs three comma-separated values a,v,t, got {s:?}");
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        match p.parse() {
            Ok(v) => out.push(v),
            Err(_) => bail!("invalid {what} value {p:?}"),
        }
    }
    Ok(out.try_into().ok().expect("three values"))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let [da, dv, dt] = parse_triple::<usize>(&a.dims, "dims")?;
    let [qa, qv, qt] = parse_triple::<f64>(&a.informativeness, "informativeness")?;
    let spec = SynthSpec {
        num_dialogues: a.dialogues,
        len_range: (a.min_len, a.max_len),
        num_classes: a.classes,
        max_speakers: a.max_speakers,
        dims: FeatureDims { a: da, v: dv, t: dt },
        informativeness: Informativeness { a: qa, v: qv, t: qt },
        persistence: a.persistence,
        speaker_bias: a.speaker_bias,
        noise: a.noise,
        seed: a.seed,
    };
    let corpus = synthesize_corpus(&spec)?;
    match &a.test_output {
        Some(test_path) => {
            let (train, test) = split_corpus(&corpus, a.train_ratio, a.seed)?;
            train.save(&a.output)?;
            test.save(test_path)?;
            eprintln!(
                "wrote {} training dialogues to {} and {} test dialogues to {}",
                train.dialogues.len(),
                a.output.display(),
                test.dialogues.len(),
                test_path.display()
            );
        }
        None => {
            corpus.save(&a.output)?;
            eprintln!(
                "wrote {} dialogues ({} utterances) to {}",
                corpus.dialogues.len(),
                corpus.num_utterances(),
                a.output.display()
            );
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let config = a.hyper.resolve()?;
    let corpus = load_corpus(&a.corpus, None)?;
    let (model, report) = train_with_observer(&corpus, &config, |e| {
        let mut line = format!("epoch {:>4}  loss {:.6}", e.epoch, e.train_loss);
        if let Some(f) = e.val_weighted_f1 {
            line.push_str(&format!("  val weighted F1 {f:.4}"));
        }
        if let Some(acc) = e.train_accuracy {
            line.push_str(&format!("  train accuracy {acc:.4}"));
        }
        eprintln!("{line}");
    })?;
    create_dir(&a.report_dir)?;
    let checkpoint = a.checkpoint.unwrap_or_else(|| a.report_dir.join("model.json"));
    if let Some(parent) = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    model.save(&checkpoint)?;
    let report_path = a.report_dir.join("run_report.json");
    write_file(&report_path, &report.to_json()?)?;
    eprintln!(
        "kept epoch {}; checkpoint {}; report {}",
        report.best_epoch,
        checkpoint.display(),
        report_path.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus, Some(model.shape.dims))?;
    let metrics = evaluate(&model, &corpus)?;
    let json = serde_json::to_string_pretty(&metrics)?;
    if let Some(path) = &a.output {
        write_file(path, &json)?;
    }
    writeln!(std::io::stdout().lock(), "{json}")?;
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let base = a.hyper.resolve()?;
    let corpus = load_corpus(&a.corpus, None)?;
    let (train, test) = match &a.test_corpus {
        Some(p) => {
            let test = load_corpus(p, Some(corpus.dims))?;
            (corpus, test)
        }
        None => split_corpus(&corpus, a.train_ratio, base.seed)?,
    };
    let mut grid = AblationGrid::new(a.axis, base);
    if let Some(v) = &a.values {
        grid.values = a.axis.parse_values(v)?;
    }
    grid.seeds = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("invalid seed {s:?}")))
        .collect::<Result<_>>()?;
    let report = run_ablation(&train, &test, &grid, |label, seed, f1| match f1 {
        Some(f) => eprintln!("{label} seed {seed}: weighted F1 {f:.4}"),
        None => eprintln!("{label} seed {seed}: failed"),
    })?;
    create_dir(&a.report_dir)?;
    let path = a.report_dir.join(format!("ablation_{}.json", a.axis));
    write_file(&path, &report.to_json()?)?;
    let mut out = std::io::stdout().lock();
    write!(out, "{}", report.to_table())?;
    eprintln!("report {}", path.display());
    Ok(())
}

fn cmd_heatmap(a: HeatmapArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus, Some(model.shape.dims))?;
    model.check_corpus(&corpus)?;
    let dialogue = corpus
        .dialogue(&a.dialogue)
        .with_context(|| format!("no dialogue {:?} in {}", a.dialogue, a.corpus.display()))?;
    let graph = model.graph(dialogue)?;
    let csv = export_adjacency_heatmap(&graph, a.utterance)?.to_csv();
    match &a.output {
        Some(path) => write_file(path, &csv)?,
        None => write!(std::io::stdout().lock(), "{csv}")?,
    }
    Ok(())
}
