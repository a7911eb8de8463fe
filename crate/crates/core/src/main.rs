use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use sker::corpus::{CorpusSplit, SplitName, Tokenization};
use sker::embeddings::EmbeddingTable;
use sker::exec::Executor;
use sker::gradcheck;
use sker::lmc_analysis;
use sker::sker_model::{attention_table, AblationConfig, Mode};
use sker::synonym_graph::{GraphSet, SynonymDictionary, DEFAULT_NEIGHBOR_CAP, DEFAULT_THRESHOLD};
use sker::synthetic::{random_setup, SetupShape};
use sker::trainer::{self, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(name = "sker", version, about = "Synonym-graph idiom cloze reader", arg_required_else_help = true)]
struct Cli {
    /// Worker threads for data-parallel stages; results are reproducible for a fixed count.
    #[arg(long, global = true, env = "SKER_WORKERS")]
    workers: Option<usize>,
    /// Where to write the run manifest [default: next to the main output,
    /// else ./sker-manifest.json].
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build synonym graphs from a dictionary or embedding similarity.
    BuildGraph(BuildGraphArgs),
    /// Train a model and write the best-dev checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one or more splits.
    Eval(EvalArgs),
    /// Train the full model and its three ablations, then tabulate accuracy.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients on a random setup.
    Gradcheck(GradcheckArgs),
    /// Dump per-head attention for one instance as JSON.
    Inspect(InspectArgs),
    /// Literal-meaning-coverage statistics from annotation files.
    AnalyzeLmc(AnalyzeLmcArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphMode {
    Dict,
    Embed,
}

#[derive(Args)]
struct BuildGraphArgs {
    #[arg(long, value_enum)]
    mode: GraphMode,
    /// Synonym groups, one whitespace-separated group per line (dict mode).
    #[arg(long, required_if_eq("mode", "dict"))]
    dictionary: Option<PathBuf>,
    /// word2vec text embeddings (embed mode).
    #[arg(long, required_if_eq("mode", "embed"))]
    embeddings: Option<PathBuf>,
    /// Corpus files whose candidate idioms become graph centers
    /// [default: every dictionary or embedding idiom].
    #[arg(long = "corpus", num_args = 1..)]
    corpora: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = DEFAULT_NEIGHBOR_CAP)]
    cap: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    NoSynonym,
    NoGate,
    NoGateGat,
}

impl From<AblationArg> for AblationConfig {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => AblationConfig::FULL,
            AblationArg::NoSynonym => AblationConfig::WITHOUT_SYNONYM,
            AblationArg::NoGate => AblationConfig::WITHOUT_GATE,
            AblationArg::NoGateGat => AblationConfig::WITHOUT_GATE_AND_GAT,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenizationArg {
    Whitespace,
    Character,
}

impl From<TokenizationArg> for Tokenization {
    fn from(t: TokenizationArg) -> Self {
        match t {
            TokenizationArg::Whitespace => Tokenization::Whitespace,
            TokenizationArg::Character => Tokenization::Character,
        }
    }
}

/// Training settings; flags override the config file, which overrides defaults.
#[derive(Args)]
struct ConfigArgs {
    /// TOML or JSON training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    #[arg(long, value_enum)]
    tokenization: Option<TokenizationArg>,
}

impl ConfigArgs {
    fn resolve(&self, workers: Option<usize>) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        macro_rules! apply {
            ($($flag:ident => $field:ident),*) => {$(
                if let Some(v) = self.$flag { c.$field = v.into(); }
            )*};
        }
        apply!(d => d, heads => heads, lr => learning_rate, batch_size => batch_size, dropout => dropout,
            max_epochs => max_epochs, patience => patience_epochs, seed => seed, max_len => max_len,
            embedding_dim => embedding_dim, ablation => ablation, tokenization => tokenization);
        if self.clip.is_some() {
            c.clip = self.clip;
        }
        if let Some(w) = workers {
            c.workers = w;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// Synonym graph file from `build-graph`.
    #[arg(long)]
    graphs: PathBuf,
    /// Pre-trained idiom embeddings (word2vec text); random init otherwise.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Line-JSON training log [default: stdout].
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    graphs: PathBuf,
    /// Corpus files; each file stem names its split.
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    /// Full reports including per-instance predictions.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Evaluation corpora; each file stem names its split.
    #[arg(long, num_args = 1.., required = true)]
    eval: Vec<PathBuf>,
    /// JSON table output.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    candidates: usize,
    #[arg(long, default_value_t = 2)]
    synonyms: usize,
    #[arg(long, default_value_t = 6)]
    len: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    graphs: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Instance index within the corpus file.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

#[derive(Args)]
struct AnalyzeLmcArgs {
    /// CSV rows `item,kind,r1,r2,r3` with kind idiom, word or synonym.
    #[arg(long)]
    annotations: PathBuf,
    /// Lines `idiom<TAB>synonym1 synonym2 …`.
    #[arg(long)]
    synonyms: Option<PathBuf>,
    /// JSON report path [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest {
    subcommand: &'static str,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    seed: Option<u64>,
    version: &'static str,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_manifest(
    explicit: Option<&Path>,
    primary_output: Option<&Path>,
    subcommand: &'static str,
    config: impl Serialize,
    inputs: &[&Path],
    seed: Option<u64>,
) -> Result<()> {
    let digests = inputs
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let manifest = RunManifest {
        subcommand,
        config: serde_json::to_value(config)?,
        inputs: digests,
        seed,
        version: env!("CARGO_PKG_VERSION"),
    };
    let path = match (explicit, primary_output) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(out)) => {
            let mut name = out.as_os_str().to_owned();
            name.push(".manifest.json");
            PathBuf::from(name)
        }
        (None, None) => PathBuf::from("sker-manifest.json"),
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&path, text).with_context(|| format!("cannot write manifest {}", path.display()))
}

fn split_name(path: &Path) -> SplitName {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("split");
    stem.parse().unwrap_or_else(|never| match never {})
}

fn load_split(path: &Path, tokenization: Tokenization) -> Result<CorpusSplit> {
    Ok(CorpusSplit::load_jsonl(path, split_name(path), tokenization)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn executor(workers: Option<usize>) -> Result<Executor> {
    Ok(Executor::new(workers.unwrap_or(1))?)
}

fn build_graph(cli: &Cli, args: &BuildGraphArgs) -> Result<()> {
    let mut inputs: Vec<&Path> = args.corpora.iter().map(PathBuf::as_path).collect();
    inputs.extend(args.dictionary.as_deref());
    inputs.extend(args.embeddings.as_deref());
    let config = serde_json::json!({
        "mode": match args.mode { GraphMode::Dict => "dict", GraphMode::Embed => "embed" },
        "threshold": args.threshold,
        "cap": args.cap,
    });
    write_manifest(cli.manifest.as_deref(), Some(&args.out), "build-graph", config, &inputs, None)?;

    let mut corpus_centers = std::collections::BTreeSet::new();
    for path in &args.corpora {
        corpus_centers.extend(load_split(path, Tokenization::Whitespace)?.vocabulary());
    }
    let graphs = match args.mode {
        GraphMode::Dict => {
            let dict = SynonymDictionary::load(args.dictionary.as_ref().expect("required by clap"))?;
            let centers: Vec<String> = if args.corpora.is_empty() {
                dict.idioms()
            } else {
                corpus_centers.into_iter().collect()
            };
            GraphSet::from_dictionary(&dict, centers.iter().map(String::as_str))?
        }
        GraphMode::Embed => {
            let table = EmbeddingTable::load_word2vec_text(args.embeddings.as_ref().expect("required by clap"))?;
            // idioms without an embedding get no graph and fall back to an empty neighbor list
            let centers: Vec<String> = if args.corpora.is_empty() {
                table.tokens().to_vec()
            } else {
                corpus_centers.into_iter().filter(|c| table.contains(c)).collect()
            };
            GraphSet::from_embeddings(&table, &centers, args.threshold, args.cap, &executor(cli.workers)?)?
        }
    };
    graphs.save(&args.out)?;
    eprintln!("wrote {} graphs ({} edges) to {}", graphs.len(), graphs.edges().len(), args.out.display());
    Ok(())
}

struct LoadedData {
    train: CorpusSplit,
    dev: CorpusSplit,
    graphs: GraphSet,
    pretrained: Option<EmbeddingTable>,
}

fn load_data(data: &DataArgs, tokenization: Tokenization) -> Result<LoadedData> {
    Ok(LoadedData {
        train: CorpusSplit::load_jsonl(&data.train, SplitName::Train, tokenization)?,
        dev: CorpusSplit::load_jsonl(&data.dev, SplitName::Dev, tokenization)?,
        graphs: GraphSet::load(&data.graphs)?,
        pretrained: data.embeddings.as_ref().map(EmbeddingTable::load_word2vec_text).transpose()?,
    })
}

fn data_inputs(data: &DataArgs) -> Vec<&Path> {
    let mut v = vec![data.train.as_path(), data.dev.as_path(), data.graphs.as_path()];
    v.extend(data.embeddings.as_deref());
    v
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let config = args.config.resolve(cli.workers)?;
    let mut inputs = data_inputs(&args.data);
    inputs.extend(args.config.config.as_deref());
    write_manifest(cli.manifest.as_deref(), Some(&args.out), "train", &config, &inputs, Some(config.seed))?;

    let data = load_data(&args.data, config.tokenization)?;
    let model = trainer::build_model(&config, &data.train, &[&data.dev], &data.graphs, data.pretrained.as_ref())?;
    let mut sink: Box<dyn Write> = match &args.log {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    let outcome = trainer::train(&config, model, &data.train, &data.dev, &data.graphs, Some(sink.as_mut()))?;
    sink.flush()?;
    outcome.checkpoint.save(&args.out)?;
    eprintln!(
        "best dev accuracy {:.4} at epoch {} of {}; checkpoint {}",
        outcome.checkpoint.dev_accuracy,
        outcome.checkpoint.best_epoch,
        outcome.epochs_run,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    split: &'a SplitName,
    accuracy: f64,
    correct: usize,
    count: usize,
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let mut inputs = vec![args.checkpoint.as_path(), args.graphs.as_path()];
    inputs.extend(args.data.iter().map(PathBuf::as_path));
    let config = serde_json::json!({ "workers": cli.workers.unwrap_or(1) });
    write_manifest(cli.manifest.as_deref(), args.report.as_deref(), "eval", config, &inputs, None)?;

    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let graphs = GraphSet::load(&args.graphs)?;
    let exec = executor(cli.workers)?;
    let mut reports = Vec::new();
    for path in &args.data {
        let split = load_split(path, ckpt.config.tokenization)?;
        let report = trainer::evaluate_checkpoint(&ckpt, &split, &graphs, &exec)?;
        let summary = EvalSummary {
            split: &report.split,
            accuracy: report.accuracy,
            correct: report.correct,
            count: report.count,
        };
        println!("{}", serde_json::to_string(&summary)?);
        reports.push(report);
    }
    if let Some(path) = &args.report {
        write_json(path, &reports)?;
    }
    Ok(())
}

fn ablate(cli: &Cli, args: &AblateArgs) -> Result<()> {
    let config = args.config.resolve(cli.workers)?;
    let mut inputs = data_inputs(&args.data);
    inputs.extend(args.eval.iter().map(PathBuf::as_path));
    inputs.extend(args.config.config.as_deref());
    write_manifest(cli.manifest.as_deref(), args.report.as_deref(), "ablate", &config, &inputs, Some(config.seed))?;

    let data = load_data(&args.data, config.tokenization)?;
    let evals = args
        .eval
        .iter()
        .map(|p| load_split(p, config.tokenization))
        .collect::<Result<Vec<_>>>()?;
    let eval_refs: Vec<&CorpusSplit> = evals.iter().collect();
    let table = trainer::run_ablation_suite(&config, &data.train, &data.dev, &eval_refs, &data.graphs, data.pretrained.as_ref())?;
    print!("{}", table.render());
    if let Some(path) = &args.report {
        write_json(path, &table)?;
    }
    Ok(())
}

fn gradcheck_cmd(cli: &Cli, args: &GradcheckArgs) -> Result<bool> {
    let config = serde_json::json!({
        "d": args.d,
        "heads": args.heads,
        "candidates": args.candidates,
        "synonyms": args.synonyms,
        "len": args.len,
        "dropout": args.dropout,
        "epsilon": args.epsilon,
        "tolerance": args.tolerance,
        "workers": cli.workers.unwrap_or(1),
    });
    write_manifest(cli.manifest.as_deref(), None, "gradcheck", config, &[], Some(args.seed))?;

    let shape = SetupShape {
        d: args.d,
        heads: args.heads,
        candidates: args.candidates,
        synonyms: args.synonyms,
        len: args.len,
        dropout: args.dropout,
        ..SetupShape::default()
    };
    let setup = random_setup(shape, args.seed)?;
    let report = gradcheck::check(&setup.model, &setup.instance, &setup.graphs, args.seed, args.epsilon, &executor(cli.workers)?)?;
    let pass = report.passes(args.tolerance);
    println!(
        "max relative error {:.3e} ({}) over {} entries: {}",
        report.max_relative_error,
        report.worst_tensor,
        report.checked,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(pass)
}

fn inspect(cli: &Cli, args: &InspectArgs) -> Result<()> {
    let inputs = [args.checkpoint.as_path(), args.graphs.as_path(), args.data.as_path()];
    let config = serde_json::json!({ "index": args.index });
    write_manifest(cli.manifest.as_deref(), None, "inspect", config, &inputs, None)?;

    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let graphs = GraphSet::load(&args.graphs)?;
    ckpt.check_graphs(&graphs)?;
    let split = load_split(&args.data, ckpt.config.tokenization)?;
    let Some(instance) = split.instances.get(args.index) else {
        bail!("index {} out of range: {} holds {} instances", args.index, args.data.display(), split.len());
    };
    let graphs = trainer::effective_graphs(
        &ckpt.model,
        &graphs,
        &instance.candidates,
        ckpt.config.neighbor_cap,
        trainer::mix_seed(&[ckpt.config.seed, args.index as u64]),
    )?;
    let trace = ckpt.model.forward(instance, &graphs, Mode::Eval)?;
    let out = serde_json::json!({
        "index": args.index,
        "gold": instance.gold,
        "predicted": trace.predicted(),
        "loss": trace.loss,
        "candidates": attention_table(&trace),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn analyze_lmc(cli: &Cli, args: &AnalyzeLmcArgs) -> Result<()> {
    let mut inputs = vec![args.annotations.as_path()];
    inputs.extend(args.synonyms.as_deref());
    write_manifest(cli.manifest.as_deref(), args.out.as_deref(), "analyze-lmc", serde_json::json!({}), &inputs, None)?;

    let records = lmc_analysis::load_annotations(&args.annotations)?;
    let links = args.synonyms.as_ref().map(lmc_analysis::load_synonym_links).transpose()?;
    let report = lmc_analysis::analyze(&records, links.as_ref())?;
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::BuildGraph(a) => build_graph(cli, a)?,
        Command::Train(a) => train(cli, a)?,
        Command::Eval(a) => eval(cli, a)?,
        Command::Ablate(a) => ablate(cli, a)?,
        Command::Gradcheck(a) => return gradcheck_cmd(cli, a),
        Command::Inspect(a) => inspect(cli, a)?,
        Command::AnalyzeLmc(a) => analyze_lmc(cli, a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check exceeded tolerance");
            ExitCode::FAILURE
        }
        Err(err) => {
            eprintln!("error: {}", format!("{err:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
