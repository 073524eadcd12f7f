//! `neuralign` command-line interface.
//!
//! Exit codes: 0 on success, 2 when inputs fail validation (missing files,
//! malformed manifests, bad flags), 3 on runtime or numeric failures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use neuralign::dataset::{NeuralSample, PairedDataset, Split};
use neuralign::datastore::{
    generate_synthetic, load_checkpoint, load_dataset, read_tensor, save_checkpoint, save_dataset, write_atomic,
    MapFamily, SyntheticConfig, SyntheticModality,
};
use neuralign::encoder::{init_encoder, ArchConfig, Modality, ModalityEncoder, ModalityKind};
use neuralign::eval::{evaluate_all, EvalProtocol};
use neuralign::kernel::Tensor;
use neuralign::retrieval::{self, build_index, build_neural_index, hit_rows, HitRow, PayloadKind, RankedHits};
use neuralign::train::{fit, loss_curve_csv, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "neuralign",
    version,
    about = "Align EEG, MEG and fMRI recordings with image embeddings"
)]
struct Cli {
    /// Directory that receives every output file.
    #[arg(long, global = true, env = "NEURALIGN_OUT", default_value = "neuralign-out")]
    out: PathBuf,

    /// What to print on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Table,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic paired datasets with a known ground truth.
    Synth(SynthArgs),
    /// Train an encoder on the train split of a dataset.
    Train(TrainArgs),
    /// Rank images for each neural sample.
    Decode(DecodeArgs),
    /// Rank neural samples for an image.
    Encode(EncodeArgs),
    /// Rank samples of another modality for each source sample.
    Convert(ConvertArgs),
    /// Run decoding, encoding and conversion metrics on the test split.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    /// Modality and native shape, e.g. `eeg:4x4`, `meg:272x181`, `fmri:16`. Repeatable.
    #[arg(long = "modality", required = true, value_parser = parse_kind)]
    modalities: Vec<ModalityKind>,
    #[arg(long, default_value_t = 3)]
    subjects: usize,
    #[arg(long, default_value_t = 600)]
    stimuli: usize,
    /// Number of stimuli (the last ones) held out for testing.
    #[arg(long, default_value_t = 100)]
    test: usize,
    #[arg(long, default_value_t = 40)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, value_enum, default_value_t = MapArg::Identity)]
    map: MapArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MapArg {
    Identity,
    RandomAffine,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `default`, `compact`, or a path to an architecture JSON file.
    #[arg(long, default_value = "default")]
    arch: String,
    /// Hidden width of the `compact` architecture.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Seeds both initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: Split,
}

#[derive(Args, Debug, Serialize)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Query with the embedding of this stimulus from the manifest.
    #[arg(long, conflicts_with = "embedding", required_unless_present = "embedding")]
    stimulus: Option<String>,
    /// Query with an embedding stored in a tensor container.
    #[arg(long)]
    embedding: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: Split,
}

#[derive(Args, Debug, Serialize)]
struct ConvertArgs {
    #[arg(long)]
    source_checkpoint: PathBuf,
    #[arg(long)]
    source_manifest: PathBuf,
    #[arg(long)]
    target_checkpoint: PathBuf,
    #[arg(long)]
    target_manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: Split,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Checkpoint directory; pair each with a `--manifest` in the same order.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long = "manifest", required = true)]
    manifests: Vec<PathBuf>,
    /// Cutoffs for top-k class accuracy; pass `--ks` with no values to skip class metrics.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = [1usize, 5])]
    ks: Vec<usize>,
}

fn parse_kind(s: &str) -> Result<ModalityKind, String> {
    let (modality, shape) = s
        .split_once(':')
        .ok_or_else(|| format!("expected MODALITY:SHAPE, got `{s}`"))?;
    let modality: Modality = modality.parse().map_err(|e| format!("{e}"))?;
    let dims = shape
        .split('x')
        .map(|d| d.parse::<usize>().map_err(|e| format!("bad dimension `{d}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    ModalityKind::new(modality, dims).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: neuralign::Error| e.to_string())
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<neuralign::Error> for Failure {
    fn from(e: neuralign::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn require_paths<'a>(paths: impl IntoIterator<Item = &'a Path>) -> CliResult<()> {
    let missing: Vec<String> = paths
        .into_iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Failure::Validation(format!("missing input: {}", missing.join(", "))))
    }
}

fn require_k(k: usize) -> CliResult<()> {
    if k == 0 {
        return Err(Failure::Validation("k must be at least 1".into()));
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

/// Records the command and its fully resolved configuration.
fn write_run_record(out: &Path, command: &str, format: Format, config: &impl Serialize) -> CliResult<()> {
    #[derive(Serialize)]
    struct RunRecord<'a, C> {
        command: &'a str,
        version: &'a str,
        out: &'a Path,
        format: Format,
        config: &'a C,
    }
    write_json(
        &out.join(format!("run-{command}.json")),
        &RunRecord {
            command,
            version: env!("CARGO_PKG_VERSION"),
            out,
            format,
            config,
        },
    )
}

fn hits_table(rows: &[HitRow]) -> String {
    let w = rows.iter().map(|r| r.query_id.len()).max().unwrap_or(5).max(5);
    let h = rows.iter().map(|r| r.hit_id.len()).max().unwrap_or(3).max(3);
    let mut out = format!("{:<w$}  rank  {:<h$}  score\n", "query", "hit");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<w$}  {:>4}  {:<h$}  {:.6}",
            r.query_id, r.rank, r.hit_id, r.score
        );
    }
    out
}

/// Writes `hits.json` and prints the hits.
fn emit_hits(out: &Path, command: &str, format: Format, results: &[(String, RankedHits)]) -> CliResult<()> {
    let rows = hit_rows(results.iter().map(|(q, h)| (q.as_str(), h)));
    write_json(&out.join(format!("{command}-hits.json")), &rows)?;
    match format {
        Format::Table => print!("{}", hits_table(&rows)),
        Format::Json => println!("{}", serde_json::to_string_pretty(&rows)?),
    }
    Ok(())
}

fn describe(kind: &ModalityKind) -> String {
    let dims: Vec<String> = kind.input_shape.iter().map(usize::to_string).collect();
    format!("{}:{}", kind.modality, dims.join("x"))
}

fn load_pair(checkpoint: &Path, manifest: &Path) -> CliResult<(ModalityEncoder, PairedDataset)> {
    let encoder = load_checkpoint(checkpoint)?.encoder;
    let dataset = load_dataset(manifest)?;
    if encoder.kind() != &dataset.kind {
        return Err(Failure::Validation(format!(
            "checkpoint {} is for {}, manifest {} holds {}",
            checkpoint.display(),
            describe(encoder.kind()),
            manifest.display(),
            describe(&dataset.kind)
        )));
    }
    Ok((encoder, dataset))
}

fn split_samples(dataset: &PairedDataset, split: Split) -> CliResult<Vec<&NeuralSample>> {
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(Failure::Validation(format!("no {split} samples in the manifest")));
    }
    Ok(samples)
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> CliResult<()> {
    let config = SyntheticConfig {
        num_stimuli: args.stimuli,
        num_test: args.test,
        num_classes: args.classes,
        embed_dim: args.embed_dim,
        noise_std: args.noise,
        map: match args.map {
            MapArg::Identity => MapFamily::Identity,
            MapArg::RandomAffine => MapFamily::RandomAffine,
        },
        seed: args.seed,
        modalities: args
            .modalities
            .iter()
            .map(|kind| SyntheticModality {
                kind: kind.clone(),
                num_subjects: args.subjects,
            })
            .collect(),
    };
    config.validate()?;
    let data = generate_synthetic(&config)?;
    let mut written = Vec::new();
    for ds in &data.datasets {
        let metadata = BTreeMap::from([(
            "synthetic".to_string(),
            serde_json::json!({ "seed": args.seed, "noise_std": args.noise, "map": args.map }),
        )]);
        let path = save_dataset(ds, cli.out.join(ds.kind.modality.as_str()), metadata)?;
        written.push(path);
    }
    write_run_record(&cli.out, "synth", cli.format, &config)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn resolve_arch(args: &TrainArgs, kind: &ModalityKind, embed_dim: usize) -> CliResult<ArchConfig> {
    let arch = match args.arch.as_str() {
        "default" => ArchConfig::default_for(kind, embed_dim),
        "compact" => ArchConfig::compact_for(kind, embed_dim, args.hidden),
        path => {
            let bytes = std::fs::read(path).map_err(|e| Failure::Validation(format!("{path}: {e}")))?;
            serde_json::from_slice(&bytes).map_err(|e| Failure::Validation(format!("{path}: {e}")))?
        }
    };
    arch.layer_input_shapes(kind)?;
    if arch.embed_dim != embed_dim {
        return Err(Failure::Validation(format!(
            "architecture outputs {} dimensions, embeddings have {embed_dim}",
            arch.embed_dim
        )));
    }
    Ok(arch)
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> CliResult<()> {
    let mut paths = vec![args.manifest.as_path()];
    if !matches!(args.arch.as_str(), "default" | "compact") {
        paths.push(Path::new(&args.arch));
    }
    require_paths(paths)?;

    let defaults = TrainConfig::default();
    let config = TrainConfig {
        learning_rate: args.learning_rate.unwrap_or(defaults.learning_rate),
        weight_decay: args.weight_decay.unwrap_or(defaults.weight_decay),
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        epochs: args.epochs.unwrap_or(defaults.epochs),
        temperature: args.temperature.unwrap_or(defaults.temperature),
        seed: args.seed.unwrap_or(defaults.seed),
        ..defaults
    };
    config.validate()?;
    let dataset = load_dataset(&args.manifest)?;
    let arch = resolve_arch(args, &dataset.kind, dataset.embed_dim)?;

    let mut encoder = init_encoder(&dataset.kind, &dataset.subjects, &arch, config.seed)?;
    let outcome = fit(&mut encoder, &dataset, &config)?;

    save_checkpoint(&encoder, Some(&outcome.state), cli.out.join("checkpoint"))?;
    write_atomic(
        cli.out.join("loss_curve.csv"),
        loss_curve_csv(&outcome.loss_curve).as_bytes(),
    )?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        manifest: &'a Path,
        arch: &'a ArchConfig,
        train: &'a TrainConfig,
    }
    write_run_record(
        &cli.out,
        "train",
        cli.format,
        &Resolved {
            manifest: &args.manifest,
            arch: &arch,
            train: &config,
        },
    )?;
    match cli.format {
        Format::Table => {
            let last = outcome
                .loss_curve
                .last()
                .map(|l| format!("{l:.6}"))
                .unwrap_or_else(|| "-".into());
            println!("epochs  final mean loss");
            println!("{:>6}  {last}", config.epochs);
        }
        Format::Json => println!("{}", serde_json::to_string_pretty(&outcome.loss_curve)?),
    }
    Ok(())
}

fn cmd_decode(cli: &Cli, args: &DecodeArgs) -> CliResult<()> {
    require_k(args.k)?;
    require_paths([args.checkpoint.as_path(), args.manifest.as_path()])?;
    let (encoder, dataset) = load_pair(&args.checkpoint, &args.manifest)?;
    let samples = split_samples(&dataset, args.split)?;
    let stimuli = dataset.split_stimuli(args.split);
    let rows: Vec<&Tensor> = stimuli.iter().map(|s| &s.embedding).collect();
    let index = build_index(
        stimuli.iter().map(|s| s.stimulus_id.clone()).collect(),
        &Tensor::stack(&rows, &[dataset.embed_dim])?,
        PayloadKind::Image,
    )?;
    let results = samples
        .iter()
        .map(|s| Ok((s.sample_id.clone(), retrieval::decode(&encoder, s, &index, args.k)?)))
        .collect::<CliResult<Vec<_>>>()?;
    emit_hits(&cli.out, "decode", cli.format, &results)?;
    write_run_record(&cli.out, "decode", cli.format, args)
}

fn cmd_encode(cli: &Cli, args: &EncodeArgs) -> CliResult<()> {
    require_k(args.k)?;
    let mut paths = vec![args.checkpoint.as_path(), args.manifest.as_path()];
    paths.extend(args.embedding.as_deref());
    require_paths(paths)?;
    let (encoder, dataset) = load_pair(&args.checkpoint, &args.manifest)?;
    let (query_id, query) = match (&args.stimulus, &args.embedding) {
        (Some(id), _) => {
            let s = dataset
                .stimulus(id)
                .ok_or_else(|| Failure::Validation(format!("stimulus `{id}` is not in the manifest")))?;
            (id.clone(), s.embedding.clone())
        }
        (None, Some(path)) => (path.display().to_string(), read_tensor(path)?),
        (None, None) => unreachable!("clap requires one query"),
    };
    if query.numel() != dataset.embed_dim {
        return Err(Failure::Validation(format!(
            "query embedding has {} values, expected {}",
            query.numel(),
            dataset.embed_dim
        )));
    }
    let samples = split_samples(&dataset, args.split)?;
    let index = build_neural_index(&encoder, &samples)?;
    let hits = retrieval::encode_retrieve(&query, &index, args.k)?;
    emit_hits(&cli.out, "encode", cli.format, &[(query_id, hits)])?;
    write_run_record(&cli.out, "encode", cli.format, args)
}

fn cmd_convert(cli: &Cli, args: &ConvertArgs) -> CliResult<()> {
    require_k(args.k)?;
    require_paths([
        args.source_checkpoint.as_path(),
        args.source_manifest.as_path(),
        args.target_checkpoint.as_path(),
        args.target_manifest.as_path(),
    ])?;
    let (source, source_ds) = load_pair(&args.source_checkpoint, &args.source_manifest)?;
    let (target, target_ds) = load_pair(&args.target_checkpoint, &args.target_manifest)?;
    let index = build_neural_index(&target, &split_samples(&target_ds, args.split)?)?;
    let results = split_samples(&source_ds, args.split)?
        .iter()
        .map(|s| Ok((s.sample_id.clone(), retrieval::convert(&source, s, &index, args.k)?)))
        .collect::<CliResult<Vec<_>>>()?;
    emit_hits(&cli.out, "convert", cli.format, &results)?;
    write_run_record(&cli.out, "convert", cli.format, args)
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> CliResult<()> {
    if args.checkpoints.len() != args.manifests.len() {
        return Err(Failure::Validation(format!(
            "{} checkpoints but {} manifests",
            args.checkpoints.len(),
            args.manifests.len()
        )));
    }
    if args.ks.contains(&0) {
        return Err(Failure::Validation("k must be at least 1".into()));
    }
    require_paths(args.checkpoints.iter().chain(&args.manifests).map(PathBuf::as_path))?;
    let loaded = args
        .checkpoints
        .iter()
        .zip(&args.manifests)
        .map(|(c, m)| load_pair(c, m))
        .collect::<CliResult<Vec<_>>>()?;
    let pairs: Vec<_> = loaded.iter().map(|(e, d)| (e, d)).collect();
    let protocol = EvalProtocol { ks: args.ks.clone() };
    let report = evaluate_all(&pairs, &protocol)?;

    write_json(&cli.out.join("report.json"), &report)?;
    write_run_record(&cli.out, "eval", cli.format, args)?;
    match cli.format {
        Format::Table => print!("{}", report.to_table()),
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Decode(a) => cmd_decode(cli, a),
        Command::Encode(a) => cmd_encode(cli, a),
        Command::Convert(a) => cmd_convert(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
