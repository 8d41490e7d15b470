//! Single binary wiring the whole toolchain: graph construction, synthetic
//! data generation, training, evaluation, sensitivity analysis, the scaling
//! benchmark and the low-data sweep.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gsnn_core::config::RunConfig;
use gsnn_core::eval::{
    default_lowdata_sizes, evaluate, lowdata_sweep, scaling_benchmark, sensitivity,
    write_eval_report, write_lowdata_report, write_sensitivity_report, write_timing_report,
    BenchConfig,
};
use gsnn_core::kgraph::{
    build_graph_with_labels, fuse_taxonomy, load_graph, read_cooccurrence, read_declarations,
    read_taxonomy, save_graph, KnowledgeGraph,
};
use gsnn_core::numeric::{load_checkpoint, save_checkpoint, NumericError};
use gsnn_core::search::{
    load_dataset, train, Dataset, ModelError, ModelKind, Pipeline, TrainSettings,
};
use gsnn_core::synthdata::{generate_dataset, vocab_graph};

/// Environment variable naming the default configuration file.
const CONFIG_ENV: &str = "GSNN_CONFIG";

#[derive(Parser)]
#[command(
    name = "gsnn",
    version,
    about = "Gated graph propagation with budgeted subgraph expansion",
    disable_help_subcommand = true
)]
struct Cli {
    /// key=value configuration file (default: $GSNN_CONFIG when set)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker-thread cap; 1 is the fully deterministic reference mode
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a knowledge graph from co-occurrence counts
    BuildGraph(BuildGraphArgs),
    /// Generate a synthetic dataset (and optionally its graph)
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint: mAP and per-category AP
    Eval(EvalArgs),
    /// Per-(example, label) partial-derivative report
    Sensitivity(SensitivityArgs),
    /// Dense-vs-budgeted scaling benchmark
    Bench(BenchArgs),
    /// mAP versus training-set size, per model variant
    Lowdata(LowdataArgs),
}

#[derive(Args)]
struct BuildGraphArgs {
    /// Co-occurrence TSV: concept_a<TAB>relation<TAB>concept_b<TAB>count
    input: PathBuf,
    /// Output graph file
    out: PathBuf,
    /// Concept declarations TSV: name<TAB>kind<TAB>detectable
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Taxonomy edges TSV: src<TAB>edge_type<TAB>dst
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Minimum co-occurrence count for an edge to survive
    #[arg(long)]
    prune_threshold: Option<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output prefix; writes <prefix>.train/.test/.manifest
    out_prefix: PathBuf,
    /// Knowledge graph to sample against
    #[arg(long, conflicts_with = "synth_vocab_graph")]
    graph: Option<PathBuf>,
    /// Generate the 316-concept vocabulary graph instead of loading one
    /// (written to <prefix>.graph)
    #[arg(long)]
    synth_vocab_graph: bool,
    #[arg(long, default_value_t = 5000)]
    n_train: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    graph: PathBuf,
    data: PathBuf,
    /// Output checkpoint path; the loss log lands next to it as <out>.log
    out: PathBuf,
    /// gsnn, feature_det or feature_only
    #[arg(long, default_value = "gsnn")]
    model: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    graph: PathBuf,
    data: PathBuf,
    checkpoint: PathBuf,
    /// Output prefix; writes <prefix>.tsv and <prefix>.summary
    out_prefix: PathBuf,
    #[arg(long, default_value = "gsnn")]
    model: String,
    /// Checkpoint of a baseline to diff against
    #[arg(long, requires = "baseline_model")]
    baseline_checkpoint: Option<PathBuf>,
    #[arg(long)]
    baseline_model: Option<String>,
}

#[derive(Args)]
struct SensitivityArgs {
    graph: PathBuf,
    data: PathBuf,
    checkpoint: PathBuf,
    /// Index of the example within the dataset
    example: usize,
    /// Target label: canonical index or concept name
    label: String,
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Output prefix; writes <prefix>.tsv and <prefix>.summary
    out_prefix: PathBuf,
    /// Graph sizes to sweep, comma-separated
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct LowdataArgs {
    graph: PathBuf,
    train_data: PathBuf,
    test_data: PathBuf,
    out: PathBuf,
    /// Training-set sizes, descending, comma-separated
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

enum CliError {
    Usage(String),
    Model(ModelError),
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Model(e)
    }
}

impl From<gsnn_core::kgraph::GraphError> for CliError {
    fn from(e: gsnn_core::kgraph::GraphError) -> Self {
        CliError::Model(ModelError::Graph(e))
    }
}

impl From<NumericError> for CliError {
    fn from(e: NumericError) -> Self {
        CliError::Model(ModelError::Numeric(e))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Model(ModelError::Io(e))
    }
}

fn exit_code_for(err: &CliError) -> u8 {
    match err {
        CliError::Usage(_) => 1,
        CliError::Model(ModelError::Numeric(NumericError::NonFinite { .. })) => 3,
        CliError::Model(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, everything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("usage error: {msg}"),
                CliError::Model(err) => eprintln!("error: {err}"),
            }
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    if let Some(p) = path {
        return Ok(RunConfig::from_file(p)?);
    }
    if let Ok(env_path) = std::env::var(CONFIG_ENV) {
        if !env_path.is_empty() {
            return Ok(RunConfig::from_file(Path::new(&env_path))?);
        }
    }
    Ok(RunConfig::default())
}

fn require_seed(flag: Option<u64>, rc: &RunConfig) -> Result<u64, CliError> {
    flag.or(rc.seed).ok_or_else(|| {
        CliError::Usage("a seed is required: pass --seed or set seed= in the config".into())
    })
}

fn parse_model(name: &str) -> Result<ModelKind, CliError> {
    ModelKind::parse(name).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown model {name:?}; expected gsnn, feature_det or feature_only"
        ))
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .ok();
    let rc = load_config(&cli.config)?;
    match cli.command {
        Command::BuildGraph(args) => cmd_build_graph(args, &rc),
        Command::GenData(args) => cmd_gen_data(args, &rc),
        Command::Train(args) => cmd_train(args, &rc),
        Command::Eval(args) => cmd_eval(args, &rc),
        Command::Sensitivity(args) => cmd_sensitivity(args, &rc),
        Command::Bench(args) => cmd_bench(args, &rc),
        Command::Lowdata(args) => cmd_lowdata(args, &rc),
    }
}

fn cmd_build_graph(args: BuildGraphArgs, rc: &RunConfig) -> Result<(), CliError> {
    let records = read_cooccurrence(BufReader::new(File::open(&args.input)?))?;
    let decls = match &args.labels {
        Some(p) => read_declarations(BufReader::new(File::open(p)?))?,
        None => Vec::new(),
    };
    let threshold = args.prune_threshold.unwrap_or(rc.prune_threshold);
    let (mut graph, build) = build_graph_with_labels(records, threshold, &decls)?;
    let mut fusion_line = String::new();
    if let Some(p) = &args.taxonomy {
        let taxonomy = read_taxonomy(BufReader::new(File::open(p)?))?;
        let (fused, report) = fuse_taxonomy(&graph, taxonomy)?;
        graph = fused;
        fusion_line = format!(
            ", taxonomy: +{} nodes +{} edges {} dropped",
            report.nodes_added, report.edges_added, report.edges_dropped
        );
    }
    save_graph(&graph, &args.out)?;
    println!(
        "graph: {} nodes, {} edges ({} records kept, {} pruned at threshold {}{})",
        graph.node_count(),
        graph.edge_count(),
        build.records_kept,
        build.records_pruned,
        threshold,
        fusion_line
    );
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs, rc: &RunConfig) -> Result<(), CliError> {
    let seed = require_seed(args.seed, rc)?;
    let graph: KnowledgeGraph = if args.synth_vocab_graph {
        let g = vocab_graph(seed);
        let graph_path = args.out_prefix.with_extension("graph");
        save_graph(&g, &graph_path)?;
        println!("graph: wrote {}", graph_path.display());
        g
    } else {
        match &args.graph {
            Some(p) => load_graph(p)?,
            None => {
                return Err(CliError::Usage(
                    "pass --graph <file> or --synth-vocab-graph".into(),
                ))
            }
        }
    };
    let out = generate_dataset(&graph, &rc.scene, args.n_train, args.n_test, seed, &args.out_prefix)?;
    println!(
        "dataset: {} train, {} test -> {} / {}",
        args.n_train,
        args.n_test,
        out.train_path.display(),
        out.test_path.display()
    );
    Ok(())
}

fn settings_from(rc: &RunConfig, epochs: Option<usize>, batch: Option<usize>) -> TrainSettings {
    let mut s = rc.train.clone();
    if let Some(e) = epochs {
        s.epochs = e;
    }
    if let Some(b) = batch {
        s.batch_size = b;
    }
    s
}

fn cmd_train(args: TrainArgs, rc: &RunConfig) -> Result<(), CliError> {
    let kind = parse_model(&args.model)?;
    let seed = require_seed(args.seed, rc)?;
    let graph = load_graph(&args.graph)?;
    let data = load_dataset(&args.data)?;
    let settings = settings_from(rc, args.epochs, args.batch_size);
    let mut pipe = Pipeline::new(kind, graph, rc.gsnn.clone(), data.d_img, seed)?;
    let log = train(&mut pipe, &data, &settings, seed)?;
    save_checkpoint(&pipe.ps, &args.out, false)?;

    let log_path = log_path_for(&args.out);
    let mut w = BufWriter::new(File::create(&log_path)?);
    writeln!(w, "epoch\tbce\timportance\ttotal")
        .map_err(|e| CliError::Model(ModelError::Io(e)))?;
    for (epoch, l) in log.epoch_losses.iter().enumerate() {
        writeln!(w, "{epoch}\t{:.6}\t{:.6}\t{:.6}", l.bce, l.importance, l.total)
            .map_err(|e| CliError::Model(ModelError::Io(e)))?;
    }
    w.flush().map_err(|e| CliError::Model(ModelError::Io(e)))?;
    if let Some(last) = log.epoch_losses.last() {
        println!(
            "trained {} for {} epochs: bce {:.4}, importance {:.4} -> {}",
            kind.as_str(),
            settings.epochs,
            last.bce,
            last.importance,
            args.out.display()
        );
    }
    Ok(())
}

fn log_path_for(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".log");
    checkpoint.with_file_name(name)
}

fn load_pipeline(
    kind: ModelKind,
    graph_path: &Path,
    data: &Dataset,
    checkpoint: &Path,
    rc: &RunConfig,
) -> Result<Pipeline, CliError> {
    let graph = load_graph(graph_path)?;
    let mut pipe = Pipeline::new(kind, graph, rc.gsnn.clone(), data.d_img, 0)?;
    load_checkpoint(checkpoint)?.apply_to(&mut pipe.ps)?;
    Ok(pipe)
}

fn cmd_eval(args: EvalArgs, rc: &RunConfig) -> Result<(), CliError> {
    let kind = parse_model(&args.model)?;
    let data = load_dataset(&args.data)?;
    let pipe = load_pipeline(kind, &args.graph, &data, &args.checkpoint, rc)?;
    let mut report = evaluate(&pipe, &data)?;
    if let (Some(ckpt), Some(model)) = (&args.baseline_checkpoint, &args.baseline_model) {
        let base_kind = parse_model(model)?;
        let base_pipe = load_pipeline(base_kind, &args.graph, &data, ckpt, rc)?;
        let base_report = evaluate(&base_pipe, &data)?;
        report = report.with_baseline(base_kind.as_str(), &base_report);
    }
    let label_names: Vec<String> = pipe
        .graph
        .label_nodes()
        .iter()
        .map(|&v| pipe.graph.node(v).map(|n| n.name.clone()))
        .collect::<Result<_, _>>()?;
    let table = args.out_prefix.with_extension("tsv");
    let summary = args.out_prefix.with_extension("summary");
    write_eval_report(&report, &label_names, &table, &summary)?;
    println!(
        "mAP {:.4} over {} categories -> {}",
        report.map,
        report.per_category_ap.iter().flatten().count(),
        table.display()
    );
    Ok(())
}

fn cmd_sensitivity(args: SensitivityArgs, rc: &RunConfig) -> Result<(), CliError> {
    let data = load_dataset(&args.data)?;
    let mut pipe = load_pipeline(ModelKind::Gsnn, &args.graph, &data, &args.checkpoint, rc)?;
    let ex = data.examples.get(args.example).ok_or_else(|| {
        CliError::Model(ModelError::Data(format!(
            "example index {} out of range ({} examples)",
            args.example,
            data.len()
        )))
    })?;
    let target = match args.label.parse::<usize>() {
        Ok(i) => i,
        Err(_) => {
            let node = pipe.graph.node_by_name(&args.label).ok_or_else(|| {
                CliError::Model(ModelError::Data(format!(
                    "no concept named {:?}",
                    args.label
                )))
            })?;
            pipe.graph
                .label_nodes()
                .iter()
                .position(|&v| v == node.id)
                .ok_or_else(|| {
                    CliError::Model(ModelError::Data(format!(
                        "{:?} is not an output label",
                        args.label
                    )))
                })?
        }
    };
    let report = sensitivity(&mut pipe, ex, target)?;
    write_sensitivity_report(&report, &pipe.graph, &args.out)?;
    println!(
        "sensitivity of {:?} (p={:.4}) over {} states -> {}",
        report.label_name,
        report.probability,
        report.n_states(),
        args.out.display()
    );
    Ok(())
}

fn cmd_bench(args: BenchArgs, rc: &RunConfig) -> Result<(), CliError> {
    let seed = args.seed.or(rc.seed).unwrap_or(7);
    let cfg = BenchConfig {
        sizes: args.sizes.unwrap_or_else(|| rc.bench_sizes.clone()),
        trials: args.trials.unwrap_or(rc.bench_trials),
        seed,
        gsnn: rc.gsnn.clone(),
        ..BenchConfig::default()
    };
    let (records, fit) = scaling_benchmark(&cfg)?;
    let table = args.out_prefix.with_extension("tsv");
    let summary = args.out_prefix.with_extension("summary");
    write_timing_report(&records, &fit, &table, &summary)?;
    println!(
        "bench: dense exponent {:?}, budgeted exponent {:?} -> {}",
        fit.dense_exponent,
        fit.gsnn_exponent,
        table.display()
    );
    Ok(())
}

fn cmd_lowdata(args: LowdataArgs, rc: &RunConfig) -> Result<(), CliError> {
    let seed = require_seed(args.seed, rc)?;
    let graph = load_graph(&args.graph)?;
    let train_data = load_dataset(&args.train_data)?;
    let test_data = load_dataset(&args.test_data)?;
    let sizes = args
        .sizes
        .or_else(|| rc.lowdata_sizes.clone())
        .unwrap_or_else(|| default_lowdata_sizes(train_data.len()));
    let settings = settings_from(rc, args.epochs, None);
    let kinds = [ModelKind::Gsnn, ModelKind::FeatureDet, ModelKind::FeatureOnly];
    let rows = lowdata_sweep(
        &graph,
        &train_data,
        &test_data,
        &sizes,
        &kinds,
        &rc.gsnn,
        &settings,
        seed,
    )?;
    write_lowdata_report(&rows, &args.out)?;
    println!("lowdata: {} rows -> {}", rows.len(), args.out.display());
    Ok(())
}
