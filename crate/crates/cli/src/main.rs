mod manifest;
mod plot;

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gaussbox::eval::{compute_metrics, rank_queries, MetricOptions, MetricReport, RankReduce, RankedPrediction, Scorer};
use gaussbox::geometry::SigmaLevel;
use gaussbox::projection::{write_atomic, EmbeddingTable, ProjectionParams};
use gaussbox::synth::{clustered_embeddings, cosine_gap, hash_embeddings, DEFAULT_NOISE};
use gaussbox::taxonomy::{
    load_taxonomy, read_nodes, read_split_manifest, write_edges, write_nodes, write_split_manifest, QueryManifest,
    TaxonomyGraph,
};
use gaussbox::trainer::{train_with_progress, TrainConfig};
use gaussbox::{Error, ErrorClass};

use manifest::{sidecar, RunManifest};

#[derive(Parser)]
#[command(name = "gaussbox", version, about = "Gaussian box embeddings for taxonomy expansion")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hold out a fraction of leaves as queries.
    Split(SplitArgs),
    /// Write stand-in embeddings for every node.
    PseudoEmbed(PseudoEmbedArgs),
    /// Train the projection network on a seed taxonomy.
    Train(TrainArgs),
    /// Rank held-out queries against the seed taxonomy and report metrics.
    Eval(EvalArgs),
    /// Write every node's box at a fixed sigma level.
    ExportBoxes(ExportArgs),
    /// Train and evaluate once per value of one hyperparameter.
    Sweep(SweepArgs),
    /// Print the default training configuration.
    DefaultConfig,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    nodes: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives nodes.tsv, edges.tsv, queries.tsv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug)]
enum EmbedMode {
    Hash,
    Clustered(PathBuf),
}

fn parse_mode(s: &str) -> std::result::Result<EmbedMode, String> {
    match s.split_once(':') {
        None if s == "hash" => Ok(EmbedMode::Hash),
        Some(("clustered", p)) if !p.is_empty() => Ok(EmbedMode::Clustered(PathBuf::from(p))),
        _ => Err(format!("expected `hash` or `clustered:<edges file>`, got `{s}`")),
    }
}

#[derive(Args)]
struct PseudoEmbedArgs {
    #[arg(long)]
    nodes: PathBuf,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `hash`, or `clustered:<edges file>` for tree-correlated vectors.
    #[arg(long, value_parser = parse_mode, default_value = "hash")]
    mode: EmbedMode,
    /// Starting noise scale for clustered mode.
    #[arg(long, default_value_t = DEFAULT_NOISE)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` file; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nodes: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[arg(long)]
    history: PathBuf,
    /// Overrides the config's worker count (results do not depend on it).
    #[arg(long)]
    workers: Option<usize>,
    /// Print one line per epoch to stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerArg {
    Bc,
    Kl,
}

impl From<ScorerArg> for Scorer {
    fn from(s: ScorerArg) -> Self {
        match s {
            ScorerArg::Bc => Scorer::Bc,
            ScorerArg::Kl => Scorer::NegKl,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReduceArg {
    Best,
    Mean,
}

impl From<ReduceArg> for RankReduce {
    fn from(r: ReduceArg) -> Self {
        match r {
            ReduceArg::Best => RankReduce::Best,
            ReduceArg::Mean => RankReduce::Mean,
        }
    }
}

#[derive(Args)]
struct EvalInputs {
    /// Directory holding the seed taxonomy's nodes.tsv and edges.tsv.
    #[arg(long)]
    seed_taxonomy: PathBuf,
    /// Split manifest listing queries and their gold parents.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    k: Vec<usize>,
    /// How several gold ranks combine for MR.
    #[arg(long, value_enum, default_value_t = ReduceArg::Mean)]
    mr_reduce: ReduceArg,
    /// How several gold ranks combine for MRR.
    #[arg(long, value_enum, default_value_t = ReduceArg::Best)]
    mrr_reduce: ReduceArg,
}

impl EvalInputs {
    fn options(&self) -> MetricOptions {
        MetricOptions {
            mr: self.mr_reduce.into(),
            mrr: self.mrr_reduce.into(),
        }
    }

    fn paths(&self) -> [PathBuf; 4] {
        [
            self.seed_taxonomy.join("nodes.tsv"),
            self.seed_taxonomy.join("edges.tsv"),
            self.queries.clone(),
            self.embeddings.clone(),
        ]
    }

    fn load(&self) -> Result<(TaxonomyGraph, QueryManifest, EmbeddingTable)> {
        let [n, e, q, emb] = self.paths();
        if self.k.is_empty() {
            return Err(CliError::Usage("--k needs at least one cutoff".into()));
        }
        Ok((load_taxonomy(&n, &e)?, read_split_manifest(&q)?, EmbeddingTable::read(&emb)?))
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    inputs: EvalInputs,
    #[arg(long, value_enum, default_value_t = ScorerArg::Bc)]
    scorer: ScorerArg,
    /// Metric report CSV.
    #[arg(long)]
    report: PathBuf,
    /// Ranked predictions TSV; defaults to `<report>.predictions.tsv`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Keep only the top anchors per query in the predictions file.
    #[arg(long)]
    top: Option<usize>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    nodes: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    sigma: u8,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Dim,
    Lambda,
    #[value(name = "C", alias = "c")]
    C,
}

impl SweepParam {
    fn key(self) -> &'static str {
        match self {
            SweepParam::Dim => "dim",
            SweepParam::Lambda => "lambda",
            SweepParam::C => "c_scale",
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    inputs: EvalInputs,
    /// Metric-vs-value CSV.
    #[arg(long)]
    out_csv: PathBuf,
    /// SVG line chart of MRR and Recall at the first cutoff.
    #[arg(long)]
    plot: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Command::Split(a) => cmd_split(a),
        Command::PseudoEmbed(a) => cmd_pseudo_embed(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ExportBoxes(a) => cmd_export_boxes(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::DefaultConfig => {
            print!("{}", TrainConfig::default().to_text());
            Ok(())
        }
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Writes every buffer atomically, creating parent directories as needed.
fn write_all(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    for (p, bytes) in files {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        write_atomic(p, bytes)?;
    }
    Ok(())
}

fn paths_of(files: &[(PathBuf, Vec<u8>)]) -> Vec<PathBuf> {
    files.iter().map(|(p, _)| p.clone()).collect()
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let mut m = RunManifest::begin("split");
    if a.out.exists() && !a.out.is_dir() {
        return Err(CliError::Usage(format!("--out {} is not a directory", a.out.display())));
    }
    let g = load_taxonomy(&a.nodes, &a.edges)?;
    let split = g.split_leaves(a.fraction, a.seed)?;
    m.input(&a.nodes)?;
    m.input(&a.edges)?;
    m.seed("split", a.seed);

    let mut nodes = Vec::new();
    write_nodes(&split.seed, &mut nodes)?;
    let mut edges = Vec::new();
    write_edges(&split.seed, &mut edges)?;
    let mut queries = Vec::new();
    write_split_manifest(&split, &mut queries)?;
    let files = [
        (a.out.join("nodes.tsv"), nodes),
        (a.out.join("edges.tsv"), edges),
        (a.out.join("queries.tsv"), queries),
    ];
    write_all(&files)?;
    m.finish(&paths_of(&files), &a.out.join("manifest.json"))?;
    println!(
        "seed taxonomy: {} nodes, {} edges; {} held-out queries",
        split.seed.len(),
        split.seed.edge_count(),
        split.queries.len()
    );
    Ok(())
}

fn cmd_pseudo_embed(a: PseudoEmbedArgs) -> Result<()> {
    let mut m = RunManifest::begin("pseudo-embed");
    let records = read_nodes(&a.nodes)?;
    m.input(&a.nodes)?;
    m.seed("embedding", a.seed);
    let table = match &a.mode {
        EmbedMode::Hash => hash_embeddings(records.iter().map(|r| &r.id), a.dim, a.seed)?,
        EmbedMode::Clustered(edges) => {
            let g = load_taxonomy(&a.nodes, edges)?;
            m.input(edges)?;
            let t = clustered_embeddings(&g, a.dim, a.seed, a.noise)?;
            let (edge, random) = cosine_gap(&g, &t, a.seed)?;
            println!("mean cosine: parent/child {edge:.3}, random pairs {random:.3}");
            t
        }
    };
    let mut out = Vec::new();
    table.write(&mut out)?;
    let files = [(a.out.clone(), out)];
    write_all(&files)?;
    m.finish(&paths_of(&files), &sidecar(&a.out))?;
    println!("{} vectors of dim {}", table.len(), table.dim());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut m = RunManifest::begin("train");
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(w) = a.workers {
        cfg.workers = w;
        cfg.validate()?;
    }
    let g = load_taxonomy(&a.nodes, &a.edges)?;
    let emb = EmbeddingTable::read(&a.embeddings)?;
    if let Some(id) = emb.first_missing(g.node_ids()) {
        return Err(Error::MissingEmbedding(id.to_string()).into());
    }
    for p in a.config.iter().chain([&a.nodes, &a.edges, &a.embeddings]) {
        m.input(p)?;
    }
    m.seed("train", cfg.seed);
    m.config_hash = Some(hex::encode(cfg.hash()));

    let (params, history) = train_with_progress(&cfg, &g, &emb, |e| {
        if a.verbose {
            eprintln!(
                "epoch {:>4}  loss {:.6}  grad {:.3e}{}",
                e.epoch,
                e.loss_total,
                e.grad_norm,
                e.val_mrr.map(|v| format!("  val_mrr {v:.4}")).unwrap_or_default()
            );
        }
    })?;
    let files = [
        (a.out_checkpoint.clone(), params.to_bytes()),
        (a.history.clone(), history.to_csv().into_bytes()),
    ];
    write_all(&files)?;
    m.finish(&paths_of(&files), &sidecar(&a.out_checkpoint))?;
    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs (selected {}), final loss {:.6}",
        history.epochs.len(),
        history.selected_epoch,
        last.loss_total
    );
    Ok(())
}

fn check_input_dim(params: &ProjectionParams, emb: &EmbeddingTable) -> Result<()> {
    if params.dims().input != emb.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dims().input,
            actual: emb.dim(),
        }
        .into());
    }
    Ok(())
}

fn evaluate(
    params: &ProjectionParams,
    seed: &TaxonomyGraph,
    queries: &QueryManifest,
    emb: &EmbeddingTable,
    scorer: Scorer,
    inputs: &EvalInputs,
) -> Result<(Vec<RankedPrediction>, MetricReport)> {
    let preds = rank_queries(params, emb, seed, &queries.queries, scorer)?;
    let report = compute_metrics(&preds, &inputs.k, seed, seed.is_single_parent(), inputs.options())?;
    Ok((preds, report))
}

fn report_csv(scorer: Scorer, report: &MetricReport) -> String {
    let mut s = String::from("scorer,metric,k,value\n");
    for row in report.to_csv().lines().skip(1) {
        writeln!(s, "{scorer},{row}").unwrap();
    }
    s
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut m = RunManifest::begin("eval");
    let params = ProjectionParams::load(&a.checkpoint)?;
    let (seed, queries, emb) = a.inputs.load()?;
    check_input_dim(&params, &emb)?;
    let scorer = Scorer::from(a.scorer);
    let (preds, report) = evaluate(&params, &seed, &queries, &emb, scorer, &a.inputs)?;

    m.input(&a.checkpoint)?;
    for p in a.inputs.paths() {
        m.input(&p)?;
    }
    if let Some(s) = queries.rng_seed {
        m.seed("split", s);
    }
    m.config_hash = Some(hex::encode(params.config_hash()));

    let mut tsv = b"query\trank\tanchor\tscore\n".to_vec();
    for p in &preds {
        p.write_tsv(a.top, &mut tsv)?;
    }
    let pred_path = a.predictions.clone().unwrap_or_else(|| {
        let mut s = a.report.as_os_str().to_owned();
        s.push(".predictions.tsv");
        PathBuf::from(s)
    });
    let files = [
        (a.report.clone(), report_csv(scorer, &report).into_bytes()),
        (pred_path, tsv),
    ];
    write_all(&files)?;
    m.finish(&paths_of(&files), &sidecar(&a.report))?;
    print!("{}", report.to_table(&format!("scorer {scorer}")));
    Ok(())
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn cmd_export_boxes(a: ExportArgs) -> Result<()> {
    let mut m = RunManifest::begin("export-boxes");
    let params = ProjectionParams::load(&a.checkpoint)?;
    let emb = EmbeddingTable::read(&a.embeddings)?;
    let records = read_nodes(&a.nodes)?;
    check_input_dim(&params, &emb)?;
    if let Some(id) = emb.first_missing(records.iter().map(|r| &r.id)) {
        return Err(Error::MissingEmbedding(id.to_string()).into());
    }
    let level = SigmaLevel::new(a.sigma as f64)?;
    let mut out = String::from("id\tcenter\toffset\n");
    for r in &records {
        let g = params.forward_eval(emb.get(r.id.as_str())?)?.to_gaussian();
        let b = g.to_box(level);
        writeln!(out, "{}\t{}\t{}", r.id, join(b.center()), join(b.offset())).unwrap();
    }
    for p in [&a.checkpoint, &a.embeddings, &a.nodes] {
        m.input(p)?;
    }
    m.config_hash = Some(hex::encode(params.config_hash()));
    let files = [(a.out.clone(), out.into_bytes())];
    write_all(&files)?;
    m.finish(&paths_of(&files), &sidecar(&a.out))?;
    println!("{} boxes at {}σ", records.len(), a.sigma);
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut m = RunManifest::begin("sweep");
    let base = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    let key = a.param.key();
    let configs = a
        .values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.set(key, v)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<std::result::Result<Vec<_>, Error>>()?;
    let (seed, queries, emb) = a.inputs.load()?;
    if let Some(id) = emb.first_missing(seed.node_ids()) {
        return Err(Error::MissingEmbedding(id.to_string()).into());
    }
    if let Some(p) = a.config.as_ref() {
        m.input(p)?;
    }
    for p in a.inputs.paths() {
        m.input(&p)?;
    }
    m.seed("train", base.seed);
    m.config_hash = Some(hex::encode(base.hash()));

    let ks = &a.inputs.k;
    let mut csv = a.param.to_possible_value().unwrap().get_name().to_string();
    for s in Scorer::ALL {
        write!(csv, ",{s}_mr,{s}_mrr").unwrap();
        for k in ks {
            write!(csv, ",{s}_recall@{k},{s}_hit@{k}").unwrap();
        }
    }
    csv.push('\n');
    let mut series: Vec<(String, Vec<f64>)> = Vec::new();
    for s in Scorer::ALL {
        series.push((format!("{s} MRR"), vec![]));
        series.push((format!("{s} R@{}", ks[0]), vec![]));
    }
    for (v, cfg) in a.values.iter().zip(&configs) {
        let (params, _) = train_with_progress(cfg, &seed, &emb, |_| {})?;
        csv.push_str(v);
        for (i, s) in Scorer::ALL.into_iter().enumerate() {
            let (_, r) = evaluate(&params, &seed, &queries, &emb, s, &a.inputs)?;
            write!(csv, ",{},{}", r.mr, r.mrr).unwrap();
            for (k, (rec, hit)) in ks.iter().zip(r.recall.iter().zip(&r.hit)) {
                debug_assert!(rec.0 == *k && hit.0 == *k);
                write!(csv, ",{},{}", rec.1, hit.1).unwrap();
            }
            series[2 * i].1.push(r.mrr);
            series[2 * i + 1].1.push(r.recall[0].1);
            eprintln!("{key} = {v}: {s} MRR {:.4} R@{} {:.4}", r.mrr, ks[0], r.recall[0].1);
        }
        csv.push('\n');
    }
    let svg = plot::line_chart(&format!("held-out ranking vs {key}"), key, &a.values, &series);
    let files = [(a.out_csv.clone(), csv.into_bytes()), (a.plot.clone(), svg.into_bytes())];
    write_all(&files)?;
    m.finish(&paths_of(&files), &sidecar(&a.out_csv))?;
    Ok(())
}
