//! Operator command line: corpus checks, scoring, sweeps, redundancy curves,
//! simulated campaigns, costing, log import and the HTTP service.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use crowdspan::aggregate::{sweep_k, SweepOptions, SweepPoint};
use crowdspan::corpus::{parse_pubtator, DocContext, GoldCorpus, PartitionConfig};
use crowdspan::costing::{cost_breakdown, CostParams, Money};
use crowdspan::lifecycle::LifecycleConfig;
use crowdspan::redundancy::{redundancy_curve_with, RedundancyEstimate, RedundancyOptions, ThresholdMode};
use crowdspan::scoring::{evaluate_corpus, worker_reports, Hypothesis, Metrics};
use crowdspan::simulate::{run_campaign_with, synthetic_corpus, PopulationParams, SyntheticCorpusSpec};
use crowdspan::store::{import_submission_table, read_log, submissions_from_log, EventStore, FileStore};
use crowdspan::Submission;
use crowdspan_server::ApiConfig;

#[derive(Parser)]
#[command(name = "crowdspan", version, about = "Crowdsourced span annotation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service
    Serve(ServeArgs),
    /// Score a system output, or every worker in a log, against the gold corpus
    Eval(EvalArgs),
    /// Precision, recall and F of threshold voting for K = 1..k_max
    Sweep(SweepArgs),
    /// Best-K F when only n annotators per document are kept, for n = 1..n_max
    Redundancy(RedundancyArgs),
    /// Run a simulated campaign and write its event log
    Simulate(SimulateArgs),
    /// Campaign cost
    Cost(CostArgs),
    /// Convert a tab-delimited submission table into an event log
    Import(ImportArgs),
    /// Parse a PubTator corpus and report its size
    ValidateCorpus(ValidateArgs),
}

#[derive(Args)]
struct Output {
    /// Write the table here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Output {
    fn write(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
            None => {
                std::io::stdout().write_all(text.as_bytes())?;
                Ok(())
            }
        }
    }
}

#[derive(Args)]
struct ServeArgs {
    /// TOML service configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured listen address
    #[arg(long)]
    listen: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// PubTator file with predicted mentions
    #[arg(long, conflicts_with = "submissions", required_unless_present = "submissions")]
    hypothesis: Option<PathBuf>,
    /// Event log; prints one row per worker
    #[arg(long)]
    submissions: Option<PathBuf>,
    #[arg(long)]
    include_training: bool,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Event log
    #[arg(long)]
    submissions: PathBuf,
    #[arg(long, default_value_t = 15, value_parser = clap::value_parser!(u64).range(1..))]
    k_max: u64,
    #[arg(long)]
    include_training: bool,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct RedundancyArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    submissions: PathBuf,
    #[arg(long, default_value_t = 15, value_parser = clap::value_parser!(u64).range(1..))]
    n_max: u64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,
    #[arg(long)]
    seed: u64,
    /// Pick the best threshold per document instead of one per sample
    #[arg(long)]
    per_document: bool,
    #[arg(long)]
    include_training: bool,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct SimulateArgs {
    /// PubTator corpus; a synthetic corpus is generated when omitted
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Non-training documents in the synthetic corpus
    #[arg(long, default_value_t = 16)]
    documents: usize,
    /// TOML population parameters; a mixed crowd when omitted
    #[arg(long)]
    params: Option<PathBuf>,
    /// Overrides the number of sampled workers
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = 15, value_parser = clap::value_parser!(u64).range(1..))]
    redundancy: u64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    gold_interval: u32,
    #[arg(long)]
    seed: u64,
    /// Event log to create
    #[arg(long)]
    log: PathBuf,
    /// Also write the corpus used, in PubTator format
    #[arg(long)]
    corpus_out: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    workers: u64,
    #[arg(long)]
    documents: u64,
    #[arg(long, default_value = "0.06")]
    annotation_fee: Money,
    #[arg(long, default_value = "0.06")]
    survey_fee: Money,
    #[arg(long, default_value = "0.06")]
    training_fee: Money,
    #[arg(long, default_value_t = 4)]
    training_docs: u64,
    #[arg(long, default_value_t = 15)]
    redundancy: u64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Columns worker_id, doc_id, start, end and optionally text
    #[arg(long)]
    table: PathBuf,
    /// Event log to create
    #[arg(long)]
    log: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    corpus: PathBuf,
}

fn load_corpus(path: &Path) -> Result<GoldCorpus> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_pubtator(&text).with_context(|| format!("in {}", path.display()))
}

fn load_submissions(path: &Path) -> Result<Vec<Submission>> {
    let records = read_log(path).with_context(|| format!("in {}", path.display()))?;
    Ok(submissions_from_log(&records))
}

fn table<I: IntoIterator<Item = String>>(header: &str, rows: I) -> String {
    let mut out = format!("{header}\n");
    for row in rows {
        out.push_str(&row);
        out.push('\n');
    }
    out
}

fn fresh_log(path: &Path) -> Result<FileStore> {
    if path.exists() {
        bail!("{} already exists; refusing to append to an existing log", path.display());
    }
    Ok(FileStore::open(path)?)
}

fn eval(args: EvalArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    if let Some(path) = &args.hypothesis {
        let predicted = load_corpus(path)?;
        let hypothesis: Hypothesis = predicted
            .gold
            .iter()
            .map(|(id, spans)| (id.clone(), spans.iter().map(|s| s.extent()).collect()))
            .collect();
        let metrics = evaluate_corpus(&corpus, &hypothesis).with_context(|| format!("scoring {}", path.display()))?;
        return args.output.write(&table(Metrics::HEADER, [metrics.to_row()]));
    }
    let path = args.submissions.as_deref().expect("clap requires one input");
    let subs: Vec<Submission> = load_submissions(path)?
        .into_iter()
        .filter(|s| args.include_training || s.context != DocContext::Training)
        .collect();
    let reports = worker_reports(&subs, &corpus)?;
    let rows = reports
        .iter()
        .map(|r| format!("{}\t{}\t{:.6}\t{:.6}", r.worker_id, r.documents_completed, r.mean_f, r.stddev_f));
    args.output.write(&table("worker_id\tdocuments\tmean_f\tstddev_f", rows))
}

fn sweep(args: SweepArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let subs = load_submissions(&args.submissions)?;
    let options = SweepOptions { include_training: args.include_training };
    let points = sweep_k(&subs, &corpus, args.k_max as usize, options)?;
    args.output.write(&table(SweepPoint::HEADER, points.iter().map(SweepPoint::to_row)))
}

fn redundancy(args: RedundancyArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let subs = load_submissions(&args.submissions)?;
    let options = RedundancyOptions {
        sweep: SweepOptions { include_training: args.include_training },
        mode: if args.per_document { ThresholdMode::PerDocument } else { ThresholdMode::Global },
    };
    let curve = redundancy_curve_with(&subs, &corpus, args.n_max as usize, args.reps as usize, args.seed, options)?;
    args.output.write(&table(RedundancyEstimate::HEADER, curve.iter().map(RedundancyEstimate::to_row)))
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let corpus = match &args.corpus {
        Some(path) => {
            let mut corpus = load_corpus(path)?;
            corpus
                .apply_partition(&PartitionConfig { seed: args.seed, ..Default::default() })
                .with_context(|| format!("partitioning {}", path.display()))?;
            corpus
        }
        None => {
            let gold = args.documents.div_ceil(10).min(args.documents);
            let spec = SyntheticCorpusSpec {
                gold_feedback_docs: gold,
                regular_docs: args.documents - gold,
                ..Default::default()
            };
            synthetic_corpus(spec, args.seed)
        }
    };
    if let Some(path) = &args.corpus_out {
        std::fs::write(path, crowdspan::corpus::serialize_pubtator(&corpus))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let mut params = match &args.params {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => PopulationParams::heterogeneous(15),
    };
    if let Some(n) = args.workers {
        params.n_workers = n;
    }
    let config = LifecycleConfig {
        redundancy_target: args.redundancy as usize,
        gold_interval: args.gold_interval,
        seed: args.seed,
        ..Default::default()
    };
    let store = fresh_log(&args.log)?;
    let mut campaign = run_campaign_with(Arc::new(corpus), &params, config, args.seed, store)?;
    campaign.service.flush()?;

    let lifecycle = campaign.service.lifecycle();
    let subs = lifecycle.submissions();
    let events = campaign.service.store().last_sequence();
    let count = |f: &dyn Fn(&crowdspan::WorkerRecord) -> bool| lifecycle.workers().filter(|w| f(w)).count();
    let active = count(&|w| w.state == crowdspan::WorkerState::Active);
    let blocked = count(&|w| w.state == crowdspan::WorkerState::Blocked);
    let rejected = count(&|w| w.state == crowdspan::WorkerState::Rejected);
    let row = format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        lifecycle.workers().count(),
        active,
        blocked,
        rejected,
        subs.len(),
        events
    );
    args.output.write(&table("workers\tactive\tblocked\trejected\tsubmissions\tevents", [row]))
}

fn cost(args: CostArgs) -> Result<()> {
    let params = CostParams {
        per_annotation_fee: args.annotation_fee,
        survey_fee: args.survey_fee,
        training_fee_per_doc: args.training_fee,
        training_docs: args.training_docs,
        redundancy: args.redundancy,
    };
    let b = cost_breakdown(&params, args.workers, args.documents);
    let row = format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        b.trained_workers,
        b.paid_documents,
        b.per_worker_training,
        b.per_document_annotation,
        b.training_total,
        b.annotation_total,
        b.total
    );
    args.output.write(&table(
        "trained_workers\tpaid_documents\tper_worker_training\tper_document_annotation\ttraining_total\tannotation_total\ttotal",
        [row],
    ))
}

fn import(args: ImportArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let file = File::open(&args.table).with_context(|| format!("reading {}", args.table.display()))?;
    let events = import_submission_table(&args.table.display().to_string(), BufReader::new(file), &corpus)?;
    let mut store = fresh_log(&args.log)?;
    let n = events.len();
    for event in events {
        store.append(event, 0)?;
    }
    store.flush()?;
    eprintln!("wrote {n} events to {}", args.log.display());
    Ok(())
}

fn validate(args: ValidateArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    println!("{} documents, {} gold spans", corpus.len(), corpus.total_gold());
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let mut config: ApiConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => ApiConfig::default(),
    };
    if let Some(listen) = args.listen {
        config.listen = listen;
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(crowdspan_server::serve(config))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Serve(a) => serve(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Redundancy(a) => redundancy(a),
        Command::Simulate(a) => simulate(a),
        Command::Cost(a) => cost(a),
        Command::Import(a) => import(a),
        Command::ValidateCorpus(a) => validate(a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
