//! `cotrec`: prepare event logs, train, evaluate, ablate and inspect the views.

mod flags;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cotrec::checkpoint::Checkpoint;
use cotrec::corpus::{load_events, prepare, EventFormat, PrepareOptions, SplitBoundary};
use cotrec::graph::{build_item_graph, build_session_graph, graph_stats, normalize, sparsify_session_graph};
use cotrec::synth::{self, SynthConfig};
use cotrec::trainer::{evaluate_popularity, load_predictor, model_checkpoint, Trainer};
use cotrec::{Error, EvalResult, SessionCorpus, Variant};

use flags::ConfigFlags;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_ABORT: u8 = 4;

#[derive(Parser)]
#[command(name = "cotrec", version, about = "Session-based recommendation with self-supervised graph co-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a raw event log into a corpus file.
    Prepare(PrepareArgs),
    /// Train a model and write checkpoints and a per-epoch report.
    Train(TrainArgs),
    /// Score a checkpoint (or the popularity baseline) on the test split.
    Evaluate(EvaluateArgs),
    /// Train several variants under one configuration and compare them.
    Ablate(AblateArgs),
    /// Dump one of the two views as a sorted coordinate list.
    InspectGraph(InspectArgs),
    /// Write a synthetic event log with planted sequential structure.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Delimited event log: session id, item id, timestamp.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = ",")]
    delimiter: char,
    #[arg(long, default_value_t = 0)]
    session_col: usize,
    #[arg(long, default_value_t = 1)]
    item_col: usize,
    #[arg(long, default_value_t = 2)]
    time_col: usize,
    /// The first line is data, not a header.
    #[arg(long)]
    no_header: bool,
    #[arg(long, default_value_t = 2)]
    min_session_len: usize,
    #[arg(long, default_value_t = 5)]
    min_item_freq: usize,
    /// Latest fraction of sessions used for testing.
    #[arg(long, default_value_t = 0.1, conflicts_with = "split_time")]
    test_fraction: f64,
    /// Sessions ending at or after this timestamp are test.
    #[arg(long)]
    split_time: Option<i64>,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Directory for model.ckpt, last.ckpt and report.ndjson.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    config: ConfigFlags,
    /// Continue from a last.ckpt written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write every mined pseudo-label set here as NDJSON.
    #[arg(long)]
    dump_labels: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// A model.ckpt; omit with --popularity.
    #[arg(long, required_unless_present = "popularity")]
    model: Option<PathBuf>,
    /// Rank every session by training-set popularity instead.
    #[arg(long, conflicts_with = "model")]
    popularity: bool,
    /// Cutoffs for P@K and MRR@K.
    #[arg(long, value_delimiter = ',', default_value = "10,20")]
    ks: Vec<usize>,
    /// Metric records (metric, K, split, value, n).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat table with one row per split.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    config: ConfigFlags,
    /// Any of base, no_position, no_attention, no_divergence, full.
    #[arg(long, value_delimiter = ',', default_value = "base,no_position,no_attention,no_divergence,full")]
    variants: Vec<String>,
    /// Cutoffs for P@K and MRR@K.
    #[arg(long, value_delimiter = ',', default_value = "10,20")]
    ks: Vec<usize>,
    /// Per-variant reports go here when given.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comparison table file.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum View {
    Item,
    Session,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum)]
    view: View,
    /// Edge list destination.
    #[arg(long)]
    out: PathBuf,
    /// Session-graph neighbours kept per row.
    #[arg(long, default_value_t = 20)]
    keep_top: usize,
    /// Dump the self-looped, row-normalized matrix instead of raw weights.
    #[arg(long)]
    normalized: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 500)]
    items: usize,
    #[arg(long, default_value_t = 3000)]
    sessions: usize,
    #[arg(long, default_value_t = 25)]
    clusters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFinite { .. } => EXIT_ABORT,
            e if e.is_data_error() => EXIT_DATA,
            Error::Config(_) | Error::InvalidArgument(_) | Error::PoolTooSmall { .. } => EXIT_USAGE,
            _ => EXIT_ABORT,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::InspectGraph(a) => cmd_inspect(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_corpus(path: &Path) -> CliResult<SessionCorpus> {
    SessionCorpus::load(path).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("{}: {e}", path.display()),
    })
}

fn cmd_prepare(a: PrepareArgs) -> CliResult {
    if !a.delimiter.is_ascii() {
        return Err(Error::InvalidArgument("the delimiter must be a single ASCII character".into()).into());
    }
    let format = EventFormat {
        delimiter: a.delimiter as u8,
        session_col: a.session_col,
        item_col: a.item_col,
        time_col: a.time_col,
        has_header: !a.no_header,
    };
    let events = load_events(&a.input, &format).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("{}: {e}", a.input.display()),
    })?;
    let opts = PrepareOptions {
        min_session_len: a.min_session_len,
        min_item_freq: a.min_item_freq,
        boundary: match a.split_time {
            Some(t) => SplitBoundary::Timestamp(t),
            None => SplitBoundary::Fraction(a.test_fraction),
        },
    };
    let corpus = prepare(&events, &opts)?;
    corpus.save(&a.output)?;
    println!("{}", corpus.summary());
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("{}: {e}", path.display()),
    })
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let config = a.config.resolve()?;
    let corpus = load_corpus(&a.corpus)?;
    println!("{config}");
    fs::create_dir_all(&a.out_dir)?;

    let mut trainer = Trainer::new(&corpus, config)?;
    let report_path = a.out_dir.join("report.ndjson");
    let mut prior_report = String::new();
    if let Some(path) = &a.resume {
        let ck = Checkpoint::load(path)?;
        trainer.resume(&ck)?;
        // Keep the records of the epochs already trained.
        prior_report = fs::read_to_string(&report_path).unwrap_or_default();
    }
    if let Some(path) = &a.dump_labels {
        let file = fs::File::create(path)?;
        trainer.set_label_sink(Box::new(BufWriter::new(file)));
    }

    let mut aborted = None;
    while trainer.next_epoch() < trainer.config().epochs {
        match trainer.run_epoch() {
            Ok(r) => {
                println!(
                    "epoch {}\tloss {:.6}\trec {:.6}\tssl {:.6}\tdiff {:.6}\t{:.1}s",
                    r.epoch, r.l_total, r.l_r, r.l_ssl, r.l_diff, r.seconds
                );
                // Written after every epoch so an interrupted run can resume.
                trainer.checkpoint().save(a.out_dir.join("last.ckpt"))?;
                trainer.best_checkpoint().save(a.out_dir.join("model.ckpt"))?;
                write_file(&report_path, &(prior_report.clone() + &trainer.report().to_ndjson()))?;
            }
            Err(e @ Error::NonFinite { .. }) => {
                aborted = Some(e);
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    trainer.best_checkpoint().save(a.out_dir.join("model.ckpt"))?;
    if !report_path.exists() {
        write_file(&report_path, &prior_report)?;
    }
    match aborted {
        Some(e) => Err(Failure {
            code: EXIT_ABORT,
            message: format!("{e}; the best parameters so far are in {}", a.out_dir.join("model.ckpt").display()),
        }),
        None => Ok(()),
    }
}

fn check_ks(ks: &[usize], n_items: usize) -> CliResult {
    if ks.is_empty() {
        return Err(Error::InvalidArgument("at least one K is required".into()).into());
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n_items) {
        return Err(Error::InvalidArgument(format!("K = {k} must be in 1..={n_items} (the number of items)")).into());
    }
    Ok(())
}

/// One row per split: `split  n  P@K…  MRR@K…`.
fn metrics_table(result: &EvalResult) -> String {
    let ks: Vec<usize> = result.p_at.keys().copied().collect();
    let mut out = String::from("split\tn");
    for k in &ks {
        out += &format!("\tP@{k}");
    }
    for k in &ks {
        out += &format!("\tMRR@{k}");
    }
    out.push('\n');
    let mut row = |name: &str, r: Option<&EvalResult>| {
        out += name;
        match r {
            Some(r) => {
                out += &format!("\t{}", r.n_samples);
                for k in &ks {
                    out += &format!("\t{:.6}", r.p_at[k]);
                }
                for k in &ks {
                    out += &format!("\t{:.6}", r.mrr_at[k]);
                }
            }
            None => {
                out += "\t0";
                for _ in 0..2 * ks.len() {
                    out += "\tabsent";
                }
            }
        }
        out.push('\n');
    };
    row("all", Some(result));
    if let Some(b) = &result.breakdowns {
        row("short", b.short.as_deref());
        row("long", b.long.as_deref());
    }
    out
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult {
    let corpus = load_corpus(&a.corpus)?;
    check_ks(&a.ks, corpus.n_items())?;
    let result = match &a.model {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            load_predictor(&ck, &corpus)?.evaluate(&corpus.test_samples, &a.ks)?
        }
        None => evaluate_popularity(&corpus.train_sessions, corpus.n_items(), &corpus.test_samples, &a.ks)?,
    };
    let records = result.to_records();
    print!("{records}");
    if let Some(path) = &a.out {
        write_file(path, &records)?;
    }
    if let Some(path) = &a.table {
        write_file(path, &metrics_table(&result))?;
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CliResult {
    let variants = a
        .variants
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<Result<Vec<_>, _>>()?;
    let config = a.config.resolve()?;
    let corpus = load_corpus(&a.corpus)?;
    check_ks(&a.ks, corpus.n_items())?;
    println!("{config}");
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut table = String::from("variant");
    for k in &a.ks {
        table += &format!("\tP@{k}\tMRR@{k}");
    }
    table += "\tbest_epoch\n";
    for v in variants {
        let vc = v.apply(&config);
        log::info!("training variant {}", v.name());
        let outcome = Trainer::new(&corpus, vc.clone())?.run()?;
        if let Some(e) = outcome.aborted {
            return Err(Failure {
                code: EXIT_ABORT,
                message: format!("variant {}: {e}", v.name()),
            });
        }
        let result = outcome.predictor()?.evaluate(&corpus.test_samples, &a.ks)?;
        if let Some(dir) = &a.out_dir {
            write_file(&dir.join(format!("{}.report.ndjson", v.name())), &outcome.report.to_ndjson())?;
            model_checkpoint(&outcome.model, &outcome.best, vc.val_fraction).save(dir.join(format!("{}.ckpt", v.name())))?;
        }
        table += v.name();
        for k in &a.ks {
            table += &format!("\t{:.6}\t{:.6}", result.p_at[k], result.mrr_at[k]);
        }
        table += &format!("\t{}\n", outcome.best_epoch.map_or("-".to_string(), |e| e.to_string()));
    }
    print!("{table}");
    if let Some(path) = &a.table {
        write_file(path, &table)?;
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> CliResult {
    let corpus = load_corpus(&a.corpus)?;
    if corpus.train_sessions.is_empty() {
        return Err(Error::EmptyCorpus("the corpus has no training sessions".into()).into());
    }
    let graph = match a.view {
        View::Item => build_item_graph(&corpus.train_sessions, corpus.n_items())?,
        View::Session => sparsify_session_graph(&build_session_graph(&corpus.train_sessions), a.keep_top)?,
    };
    let graph = if a.normalized {
        normalize(&graph)?.normalized
    } else {
        graph
    };
    let mut out = BufWriter::new(fs::File::create(&a.out)?);
    out.write_all(graph.to_coordinate_text().as_bytes())?;
    out.flush()?;
    let s = graph_stats(&graph);
    println!(
        "nodes: {}\nedges: {}\ndensity: {:.6}\nmax degree: {}",
        s.nodes, s.edges, s.density, s.max_degree
    );
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let config = SynthConfig {
        n_items: a.items,
        n_sessions: a.sessions,
        n_clusters: a.clusters,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let events = synth::generate(&config)?;
    let mut w = csv::Writer::from_path(&a.output).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("{}: {e}", a.output.display()),
    })?;
    let csv_err = |e: csv::Error| Failure {
        code: EXIT_DATA,
        message: e.to_string(),
    };
    w.write_record(["session_id", "item_id", "timestamp"]).map_err(csv_err)?;
    for e in &events {
        w.write_record([e.session_id.as_str(), e.item_id.as_str(), &e.timestamp.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    println!("{} events in {} sessions", events.len(), a.sessions);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_marks_absent_partitions() {
        let mut r = EvalResult::default();
        r.p_at.insert(5, 0.5);
        r.mrr_at.insert(5, 0.25);
        r.n_samples = 4;
        r.breakdowns = Some(cotrec::eval::LengthBreakdown {
            short: Some(Box::new(r.clone())),
            long: None,
        });
        let t = metrics_table(&r);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "split\tn\tP@5\tMRR@5");
        assert_eq!(lines[1], "all\t4\t0.500000\t0.250000");
        assert_eq!(lines[3], "long\t0\tabsent\tabsent");
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(Failure::from(Error::Config(vec![])).code, EXIT_USAGE);
        assert_eq!(Failure::from(Error::EmptyInput).code, EXIT_DATA);
        assert_eq!(
            Failure::from(Error::NonFinite {
                epoch: 0,
                batch: 0,
                loss: f64::NAN
            })
            .code,
            EXIT_ABORT
        );
    }
}
