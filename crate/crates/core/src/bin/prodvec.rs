use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use prodvec::corpus::{InputFormat, SyntheticSpec};
use prodvec::pipeline::{self, ExportTable, PipelineConfig, Source, Stage};
use prodvec::{exec, Error, Result};

/// Product and user embeddings from transaction baskets.
#[derive(Parser, Debug)]
#[command(name = "prodvec", version, about)]
struct Cli {
    /// TOML pipeline configuration; defaults apply for anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stage (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Reproducible single-writer training.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads; 0 means one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory (overrides `paths.output`).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Transactions file (overrides `paths.transactions`).
    #[arg(long, global = true)]
    transactions: Option<PathBuf>,
    /// Spend CSV (overrides `paths.spend`).
    #[arg(long, global = true)]
    spend: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-group corpus with oracle files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        groups: usize,
        #[arg(long, default_value_t = 20)]
        products_per_group: usize,
        #[arg(long, default_value_t = 100)]
        users: usize,
        #[arg(long, default_value_t = 10_000)]
        baskets: usize,
        #[arg(long, default_value_t = 2)]
        min_len: usize,
        #[arg(long, default_value_t = 6)]
        max_len: usize,
        #[arg(long, default_value_t = 0.9)]
        within_group_prob: f64,
        #[arg(long, default_value_t = 0.9)]
        affinity: f64,
    },
    /// Parse transactions, build the vocabulary and encode baskets.
    Ingest {
        #[arg(long)]
        format: Option<InputFormat>,
        #[arg(long)]
        min_count: Option<u64>,
        /// Fail on products missing from the vocabulary.
        #[arg(long)]
        strict: bool,
    },
    /// Train an embedding stage: p2e, prove or u2e.
    Train {
        stage: Stage,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// K-means concepts over a trained product table.
    Cluster {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        source: Option<Source>,
        #[arg(long)]
        normalize: bool,
    },
    /// Complementary market basket for one product, as JSON.
    Basket {
        product: String,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        k: u64,
        /// Keep scanning until k products survive the concept filter.
        #[arg(long)]
        over_fetch: bool,
    },
    /// Spend regression: one freeze mode (1-4) or `all`.
    Sales {
        #[arg(value_parser = parse_mode)]
        mode: Mode,
    },
    /// Write a trained table as text: p2e, prove, u2e-users, u2e-products.
    Export {
        table: ExportTable,
        /// Destination file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy)]
struct Mode(Option<u8>);

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    if s == "all" {
        return Ok(Mode(None));
    }
    match s.parse::<u8>() {
        Ok(m @ 1..=4) => Ok(Mode(Some(m))),
        _ => Err(format!("mode must be 1, 2, 3, 4 or all, got `{s}`")),
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    cfg.deterministic |= cli.deterministic;
    if let Some(p) = &cli.output {
        cfg.paths.output = p.clone();
    }
    if let Some(p) = &cli.transactions {
        cfg.paths.transactions = p.clone();
    }
    if let Some(p) = &cli.spend {
        cfg.paths.spend = p.clone();
    }
    Ok(cfg.resolved())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    exec::set_threads(cli.threads);
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth {
            out,
            groups,
            products_per_group,
            users,
            baskets,
            min_len,
            max_len,
            within_group_prob,
            affinity,
        } => {
            let spec = SyntheticSpec {
                n_groups: groups,
                products_per_group,
                n_users: users,
                n_baskets: baskets,
                basket_len_range: (min_len, max_len),
                within_group_prob,
                user_group_affinity: affinity,
                spend_base: SyntheticSpec::default_prices(groups),
                seed: cfg.seed.unwrap_or(42),
            };
            print_json(&pipeline::cmd_synth(&spec, &out)?)
        }
        Command::Ingest {
            format,
            min_count,
            strict,
        } => {
            if let Some(f) = format {
                cfg.corpus.format = f;
            }
            if let Some(m) = min_count {
                cfg.corpus.min_count = m;
            }
            cfg.corpus.strict |= strict;
            print_json(&pipeline::cmd_ingest(&cfg)?)
        }
        Command::Train { stage, epochs } => {
            if let Some(e) = epochs {
                cfg.p2e.epochs = e;
                cfg.u2e.epochs = e;
                cfg.prove.epochs = e;
            }
            cfg.validate()?;
            let summary = pipeline::cmd_train(&cfg, stage)?;
            let last = summary.loss_history.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} epochs, final loss {last:.6}, written to {}",
                summary.loss_history.len(),
                summary.dir.display()
            );
            Ok(())
        }
        Command::Cluster {
            k,
            source,
            normalize,
        } => {
            if let Some(k) = k {
                cfg.concepts.kmeans.k = k;
            }
            if let Some(s) = source {
                cfg.concepts.source = s;
            }
            cfg.concepts.kmeans.normalize |= normalize;
            let model = pipeline::cmd_cluster(&cfg)?;
            println!(
                "k={} inertia={:.6} iterations={}",
                model.k, model.inertia, model.iterations_run
            );
            Ok(())
        }
        Command::Basket {
            product,
            k,
            over_fetch,
        } => print_json(&pipeline::cmd_basket(
            &cfg, &product, k as usize, over_fetch,
        )?),
        Command::Sales { mode } => {
            cfg.validate()?;
            let report = pipeline::cmd_sales(&cfg, mode.0)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Export { table, out } => match out {
            Some(path) => {
                let mut w = prodvec::checkpoint::create_file(&path)?;
                pipeline::cmd_export(&cfg, table, &mut w)?;
                Ok(w.flush()?)
            }
            None => pipeline::cmd_export(&cfg, table, io::stdout().lock()),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            report_exit(&e)
        }
    }
}

fn report_exit(e: &Error) -> ExitCode {
    if e.is_user_error() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}
