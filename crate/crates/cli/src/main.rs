use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tta_core::adapters::Method;
use tta_core::harness::{
    self, compare_records, read_summary, write_run, ExperimentConfig, ResultRecord,
    SYNTHETIC_BENCHMARK_TOML,
};
use tta_core::numerics::NumericsError;
use tta_core::prototypes::save_prompt_bank;
use tta_core::Error;

#[derive(Parser)]
#[command(name = "tta", version, about = "Online test-time adaptation benchmark")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration layered over the bundled defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `dotted.key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Layer the calibrated synthetic benchmark profile under --config.
    #[arg(long, global = true)]
    benchmark: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method over the stream.
    Run {
        #[arg(long)]
        method: Option<Method>,
    },
    /// Method-by-domain error table, from fresh runs or saved results.
    Compare {
        /// Comma-separated methods; all methods the data supports when absent.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Run directories holding `summary.json`; skips running.
        #[arg(long, num_args = 1..)]
        results: Vec<PathBuf>,
    },
    /// Error against the number of augmented views.
    SweepViews {
        #[arg(long, value_delimiter = ',', default_value = "1,8,16,32,64")]
        views: Vec<usize>,
        /// vte or tpt.
        #[arg(long, default_value = "vte")]
        method: Method,
    },
    /// Run a method, then write every sample's canonical embedding as TTAE.
    DumpEmbeddings {
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        method: Option<Method>,
    },
    /// Export the synthetic benchmark as TTAE embeddings and a TTAP bank.
    GenSynth {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        /// Views per sample, view 0 canonical.
        #[arg(long, default_value_t = 64)]
        views: usize,
    },
}

fn load_config(g: &Global) -> Result<ExperimentConfig, Error> {
    let user = match &g.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let mut layers = Vec::new();
    if g.benchmark {
        layers.push(SYNTHETIC_BENCHMARK_TOML);
    }
    layers.push(&user);
    let mut cfg = ExperimentConfig::from_layers(&layers, &g.overrides)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.output.dir = out.clone();
    }
    if let Some(w) = cfg.data.ttae_path().is_none().then(|| cfg.data.synthetic.overlap_warning()).flatten() {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn with_method(cfg: &ExperimentConfig, method: Method) -> Result<ExperimentConfig, Error> {
    let mut c = cfg.clone();
    c.method.name = method;
    c.validate()?;
    Ok(c)
}

fn print_record(r: &ResultRecord) {
    println!(
        "{} {}: {:.2}% error over {} samples ({:.1}s)",
        r.method, r.scenario, r.error, r.samples, r.seconds
    );
    for d in &r.domains {
        println!("  {:<16} {:>6.2}%  ({}/{})", d.name, d.error, d.errors, d.samples);
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Methods that can run on the prepared data with the configured options.
fn supported_methods(cfg: &ExperimentConfig, prep: &harness::Prepared) -> Vec<Method> {
    Method::ALL
        .into_iter()
        .filter(|&m| {
            with_method(cfg, m)
                .and_then(|c| harness::adapter_for(&c, prep))
                .is_ok()
        })
        .collect()
}

fn execute(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli.global)?;
    let out = cfg.output.dir.clone();
    match cli.command {
        Command::Run { method } => {
            let cfg = with_method(&cfg, method.unwrap_or(cfg.method.name))?;
            let record = harness::run_experiment(&cfg)?;
            let dir = out.join(cfg.method.name.as_str());
            write_run(&cfg, &record, &dir)?;
            print_record(&record);
            println!("wrote {}", dir.display());
        }
        Command::Compare { methods, results } => {
            let records = if results.is_empty() {
                let prep = harness::prepare(&cfg)?;
                let methods = if methods.is_empty() {
                    supported_methods(&cfg, &prep)
                } else {
                    methods
                };
                let records = harness::compare(&cfg, &prep, &methods)?;
                for r in &records {
                    let c = with_method(&cfg, r.method)?;
                    write_run(&c, r, &out.join(r.method.as_str()))?;
                }
                records
            } else {
                results
                    .iter()
                    .map(|d| read_summary(&d.join("summary.json")))
                    .collect::<Result<_, _>>()?
            };
            let table = compare_records(&records)?;
            write_text(&out.join("comparison.csv"), &table.to_csv())?;
            write_text(&out.join("comparison.txt"), &table.to_text())?;
            print!("{}", table.to_text());
        }
        Command::SweepViews { views, method } => {
            let cfg = with_method(&cfg, method)?;
            let prep = harness::prepare(&cfg)?;
            let sweep = harness::sweep_views(&cfg, &prep, &views)?;
            let path = out.join(format!("sweep_{method}.csv"));
            write_text(&path, &sweep.to_csv())?;
            print!("{}", sweep.to_csv());
        }
        Command::DumpEmbeddings { path, method } => {
            let cfg = with_method(&cfg, method.unwrap_or(cfg.method.name))?;
            let prep = harness::prepare(&cfg)?;
            let (record, mut adapter) = harness::run_with_adapter(&cfg, &prep)?;
            let table = harness::dump_embeddings(adapter.as_mut(), &prep)?;
            table.save(&path)?;
            print_record(&record);
            println!("wrote {} ({} × {})", path.display(), table.samples(), table.dim());
        }
        Command::GenSynth {
            embeddings,
            prompts,
            views,
        } => {
            if cfg.data.ttae_path().is_some() {
                return Err(Error::Config("gen-synth needs data.source = \"synthetic\"".into()));
            }
            let (table, bank) = harness::export_synthetic(&cfg, views)?;
            table.save(&embeddings)?;
            save_prompt_bank(&bank, &prompts)?;
            println!(
                "wrote {} ({} samples × {} views × {}) and {} ({} classes)",
                embeddings.display(),
                table.samples(),
                table.views(),
                table.dim(),
                prompts.display(),
                bank.num_classes()
            );
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerics(NumericsError::InvalidHyperparameter(_)) => 2,
        Error::NumericalAbort { .. } | Error::Numerics(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
