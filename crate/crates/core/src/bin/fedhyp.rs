//! `fedhyp` command-line entry point.
//!
//! Precedence: built-in defaults, then the `--config` file, then flags.
//! Exit codes: 0 success, 2 configuration error, 3 runtime or training error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use fedhyp::config::{RunConfig, ABLATIONS};
use fedhyp::data::{self, LabeledDataset, Scenario};
use fedhyp::metrics::{self, EvalReport, LedgerWriter};
use fedhyp::model::{SegNet, WeatherClassifier};
use fedhyp::server::{self, Simulator};
use fedhyp::{Checkpoint, Error, Result};

#[derive(Parser)]
#[command(name = "fedhyp", version, about = "Federated source-free adaptation simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; missing keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for checkpoints, ledgers and CSV output.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Client population: i, ii or iii.
    #[arg(long, global = true, value_parser = parse_scenario)]
    scenario: Option<Scenario>,
    /// Worker threads for client rounds; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain on source data; writes pretrained.ckpt and source_eval.json.
    Pretrain,
    /// Run the federated rounds; writes ledger.jsonl, rounds.csv and final.ckpt.
    Adapt {
        /// Start from this checkpoint instead of pretraining.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated components to switch off.
        #[arg(long, value_name = "LIST")]
        ablate: Option<String>,
        /// Run the full method, each single ablation and the baseline, one sub-directory each.
        #[arg(long, conflicts_with = "ablate")]
        grid: bool,
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Score a checkpoint; prints a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled dataset file; defaults to the generated test set.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Ledger whose round-0 score is the source-only reference.
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Write the client population and the test set as CSV.
    GenData,
    /// Print the resolved configuration.
    Config,
}

fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    Scenario::parse(s).ok_or_else(|| format!("expected i, ii or iii, got {s:?}"))
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(s) = c.scenario {
        cfg.scenario = s;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serialises");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

fn pretrain(cfg: RunConfig, out: &Path) -> Result<()> {
    mkdir(out)?;
    let sim = Simulator::new(cfg)?;
    let ck = sim.checkpoint();
    ck.save(&out.join("pretrained.ckpt"))?;
    let report = sim.evaluate()?;
    write_json(&out.join("source_eval.json"), &report)?;
    println!("source-only combined {} (car {}, drone {})", pct(report.combined), pct(report.car_miou), pct(report.drone_miou));
    Ok(())
}

fn adapt_one(cfg: RunConfig, ck: Option<&Checkpoint>, out: &Path) -> Result<()> {
    mkdir(out)?;
    let mut sim = match ck {
        Some(ck) => Simulator::resume(cfg.clone(), ck.clone())?,
        None => Simulator::new(cfg.clone())?,
    };
    let ckpt_dir = out.join("checkpoints");
    if cfg.checkpoint_rounds {
        mkdir(&ckpt_dir)?;
    }
    let mut ledger = LedgerWriter::create(out, &cfg)?;
    for rec in sim.records() {
        ledger.append(rec)?;
    }
    while !sim.is_done() {
        let rec = sim.step()?;
        ledger.append(rec)?;
        if let Some(e) = &rec.eval {
            info!("round {} combined {}", rec.round, pct(e.combined));
        }
        if cfg.checkpoint_rounds {
            sim.checkpoint().save(&ckpt_dir.join(format!("round_{:04}.ckpt", sim.state().round)))?;
        }
    }
    sim.checkpoint().save(&out.join("final.ckpt"))?;
    let first = sim.records().first().and_then(|r| r.eval.as_ref()).and_then(|e| e.combined);
    let last = sim.records().last().and_then(|r| r.eval.as_ref()).and_then(|e| e.combined);
    println!("{}: combined {} -> {}", out.display(), pct(first), pct(last));
    Ok(())
}

fn adapt(
    mut cfg: RunConfig,
    out: &Path,
    checkpoint: Option<PathBuf>,
    ablate: Option<String>,
    grid: bool,
    rounds: Option<usize>,
) -> Result<()> {
    if let Some(r) = rounds {
        cfg.rounds = r;
    }
    let ck = checkpoint.map(|p| Checkpoint::load(&p)).transpose()?;
    if !grid {
        if let Some(list) = ablate {
            cfg.apply_ablations(&list)?;
        }
        return adapt_one(cfg, ck.as_ref(), out);
    }
    let cells = std::iter::once("full").chain(ABLATIONS.iter().copied());
    for cell in cells {
        let mut c = cfg.clone();
        if cell != "full" {
            c.apply_ablations(cell)?;
        }
        adapt_one(c, ck.as_ref(), &out.join(cell))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    checkpoint_round: usize,
    samples: usize,
    report: EvalReport,
    source_only_combined: Option<f64>,
    gap: Option<f64>,
}

fn eval(cfg: RunConfig, checkpoint: &Path, dataset: Option<PathBuf>, ledger: Option<PathBuf>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let test = match dataset {
        Some(p) => LabeledDataset::from_clients(&data::read_clients(&p)?)?,
        None => server::generate_data(&cfg)?.test,
    };
    let net = SegNet::new(cfg.model.clone());
    let classifier = WeatherClassifier::from_params(
        ck.classifier
            .ok_or_else(|| Error::Config("checkpoint carries no weather classifier".into()))?,
    )?;
    let report = metrics::evaluate(
        &net,
        &ck.model,
        &classifier,
        cfg.toggles.weather_bn,
        &test,
        &cfg.data.classes_of(data::Agent::Drone),
    )?;
    let source_only = match ledger {
        Some(p) => {
            let (_, records) = metrics::read_ledger(&p)?;
            records
                .iter()
                .find(|r| r.round == 0)
                .and_then(|r| r.eval.as_ref())
                .and_then(|e| e.combined)
        }
        None => None,
    };
    let gap = source_only.zip(report.combined).map(|(s, a)| a - s);
    let out = EvalOutput {
        checkpoint_round: ck.round,
        samples: test.len(),
        report,
        source_only_combined: source_only,
        gap,
    };
    println!("{}", serde_json::to_string_pretty(&out).expect("report serialises"));
    Ok(())
}

fn gen_data(cfg: RunConfig, out: &Path) -> Result<()> {
    mkdir(out)?;
    let d = server::generate_data(&cfg)?;
    data::write_clients(&out.join("clients.csv"), &d.clients)?;
    data::write_clients(&out.join("test.csv"), &d.test.to_clients()?)?;
    println!("{} clients, {} test samples", d.clients.len(), d.test.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    let out = cli.common.out_dir.as_path();
    match cli.cmd {
        Cmd::Pretrain => pretrain(cfg, out),
        Cmd::Adapt {
            checkpoint,
            ablate,
            grid,
            rounds,
        } => adapt(cfg, out, checkpoint, ablate, grid, rounds),
        Cmd::Eval {
            checkpoint,
            dataset,
            ledger,
        } => eval(cfg, &checkpoint, dataset, ledger),
        Cmd::GenData => gen_data(cfg, out),
        Cmd::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
