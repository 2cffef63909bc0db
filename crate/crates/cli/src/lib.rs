//! `siting` command-line interface and exploration service.

pub mod config;
pub mod service;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use siting_core::baselines::{self, BaselineResult};
use siting_core::citygen::{generate_city, summarize, CityGenSpec};
use siting_core::cityfile::{read_city, write_city};
use siting_core::constraints::ConstraintRegistry;
use siting_core::domain::{nondominated_indices, CityInstance, ParcelId};
use siting_core::explore::Explorer;
use siting_core::metrics::{format_report_table, indicator_report, normalized_points, write_report_records, Point};
use siting_core::ppo::{train_population_with, write_run_dir, ParetoArchive};

use crate::config::Settings;

#[derive(Parser, Debug)]
#[command(name = "siting", version, about = "Constrained multi-objective housing site selection")]
pub struct Cli {
    /// Random seed for generation and training.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Flat `key = value` file overriding the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic city file.
    Citygen(CitygenArgs),
    /// Train the policy population and write a run directory.
    Train(TrainArgs),
    /// Run one comparison method and write a result directory.
    Baseline(BaselineArgs),
    /// Indicator table for one or more run/result directories.
    Evaluate(EvaluateArgs),
    /// Write an archive as a tab-separated table.
    ExportFront(ExportArgs),
    /// Serve the exploration API over a trained archive.
    Serve(ServeArgs),
    /// Print the constraint registry of a city.
    DumpConstraints(CityArg),
}

#[derive(Args, Debug)]
pub struct CitygenArgs {
    /// One of nyc, la, chi, hou, pho, phi, sa, sd.
    #[arg(long, conflicts_with = "desk")]
    pub preset: Option<String>,
    /// Small three-district city with this many parcels.
    #[arg(long)]
    pub desk: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CityArg {
    #[arg(long)]
    pub city: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub city: PathBuf,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    pub scale: Scale,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Disable action masking (constraints enforced by the penalty term only).
    #[arg(long)]
    pub no_mask: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Method {
    Random,
    Beam,
    Nsga2,
    Moead,
    Single,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[arg(long)]
    pub city: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    pub scale: Scale,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub city: PathBuf,
    /// Run or result directories (or archive.jsonl files).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub archive: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub city: PathBuf,
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Repair the best records by swaps when none meets a request.
    #[arg(long)]
    pub live: bool,
}

/// Parse and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) if e.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn settings(cli: &Cli, scale: Scale) -> Result<Settings> {
    let mut s = Settings::new(matches!(scale, Scale::Paper), cli.seed);
    if let Some(path) = &cli.config {
        s.apply_file(path)?;
    }
    Ok(s)
}

fn load_city(path: &Path) -> Result<CityInstance> {
    read_city(path).with_context(|| format!("reading city {}", path.display()))
}

fn load_archive(path: &Path) -> Result<ParetoArchive> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    ParetoArchive::read_jsonl(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

/// Output sink: the `--out` file or stdout.
fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

pub fn execute(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Citygen(a) => {
            // generation takes no settings, but a bad --config is still an error
            settings(&cli, Scale::Desk)?;
            let spec = match (&a.preset, a.desk) {
                (Some(name), _) => CityGenSpec::preset(name, cli.seed)
                    .with_context(|| format!("unknown preset `{name}` (expected one of {:?})", CityGenSpec::PRESET_NAMES))?,
                (None, Some(n)) => CityGenSpec::desk(n, cli.seed),
                (None, None) => bail!("citygen needs --preset or --desk"),
            };
            let city = generate_city(&spec)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(format!("{}.city", city.name)));
            write_city(&city, &out)?;
            let s = summarize(&city);
            eprintln!(
                "wrote {}: {} parcels, {} districts, K = {}, QCT {:.1}%, flood {:.1}%, mean ${:.0}/m2",
                out.display(),
                s.parcel_count,
                city.districts,
                city.portfolio_capacity,
                100.0 * s.qct_fraction,
                100.0 * s.flood_fraction,
                s.mean_price_per_m2
            );
        }
        Command::Train(a) => {
            let mut s = settings(&cli, a.scale)?;
            if let Some(e) = a.epochs {
                s.ppo.epochs = e;
            }
            if a.no_mask {
                s.ppo.masking = false;
            }
            let city = load_city(&a.city)?;
            let registry = ConstraintRegistry::build(&city, &s.registry)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(format!("runs/train-{}", cli.seed)));
            let started = Instant::now();
            let run = train_population_with(&city, &registry, &s.ppo, cli.seed, |m| {
                eprintln!(
                    "epoch {:>4}  hv {:.5}  archive {:>3}  rcr {:.3}  ({:.1}s)",
                    m.epoch,
                    m.hypervolume,
                    m.archive_size,
                    m.rcr,
                    started.elapsed().as_secs_f64()
                );
            })?;
            write_run_dir(&run, &out)?;
            eprintln!("final hypervolume {:.5}; run written to {}", run.final_hypervolume(), out.display());
        }
        Command::Baseline(a) => {
            let s = settings(&cli, a.scale)?;
            let city = load_city(&a.city)?;
            let registry = ConstraintRegistry::build(&city, &s.registry)?;
            let params = &s.ppo.reward;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{:?}-{}", a.method, cli.seed).to_lowercase()));
            let result: BaselineResult = match a.method {
                Method::Random => {
                    let r = baselines::random_feasible(&city, &registry, params, s.trials, cli.seed)?;
                    r.write_dir(&city, &serde_json::json!({ "trials": s.trials, "seed": cli.seed }), &out)?;
                    r
                }
                Method::Beam => {
                    let r = baselines::greedy_cost_beam(&city, &registry, params, s.beam_width)?;
                    r.write_dir(&city, &serde_json::json!({ "beam_width": s.beam_width }), &out)?;
                    r
                }
                Method::Nsga2 => {
                    let r = baselines::nsga2(&city, &registry, params, &s.nsga2)?;
                    r.write_dir(&city, &s.nsga2, &out)?;
                    r
                }
                Method::Moead => {
                    let r = baselines::moead(&city, &registry, params, &s.moead)?;
                    r.write_dir(&city, &s.moead, &out)?;
                    r
                }
                Method::Single => {
                    let (r, run) = baselines::single_policy_morl(&city, &registry, &s.ppo, cli.seed)?;
                    write_run_dir(&run, &out)?;
                    r
                }
            };
            serde_json::to_writer_pretty(BufWriter::new(File::create(out.join("result.json"))?), &result)?;
            eprintln!(
                "{}: {} portfolios, RCR {:.1}%, HV {:.5}, {:.2}s; written to {}",
                result.method,
                result.portfolios.len(),
                100.0 * result.rcr,
                result.hypervolume(&city)?,
                result.wall_time_s,
                out.display()
            );
        }
        Command::Evaluate(a) => {
            let s = settings(&cli, Scale::Desk)?;
            let city = load_city(&a.city)?;
            let registry = ConstraintRegistry::build(&city, &s.registry)?;
            let params = &s.ppo.reward;
            let mut sets = Vec::new();
            for input in &a.inputs {
                sets.push((method_name(input), input_portfolios(input)?));
            }
            // Reference front: non-dominated compliant portfolios over all inputs.
            let mut pooled: Vec<Vec<ParcelId>> = Vec::new();
            for (_, ps) in &sets {
                for p in ps {
                    if registry.portfolio_feasible(&city, p)? {
                        pooled.push(p.clone());
                    }
                }
            }
            let pts: Vec<Point> = normalized_points(&city, params, &pooled)?;
            let reference: Vec<Point> = nondominated_indices(&pts).into_iter().map(|i| pts[i]).collect();
            let reference = (!reference.is_empty()).then_some(reference.as_slice());
            let reports = sets
                .iter()
                .map(|(name, ps)| indicator_report(name, &city, &registry, params, ps, reference))
                .collect::<siting_core::Result<Vec<_>>>()?;
            print!("{}", format_report_table(&reports));
            if let Some(out) = &cli.out {
                write_report_records(&reports, BufWriter::new(File::create(out)?))?;
            }
        }
        Command::ExportFront(a) => {
            let archive = load_archive(&a.archive)?;
            let mut w = sink(&cli.out)?;
            writeln!(
                w,
                "id\tpolicy\tepoch\taccessibility\tenvironment\tneg_cost\tequity\tn_accessibility\tn_environment\tn_neg_cost\tn_equity\tlambda\tportfolio"
            )?;
            for r in archive.records() {
                let o = r.objectives.to_array();
                let n = r.normalized.to_array();
                let lam: Vec<String> = r.preference.weights.iter().map(|v| format!("{v:.4}")).collect();
                let ids: Vec<String> = r.portfolio.iter().map(|p| p.0.to_string()).collect();
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
                    r.id,
                    r.policy,
                    r.epoch,
                    o[0],
                    o[1],
                    o[2],
                    o[3],
                    n[0],
                    n[1],
                    n[2],
                    n[3],
                    lam.join(","),
                    ids.join(";")
                )?;
            }
            w.flush()?;
        }
        Command::Serve(a) => {
            let s = settings(&cli, Scale::Desk)?;
            let city = load_city(&a.city)?;
            let registry = ConstraintRegistry::build(&city, &s.registry)?;
            let archive = load_archive(&a.archive)?;
            let mut explorer = Explorer::new(city, registry, archive, s.ppo.reward.clone());
            explorer.live = a.live;
            let app = service::router(Arc::new(explorer));
            let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().context("bad --host/--port")?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                eprintln!("listening on http://{addr}");
                axum::serve(listener, app).await
            })?;
        }
        Command::DumpConstraints(a) => {
            let s = settings(&cli, Scale::Desk)?;
            let city = load_city(&a.city)?;
            let registry = ConstraintRegistry::build(&city, &s.registry)?;
            let mut w = sink(&cli.out)?;
            w.write_all(registry.dump_table().as_bytes())?;
            w.flush()?;
        }
    }
    Ok(())
}

fn method_name(input: &Path) -> String {
    let p = if input.is_dir() { input } else { input.parent().unwrap_or(input) };
    p.file_name().map_or("input".into(), |n| n.to_string_lossy().into_owned())
}

/// Portfolios of a run or result directory: every reported portfolio when
/// present (so infeasible ones count against RCR), else the archive.
fn input_portfolios(input: &Path) -> Result<Vec<Vec<ParcelId>>> {
    if input.is_dir() {
        let listed = input.join("portfolios.jsonl");
        if listed.exists() {
            let text = std::fs::read_to_string(&listed)?;
            return text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    let v: serde_json::Value = serde_json::from_str(l)?;
                    Ok(serde_json::from_value(v["portfolio"].clone())?)
                })
                .collect();
        }
        return Ok(load_archive(&input.join("archive.jsonl"))?
            .records()
            .iter()
            .map(|r| r.portfolio.clone())
            .collect());
    }
    Ok(load_archive(input)?.records().iter().map(|r| r.portfolio.clone()).collect())
}
