use std::io::Write as _;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use demand_matching::assignment::{
    auction_assign, delta_from_prices, propagate_lower_bounds, propagate_upper_bounds,
    EpsilonSchedule,
};
use demand_matching::bench::{
    run_custom, run_table2_inner, run_table3, run_table4, Algo, CustomSpec, ResultTable,
    DEFAULT_EPS_FINAL,
};
use demand_matching::blp::{blp_contraction, SmoothingParams};
use demand_matching::error::{Error, Result};
use demand_matching::lp::{
    export_bounds_lp, export_combined_lp, export_dual_lp, BoundDirection, LpDocument,
};
use demand_matching::market::{dump_sample_csv, MarketDocument};
use demand_matching::model::assignment_shocks;
use demand_matching::msa::{msa_lower_traced, msa_upper_traced, MsaParams, MsaTraceRow};

#[derive(Parser)]
#[command(name = "demand-matching", version, about = "Demand inversion via two-sided matching")]
struct Cli {
    /// Worker threads for replication runs (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Invert observed market shares into systematic utilities.
    #[command(subcommand)]
    Invert(InvertCommand),
    /// Emit the equivalent linear programs as LP-format text.
    #[command(subcommand)]
    Export(ExportCommand),
    /// Run a benchmark experiment and write a result CSV.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Args)]
struct MarketArg {
    /// Market description JSON: {"shares": [...], "n": N, "seed": S, "model": {...}}.
    #[arg(long)]
    market: String,

    /// Write the per-consumer heterogeneity draws to a debug CSV.
    #[arg(long)]
    dump_sample: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BoundChoice {
    Upper,
    Lower,
    Both,
}

#[derive(Subcommand)]
enum InvertCommand {
    /// Deferred-acceptance adjustment solver (lattice bounds).
    Msa {
        #[command(flatten)]
        market: MarketArg,
        #[arg(long, default_value_t = 1.0)]
        eta_init: f64,
        #[arg(long, default_value_t = 1e-4)]
        eta_tol: f64,
        #[arg(long, value_enum, default_value_t = BoundChoice::Both)]
        bound: BoundChoice,
        /// Write a convergence trace CSV (round, eta, per-brand excess demand).
        #[arg(long)]
        trace: Option<String>,
    },
    /// Epsilon-scaled auction with optional bound propagation.
    Auction {
        #[command(flatten)]
        market: MarketArg,
        #[arg(long, default_value_t = DEFAULT_EPS_FINAL)]
        eps_final: f64,
        /// Also propagate the lattice bounds from the optimal allocation.
        #[arg(long)]
        bounds: bool,
        /// Write the consumer-to-jar allocation as CSV.
        #[arg(long)]
        allocation: Option<String>,
    },
    /// Smoothed contraction-mapping baseline.
    Blp {
        #[command(flatten)]
        market: MarketArg,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        #[arg(long, default_value_t = 5000)]
        max_iters: usize,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DirectionArg {
    Max,
    Min,
}

#[derive(Subcommand)]
enum ExportCommand {
    /// Single-market assignment-game dual LP.
    Lp {
        #[arg(long)]
        market: String,
        #[arg(short, long)]
        out: Option<String>,
    },
    /// Bound LP over the optimal faces (strong-duality formulation).
    BoundsLp {
        #[arg(long)]
        market: String,
        #[arg(long, value_enum, default_value_t = DirectionArg::Max)]
        direction: DirectionArg,
        #[arg(short, long)]
        out: Option<String>,
    },
    /// Block-diagonal multi-market dual LP.
    CombinedLp {
        /// Market JSON paths; repeat the flag for each market.
        #[arg(long, required = true)]
        market: Vec<String>,
        #[arg(short, long)]
        out: Option<String>,
    },
}

#[derive(Args)]
struct BenchCommon {
    #[arg(long, default_value_t = 123)]
    seed: u64,
    #[arg(long)]
    out: Option<String>,
    /// Exit with code 2 if any replication-level algorithm fails to converge.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// 3-good non-invertible market (bounds + failing baseline).
    Table3 {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        #[command(flatten)]
        common: BenchCommon,
    },
    /// 8-good, 5-segment market (bound means and gaps).
    Table4 {
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        #[command(flatten)]
        common: BenchCommon,
    },
    /// Pure-characteristics accuracy benchmark (inner loop).
    Table2Inner {
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long, default_value_t = 5)]
        brands: usize,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        #[command(flatten)]
        common: BenchCommon,
    },
    /// User-defined experiment from a JSON config.
    Custom {
        /// Config JSON: {"shares", "model", "n", "reps", "seed", "algos"}.
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        strict: bool,
        /// Restrict to a comma-separated algorithm subset.
        #[arg(long)]
        algos: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: could not configure thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NonConvergence { last, .. } = &e {
                eprintln!("last iterate: {last:?}");
            }
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Invert(cmd) => run_invert(cmd).map(|()| ExitCode::SUCCESS),
        Command::Export(cmd) => run_export(cmd).map(|()| ExitCode::SUCCESS),
        Command::Bench(cmd) => run_bench(cmd),
    }
}

fn load_market(
    arg: &MarketArg,
) -> Result<(demand_matching::Model, demand_matching::DiscreteMarket, demand_matching::MarketShares)>
{
    let doc = MarketDocument::load(&arg.market)?;
    let (model, market, shares) = doc.instantiate::<f64>()?;
    if let Some(path) = &arg.dump_sample {
        let file = std::fs::File::create(path)
            .map_err(|source| Error::Io { path: path.clone(), source })?;
        dump_sample_csv(market.sample(), file)?;
    }
    Ok((model, market, shares))
}

fn write_trace(path: &str, rows: &[MsaTraceRow], brands: usize) -> Result<()> {
    let mut out = String::from("round,eta");
    for j in 0..brands {
        out.push_str(&format!(",excess_{j}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{},{}", row.round, row.eta));
        for v in &row.excess_demand {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| Error::Io { path: path.to_string(), source })
}

fn run_invert(cmd: InvertCommand) -> Result<()> {
    match cmd {
        InvertCommand::Msa { market, eta_init, eta_tol, bound, trace } => {
            let (model, discrete, _) = load_market(&market)?;
            let params = MsaParams::new(eta_init, eta_tol, 1000)?;
            let mut rows = Vec::new();
            let mut sink = trace.as_ref().map(|_| &mut rows);
            let upper = msa_upper_traced(&model, &discrete, &params, &mut sink)?;
            let mut output = serde_json::Map::new();
            if bound != BoundChoice::Lower {
                output.insert("delta_upper".into(), json!(upper.to_f64()));
            }
            if bound != BoundChoice::Upper {
                let mut sink = trace.as_ref().map(|_| &mut rows);
                let lower = msa_lower_traced(&model, &discrete, &upper, &params, &mut sink)?;
                output.insert("delta_lower".into(), json!(lower.to_f64()));
            }
            if let Some(path) = &trace {
                write_trace(path, &rows, discrete.brands())?;
            }
            println!("{}", serde_json::Value::Object(output));
            Ok(())
        }
        InvertCommand::Auction { market, eps_final, bounds, allocation } => {
            let (model, discrete, _) = load_market(&market)?;
            let shocks = assignment_shocks(&model, discrete.sample())?;
            let schedule = EpsilonSchedule::for_shocks(&shocks, eps_final)?;
            let (alloc, prices) = auction_assign(&shocks, discrete.counts(), &schedule)?;
            let point = delta_from_prices(&prices, alloc.brands_of_jars())?;
            let mut output = serde_json::Map::new();
            output.insert("delta_point".into(), json!(point.to_f64()));
            if bounds {
                let lower = propagate_lower_bounds(&shocks, &alloc)?;
                let upper = propagate_upper_bounds(&shocks, &alloc)?;
                let gap = lower
                    .as_slice()
                    .iter()
                    .zip(upper.as_slice())
                    .map(|(lo, hi)| hi - lo)
                    .fold(0.0f64, f64::max);
                let threshold = 2.0 * (1e-4 + eps_final);
                output.insert("delta_lower".into(), json!(lower.to_f64()));
                output.insert("delta_upper".into(), json!(upper.to_f64()));
                output.insert("point_identified".into(), json!(gap <= threshold));
            }
            if let Some(path) = &allocation {
                let mut out = String::from("consumer,jar,brand\n");
                for i in 0..alloc.consumers() {
                    let k = alloc.jar_of_consumer(i);
                    out.push_str(&format!("{i},{k},{}\n", alloc.brand_of_jar(k)));
                }
                std::fs::write(path, out)
                    .map_err(|source| Error::Io { path: path.clone(), source })?;
            }
            println!("{}", serde_json::Value::Object(output));
            Ok(())
        }
        InvertCommand::Blp { market, lambda, tol, max_iters } => {
            let (model, discrete, shares) = load_market(&market)?;
            let shocks = assignment_shocks(&model, discrete.sample())?;
            let params = SmoothingParams::new(lambda, tol, max_iters)?;
            let delta = blp_contraction(&shocks, &shares, &params)?;
            println!("{}", json!({ "delta": delta.to_f64() }));
            Ok(())
        }
    }
}

fn emit_lp(doc: &LpDocument, out: Option<&str>) -> Result<()> {
    let text = doc.render();
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|source| Error::Io { path: path.to_string(), source }),
        None => {
            std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(|source| Error::Io { path: "<stdout>".into(), source })
        }
    }
}

fn load_for_export(
    path: &str,
) -> Result<(demand_matching::DiscreteMarket, demand_matching::ShockMatrix)> {
    let doc = MarketDocument::load(path)?;
    let (model, market, _) = doc.instantiate::<f64>()?;
    let shocks = assignment_shocks(&model, market.sample())?;
    Ok((market, shocks))
}

fn run_export(cmd: ExportCommand) -> Result<()> {
    match cmd {
        ExportCommand::Lp { market, out } => {
            let (market, shocks) = load_for_export(&market)?;
            emit_lp(&export_dual_lp(&market, &shocks)?, out.as_deref())
        }
        ExportCommand::BoundsLp { market, direction, out } => {
            let (market, shocks) = load_for_export(&market)?;
            let direction = match direction {
                DirectionArg::Max => BoundDirection::Max,
                DirectionArg::Min => BoundDirection::Min,
            };
            emit_lp(&export_bounds_lp(&market, &shocks, direction)?, out.as_deref())
        }
        ExportCommand::CombinedLp { market, out } => {
            let loaded: Vec<_> =
                market.iter().map(|p| load_for_export(p)).collect::<Result<_>>()?;
            let refs: Vec<_> = loaded.iter().map(|(m, s)| (m, s)).collect();
            emit_lp(&export_combined_lp(&refs)?, out.as_deref())
        }
    }
}

fn parse_algos(text: &str) -> Result<Vec<Algo>> {
    text.split(',').map(|t| Algo::from_str(t.trim())).collect()
}

fn finish_bench(table: ResultTable, out: Option<&str>, strict: bool) -> Result<ExitCode> {
    match out {
        Some(path) => table.write_csv(path)?,
        None => print!("{}", table.render_csv()),
    }
    if strict && table.nonconvergences > 0 {
        eprintln!(
            "strict mode: {} replication(s) reported non-convergence",
            table.nonconvergences
        );
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn run_bench(cmd: BenchCommand) -> Result<ExitCode> {
    match cmd {
        BenchCommand::Table3 { n, reps, common } => {
            let table = run_table3(n, reps, common.seed)?;
            finish_bench(table, common.out.as_deref(), common.strict)
        }
        BenchCommand::Table4 { n, reps, common } => {
            let table = run_table4(n, reps, common.seed)?;
            finish_bench(table, common.out.as_deref(), common.strict)
        }
        BenchCommand::Table2Inner { draws, brands, reps, common } => {
            let table = run_table2_inner(draws, brands, reps, common.seed)?;
            finish_bench(table, common.out.as_deref(), common.strict)
        }
        BenchCommand::Custom { config, out, strict, algos } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|source| Error::Io { path: config.clone(), source })?;
            let mut spec: CustomSpec = serde_json::from_str(&text)?;
            if let Some(list) = algos.as_deref() {
                spec.algos = parse_algos(list)?;
            }
            let table = run_custom(&spec)?;
            finish_bench(table, out.as_deref(), strict)
        }
    }
}
