//! Benchmark harness: desk-scale reproductions of the simulation tables.
//!
//! Every experiment is fully determined by (spec, seed): replication seeds
//! are counter-split from the root seed, replications run in a work-stealing
//! pool but are collected by index, and aggregation is an ordered fold, so
//! the result table is identical for any worker count. Wall-clock runtimes
//! are the only nondeterministic fields; `zero_runtimes` strips them for
//! byte-level comparisons.

use std::str::FromStr;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{
    auction_assign, delta_from_prices, propagate_lower_bounds, propagate_upper_bounds,
    EpsilonSchedule,
};
use crate::blp::{blp_contraction, SmoothingParams};
use crate::error::{Error, Result};
use crate::market::{discretize_shares, draw_sample, DeltaVector, DiscreteMarket, MarketShares};
use crate::model::{
    assignment_shocks, simulate_demand_counts, Model, ModelSpec, MultiSegmentModel, PureCharModel,
    ShockMatrix, UtilityModel,
};
use crate::msa::{msa_lower, msa_upper, MsaParams};
use crate::seed::{child_rng, derive_seed};

// ---------------------------------------------------------------------------
// Experiment description
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Msa,
    Auction,
    Blp,
}

impl Algo {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algo::Msa => "msa",
            Algo::Auction => "auction",
            Algo::Blp => "blp",
        }
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msa" => Ok(Algo::Msa),
            "auction" => Ok(Algo::Auction),
            "blp" => Ok(Algo::Blp),
            other => Err(Error::Config(format!("unknown algorithm: {other}"))),
        }
    }
}

/// User-supplied experiment for `bench custom`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CustomSpec {
    pub shares: Vec<f64>,
    pub model: ModelSpec,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub algos: Vec<Algo>,
}

// ---------------------------------------------------------------------------
// Result table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub brand: String,
    pub statistic: String,
    pub mean: f64,
    pub std: f64,
    pub algorithm: String,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    /// Count of replication-level algorithm failures (currently only the
    /// smoothed contraction can fail); drives `--strict` exit codes.
    pub nonconvergences: usize,
}

impl ResultTable {
    pub fn render_csv(&self) -> String {
        let mut out = String::from("brand,statistic,mean,std,algorithm,runtime_s\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.brand, r.statistic, r.mean, r.std, r.algorithm, r.runtime_s
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &str) -> Result<()> {
        std::fs::write(path, self.render_csv())
            .map_err(|source| Error::Io { path: path.to_string(), source })
    }

    /// Strip wall-clock fields; everything else is seed-determined.
    pub fn zero_runtimes(&mut self) {
        for r in &mut self.rows {
            r.runtime_s = 0.0;
        }
    }

    /// Mean of a (brand, statistic, algorithm) cell, if present.
    pub fn mean_of(&self, brand: &str, statistic: &str, algorithm: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.brand == brand && r.statistic == statistic && r.algorithm == algorithm)
            .map(|r| r.mean)
    }
}

// ---------------------------------------------------------------------------
// Paper-table constants
// ---------------------------------------------------------------------------

/// 3-good, 2-segment price-heterogeneity model (list prices vs a coupon on
/// good 3) with the market shares used throughout the non-invertible
/// example.
pub fn table3_model() -> MultiSegmentModel<f64> {
    MultiSegmentModel::new(
        vec![vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 1.0]],
        vec![0.5, 0.5],
    )
    .expect("static model")
}

pub const TABLE3_SHARES: [f64; 3] = [0.25, 0.25, 0.5];

pub const TABLE4_BRANDS: [&str; 8] = ["A", "B", "C", "D", "E", "F", "G", "H"];

/// Segment prices for the 8-good, 5-segment model, `TABLE4_PRICES[s][j]`.
pub const TABLE4_PRICES: [[f64; 8]; 5] = [
    [3.32, 3.88, 3.70, 3.98, 4.20, 4.49, 7.13, 8.34],
    [3.36, 3.60, 3.30, 4.12, 4.34, 4.82, 7.92, 8.37],
    [3.45, 3.53, 4.16, 4.06, 4.21, 4.25, 7.95, 8.59],
    [3.37, 3.39, 4.31, 3.11, 4.29, 3.73, 7.99, 8.62],
    [3.35, 3.07, 4.25, 4.09, 4.35, 4.86, 7.71, 8.67],
];

/// Published per-brand shares. They total 1.02 as printed; consumers of
/// this constant normalize before use.
pub const TABLE4_RAW_SHARES: [f64; 8] = [0.07, 0.06, 0.20, 0.39, 0.16, 0.08, 0.01, 0.05];

pub fn table4_model() -> MultiSegmentModel<f64> {
    MultiSegmentModel::new(
        TABLE4_PRICES.iter().map(|row| row.to_vec()).collect(),
        vec![0.2; 5],
    )
    .expect("static model")
}

pub fn table4_shares() -> MarketShares<f64> {
    MarketShares::normalized(TABLE4_RAW_SHARES.to_vec()).expect("static shares")
}

/// Canonical CSV of the 8-good model constants, checksummed against the
/// committed copy in `docs/table4.csv`.
pub fn table4_csv_text() -> String {
    let mut out = String::from("brand,p1,p2,p3,p4,p5,share\n");
    for (j, name) in TABLE4_BRANDS.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            name,
            TABLE4_PRICES[0][j],
            TABLE4_PRICES[1][j],
            TABLE4_PRICES[2][j],
            TABLE4_PRICES[3][j],
            TABLE4_PRICES[4][j],
            TABLE4_RAW_SHARES[j],
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Shared replication machinery
// ---------------------------------------------------------------------------

/// Terminal auction step; half the default adjustment tolerance.
pub const DEFAULT_EPS_FINAL: f64 = 5e-5;

/// Contraction settings for the benchmark runs: looser than the library
/// default so a 50-replication table finishes in seconds; the smoothing bias
/// at lambda = 1 dominates the tolerance by orders of magnitude.
fn bench_blp_params() -> SmoothingParams<f64> {
    SmoothingParams::new(1.0, 1e-9, 500).expect("static params")
}

/// Near-hard contraction for the non-invertible bounds tables: with almost
/// no smoothing the fixed-point iteration stalls inside the identified set
/// and is reported as non-convergent, which is the behavior under study.
fn hard_blp_params() -> SmoothingParams<f64> {
    SmoothingParams::new(0.01, 1e-9, 500).expect("static params")
}

struct AlgoOutcome {
    runtime: f64,
    converged: bool,
    /// (statistic name, value per brand)
    stats: Vec<(&'static str, Vec<f64>)>,
    /// (statistic name, scalar) reported under brand "all"
    scalars: Vec<(&'static str, f64)>,
}

fn run_algo_on_market(
    algo: Algo,
    model: &Model<f64>,
    market: &DiscreteMarket<f64>,
    shares: &MarketShares<f64>,
    blp: &SmoothingParams<f64>,
) -> Result<AlgoOutcome> {
    let start = Instant::now();
    match algo {
        Algo::Msa => {
            let params = MsaParams::default();
            let upper = msa_upper(model, market, &params)?;
            let lower = msa_lower(model, market, &upper, &params)?;
            let gap = max_gap(&lower, &upper);
            Ok(AlgoOutcome {
                runtime: start.elapsed().as_secs_f64(),
                converged: true,
                stats: vec![
                    ("delta_upper", upper.to_f64()),
                    ("delta_lower", lower.to_f64()),
                ],
                scalars: vec![("max_gap", gap)],
            })
        }
        Algo::Auction => {
            let shocks = assignment_shocks(model, market.sample())?;
            let schedule =
                EpsilonSchedule::for_shocks(&shocks, DEFAULT_EPS_FINAL)?;
            let (allocation, prices) = auction_assign(&shocks, market.counts(), &schedule)?;
            let point = delta_from_prices(&prices, allocation.brands_of_jars())?;
            let lower = propagate_lower_bounds(&shocks, &allocation)?;
            let upper = propagate_upper_bounds(&shocks, &allocation)?;
            let gap = max_gap(&lower, &upper);
            Ok(AlgoOutcome {
                runtime: start.elapsed().as_secs_f64(),
                converged: true,
                stats: vec![
                    ("delta_point", point.to_f64()),
                    ("delta_upper", upper.to_f64()),
                    ("delta_lower", lower.to_f64()),
                ],
                scalars: vec![("max_gap", gap)],
            })
        }
        Algo::Blp => {
            let shocks = assignment_shocks(model, market.sample())?;
            match blp_contraction(&shocks, shares, blp) {
                Ok(delta) => Ok(AlgoOutcome {
                    runtime: start.elapsed().as_secs_f64(),
                    converged: true,
                    stats: vec![("delta", delta.to_f64())],
                    scalars: Vec::new(),
                }),
                Err(Error::NonConvergence { .. }) => Ok(AlgoOutcome {
                    runtime: start.elapsed().as_secs_f64(),
                    converged: false,
                    stats: Vec::new(),
                    scalars: Vec::new(),
                }),
                Err(e) => Err(e),
            }
        }
    }
}

fn max_gap(lower: &DeltaVector<f64>, upper: &DeltaVector<f64>) -> f64 {
    lower
        .as_slice()
        .iter()
        .zip(upper.as_slice())
        .map(|(lo, hi)| hi - lo)
        .fold(0.0, f64::max)
}

fn run_fixed_market_experiment(
    model: &Model<f64>,
    shares: &MarketShares<f64>,
    n: usize,
    reps: usize,
    seed: u64,
    algos: &[Algo],
    blp: &SmoothingParams<f64>,
) -> Result<ResultTable> {
    if reps == 0 || algos.is_empty() {
        return Err(Error::Config("need at least one replication and one algorithm".into()));
    }
    let counts = discretize_shares(shares, n)?;
    let per_rep: Vec<Result<Vec<AlgoOutcome>>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let sample = draw_sample(model, n, derive_seed(seed, rep as u64))?;
            let market = DiscreteMarket::new(counts.clone(), sample)?;
            algos
                .iter()
                .map(|&algo| run_algo_on_market(algo, model, &market, shares, blp))
                .collect()
        })
        .collect();
    let per_rep: Vec<Vec<AlgoOutcome>> = per_rep.into_iter().collect::<Result<_>>()?;
    Ok(aggregate(&per_rep, algos, shares.len()))
}

/// Ordered fold over replication outcomes into the final row layout:
/// algorithms in input order, statistics in the order each algorithm emits
/// them, brands ascending, scalar statistics last.
fn aggregate(per_rep: &[Vec<AlgoOutcome>], algos: &[Algo], brands: usize) -> ResultTable {
    let mut rows = Vec::new();
    let mut nonconvergences = 0usize;
    for (a, &algo) in algos.iter().enumerate() {
        let outcomes: Vec<&AlgoOutcome> = per_rep.iter().map(|r| &r[a]).collect();
        let runtime: f64 = outcomes.iter().map(|o| o.runtime).sum();
        let failures = outcomes.iter().filter(|o| !o.converged).count();
        nonconvergences += failures;
        let converged: Vec<&&AlgoOutcome> = outcomes.iter().filter(|o| o.converged).collect();
        let stat_names: Vec<&'static str> = converged
            .first()
            .map(|o| o.stats.iter().map(|(name, _)| *name).collect())
            .unwrap_or_default();
        for name in &stat_names {
            for j in 0..brands {
                let values: Vec<f64> = converged
                    .iter()
                    .map(|o| {
                        o.stats
                            .iter()
                            .find(|(s, _)| s == name)
                            .map(|(_, v)| v[j])
                            .unwrap_or(f64::NAN)
                    })
                    .collect();
                let (mean, std) = mean_std(&values);
                rows.push(ResultRow {
                    brand: j.to_string(),
                    statistic: (*name).to_string(),
                    mean,
                    std,
                    algorithm: algo.as_str().to_string(),
                    runtime_s: runtime,
                });
            }
        }
        let scalar_names: Vec<&'static str> = converged
            .first()
            .map(|o| o.scalars.iter().map(|(name, _)| *name).collect())
            .unwrap_or_default();
        for name in &scalar_names {
            let values: Vec<f64> = converged
                .iter()
                .map(|o| {
                    o.scalars
                        .iter()
                        .find(|(s, _)| s == name)
                        .map(|(_, v)| *v)
                        .unwrap_or(f64::NAN)
                })
                .collect();
            let (mean, std) = mean_std(&values);
            rows.push(ResultRow {
                brand: "all".to_string(),
                statistic: (*name).to_string(),
                mean,
                std,
                algorithm: algo.as_str().to_string(),
                runtime_s: runtime,
            });
        }
        if algo == Algo::Blp {
            rows.push(ResultRow {
                brand: "all".to_string(),
                statistic: "nonconvergence_rate".to_string(),
                mean: failures as f64 / outcomes.len() as f64,
                std: 0.0,
                algorithm: algo.as_str().to_string(),
                runtime_s: runtime,
            });
        }
    }
    ResultTable { rows, nonconvergences }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Table experiments
// ---------------------------------------------------------------------------

/// 3-good non-invertible market: bounds from the matching algorithms and
/// the failing smoothed-contraction baseline.
pub fn run_table3(n: usize, reps: usize, seed: u64) -> Result<ResultTable> {
    if n < 100 {
        return Err(Error::Precondition("table3 requires N >= 100".into()));
    }
    let model = Model::MultiSegment(table3_model());
    let shares = MarketShares::new(TABLE3_SHARES.to_vec())?;
    run_fixed_market_experiment(
        &model,
        &shares,
        n,
        reps,
        seed,
        &[Algo::Msa, Algo::Auction, Algo::Blp],
        &hard_blp_params(),
    )
}

/// 8-good, 5-segment market: per-brand bound means/stds and the maximum
/// upper-lower gap, adjustment solver only (the published table is a pure
/// bounds computation).
pub fn run_table4(n: usize, reps: usize, seed: u64) -> Result<ResultTable> {
    if n < 1000 {
        return Err(Error::Precondition("table4 requires N >= 1000".into()));
    }
    let model = Model::MultiSegment(table4_model());
    let shares = table4_shares();
    run_fixed_market_experiment(&model, &shares, n, reps, seed, &[Algo::Msa], &bench_blp_params())
}

pub fn run_custom(spec: &CustomSpec) -> Result<ResultTable> {
    let model = spec.model.build::<f64>()?;
    let shares = MarketShares::new(spec.shares.clone())?;
    if shares.len() != model.num_alternatives() {
        return Err(Error::Config("share vector does not match the model".into()));
    }
    run_fixed_market_experiment(
        &model,
        &shares,
        spec.n,
        spec.reps,
        spec.seed,
        &spec.algos,
        &bench_blp_params(),
    )
}

// ---------------------------------------------------------------------------
// Pure-characteristics accuracy benchmark (inner loop)
// ---------------------------------------------------------------------------

const TASTE_MEANS: [f64; 3] = [0.5, 0.5, 0.2];
const X_MEAN: [f64; 3] = [0.5, 0.5, 0.5];
const X_COV: [[f64; 3]; 3] = [[1.0, -0.7, 0.3], [-0.7, 1.0, 0.3], [0.3, 0.3, 1.0]];

/// Oversampling factor of the reference inversion defining "true" delta.
const TRUTH_OVERSAMPLE: usize = 10;

fn cholesky3(a: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    l
}

fn draw_characteristics(brands: usize, seed: u64) -> Vec<Vec<f64>> {
    let l = cholesky3(X_COV);
    let mut rng = child_rng(seed, 0);
    (0..brands)
        .map(|_| {
            let z: [f64; 3] = [
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ];
            (0..3)
                .map(|r| X_MEAN[r] + (0..3).map(|c| l[r][c] * z[c]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn auction_point(shocks: &ShockMatrix<f64>, counts: &[usize]) -> Result<DeltaVector<f64>> {
    let schedule = EpsilonSchedule::for_shocks(shocks, DEFAULT_EPS_FINAL)?;
    let (allocation, prices) = auction_assign(shocks, counts, &schedule)?;
    delta_from_prices(&prices, allocation.brands_of_jars())
}

fn rmse(est: &DeltaVector<f64>, truth: &DeltaVector<f64>) -> f64 {
    let free = est.len() - 1;
    let sq: f64 = (1..est.len()).map(|j| (est.get(j) - truth.get(j)).powi(2)).sum();
    (sq / free as f64).sqrt()
}

struct InnerRep {
    rmse_by_algo: Vec<Option<f64>>, // parallel to ALGO order below
    runtimes: Vec<f64>,
}

const INNER_ALGOS: [Algo; 3] = [Algo::Auction, Algo::Msa, Algo::Blp];

/// Pure-characteristics inner-loop benchmark. Per replication: draw brand
/// characteristics, generate observed shares by hard simulation at delta = 0
/// on an oversampled consumer set, define "true" delta as the auction
/// inversion on that oversampled set, then invert the discretized shares on
/// a fresh estimation sample with each algorithm. RMSE is over
/// non-reference brands against the reference inversion.
pub fn run_table2_inner(draws: usize, brands: usize, reps: usize, seed: u64) -> Result<ResultTable> {
    if draws < 100 {
        return Err(Error::Precondition("table2-inner requires at least 100 draws".into()));
    }
    if brands < 2 || reps == 0 {
        return Err(Error::Precondition("need at least 2 brands and 1 replication".into()));
    }
    let per_rep: Vec<Result<InnerRep>> = (0..reps)
        .into_par_iter()
        .map(|rep| run_inner_rep(draws, brands, derive_seed(seed, rep as u64)))
        .collect();
    let per_rep: Vec<InnerRep> = per_rep.into_iter().collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut nonconvergences = 0usize;
    for (a, algo) in INNER_ALGOS.iter().enumerate() {
        let runtime: f64 = per_rep.iter().map(|r| r.runtimes[a]).sum();
        let values: Vec<f64> = per_rep.iter().filter_map(|r| r.rmse_by_algo[a]).collect();
        let failures = per_rep.len() - values.len();
        nonconvergences += failures;
        let (mean, std) = mean_std(&values);
        rows.push(ResultRow {
            brand: "all".to_string(),
            statistic: "rmse".to_string(),
            mean,
            std,
            algorithm: algo.as_str().to_string(),
            runtime_s: runtime,
        });
        if *algo == Algo::Blp {
            rows.push(ResultRow {
                brand: "all".to_string(),
                statistic: "nonconvergence_rate".to_string(),
                mean: failures as f64 / per_rep.len() as f64,
                std: 0.0,
                algorithm: algo.as_str().to_string(),
                runtime_s: runtime,
            });
        }
    }
    Ok(ResultTable { rows, nonconvergences })
}

fn run_inner_rep(draws: usize, brands: usize, rep_seed: u64) -> Result<InnerRep> {
    let x = draw_characteristics(brands, derive_seed(rep_seed, 1));
    let model = Model::PureChar(PureCharModel::new(
        x,
        TASTE_MEANS.to_vec(),
        vec![1.0; 3],
    )?);

    // Observed shares: hard simulation at delta = 0 on the oversampled set.
    let n_pop = draws * TRUTH_OVERSAMPLE;
    let population = draw_sample(&model, n_pop, derive_seed(rep_seed, 2))?;
    let (mut counts_pop, _) =
        simulate_demand_counts(&model, &population, &DeltaVector::zeros(brands))?;
    ensure_positive_counts(&mut counts_pop);
    let shares = MarketShares::from_counts(&counts_pop, n_pop)?;

    // Reference inversion on the population sample defines "true" delta.
    let pop_shocks = assignment_shocks(&model, &population)?;
    let truth = auction_point(&pop_shocks, &counts_pop)?;

    // Estimation on fresh draws.
    let counts_est = discretize_shares(&shares, draws)?;
    let est_sample = draw_sample(&model, draws, derive_seed(rep_seed, 3))?;
    let est_market = DiscreteMarket::new(counts_est.clone(), est_sample)?;
    let est_shocks = assignment_shocks(&model, est_market.sample())?;

    let mut rmse_by_algo = Vec::with_capacity(INNER_ALGOS.len());
    let mut runtimes = Vec::with_capacity(INNER_ALGOS.len());
    for algo in INNER_ALGOS {
        let start = Instant::now();
        let outcome = match algo {
            Algo::Auction => Some(auction_point(&est_shocks, &counts_est)?),
            Algo::Msa => {
                let params = MsaParams::default();
                Some(msa_upper(&model, &est_market, &params)?)
            }
            Algo::Blp => match blp_contraction(&est_shocks, &shares, &bench_blp_params()) {
                Ok(delta) => Some(delta),
                Err(Error::NonConvergence { .. }) => None,
                Err(e) => return Err(e),
            },
        };
        runtimes.push(start.elapsed().as_secs_f64());
        rmse_by_algo.push(outcome.map(|d| rmse(&d, &truth)));
    }
    Ok(InnerRep { rmse_by_algo, runtimes })
}

/// Give every brand at least one consumer, taking from the largest count.
fn ensure_positive_counts(counts: &mut [usize]) {
    for j in 0..counts.len() {
        while counts[j] == 0 {
            let donor = (0..counts.len())
                .max_by_key(|&k| counts[k])
                .expect("non-empty counts");
            debug_assert!(counts[donor] > 1);
            counts[donor] -= 1;
            counts[j] += 1;
        }
    }
}
