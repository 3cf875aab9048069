//! Finite market construction: sampled consumers, discretized brand counts,
//! normalized utility vectors, and the stability report.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::assignment::Allocation;
use crate::error::{Error, Result};
use crate::model::{ConsumerDraw, Model, ModelSpec, UtilityModel};
use crate::scalar::Scalar;
use crate::seed::child_rng;

// ---------------------------------------------------------------------------
// Value types
// ---------------------------------------------------------------------------

/// Probability vector over the alternatives.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketShares<F>(Vec<F>);

impl<F: Scalar> MarketShares<F> {
    pub fn new(shares: Vec<F>) -> Result<Self> {
        if shares.is_empty() {
            return Err(Error::Precondition("share vector is empty".into()));
        }
        if shares.iter().any(|s| *s < F::zero()) {
            return Err(Error::Precondition("shares must be non-negative".into()));
        }
        let total: F = shares.iter().copied().sum();
        if (total - F::one()).abs() > F::from_f64_lossy(1e-12) {
            return Err(Error::Precondition(format!("shares sum to {total}, expected 1")));
        }
        Ok(MarketShares(shares))
    }

    /// Empirical frequencies from integer counts.
    pub fn from_counts(counts: &[usize], n: usize) -> Result<Self> {
        if n == 0 || counts.iter().sum::<usize>() != n {
            return Err(Error::Precondition("counts must sum to the sample size".into()));
        }
        let nf = F::from_usize(n).unwrap();
        Ok(MarketShares(counts.iter().map(|c| F::from_usize(*c).unwrap() / nf).collect()))
    }

    /// Rescale a positive vector to sum to one.
    pub fn normalized(raw: Vec<F>) -> Result<Self> {
        let total: F = raw.iter().copied().sum();
        if total <= F::zero() {
            return Err(Error::Precondition("cannot normalize a non-positive vector".into()));
        }
        MarketShares::new(raw.into_iter().map(|s| s / total).collect())
    }

    pub fn require_strictly_positive(&self) -> Result<()> {
        if self.0.iter().any(|s| *s <= F::zero()) {
            return Err(Error::Precondition("all shares must be strictly positive".into()));
        }
        Ok(())
    }

    pub fn as_slice(&self) -> &[F] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Systematic utility vector with the reference alternative pinned to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaVector<F>(Vec<F>);

impl<F: Scalar> DeltaVector<F> {
    pub fn new(delta: Vec<F>) -> Result<Self> {
        if delta.is_empty() {
            return Err(Error::Precondition("delta vector is empty".into()));
        }
        if delta[0] != F::zero() {
            return Err(Error::Precondition("delta_0 must be exactly zero".into()));
        }
        Ok(DeltaVector(delta))
    }

    /// Normalize by subtracting the reference component.
    pub fn new_renormalized(mut delta: Vec<F>) -> Result<Self> {
        if delta.is_empty() {
            return Err(Error::Precondition("delta vector is empty".into()));
        }
        let d0 = delta[0];
        for d in &mut delta {
            *d = *d - d0;
        }
        delta[0] = F::zero();
        Ok(DeltaVector(delta))
    }

    pub fn zeros(len: usize) -> Self {
        DeltaVector(vec![F::zero(); len])
    }

    pub fn as_slice(&self) -> &[F] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, j: usize) -> F {
        self.0[j]
    }

    /// Componentwise minimum (lattice meet). Both vectors share delta_0 = 0.
    pub fn meet(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::Precondition("meet of different-length delta vectors".into()));
        }
        DeltaVector::new(
            self.0.iter().zip(&other.0).map(|(a, b)| a.min(*b)).collect(),
        )
    }

    /// Componentwise maximum (lattice join).
    pub fn join(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::Precondition("join of different-length delta vectors".into()));
        }
        DeltaVector::new(
            self.0.iter().zip(&other.0).map(|(a, b)| a.max(*b)).collect(),
        )
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|d| d.to_f64().unwrap()).collect()
    }
}

/// N i.i.d. heterogeneity draws with seed provenance.
#[derive(Debug, Clone)]
pub struct ConsumerSample<F> {
    seed: u64,
    draws: Vec<ConsumerDraw<F>>,
}

impl<F: Scalar> ConsumerSample<F> {
    pub fn from_draws(seed: u64, draws: Vec<ConsumerDraw<F>>) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::Precondition("consumer sample is empty".into()));
        }
        Ok(ConsumerSample { seed, draws })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn draws(&self) -> &[ConsumerDraw<F>] {
        &self.draws
    }

    pub fn draw(&self, i: usize) -> &ConsumerDraw<F> {
        &self.draws[i]
    }
}

/// Draw N consumers for a model. Each consumer owns a counter-derived RNG
/// stream, so the result is bit-identical for identical (model, n, seed)
/// regardless of scheduling.
pub fn draw_sample<F: Scalar, M: UtilityModel<F>>(
    model: &M,
    n: usize,
    seed: u64,
) -> Result<ConsumerSample<F>> {
    if n == 0 {
        return Err(Error::Precondition("sample size must be at least 1".into()));
    }
    let draws = (0..n)
        .map(|i| {
            let mut rng = child_rng(seed, i as u64);
            model.sample(&mut rng, i, n)
        })
        .collect();
    ConsumerSample::from_draws(seed, draws)
}

/// Finite matching market: integer jar counts per brand plus the sampled
/// consumer side.
#[derive(Debug, Clone)]
pub struct DiscreteMarket<F> {
    counts: Vec<usize>,
    sample: ConsumerSample<F>,
}

impl<F: Scalar> DiscreteMarket<F> {
    pub fn new(counts: Vec<usize>, sample: ConsumerSample<F>) -> Result<Self> {
        if counts.iter().sum::<usize>() != sample.len() {
            return Err(Error::Precondition("brand counts must sum to the sample size".into()));
        }
        if counts.iter().any(|c| *c == 0) {
            return Err(Error::Precondition("every brand needs at least one jar".into()));
        }
        Ok(DiscreteMarket { counts, sample })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn brands(&self) -> usize {
        self.counts.len()
    }

    pub fn n(&self) -> usize {
        self.sample.len()
    }

    pub fn sample(&self) -> &ConsumerSample<F> {
        &self.sample
    }
}

// ---------------------------------------------------------------------------
// Discretization
// ---------------------------------------------------------------------------

/// Round `N * s_j` to adjacent integers summing to `N`, largest-remainder
/// apportionment with lowest-index tie-break. Every brand keeps at least one
/// jar; if a brand would round to zero, a unit is taken from the largest
/// count (preferring one that received a round-up).
pub fn discretize_shares<F: Scalar>(shares: &MarketShares<F>, n: usize) -> Result<Vec<usize>> {
    shares.require_strictly_positive()?;
    let brands = shares.len();
    if n < brands {
        return Err(Error::Precondition(format!(
            "need at least one consumer per brand: N = {n} < |J0| = {brands}"
        )));
    }
    let nf = n as f64;
    let targets: Vec<f64> = shares.as_slice().iter().map(|s| s.to_f64().unwrap() * nf).collect();
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..brands).collect();
    // descending remainder, ties to the lowest index
    order.sort_by(|&a, &b| {
        let ra = targets[a] - targets[a].floor();
        let rb = targets[b] - targets[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut rounded_up = vec![false; brands];
    for &j in order.iter().take(n - assigned) {
        counts[j] += 1;
        rounded_up[j] = true;
    }
    for j in 0..brands {
        while counts[j] == 0 {
            let donor = (0..brands)
                .filter(|&k| counts[k] > 1)
                .max_by(|&a, &b| {
                    (rounded_up[a], counts[a], std::cmp::Reverse(a))
                        .cmp(&(rounded_up[b], counts[b], std::cmp::Reverse(b)))
                })
                .ok_or_else(|| Error::Precondition("cannot give every brand a jar".into()))?;
            counts[donor] -= 1;
            counts[j] += 1;
        }
    }
    debug_assert_eq!(counts.iter().sum::<usize>(), n);
    Ok(counts)
}

// ---------------------------------------------------------------------------
// Stability check
// ---------------------------------------------------------------------------

/// Diagnostics for a candidate stable outcome (delta, allocation).
///
/// Payoffs are taken from the allocation: `u_i` is the utility of the
/// matched jar's brand. A blocking pair is a (consumer, brand) whose utility
/// beats the matched one by more than `tol`; the feasibility slack is the
/// largest shortfall of matched utility below the consumer's best utility.
#[derive(Debug, Clone)]
pub struct StabilityReport<F> {
    pub feasibility_slack: F,
    pub blocking_pairs: usize,
    pub brand_usage: Vec<usize>,
}

impl<F: Scalar> StabilityReport<F> {
    pub fn is_stable(&self, tol: F) -> bool {
        self.blocking_pairs == 0 && self.feasibility_slack <= tol
    }
}

pub fn check_stability<F: Scalar, M: UtilityModel<F>>(
    model: &M,
    market: &DiscreteMarket<F>,
    delta: &DeltaVector<F>,
    allocation: &Allocation,
    tol: F,
) -> Result<StabilityReport<F>> {
    let n = market.n();
    let brands = market.brands();
    if allocation.consumers() != n || allocation.jars() != n {
        return Err(Error::Precondition(format!(
            "allocation covers {} consumers / {} jars, market has {}",
            allocation.consumers(),
            allocation.jars(),
            n
        )));
    }
    if delta.len() != brands {
        return Err(Error::Precondition("delta length does not match market brands".into()));
    }
    let usage = allocation.brand_usage(brands)?;
    if usage != market.counts() {
        return Err(Error::Precondition(format!(
            "allocation brand usage {usage:?} does not match market counts {:?}",
            market.counts()
        )));
    }

    let mut slack = F::zero();
    let mut blocking = 0usize;
    for (i, draw) in market.sample().draws().iter().enumerate() {
        let matched_brand = allocation.brand_of_consumer(i);
        let matched_u = model.evaluate(draw, matched_brand, delta.get(matched_brand))?;
        let mut best = matched_u;
        for j in 0..brands {
            let u = model.evaluate(draw, j, delta.get(j))?;
            if u > best {
                best = u;
            }
            if j != matched_brand && u > matched_u + tol {
                blocking += 1;
            }
        }
        let gap = best - matched_u;
        if gap > slack {
            slack = gap;
        }
    }
    Ok(StabilityReport { feasibility_slack: slack, blocking_pairs: blocking, brand_usage: usage })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// On-disk market description: `{shares, n, seed, model}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MarketDocument {
    pub shares: Vec<f64>,
    pub n: usize,
    pub seed: u64,
    pub model: ModelSpec,
}

impl MarketDocument {
    pub fn load(path: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.to_string(), source })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &str) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_string(), source })
    }

    /// Build the model, sample the consumers, and discretize the shares.
    pub fn instantiate<F: Scalar>(&self) -> Result<(Model<F>, DiscreteMarket<F>, MarketShares<F>)> {
        let model = self.model.build::<F>()?;
        let shares = MarketShares::new(
            self.shares.iter().map(|s| F::from_f64_lossy(*s)).collect(),
        )?;
        if shares.len() != model.num_alternatives() {
            return Err(Error::Config(format!(
                "share vector has {} entries, model has {} alternatives",
                shares.len(),
                model.num_alternatives()
            )));
        }
        let counts = discretize_shares(&shares, self.n)?;
        let sample = draw_sample(&model, self.n, self.seed)?;
        let market = DiscreteMarket::new(counts, sample)?;
        Ok((model, market, shares))
    }
}

/// Debug CSV of per-consumer draws (`--dump-sample`).
pub fn dump_sample_csv<F: Scalar, W: Write>(sample: &ConsumerSample<F>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["consumer", "kind", "values"])
        .map_err(|e| Error::Parse(e.to_string()))?;
    for (i, draw) in sample.draws().iter().enumerate() {
        let (kind, values) = match draw {
            ConsumerDraw::Shocks(v) => ("shocks", join_values(v)),
            ConsumerDraw::Tastes(v) => ("tastes", join_values(v)),
            ConsumerDraw::Wtp(v) => ("wtp", format!("{v}")),
            ConsumerDraw::Segment { sensitivity, segment } => {
                ("segment", format!("{segment};{sensitivity}"))
            }
        };
        w.write_record([i.to_string(), kind.to_string(), values])
            .map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

fn join_values<F: Scalar>(values: &[F]) -> String {
    values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(";")
}
