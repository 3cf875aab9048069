//! Random-utility models and the simulated demand map.
//!
//! A model maps a consumer's heterogeneity draw and a systematic utility
//! `delta_j` to a utility level, strictly increasing and continuous in
//! `delta_j`. All shipped models are separable in `delta` (utility is
//! `delta_j` plus a draw-specific shock), but the interface does not assume
//! it, so non-additive models plug in through the same trait.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatrsNormal};

use crate::error::{Error, Result};
use crate::market::{ConsumerSample, DeltaVector, MarketShares};
use crate::scalar::Scalar;

/// One consumer's heterogeneity realization.
#[derive(Debug, Clone, PartialEq)]
pub enum ConsumerDraw<F> {
    /// Additive shock vector, one entry per alternative.
    Shocks(Vec<F>),
    /// Taste vector for the pure characteristics model.
    Tastes(Vec<F>),
    /// Willingness to pay for quality (vertical model).
    Wtp(F),
    /// Multi-segment draw: price sensitivity `1/eps_a` (>= 1 since
    /// `eps_a` is drawn from (0,1]) and the consumer's segment.
    Segment { sensitivity: F, segment: usize },
}

pub trait UtilityModel<F: Scalar> {
    fn num_alternatives(&self) -> usize;

    /// Whether the shock-matrix precomputation path is allowed for this
    /// model. The multi-segment model reports false even though its utility
    /// is separable in `delta`; it is routed through model-specific helpers.
    fn additive(&self) -> bool;

    /// True when `evaluate(draw, j, d) == d + evaluate(draw, j, 0)`.
    /// Enables cached argmax loops in the solvers.
    fn delta_separable(&self) -> bool;

    /// Utility of alternative `j` at systematic utility `delta_j`.
    fn evaluate(&self, draw: &ConsumerDraw<F>, j: usize, delta_j: F) -> Result<F>;

    /// Inverse of `evaluate` in its `delta_j` argument.
    fn invert(&self, draw: &ConsumerDraw<F>, j: usize, u: F) -> Result<F>;

    /// Draw consumer `index` out of a sample of `population`. Models with a
    /// discrete mixture component (segments) stratify on `index` so the
    /// mixture weights are hit exactly; purely continuous models ignore it.
    fn sample(&self, rng: &mut ChaCha8Rng, index: usize, population: usize) -> ConsumerDraw<F>;
}

/// Prime bases for the Halton taste sequence; cycles if a model ever ships
/// more taste dimensions than this.
const HALTON_BASES: [usize; 6] = [2, 3, 5, 7, 11, 13];

/// Van der Corput radical inverse of `i` in the given base.
fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let b = base as f64;
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= b;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

fn check_index(j: usize, bound: usize) -> Result<()> {
    if j >= bound {
        return Err(Error::IndexOutOfRange { index: j, bound });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Concrete models
// ---------------------------------------------------------------------------

/// ARUM with i.i.d. type-1 extreme value shocks.
#[derive(Debug, Clone)]
pub struct LogitModel {
    pub alternatives: usize,
}

impl LogitModel {
    pub fn new(alternatives: usize) -> Result<Self> {
        if alternatives == 0 {
            return Err(Error::Config("logit model needs at least one alternative".into()));
        }
        Ok(LogitModel { alternatives })
    }
}

impl<F: Scalar> UtilityModel<F> for LogitModel {
    fn num_alternatives(&self) -> usize {
        self.alternatives
    }

    fn additive(&self) -> bool {
        true
    }

    fn delta_separable(&self) -> bool {
        true
    }

    fn evaluate(&self, draw: &ConsumerDraw<F>, j: usize, delta_j: F) -> Result<F> {
        check_index(j, self.alternatives)?;
        match draw {
            ConsumerDraw::Shocks(e) => Ok(delta_j + e[j]),
            _ => Err(Error::Precondition("logit model expects a shock-vector draw".into())),
        }
    }

    fn invert(&self, draw: &ConsumerDraw<F>, j: usize, u: F) -> Result<F> {
        check_index(j, self.alternatives)?;
        match draw {
            ConsumerDraw::Shocks(e) => Ok(u - e[j]),
            _ => Err(Error::Precondition("logit model expects a shock-vector draw".into())),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, index: usize, population: usize) -> ConsumerDraw<F> {
        // Jittered Halton points through the Gumbel quantile -ln(-ln u); see
        // the pure characteristics sampler for the rationale.
        let n = population.max(1) as f64;
        let shocks = (0..self.alternatives)
            .map(|k| {
                let u = radical_inverse(index + 1, HALTON_BASES[k % HALTON_BASES.len()])
                    + (rng.gen::<f64>() - 0.5) / n;
                let u = u.rem_euclid(1.0).clamp(1e-12, 1.0 - 1e-12);
                F::from_f64_lossy(-(-u.ln()).ln())
            })
            .collect();
        ConsumerDraw::Shocks(shocks)
    }
}

/// Pure characteristics model: shocks are inner products of a taste vector
/// with per-alternative characteristics, no i.i.d. logit term.
#[derive(Debug, Clone)]
pub struct PureCharModel<F> {
    characteristics: Vec<Vec<F>>,
    taste_means: Vec<F>,
    taste_stds: Vec<F>,
}

impl<F: Scalar> PureCharModel<F> {
    pub fn new(
        characteristics: Vec<Vec<F>>,
        taste_means: Vec<F>,
        taste_stds: Vec<F>,
    ) -> Result<Self> {
        if characteristics.is_empty() {
            return Err(Error::Config("characteristics matrix is empty".into()));
        }
        let dim = characteristics[0].len();
        if characteristics.iter().any(|row| row.len() != dim) {
            return Err(Error::Config("ragged characteristics matrix".into()));
        }
        if taste_means.len() != dim || taste_stds.len() != dim {
            return Err(Error::Config(format!(
                "taste dimension {} does not match characteristics columns {}",
                taste_means.len(),
                dim
            )));
        }
        if taste_stds.iter().any(|s| *s < F::zero()) {
            return Err(Error::Config("taste standard deviations must be non-negative".into()));
        }
        Ok(PureCharModel { characteristics, taste_means, taste_stds })
    }

    fn shock(&self, tastes: &[F], j: usize) -> F {
        self.characteristics[j]
            .iter()
            .zip(tastes)
            .map(|(x, v)| *x * *v)
            .sum()
    }
}

impl<F: Scalar> UtilityModel<F> for PureCharModel<F> {
    fn num_alternatives(&self) -> usize {
        self.characteristics.len()
    }

    fn additive(&self) -> bool {
        true
    }

    fn delta_separable(&self) -> bool {
        true
    }

    fn evaluate(&self, draw: &ConsumerDraw<F>, j: usize, delta_j: F) -> Result<F> {
        check_index(j, self.characteristics.len())?;
        match draw {
            ConsumerDraw::Tastes(v) => Ok(delta_j + self.shock(v, j)),
            _ => Err(Error::Precondition("pure characteristics model expects a taste draw".into())),
        }
    }

    fn invert(&self, draw: &ConsumerDraw<F>, j: usize, u: F) -> Result<F> {
        check_index(j, self.characteristics.len())?;
        match draw {
            ConsumerDraw::Tastes(v) => Ok(u - self.shock(v, j)),
            _ => Err(Error::Precondition("pure characteristics model expects a taste draw".into())),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, index: usize, population: usize) -> ConsumerDraw<F> {
        // Jittered Halton points mapped through the normal quantile: dimension
        // k walks the radical-inverse sequence in the k-th prime base, each
        // consumer perturbed within 1/population. Keeps the draws effectively
        // normal while cutting the quantile-grid discretization error of the
        // simulated demand map to O(1/population).
        let n = population.max(1) as f64;
        let std_normal = StatrsNormal::standard();
        let tastes = self
            .taste_means
            .iter()
            .zip(&self.taste_stds)
            .enumerate()
            .map(|(k, (m, s))| {
                let u = radical_inverse(index + 1, HALTON_BASES[k % HALTON_BASES.len()])
                    + (rng.gen::<f64>() - 0.5) / n;
                let u = u.rem_euclid(1.0).clamp(1e-12, 1.0 - 1e-12);
                *m + *s * F::from_f64_lossy(std_normal.inverse_cdf(u))
            })
            .collect();
        ConsumerDraw::Tastes(tastes)
    }
}

/// Vertical differentiation (quality ladder): utility `delta_j - wtp * p_j`
/// with willingness-to-pay drawn uniformly from (0,1].
#[derive(Debug, Clone)]
pub struct VerticalModel<F> {
    prices: Vec<F>,
}

impl<F: Scalar> VerticalModel<F> {
    pub fn new(prices: Vec<F>) -> Result<Self> {
        if prices.is_empty() {
            return Err(Error::Config("vertical model needs at least one price".into()));
        }
        Ok(VerticalModel { prices })
    }
}

impl<F: Scalar> UtilityModel<F> for VerticalModel<F> {
    fn num_alternatives(&self) -> usize {
        self.prices.len()
    }

    fn additive(&self) -> bool {
        true
    }

    fn delta_separable(&self) -> bool {
        true
    }

    fn evaluate(&self, draw: &ConsumerDraw<F>, j: usize, delta_j: F) -> Result<F> {
        check_index(j, self.prices.len())?;
        match draw {
            ConsumerDraw::Wtp(v) => Ok(delta_j - *v * self.prices[j]),
            _ => Err(Error::Precondition("vertical model expects a willingness-to-pay draw".into())),
        }
    }

    fn invert(&self, draw: &ConsumerDraw<F>, j: usize, u: F) -> Result<F> {
        check_index(j, self.prices.len())?;
        match draw {
            ConsumerDraw::Wtp(v) => Ok(u + *v * self.prices[j]),
            _ => Err(Error::Precondition("vertical model expects a willingness-to-pay draw".into())),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, _index: usize, _population: usize) -> ConsumerDraw<F> {
        // 1 - U[0,1) lands in (0,1], so wtp is never exactly zero.
        ConsumerDraw::Wtp(F::from_f64_lossy(1.0 - rng.gen::<f64>()))
    }
}

/// Multi-segment price heterogeneity model: utility
/// `delta_j - p_j^s / eps_a` where `s` is the consumer's segment and
/// `eps_a ~ U(0,1]` is willingness to pay for quality.
#[derive(Debug, Clone)]
pub struct MultiSegmentModel<F> {
    /// `prices[segment][alternative]`, all strictly positive.
    prices: Vec<Vec<F>>,
    /// Segment probabilities, summing to one.
    weights: Vec<F>,
}

impl<F: Scalar> MultiSegmentModel<F> {
    pub fn new(prices: Vec<Vec<F>>, weights: Vec<F>) -> Result<Self> {
        if prices.is_empty() {
            return Err(Error::Config("multi-segment model needs at least one segment".into()));
        }
        let goods = prices[0].len();
        if goods == 0 || prices.iter().any(|row| row.len() != goods) {
            return Err(Error::Config("segment price rows must be non-empty and equal length".into()));
        }
        if prices.iter().flatten().any(|p| *p <= F::zero()) {
            return Err(Error::Config("all segment prices must be strictly positive".into()));
        }
        if weights.len() != prices.len() {
            return Err(Error::Config("one weight per segment required".into()));
        }
        let total: F = weights.iter().copied().sum();
        if (total - F::one()).abs() > F::from_f64_lossy(1e-12) {
            return Err(Error::Config("segment weights must sum to one".into()));
        }
        if weights.iter().any(|w| *w < F::zero()) {
            return Err(Error::Config("segment weights must be non-negative".into()));
        }
        Ok(MultiSegmentModel { prices, weights })
    }

    pub fn num_segments(&self) -> usize {
        self.prices.len()
    }

    /// Largest-remainder apportionment of `population` consumers to
    /// segments, as contiguous blocks. Consumer `index` falls into the block
    /// of its segment, so segment proportions are exact in every sample
    /// instead of binomially noisy; only the price sensitivity is random.
    pub fn segment_of(&self, index: usize, population: usize) -> usize {
        self.segment_block(index, population).0
    }

    /// Segment of consumer `index` plus its rank within the segment's block
    /// and the block size, `(segment, rank, count)`.
    fn segment_block(&self, index: usize, population: usize) -> (usize, usize, usize) {
        let s = self.weights.len();
        let mut counts = vec![0usize; s];
        let mut rema: Vec<(f64, usize)> = Vec::with_capacity(s);
        let mut assigned = 0usize;
        for (k, w) in self.weights.iter().enumerate() {
            let target = w.to_f64().unwrap_or(0.0) * population as f64;
            counts[k] = target.floor() as usize;
            assigned += counts[k];
            rema.push((target - target.floor(), k));
        }
        rema.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, k) in rema.iter().take(population.saturating_sub(assigned)) {
            counts[k] += 1;
        }
        let mut cum = 0usize;
        for (k, c) in counts.iter().enumerate() {
            if index < cum + c {
                return (k, index - cum, *c);
            }
            cum += c;
        }
        (s - 1, 0, counts[s - 1].max(1))
    }

    /// Effective additive shock of a draw: `-p_j^s / eps_a`.
    pub fn shock(&self, draw: &ConsumerDraw<F>, j: usize) -> Result<F> {
        check_index(j, self.prices[0].len())?;
        match draw {
            ConsumerDraw::Segment { sensitivity, segment } => {
                Ok(-self.prices[*segment][j] * *sensitivity)
            }
            _ => Err(Error::Precondition("multi-segment model expects a segment draw".into())),
        }
    }

    /// Shock matrix for the transferable-utility solvers. The model is
    /// registered non-additive, so `precompute_arum_shocks` refuses it;
    /// this is the model-specific route for the assignment algorithms,
    /// valid because the utility is still separable in `delta`.
    pub fn shock_matrix(&self, sample: &ConsumerSample<F>) -> Result<ShockMatrix<F>> {
        let brands = self.prices[0].len();
        let mut data = Vec::with_capacity(sample.len() * brands);
        for draw in sample.draws() {
            for j in 0..brands {
                data.push(self.shock(draw, j)?);
            }
        }
        ShockMatrix::new(sample.len(), brands, data)
    }
}

impl<F: Scalar> UtilityModel<F> for MultiSegmentModel<F> {
    fn num_alternatives(&self) -> usize {
        self.prices[0].len()
    }

    fn additive(&self) -> bool {
        false
    }

    fn delta_separable(&self) -> bool {
        true
    }

    fn evaluate(&self, draw: &ConsumerDraw<F>, j: usize, delta_j: F) -> Result<F> {
        Ok(delta_j + self.shock(draw, j)?)
    }

    fn invert(&self, draw: &ConsumerDraw<F>, j: usize, u: F) -> Result<F> {
        Ok(u - self.shock(draw, j)?)
    }

    fn sample(&self, rng: &mut ChaCha8Rng, index: usize, population: usize) -> ConsumerDraw<F> {
        let (segment, rank, count) = self.segment_block(index, population);
        // Jittered grid over (0, 1] within the segment block: consumer `rank`
        // draws uniformly from ((rank)/count, (rank+1)/count]. Marginals stay
        // U(0, 1] but the discretization error of the quantile grid drops
        // from order-statistic spacing to 1/count.
        let u = 1.0 - rng.gen::<f64>(); // (0, 1]
        let eps_a = (rank as f64 + u) / count as f64;
        ConsumerDraw::Segment { sensitivity: F::from_f64_lossy(1.0 / eps_a), segment }
    }
}

// ---------------------------------------------------------------------------
// Model dispatch + JSON specification
// ---------------------------------------------------------------------------

/// Runtime-selected model, dispatching the trait over the shipped variants.
#[derive(Debug, Clone)]
pub enum Model<F> {
    Logit(LogitModel),
    PureChar(PureCharModel<F>),
    Vertical(VerticalModel<F>),
    MultiSegment(MultiSegmentModel<F>),
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            Model::Logit($m) => $body,
            Model::PureChar($m) => $body,
            Model::Vertical($m) => $body,
            Model::MultiSegment($m) => $body,
        }
    };
}

impl<F: Scalar> UtilityModel<F> for Model<F> {
    fn num_alternatives(&self) -> usize {
        dispatch!(self, m => UtilityModel::<F>::num_alternatives(m))
    }

    fn additive(&self) -> bool {
        dispatch!(self, m => UtilityModel::<F>::additive(m))
    }

    fn delta_separable(&self) -> bool {
        dispatch!(self, m => UtilityModel::<F>::delta_separable(m))
    }

    fn evaluate(&self, draw: &ConsumerDraw<F>, j: usize, delta_j: F) -> Result<F> {
        dispatch!(self, m => m.evaluate(draw, j, delta_j))
    }

    fn invert(&self, draw: &ConsumerDraw<F>, j: usize, u: F) -> Result<F> {
        dispatch!(self, m => m.invert(draw, j, u))
    }

    fn sample(&self, rng: &mut ChaCha8Rng, index: usize, population: usize) -> ConsumerDraw<F> {
        dispatch!(self, m => m.sample(rng, index, population))
    }
}

/// Serializable model description; the JSON schema is documented in the
/// repository README.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum ModelSpec {
    Logit {
        alternatives: usize,
    },
    Purechar {
        x: Vec<Vec<f64>>,
        means: Vec<f64>,
        stds: Vec<f64>,
    },
    Vertical {
        prices: Vec<f64>,
    },
    Multisegment {
        prices: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
}

impl ModelSpec {
    pub fn build<F: Scalar>(&self) -> Result<Model<F>> {
        let conv = |xs: &[f64]| xs.iter().map(|x| F::from_f64_lossy(*x)).collect::<Vec<F>>();
        match self {
            ModelSpec::Logit { alternatives } => Ok(Model::Logit(LogitModel::new(*alternatives)?)),
            ModelSpec::Purechar { x, means, stds } => Ok(Model::PureChar(PureCharModel::new(
                x.iter().map(|row| conv(row)).collect(),
                conv(means),
                conv(stds),
            )?)),
            ModelSpec::Vertical { prices } => Ok(Model::Vertical(VerticalModel::new(conv(prices))?)),
            ModelSpec::Multisegment { prices, weights } => {
                Ok(Model::MultiSegment(MultiSegmentModel::new(
                    prices.iter().map(|row| conv(row)).collect(),
                    conv(weights),
                )?))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Shock matrix and demand simulation
// ---------------------------------------------------------------------------

/// Dense N x |J0| matrix of additive shocks, row-major.
#[derive(Debug, Clone)]
pub struct ShockMatrix<F> {
    consumers: usize,
    brands: usize,
    data: Vec<F>,
}

impl<F: Scalar> ShockMatrix<F> {
    pub fn new(consumers: usize, brands: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != consumers * brands {
            return Err(Error::Precondition(format!(
                "shock matrix needs {} entries, got {}",
                consumers * brands,
                data.len()
            )));
        }
        Ok(ShockMatrix { consumers, brands, data })
    }

    pub fn consumers(&self) -> usize {
        self.consumers
    }

    pub fn brands(&self) -> usize {
        self.brands
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.brands + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.brands..(i + 1) * self.brands]
    }

    pub fn value_range(&self) -> (F, F) {
        let mut lo = F::infinity();
        let mut hi = F::neg_infinity();
        for v in &self.data {
            if *v < lo {
                lo = *v;
            }
            if *v > hi {
                hi = *v;
            }
        }
        (lo, hi)
    }
}

/// Cache the additive shock table `e_ij = evaluate(draw_i, j, 0)`.
///
/// Only models that declare themselves additive are accepted; the
/// multi-segment model goes through [`MultiSegmentModel::shock_matrix`].
pub fn precompute_arum_shocks<F: Scalar, M: UtilityModel<F>>(
    model: &M,
    sample: &ConsumerSample<F>,
) -> Result<ShockMatrix<F>> {
    if !model.additive() {
        return Err(Error::Unsupported(
            "shock precomputation requires an additive model".into(),
        ));
    }
    let brands = model.num_alternatives();
    let mut data = Vec::with_capacity(sample.len() * brands);
    for draw in sample.draws() {
        for j in 0..brands {
            data.push(model.evaluate(draw, j, F::zero())?);
        }
    }
    ShockMatrix::new(sample.len(), brands, data)
}

/// Shock matrix for the assignment-path algorithms: the additive route when
/// the model allows it, or the model-specific route for the multi-segment
/// model (separable in `delta` but registered non-additive).
pub fn assignment_shocks<F: Scalar>(
    model: &Model<F>,
    sample: &ConsumerSample<F>,
) -> Result<ShockMatrix<F>> {
    match model {
        Model::MultiSegment(m) => m.shock_matrix(sample),
        other => precompute_arum_shocks(other, sample),
    }
}

/// Argmax alternative for one consumer; returns (index, utility, tied_at_max).
/// Ties resolve to the lowest index.
pub(crate) fn argmax_utility<F: Scalar, M: UtilityModel<F>>(
    model: &M,
    draw: &ConsumerDraw<F>,
    delta: &[F],
) -> Result<(usize, F, bool)> {
    let mut best_j = 0;
    let mut best = model.evaluate(draw, 0, delta[0])?;
    let mut tied = false;
    for (j, dj) in delta.iter().enumerate().skip(1) {
        let u = model.evaluate(draw, j, *dj)?;
        if u > best {
            best = u;
            best_j = j;
            tied = false;
        } else if u == best {
            tied = true;
        }
    }
    Ok((best_j, best, tied))
}

/// Per-brand choice counts under `delta`, with exact-tie statistics.
/// Ties are broken by lowest alternative index.
pub fn simulate_demand_counts<F: Scalar, M: UtilityModel<F> + Sync>(
    model: &M,
    sample: &ConsumerSample<F>,
    delta: &DeltaVector<F>,
) -> Result<(Vec<usize>, usize)> {
    if sample.len() == 0 {
        return Err(Error::Precondition("consumer sample is empty".into()));
    }
    let brands = model.num_alternatives();
    if delta.len() != brands {
        return Err(Error::Precondition(format!(
            "delta has {} components, model has {} alternatives",
            delta.len(),
            brands
        )));
    }
    let mut counts = vec![0usize; brands];
    let mut ties = 0usize;
    for draw in sample.draws() {
        let (j, _, tied) = argmax_utility(model, draw, delta.as_slice())?;
        counts[j] += 1;
        if tied {
            ties += 1;
        }
    }
    Ok((counts, ties))
}

/// Empirical demand map: frequencies of utility-maximal alternatives.
pub fn simulate_demand<F: Scalar, M: UtilityModel<F> + Sync>(
    model: &M,
    sample: &ConsumerSample<F>,
    delta: &DeltaVector<F>,
) -> Result<MarketShares<F>> {
    let (counts, _) = simulate_demand_counts(model, sample, delta)?;
    MarketShares::from_counts(&counts, sample.len())
}

/// Closed-form logit inversion: `delta_j = log(s_j / s_0)`.
pub fn logit_closed_form_invert<F: Scalar>(shares: &MarketShares<F>) -> Result<DeltaVector<F>> {
    shares.require_strictly_positive()?;
    let s0 = shares.as_slice()[0];
    let delta: Vec<F> = shares
        .as_slice()
        .iter()
        .map(|s| (*s / s0).ln())
        .collect();
    DeltaVector::new_renormalized(delta)
}
