//! Transferable-utility assignment: epsilon-scaled auction to the optimal
//! allocation, then monotone fixed-point sweeps to the sharp lattice bounds.
//!
//! The auction bids on individual jars but exploits that, for an additive
//! model, only the cheapest jar of each brand can be a consumer's target:
//! per-brand min-price heaps keep a bidding round at O(|J| log N).

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use crate::error::{Error, Result};
use crate::market::DeltaVector;
use crate::model::ShockMatrix;
use crate::scalar::Scalar;

/// Bijection between consumers and jars, with each jar carrying a brand.
#[derive(Debug, Clone)]
pub struct Allocation {
    jar_of_consumer: Vec<usize>,
    brand_of_jar: Vec<usize>,
}

impl Allocation {
    pub fn new(jar_of_consumer: Vec<usize>, brand_of_jar: Vec<usize>) -> Result<Self> {
        let n = jar_of_consumer.len();
        if brand_of_jar.len() != n {
            return Err(Error::Precondition("jar and consumer sides must be equal-sized".into()));
        }
        let mut seen = vec![false; n];
        for &k in &jar_of_consumer {
            if k >= n || seen[k] {
                return Err(Error::Precondition("consumer-to-jar map is not a bijection".into()));
            }
            seen[k] = true;
        }
        Ok(Allocation { jar_of_consumer, brand_of_jar })
    }

    pub fn consumers(&self) -> usize {
        self.jar_of_consumer.len()
    }

    pub fn jars(&self) -> usize {
        self.brand_of_jar.len()
    }

    pub fn jar_of_consumer(&self, i: usize) -> usize {
        self.jar_of_consumer[i]
    }

    pub fn brand_of_jar(&self, k: usize) -> usize {
        self.brand_of_jar[k]
    }

    pub fn brand_of_consumer(&self, i: usize) -> usize {
        self.brand_of_jar[self.jar_of_consumer[i]]
    }

    pub fn brands_of_jars(&self) -> &[usize] {
        &self.brand_of_jar
    }

    pub fn brand_usage(&self, brands: usize) -> Result<Vec<usize>> {
        let mut usage = vec![0usize; brands];
        for &k in &self.jar_of_consumer {
            let b = self.brand_of_jar[k];
            if b >= brands {
                return Err(Error::Precondition(format!("jar brand {b} out of range")));
            }
            usage[b] += 1;
        }
        Ok(usage)
    }

    /// Total assignment surplus under a shock matrix.
    pub fn surplus<F: Scalar>(&self, shocks: &ShockMatrix<F>) -> F {
        (0..self.consumers())
            .map(|i| shocks.get(i, self.brand_of_consumer(i)))
            .sum()
    }
}

/// Per-jar prices; at termination `p_k = -delta_{j(k)}` for the jars that
/// define the point inversion.
#[derive(Debug, Clone)]
pub struct PriceVector<F>(Vec<F>);

impl<F: Scalar> PriceVector<F> {
    pub fn as_slice(&self) -> &[F] {
        &self.0
    }

    pub fn get(&self, k: usize) -> F {
        self.0[k]
    }
}

/// Epsilon-scaling schedule for the auction.
#[derive(Debug, Clone, Copy)]
pub struct EpsilonSchedule<F> {
    pub start: F,
    pub shrink: F,
    pub terminal: F,
}

impl<F: Scalar> EpsilonSchedule<F> {
    pub fn new(start: F, shrink: F, terminal: F) -> Result<Self> {
        if !(terminal > F::zero() && terminal <= start) {
            return Err(Error::Config("epsilon schedule needs 0 < terminal <= start".into()));
        }
        if !(shrink > F::zero() && shrink < F::one()) {
            return Err(Error::Config("epsilon shrink factor must lie in (0,1)".into()));
        }
        Ok(EpsilonSchedule { start, shrink, terminal })
    }

    /// Default schedule for a shock matrix: start at a quarter of the value
    /// range, shrink by 1/5 per phase, stop at `terminal`.
    pub fn for_shocks(shocks: &ShockMatrix<F>, terminal: F) -> Result<Self> {
        let (lo, hi) = shocks.value_range();
        let quarter = (hi - lo) / F::from_f64_lossy(4.0);
        let start = if quarter > terminal { quarter } else { terminal };
        EpsilonSchedule::new(start, F::from_f64_lossy(0.2), terminal)
    }
}

struct BrandHeaps<F> {
    // lazy min-heaps of (price, jar), one per brand; stale entries are
    // discarded against the live price table on pop
    heaps: Vec<BinaryHeap<Reverse<(OrdF<F>, usize)>>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF<F>(F);

impl<F: Scalar> Eq for OrdF<F> {}
impl<F: Scalar> PartialOrd for OrdF<F> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<F: Scalar> Ord for OrdF<F> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.partial_cmp(&other.0).expect("finite prices")
    }
}

impl<F: Scalar> BrandHeaps<F> {
    fn build(brand_of_jar: &[usize], prices: &[F], brands: usize) -> Self {
        let mut heaps = vec![BinaryHeap::new(); brands];
        for (k, &b) in brand_of_jar.iter().enumerate() {
            heaps[b].push(Reverse((OrdF(prices[k]), k)));
        }
        BrandHeaps { heaps }
    }

    /// Cheapest live jar of a brand (lowest price, then lowest jar index).
    fn cheapest(&mut self, brand: usize, prices: &[F]) -> (usize, F) {
        let heap = &mut self.heaps[brand];
        loop {
            let &Reverse((OrdF(p), k)) = heap.peek().expect("every brand has a jar");
            if prices[k] == p {
                return (k, p);
            }
            heap.pop();
        }
    }

    /// Price of the second-cheapest live jar of a brand, if the brand has
    /// more than one jar. Needed for the exact bid increment: the runner-up
    /// object for a consumer can be another jar of the same brand.
    fn second_cheapest(&mut self, brand: usize, prices: &[F]) -> Option<F> {
        let top = self.heaps[brand].pop().expect("every brand has a jar");
        let p2 = loop {
            match self.heaps[brand].peek() {
                None => break None,
                Some(&Reverse((OrdF(p), k))) => {
                    if prices[k] == p {
                        break Some(p);
                    }
                    self.heaps[brand].pop();
                }
            }
        };
        self.heaps[brand].push(top);
        p2
    }

    fn reprice(&mut self, brand: usize, jar: usize, price: F) {
        self.heaps[brand].push(Reverse((OrdF(price), jar)));
    }
}

/// Epsilon-scaled auction for the optimal consumer-to-jar assignment.
///
/// Each unassigned consumer bids on the cheapest jar of its best brand; the
/// bid raises the jar's price by the best-versus-second-best margin plus the
/// current epsilon, unseating the incumbent. Phases repeat with shrinking
/// epsilon, prices carried over. At termination the allocation satisfies
/// epsilon-complementary slackness at `schedule.terminal`.
pub fn auction_assign<F: Scalar>(
    shocks: &ShockMatrix<F>,
    counts: &[usize],
    schedule: &EpsilonSchedule<F>,
) -> Result<(Allocation, PriceVector<F>)> {
    let n = shocks.consumers();
    let brands = shocks.brands();
    if counts.len() != brands {
        return Err(Error::Precondition("one count per brand required".into()));
    }
    if counts.iter().sum::<usize>() != n {
        return Err(Error::Precondition(format!(
            "market is not square: {} jars vs {} consumers",
            counts.iter().sum::<usize>(),
            n
        )));
    }
    if counts.iter().any(|c| *c == 0) {
        return Err(Error::Precondition("every brand needs at least one jar".into()));
    }

    let mut brand_of_jar = Vec::with_capacity(n);
    for (j, &m) in counts.iter().enumerate() {
        brand_of_jar.extend(std::iter::repeat(j).take(m));
    }

    let mut prices = vec![F::zero(); n];
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut jar_of: Vec<Option<usize>> = vec![None; n];

    let mut eps = schedule.start;
    loop {
        run_phase(shocks, &brand_of_jar, &mut prices, &mut owner, &mut jar_of, eps);
        if eps <= schedule.terminal {
            break;
        }
        eps = (eps * schedule.shrink).max(schedule.terminal);
    }
    let jar_of_consumer: Vec<usize> =
        jar_of.into_iter().map(|k| k.expect("auction leaves no one unassigned")).collect();
    let allocation = Allocation::new(jar_of_consumer, brand_of_jar)?;
    Ok((allocation, PriceVector(prices)))
}

fn run_phase<F: Scalar>(
    shocks: &ShockMatrix<F>,
    brand_of_jar: &[usize],
    prices: &mut [F],
    owner: &mut [Option<usize>],
    jar_of: &mut [Option<usize>],
    eps: F,
) {
    let n = shocks.consumers();
    let brands = shocks.brands();
    owner.iter_mut().for_each(|o| *o = None);
    jar_of.iter_mut().for_each(|k| *k = None);
    let mut heaps = BrandHeaps::build(brand_of_jar, prices, brands);
    let mut queue: VecDeque<usize> = (0..n).collect();

    while let Some(i) = queue.pop_front() {
        debug_assert!(jar_of[i].is_none());
        let row = shocks.row(i);
        // best and second-best brand by value shock_ij - min price of brand j
        let mut best_brand = 0;
        let mut best_jar = 0;
        let mut best = F::neg_infinity();
        let mut second = F::neg_infinity();
        for j in 0..brands {
            let (k, p) = heaps.cheapest(j, prices);
            let value = row[j] - p;
            if value > best {
                second = best;
                best = value;
                best_brand = j;
                best_jar = k;
            } else if value > second {
                second = value;
            }
        }
        // the runner-up object may be the second-cheapest jar of the best
        // brand rather than another brand's cheapest jar
        if let Some(p2) = heaps.second_cheapest(best_brand, prices) {
            let v2 = row[best_brand] - p2;
            if v2 > second {
                second = v2;
            }
        }
        // single-jar market: finite sentinel one value-span below best
        if second == F::neg_infinity() {
            let (lo, hi) = shocks.value_range();
            second = best - (hi - lo) - F::one();
        }
        let new_price = prices[best_jar] + (best - second) + eps;
        prices[best_jar] = new_price;
        heaps.reprice(best_brand, best_jar, new_price);
        if let Some(prev) = owner[best_jar] {
            jar_of[prev] = None;
            queue.push_back(prev);
        }
        owner[best_jar] = Some(i);
        jar_of[i] = Some(best_jar);
    }
}

/// Point inversion from terminal prices: `delta_j = -min_{k in brand j} p_k`,
/// renormalized so the reference brand sits at zero.
pub fn delta_from_prices<F: Scalar>(
    prices: &PriceVector<F>,
    brand_of_jar: &[usize],
) -> Result<DeltaVector<F>> {
    if prices.as_slice().len() != brand_of_jar.len() {
        return Err(Error::Precondition("one price per jar required".into()));
    }
    let brands = brand_of_jar.iter().copied().max().map_or(0, |b| b + 1);
    let mut min_price = vec![F::infinity(); brands];
    for (k, &b) in brand_of_jar.iter().enumerate() {
        let p = prices.get(k);
        if p < min_price[b] {
            min_price[b] = p;
        }
    }
    if min_price.iter().any(|p| p.is_infinite()) {
        return Err(Error::Precondition("a brand has no jars".into()));
    }
    DeltaVector::new_renormalized(min_price.into_iter().map(|p| -p).collect())
}

const FIXED_POINT_TOL: f64 = 1e-12;

/// Least fixed point of the lower-bound operator: starting from `-inf`
/// payoffs, raise `u_i` to the best achievable utility and `delta_j` to the
/// level demanded by the consumers matched to brand `j`. Converges upward to
/// the sharp lattice lower bound when the allocation is surplus-optimal.
pub fn propagate_lower_bounds<F: Scalar>(
    shocks: &ShockMatrix<F>,
    allocation: &Allocation,
) -> Result<DeltaVector<F>> {
    bound_sweeps(shocks, allocation, Direction::Lower)
}

/// Mirror image: starting from `+inf`, converges downward to the sharp
/// lattice upper bound.
pub fn propagate_upper_bounds<F: Scalar>(
    shocks: &ShockMatrix<F>,
    allocation: &Allocation,
) -> Result<DeltaVector<F>> {
    bound_sweeps(shocks, allocation, Direction::Upper)
}

#[derive(Clone, Copy, PartialEq)]
enum Direction {
    Lower,
    Upper,
}

fn bound_sweeps<F: Scalar>(
    shocks: &ShockMatrix<F>,
    allocation: &Allocation,
    dir: Direction,
) -> Result<DeltaVector<F>> {
    let n = shocks.consumers();
    let brands = shocks.brands();
    if allocation.consumers() != n {
        return Err(Error::Precondition("allocation does not cover the shock matrix".into()));
    }
    let matched: Vec<usize> = (0..n).map(|i| allocation.brand_of_consumer(i)).collect();
    let mut by_brand: Vec<Vec<usize>> = vec![Vec::new(); brands];
    for (i, &b) in matched.iter().enumerate() {
        by_brand[b].push(i);
    }

    let inf = F::infinity();
    let tol = F::from_f64_lossy(FIXED_POINT_TOL);
    let mut u = vec![if dir == Direction::Lower { -inf } else { inf }; n];
    let mut delta = vec![if dir == Direction::Lower { -inf } else { inf }; brands];
    delta[0] = F::zero();

    let max_sweeps = n.saturating_mul(brands).max(4);
    for _ in 0..max_sweeps {
        let mut change = F::zero();
        match dir {
            Direction::Lower => {
                for i in 0..n {
                    let row = shocks.row(i);
                    let mut best = u[i];
                    for j in 0..brands {
                        let v = delta[j] + row[j];
                        if v > best {
                            best = v;
                        }
                    }
                    change = change.max(diff(best, u[i]));
                    u[i] = best;
                }
                for j in 1..brands {
                    let mut d = delta[j];
                    for &i in &by_brand[j] {
                        let v = u[i] - shocks.get(i, j);
                        if v > d {
                            d = v;
                        }
                    }
                    change = change.max(diff(d, delta[j]));
                    delta[j] = d;
                }
            }
            Direction::Upper => {
                for i in 0..n {
                    let b = matched[i];
                    let v = delta[b] + shocks.get(i, b);
                    if v < u[i] {
                        change = change.max(diff(u[i], v));
                        u[i] = v;
                    }
                }
                for j in 1..brands {
                    let mut d = delta[j];
                    for i in 0..n {
                        let v = u[i] - shocks.get(i, j);
                        if v < d {
                            d = v;
                        }
                    }
                    change = change.max(diff(delta[j], d));
                    delta[j] = d;
                }
            }
        }
        if change <= tol {
            if delta.iter().any(|d| d.is_infinite()) {
                return Err(Error::Precondition(
                    "bound iteration stalled at an infinite component".into(),
                ));
            }
            return DeltaVector::new(delta);
        }
    }
    Err(Error::NonConvergence {
        context: format!(
            "bound propagation exceeded {max_sweeps} sweeps; allocation is likely not optimal"
        ),
        last: delta.iter().map(|d| d.to_f64().unwrap_or(f64::NAN)).collect(),
    })
}

/// Change measure that treats a move off infinity as a full change.
fn diff<F: Scalar>(a: F, b: F) -> F {
    if a == b {
        F::zero()
    } else if a.is_infinite() || b.is_infinite() {
        F::infinity()
    } else {
        (a - b).abs()
    }
}

/// Verify epsilon-complementary slackness: every consumer's assigned value
/// is within `eps` of the best available value at the current prices.
pub fn complementary_slackness_violation<F: Scalar>(
    shocks: &ShockMatrix<F>,
    allocation: &Allocation,
    prices: &PriceVector<F>,
) -> F {
    let mut worst = F::zero();
    for i in 0..shocks.consumers() {
        let row = shocks.row(i);
        let k = allocation.jar_of_consumer(i);
        let assigned = row[allocation.brand_of_jar(k)] - prices.get(k);
        let mut best = F::neg_infinity();
        for (kk, &b) in allocation.brands_of_jars().iter().enumerate() {
            let v = row[b] - prices.get(kk);
            if v > best {
                best = v;
            }
        }
        worst = worst.max(best - assigned);
    }
    worst
}
