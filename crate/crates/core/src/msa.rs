//! Market-share-adjustment solver: an accelerated deferred-acceptance
//! procedure that moves all jars of a brand simultaneously. The
//! consumer-proposing variant converges to the lattice upper bound; the
//! two-phase variant seeded from that upper bound recovers the lattice
//! lower bound.
//!
//! The loops are implemented with an exact fast-forward: while no consumer's
//! argmax can change, consecutive identical rounds are collapsed into one
//! multi-step update. This matters because the starting values
//! `sup_i U^-1_{e_ij}(U_{i0}(0))` can sit thousands of step sizes above the
//! bound when the shock distribution is heavy-tailed.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::market::{DeltaVector, DiscreteMarket};
use crate::model::{ShockMatrix, UtilityModel};
use crate::scalar::Scalar;

/// Step-size schedule for the adjustment loops.
#[derive(Debug, Clone, Copy)]
pub struct MsaParams<F> {
    /// Initial adjustment factor (utility units).
    pub eta_init: F,
    /// Terminal adjustment factor; the loop stops once eta drops below it.
    pub eta_tol: F,
    /// Safety cap on outer restarts. Convergence of the procedure is not
    /// formally guaranteed, so the solver fails loudly instead of spinning.
    pub max_outer_iterations: usize,
}

impl<F: Scalar> MsaParams<F> {
    pub fn new(eta_init: F, eta_tol: F, max_outer_iterations: usize) -> Result<Self> {
        if !(F::zero() < eta_tol && eta_tol < eta_init) {
            return Err(Error::Config("require 0 < eta_tol < eta_init".into()));
        }
        if max_outer_iterations == 0 {
            return Err(Error::Config("outer iteration cap must be at least 1".into()));
        }
        Ok(MsaParams { eta_init, eta_tol, max_outer_iterations })
    }
}

impl<F: Scalar> Default for MsaParams<F> {
    fn default() -> Self {
        MsaParams {
            eta_init: F::one(),
            eta_tol: F::from_f64_lossy(1e-4),
            max_outer_iterations: 1000,
        }
    }
}

/// One executed adjustment round, for the `--trace` convergence CSV.
/// `round` counts collapsed rounds too, so consecutive rows can jump.
#[derive(Debug, Clone)]
pub struct MsaTraceRow {
    pub round: u64,
    pub eta: f64,
    /// Excess demand per brand: consumers choosing j minus jars of j.
    pub excess_demand: Vec<i64>,
}

/// Lattice upper bound via the consumer-proposing adjustment loop.
pub fn msa_upper<F: Scalar, M: UtilityModel<F>>(
    model: &M,
    market: &DiscreteMarket<F>,
    params: &MsaParams<F>,
) -> Result<DeltaVector<F>> {
    msa_upper_traced(model, market, params, &mut None)
}

pub fn msa_upper_traced<F: Scalar, M: UtilityModel<F>>(
    model: &M,
    market: &DiscreteMarket<F>,
    params: &MsaParams<F>,
    trace: &mut Option<&mut Vec<MsaTraceRow>>,
) -> Result<DeltaVector<F>> {
    let brands = market.brands();
    if brands == 1 {
        return Ok(DeltaVector::zeros(1));
    }
    let table = shock_table(model, market)?;
    let mut delta_init = starting_values(model, market, params.eta_init)?;
    let mut eta_init = params.eta_init;
    let mut round = 0u64;
    let mut budget = ROUND_BUDGET;

    for _ in 0..params.max_outer_iterations {
        let (delta, eta_last) = deferred_acceptance_loop(
            &table,
            market.counts(),
            delta_init.clone(),
            eta_init,
            params.eta_tol,
            trace,
            &mut round,
            &mut budget,
        )?;
        if (1..brands).all(|j| delta[j] < delta_init[j]) {
            return DeltaVector::new(delta);
        }
        // Restart from just above the returned point. eta_last is the
        // smallest step size the loop actually executed (the post-division
        // value below eta_tol would make the restart a no-op).
        delta_init = delta;
        for d in delta_init.iter_mut().skip(1) {
            *d = *d + eta_last + eta_last;
        }
        eta_init = eta_last;
    }
    Err(non_convergence("upper-bound adjustment loop", &delta_init, params))
}

/// Lattice lower bound: descend from the upper bound until every
/// non-reference brand is in excess supply, then ascend at the terminal
/// step size while the reference brand is over-demanded.
pub fn msa_lower<F: Scalar, M: UtilityModel<F>>(
    model: &M,
    market: &DiscreteMarket<F>,
    delta_upper: &DeltaVector<F>,
    params: &MsaParams<F>,
) -> Result<DeltaVector<F>> {
    msa_lower_traced(model, market, delta_upper, params, &mut None)
}

pub fn msa_lower_traced<F: Scalar, M: UtilityModel<F>>(
    model: &M,
    market: &DiscreteMarket<F>,
    delta_upper: &DeltaVector<F>,
    params: &MsaParams<F>,
    trace: &mut Option<&mut Vec<MsaTraceRow>>,
) -> Result<DeltaVector<F>> {
    let brands = market.brands();
    if delta_upper.len() != brands {
        return Err(Error::Precondition("upper bound length does not match market".into()));
    }
    if brands == 1 {
        return Ok(DeltaVector::zeros(1));
    }
    let table = shock_table(model, market)?;
    let m = market.counts();
    let tol = params.eta_tol;
    let mut round = 0u64;
    let mut budget = ROUND_BUDGET;

    // Phase 1: push every non-reference brand into excess supply.
    let mut eng = Engine::new(&table, delta_upper.as_slice().to_vec());
    let mut eta = params.eta_init;
    let mut block = vec![false; brands];
    while eta >= tol {
        spend(&mut budget, &eng, params, "lower-bound descent")?;
        record(trace, round, eta, &eng, m);
        if (1..brands).all(|j| block[j]) {
            let all: Vec<bool> = flag_all(brands);
            eng.shift(&all, eta + eta, true);
            block.iter_mut().for_each(|b| *b = false);
            eta = eta / F::from_f64_lossy(4.0);
            round += 1;
            continue;
        }
        let set: Vec<bool> =
            (0..brands).map(|j| j > 0 && eng.counts[j] >= m[j]).collect();
        let over_reference = eng.counts[0] > m[0];
        for j in 1..brands {
            if eng.counts[j] < m[j] {
                block[j] = over_reference;
            }
        }
        if set.iter().any(|&b| b) {
            let t = eng.safe_rounds(&set, eta, false);
            eng.shift(&set, -(eta * F::from_u64(t).unwrap()), false);
            round += t;
        } else {
            round += 1;
        }
    }

    // Phase 2: ascend at the terminal step until all components strictly
    // increased over their restart point.
    let mut delta_init = eng.delta.clone();
    for _ in 0..params.max_outer_iterations {
        eng.set_delta(delta_init.clone());
        while eng.counts[0] > m[0] {
            spend(&mut budget, &eng, params, "lower-bound ascent")?;
            record(trace, round, tol, &eng, m);
            let set: Vec<bool> =
                (0..brands).map(|j| j > 0 && eng.counts[j] < m[j]).collect();
            let t = eng.safe_rounds(&set, tol, true);
            eng.shift(&set, tol * F::from_u64(t).unwrap(), true);
            round += t;
        }
        if (1..brands).all(|j| eng.delta[j] > delta_init[j]) {
            return DeltaVector::new(eng.delta);
        }
        delta_init = eng.delta.clone();
        for d in delta_init.iter_mut().skip(1) {
            *d = *d - (tol + tol);
        }
    }
    Err(non_convergence("lower-bound ascent loop", &eng.delta, params))
}

// ---------------------------------------------------------------------------
// Inner deferred-acceptance loop (upper bound)
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn deferred_acceptance_loop<F: Scalar>(
    table: &ShockMatrix<F>,
    m: &[usize],
    delta: Vec<F>,
    eta_init: F,
    tol: F,
    trace: &mut Option<&mut Vec<MsaTraceRow>>,
    round: &mut u64,
    budget: &mut u64,
) -> Result<(Vec<F>, F)> {
    let brands = m.len();
    let mut eng = Engine::new(table, delta);
    let mut eta = eta_init;
    let mut eta_last = eta_init;
    while eta >= tol {
        if *budget == 0 {
            return Err(Error::NonConvergence {
                context: "deferred-acceptance loop exhausted its round budget".into(),
                last: eng.delta.iter().map(|d| d.to_f64().unwrap_or(f64::NAN)).collect(),
            });
        }
        *budget -= 1;
        eta_last = eta;
        record(trace, *round, eta, &eng, m);
        if eng.counts[0] < m[0] {
            // reference brand in excess supply: lower the over-demanded brands
            let set: Vec<bool> =
                (0..brands).map(|j| j > 0 && eng.counts[j] > m[j]).collect();
            debug_assert!(set.iter().any(|&b| b));
            let t = eng.safe_rounds(&set, eta, false);
            eng.shift(&set, -(eta * F::from_u64(t).unwrap()), false);
            *round += t;
        } else {
            // overshoot: back everything off and refine the step
            let all = flag_all(brands);
            eng.shift(&all, eta + eta, true);
            eta = eta / F::from_f64_lossy(4.0);
            *round += 1;
        }
    }
    Ok((eng.delta, eta_last))
}

// ---------------------------------------------------------------------------
// Shared machinery
// ---------------------------------------------------------------------------

/// Executed-round budget shared by all loops of one solver call. Generous:
/// with fast-forwarding, real runs execute a few thousand rounds at most.
const ROUND_BUDGET: u64 = 5_000_000;

fn spend<F: Scalar>(
    budget: &mut u64,
    eng: &Engine<'_, F>,
    _params: &MsaParams<F>,
    context: &str,
) -> Result<()> {
    if *budget == 0 {
        return Err(Error::NonConvergence {
            context: format!("{context} exhausted its round budget"),
            last: eng.delta.iter().map(|d| d.to_f64().unwrap_or(f64::NAN)).collect(),
        });
    }
    *budget -= 1;
    Ok(())
}

fn non_convergence<F: Scalar>(context: &str, delta: &[F], params: &MsaParams<F>) -> Error {
    Error::NonConvergence {
        context: format!(
            "{context} did not terminate within {} restarts",
            params.max_outer_iterations
        ),
        last: delta.iter().map(|d| d.to_f64().unwrap_or(f64::NAN)).collect(),
    }
}

fn flag_all(brands: usize) -> Vec<bool> {
    let mut v = vec![true; brands];
    v[0] = false;
    v
}

fn record<F: Scalar>(
    trace: &mut Option<&mut Vec<MsaTraceRow>>,
    round: u64,
    eta: F,
    eng: &Engine<'_, F>,
    m: &[usize],
) {
    if let Some(rows) = trace.as_deref_mut() {
        rows.push(MsaTraceRow {
            round,
            eta: eta.to_f64().unwrap_or(f64::NAN),
            excess_demand: eng
                .counts
                .iter()
                .zip(m)
                .map(|(&c, &mj)| c as i64 - mj as i64)
                .collect(),
        });
    }
}

/// Additive shock table `e_ij = U_{e_ij}(0)`; valid for any model whose
/// utility separates as `delta_j + e_ij`.
fn shock_table<F: Scalar, M: UtilityModel<F>>(
    model: &M,
    market: &DiscreteMarket<F>,
) -> Result<ShockMatrix<F>> {
    if !model.delta_separable() {
        return Err(Error::Unsupported(
            "the adjustment solver requires a delta-separable model".into(),
        ));
    }
    let brands = model.num_alternatives();
    if brands != market.brands() {
        return Err(Error::Precondition("model and market brand counts differ".into()));
    }
    let sample = market.sample();
    let mut data = Vec::with_capacity(sample.len() * brands);
    for draw in sample.draws() {
        for j in 0..brands {
            data.push(model.evaluate(draw, j, F::zero())?);
        }
    }
    ShockMatrix::new(sample.len(), brands, data)
}

/// Starting values above the lattice upper bound.
///
/// Let `v_ij = U^-1_{e_ij}(U_{i0}(0))`, the utility level at which consumer
/// `i` is indifferent between brand `j` and the reference brand. At any
/// rationalizing `delta` exactly `m_0` consumers have the reference brand as
/// their argmax, and each of those satisfies `delta_j <= v_ij` for every
/// `j`; the set's minimum is at most its `m_0`-th largest member, so the
/// `m_0`-th largest `v_ij` (plus a one-step slack) bounds `delta_j` from
/// above. This is far tighter than `sup_i v_ij` when the shock distribution
/// is heavy-tailed, which keeps the initial descent short.
fn starting_values<F: Scalar, M: UtilityModel<F>>(
    model: &M,
    market: &DiscreteMarket<F>,
    slack: F,
) -> Result<Vec<F>> {
    let brands = market.brands();
    let m0 = market.counts()[0];
    let n = market.sample().len();
    debug_assert!(m0 >= 1 && m0 <= n);
    let mut start = vec![F::zero(); brands];
    let mut v = vec![F::zero(); n];
    for (j, s) in start.iter_mut().enumerate().skip(1) {
        for (i, draw) in market.sample().draws().iter().enumerate() {
            let u0 = model.evaluate(draw, 0, F::zero())?;
            v[i] = model.invert(draw, j, u0)?;
        }
        let (_, kth, _) = v.select_nth_unstable_by(m0 - 1, |a, b| {
            b.partial_cmp(a).expect("finite indifference levels")
        });
        *s = *kth + slack;
        if !s.is_finite() {
            return Err(Error::Precondition("non-finite starting values".into()));
        }
    }
    Ok(start)
}

/// Current state of one adjustment loop: utilities, each consumer's argmax
/// brand (ties to the lowest index), and per-brand demand counts.
///
/// Because a move shifts every brand of the moving set by the same amount, a
/// consumer's margin against the static side decays uniformly across rounds.
/// The engine caches, per (set, direction) context, a min-heap of those
/// margins plus an accumulated shift, so locating the next argmax flip costs
/// O(log N) instead of a full O(N |J|) rescan.
struct Engine<'a, F> {
    table: &'a ShockMatrix<F>,
    delta: Vec<F>,
    assign: Vec<usize>,
    counts: Vec<usize>,
    ctx_set: Vec<bool>,
    ctx_up: bool,
    ctx_valid: bool,
    /// (margin at context build, consumer), min-first.
    heap: BinaryHeap<Reverse<(OrdF<F>, usize)>>,
    /// Total absolute shift applied since the context was built.
    sigma: F,
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
        self.0.partial_cmp(&other.0).expect("finite margins")
    }
}

impl<'a, F: Scalar> Engine<'a, F> {
    fn new(table: &'a ShockMatrix<F>, delta: Vec<F>) -> Self {
        let n = table.consumers();
        let mut eng = Engine {
            table,
            delta,
            assign: vec![0; n],
            counts: Vec::new(),
            ctx_set: Vec::new(),
            ctx_up: false,
            ctx_valid: false,
            heap: BinaryHeap::new(),
            sigma: F::zero(),
        };
        eng.full_reassign();
        eng
    }

    fn set_delta(&mut self, delta: Vec<F>) {
        self.delta = delta;
        self.ctx_valid = false;
        self.full_reassign();
    }

    fn full_reassign(&mut self) {
        self.counts = vec![0; self.delta.len()];
        for i in 0..self.table.consumers() {
            let j = self.argmax(i);
            self.assign[i] = j;
            self.counts[j] += 1;
        }
    }

    fn argmax(&self, i: usize) -> usize {
        let row = self.table.row(i);
        let mut best_j = 0;
        let mut best = self.delta[0] + row[0];
        for j in 1..self.delta.len() {
            let u = self.delta[j] + row[j];
            if u > best {
                best = u;
                best_j = j;
            }
        }
        best_j
    }

    /// Margin of consumer `i` (on the static side of the move) before its
    /// argmax can flip: assigned value minus the best value on the moving
    /// side's target (`set[j] == up` selects the side being approached).
    fn margin(&self, i: usize, set: &[bool], up: bool) -> F {
        let row = self.table.row(i);
        let a = self.assign[i];
        let current = self.delta[a] + row[a];
        let mut other = F::neg_infinity();
        for (j, &in_set) in set.iter().enumerate() {
            if in_set != up {
                continue;
            }
            let u = self.delta[j] + row[j];
            if u > other {
                other = u;
            }
        }
        current - other
    }

    fn ensure_context(&mut self, set: &[bool], up: bool) {
        if self.ctx_valid && self.ctx_up == up && self.ctx_set == set {
            return;
        }
        self.ctx_set = set.to_vec();
        self.ctx_up = up;
        self.sigma = F::zero();
        self.heap.clear();
        for i in 0..self.table.consumers() {
            if set[self.assign[i]] == up {
                // on the moving side for a downward move / already on the
                // target for an upward one: cannot be displaced
                continue;
            }
            let g = self.margin(i, set, up);
            if g.is_finite() {
                self.heap.push(Reverse((OrdF(g), i)));
            }
        }
        self.ctx_valid = true;
    }

    /// Number of consecutive rounds (at least 1) for which moving the `set`
    /// brands by `eta` per round provably changes no consumer's argmax
    /// before the final round.
    fn safe_rounds(&mut self, set: &[bool], eta: F, up: bool) -> u64 {
        self.ensure_context(set, up);
        let min_gap = match self.heap.peek() {
            Some(&Reverse((OrdF(g), _))) => g - self.sigma,
            None => F::infinity(),
        };
        let ratio = (min_gap / eta).to_f64().unwrap_or(1.0);
        if !ratio.is_finite() || ratio <= 1.0 {
            1
        } else {
            ((ratio.ceil() as u64).saturating_sub(1)).max(1)
        }
    }

    /// Apply a total change of `amount` to the `set` brands and restore the
    /// argmax invariant. Only consumers whose cached margin is exhausted are
    /// re-evaluated; flipped consumers leave the context's population.
    fn shift(&mut self, set: &[bool], amount: F, up: bool) {
        self.ensure_context(set, up);
        for (j, &in_set) in set.iter().enumerate() {
            if in_set {
                self.delta[j] = self.delta[j] + amount;
            }
        }
        self.sigma = self.sigma + amount.abs();
        // exact ties keep their assignment on index order; re-key them for
        // the next round instead of re-popping within this one
        let mut keep = Vec::new();
        while let Some(&Reverse((OrdF(g), i))) = self.heap.peek() {
            if g > self.sigma {
                break;
            }
            self.heap.pop();
            let a = self.assign[i];
            let j = self.argmax(i);
            if j != a {
                self.counts[a] -= 1;
                self.counts[j] += 1;
                self.assign[i] = j;
            } else {
                let g2 = self.margin(i, set, up);
                keep.push(Reverse((OrdF(g2 + self.sigma), i)));
            }
        }
        self.heap.extend(keep);
    }
}
