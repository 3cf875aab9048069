//! Linear-program export and small-instance oracles.
//!
//! The crate does not embed an LP solver. Internal solving goes through the
//! auction and the bound operators; the emitters here exist so the same
//! programs can be cross-validated with an external solver. The text layout
//! is the common LP file format and is documented with a golden file in
//! `docs/lp-format.md`; emission is a deterministic byte stream and
//! `parse_lp` round-trips it exactly.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::market::{DeltaVector, DiscreteMarket, MarketShares};
use crate::model::{simulate_demand_counts, ShockMatrix, UtilityModel};
use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// Document model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rel {
    Ge,
    Le,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinTerm {
    pub coef: f64,
    pub var: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub name: String,
    pub terms: Vec<LinTerm>,
    pub rel: Rel,
    pub rhs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarBound {
    /// Default LP-format bound, `x >= 0`.
    NonNegative,
    Free,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpDocument {
    pub sense: Sense,
    pub objective: Vec<LinTerm>,
    pub rows: Vec<Row>,
    /// Declaration of every variable, in first-use order.
    pub variables: Vec<(String, VarBound)>,
}

impl LpDocument {
    /// Check the declaration invariant: every referenced variable is
    /// declared exactly once.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (name, _) in &self.variables {
            if !seen.insert(name.as_str()) {
                return Err(Error::Precondition(format!("variable {name} declared twice")));
            }
        }
        let check = |terms: &[LinTerm]| -> Result<()> {
            for t in terms {
                if !seen.contains(t.var.as_str()) {
                    return Err(Error::Precondition(format!("undeclared variable {}", t.var)));
                }
            }
            Ok(())
        };
        check(&self.objective)?;
        for row in &self.rows {
            check(&row.terms)?;
        }
        Ok(())
    }

    /// Render to LP-format text. Deterministic for identical documents.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(match self.sense {
            Sense::Minimize => "Minimize\n",
            Sense::Maximize => "Maximize\n",
        });
        out.push_str(" obj:");
        render_terms(&mut out, &self.objective);
        out.push_str("\nSubject To\n");
        for row in &self.rows {
            let _ = write!(out, " {}:", row.name);
            render_terms(&mut out, &row.terms);
            let rel = match row.rel {
                Rel::Ge => ">=",
                Rel::Le => "<=",
                Rel::Eq => "=",
            };
            let _ = writeln!(out, " {} {}", rel, fmt_num(row.rhs));
        }
        out.push_str("Bounds\n");
        // sorted so the rendering is canonical: parse(render(x)) renders
        // identically even though the parser discovers variables in
        // body-appearance order
        let mut frees: Vec<&str> = self
            .variables
            .iter()
            .filter(|(_, b)| *b == VarBound::Free)
            .map(|(n, _)| n.as_str())
            .collect();
        frees.sort_unstable();
        for name in frees {
            let _ = writeln!(out, " {name} free");
        }
        out.push_str("End\n");
        out
    }
}

fn render_terms(out: &mut String, terms: &[LinTerm]) {
    for (k, t) in terms.iter().enumerate() {
        let mag = t.coef.abs();
        let sign = if t.coef < 0.0 {
            " - "
        } else if k == 0 {
            " "
        } else {
            " + "
        };
        out.push_str(sign);
        let _ = write!(out, "{} {}", fmt_num(mag), t.var);
    }
}

/// Shortest round-trip decimal; `parse::<f64>()` of the output recovers the
/// exact bits, which is what makes emit -> parse -> emit byte-identical.
fn fmt_num(x: f64) -> String {
    format!("{x}")
}

// ---------------------------------------------------------------------------
// Parser (round-trip support)
// ---------------------------------------------------------------------------

/// Parse text produced by [`LpDocument::render`]. This is a reader for the
/// emitted subset of the LP format, not a general consumer of third-party
/// files.
pub fn parse_lp(text: &str) -> Result<LpDocument> {
    let mut lines = text.lines().peekable();
    let sense = match lines.next() {
        Some("Minimize") => Sense::Minimize,
        Some("Maximize") => Sense::Maximize,
        other => return Err(Error::Parse(format!("expected objective sense, got {other:?}"))),
    };
    let obj_line = lines
        .next()
        .ok_or_else(|| Error::Parse("missing objective line".into()))?;
    let (obj_name, objective) = parse_row_body(obj_line)?;
    if obj_name != "obj" {
        return Err(Error::Parse(format!("expected obj row, got {obj_name}")));
    }
    if lines.next() != Some("Subject To") {
        return Err(Error::Parse("missing Subject To section".into()));
    }
    let mut rows = Vec::new();
    for line in lines.by_ref() {
        if line == "Bounds" {
            break;
        }
        rows.push(parse_constraint(line)?);
    }
    let mut free = std::collections::HashSet::new();
    for line in lines {
        if line == "End" {
            break;
        }
        let name = line
            .trim()
            .strip_suffix(" free")
            .ok_or_else(|| Error::Parse(format!("bad bounds line: {line}")))?;
        free.insert(name.to_string());
    }
    // reconstruct declarations in first-use order
    let mut variables = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut declare = |var: &str| {
        if seen.insert(var.to_string()) {
            let bound = if free.contains(var) { VarBound::Free } else { VarBound::NonNegative };
            variables.push((var.to_string(), bound));
        }
    };
    for t in &objective {
        declare(&t.var);
    }
    for row in &rows {
        for t in &row.terms {
            declare(&t.var);
        }
    }
    Ok(LpDocument { sense, objective, rows, variables })
}

fn parse_constraint(line: &str) -> Result<Row> {
    let (rest, rel, rhs) = if let Some(idx) = line.rfind(">=") {
        (&line[..idx], Rel::Ge, &line[idx + 2..])
    } else if let Some(idx) = line.rfind("<=") {
        (&line[..idx], Rel::Le, &line[idx + 2..])
    } else if let Some(idx) = line.rfind(" = ") {
        (&line[..idx], Rel::Eq, &line[idx + 2..])
    } else {
        return Err(Error::Parse(format!("constraint without relation: {line}")));
    };
    let rhs: f64 = rhs
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad rhs in: {line}")))?;
    let (name, terms) = parse_row_body(rest)?;
    Ok(Row { name, terms, rel, rhs })
}

fn parse_row_body(text: &str) -> Result<(String, Vec<LinTerm>)> {
    let (name, body) = text
        .trim()
        .split_once(':')
        .ok_or_else(|| Error::Parse(format!("row without name: {text}")))?;
    let mut terms = Vec::new();
    let mut sign = 1.0;
    let mut pending: Option<f64> = None;
    for tok in body.split_whitespace() {
        match tok {
            "+" => sign = 1.0,
            "-" => sign = -1.0,
            _ => {
                if let Ok(v) = tok.parse::<f64>() {
                    if pending.is_some() {
                        return Err(Error::Parse(format!("two coefficients in a row: {text}")));
                    }
                    pending = Some(v);
                } else {
                    let coef = sign * pending.take().unwrap_or(1.0);
                    terms.push(LinTerm { coef, var: tok.to_string() });
                    sign = 1.0;
                }
            }
        }
    }
    if pending.is_some() {
        return Err(Error::Parse(format!("dangling coefficient: {text}")));
    }
    Ok((name.trim().to_string(), terms))
}

// ---------------------------------------------------------------------------
// Exporters
// ---------------------------------------------------------------------------

fn check_square<F: Scalar>(market: &DiscreteMarket<F>, shocks: &ShockMatrix<F>) -> Result<()> {
    if shocks.consumers() != market.n() || shocks.brands() != market.brands() {
        return Err(Error::Precondition("shock matrix does not match the market".into()));
    }
    Ok(())
}

fn shock_f64<F: Scalar>(shocks: &ShockMatrix<F>, i: usize, j: usize) -> f64 {
    shocks.get(i, j).to_f64().unwrap_or(f64::NAN)
}

/// Dual of the assignment-game LP for one market:
/// `min sum_i u_i/N - sum_j (m_j/N) d_j  s.t.  u_i - d_j >= e_ij, d_0 = 0`.
pub fn export_dual_lp<F: Scalar>(
    market: &DiscreteMarket<F>,
    shocks: &ShockMatrix<F>,
) -> Result<LpDocument> {
    export_dual_block(market, shocks, None)
}

fn export_dual_block<F: Scalar>(
    market: &DiscreteMarket<F>,
    shocks: &ShockMatrix<F>,
    block: Option<usize>,
) -> Result<LpDocument> {
    check_square(market, shocks)?;
    let n = market.n();
    let brands = market.brands();
    let nf = n as f64;
    let prefix = |base: &str| match block {
        Some(m) => format!("{base}_m{m}"),
        None => base.to_string(),
    };
    let u = |i: usize| format!("{}_{i}", prefix("u"));
    let d = |j: usize| format!("{}_{j}", prefix("d"));

    let mut objective = Vec::with_capacity(n + brands);
    for i in 0..n {
        objective.push(LinTerm { coef: 1.0 / nf, var: u(i) });
    }
    for (j, &mj) in market.counts().iter().enumerate() {
        objective.push(LinTerm { coef: -(mj as f64) / nf, var: d(j) });
    }

    let mut rows = Vec::with_capacity(n * brands + 1);
    for i in 0..n {
        for j in 0..brands {
            rows.push(Row {
                name: format!("{}_{i}_{j}", prefix("c")),
                terms: vec![
                    LinTerm { coef: 1.0, var: u(i) },
                    LinTerm { coef: -1.0, var: d(j) },
                ],
                rel: Rel::Ge,
                rhs: shock_f64(shocks, i, j),
            });
        }
    }
    rows.push(Row {
        name: prefix("fix_d0"),
        terms: vec![LinTerm { coef: 1.0, var: d(0) }],
        rel: Rel::Eq,
        rhs: 0.0,
    });

    let mut variables = Vec::with_capacity(n + brands);
    for i in 0..n {
        variables.push((u(i), VarBound::Free));
    }
    for j in 0..brands {
        variables.push((d(j), VarBound::Free));
    }
    let doc = LpDocument { sense: Sense::Minimize, objective, rows, variables };
    doc.validate()?;
    Ok(doc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundDirection {
    Max,
    Min,
}

/// Bilevel bound program flattened via strong duality: optimize
/// `sum_j d_j` over the optimal faces of the assignment LP. Constraint
/// blocks: primal marginals over consumers and brands, `pi >= 0` (implicit
/// bounds), dual feasibility, the strong-duality coupling row, and the
/// `d_0 = 0` normalization.
pub fn export_bounds_lp<F: Scalar>(
    market: &DiscreteMarket<F>,
    shocks: &ShockMatrix<F>,
    direction: BoundDirection,
) -> Result<LpDocument> {
    check_square(market, shocks)?;
    let n = market.n();
    let brands = market.brands();
    let nf = n as f64;
    let u = |i: usize| format!("u_{i}");
    let d = |j: usize| format!("d_{j}");
    let pi = |i: usize, j: usize| format!("pi_{i}_{j}");

    let sense = match direction {
        BoundDirection::Max => Sense::Maximize,
        BoundDirection::Min => Sense::Minimize,
    };
    let objective: Vec<LinTerm> =
        (1..brands).map(|j| LinTerm { coef: 1.0, var: d(j) }).collect();

    let mut rows = Vec::new();
    // consumer marginals: sum_j pi_ij = 1/N
    for i in 0..n {
        rows.push(Row {
            name: format!("row_i_{i}"),
            terms: (0..brands).map(|j| LinTerm { coef: 1.0, var: pi(i, j) }).collect(),
            rel: Rel::Eq,
            rhs: 1.0 / nf,
        });
    }
    // brand marginals: sum_i pi_ij = m_j/N
    for (j, &mj) in market.counts().iter().enumerate() {
        rows.push(Row {
            name: format!("row_j_{j}"),
            terms: (0..n).map(|i| LinTerm { coef: 1.0, var: pi(i, j) }).collect(),
            rel: Rel::Eq,
            rhs: mj as f64 / nf,
        });
    }
    // dual feasibility
    for i in 0..n {
        for j in 0..brands {
            rows.push(Row {
                name: format!("dual_{i}_{j}"),
                terms: vec![
                    LinTerm { coef: 1.0, var: u(i) },
                    LinTerm { coef: -1.0, var: d(j) },
                ],
                rel: Rel::Ge,
                rhs: shock_f64(shocks, i, j),
            });
        }
    }
    // strong duality: dual objective equals primal objective
    let mut coupling = Vec::with_capacity(n + brands + n * brands);
    for i in 0..n {
        coupling.push(LinTerm { coef: 1.0 / nf, var: u(i) });
    }
    for (j, &mj) in market.counts().iter().enumerate() {
        coupling.push(LinTerm { coef: -(mj as f64) / nf, var: d(j) });
    }
    for i in 0..n {
        for j in 0..brands {
            let e = shock_f64(shocks, i, j);
            if e != 0.0 {
                coupling.push(LinTerm { coef: -e, var: pi(i, j) });
            }
        }
    }
    rows.push(Row { name: "strong_duality".into(), terms: coupling, rel: Rel::Eq, rhs: 0.0 });
    rows.push(Row {
        name: "fix_d0".into(),
        terms: vec![LinTerm { coef: 1.0, var: d(0) }],
        rel: Rel::Eq,
        rhs: 0.0,
    });

    let mut variables = Vec::new();
    for i in 0..n {
        for j in 0..brands {
            variables.push((pi(i, j), VarBound::NonNegative));
        }
    }
    for i in 0..n {
        variables.push((u(i), VarBound::Free));
    }
    for j in 0..brands {
        variables.push((d(j), VarBound::Free));
    }
    let doc = LpDocument { sense, objective, rows, variables };
    doc.validate()?;
    Ok(doc)
}

/// Combined multi-market dual: the per-market blocks of [`export_dual_lp`]
/// namespaced by market index, giving a block-diagonal constraint matrix and
/// the sum of the per-market objectives.
pub fn export_combined_lp<F: Scalar>(
    markets: &[(&DiscreteMarket<F>, &ShockMatrix<F>)],
) -> Result<LpDocument> {
    if markets.is_empty() {
        return Err(Error::Precondition("combined export needs at least one market".into()));
    }
    let mut objective = Vec::new();
    let mut rows = Vec::new();
    let mut variables = Vec::new();
    for (m, (market, shocks)) in markets.iter().enumerate() {
        let block = export_dual_block(*market, *shocks, Some(m))?;
        objective.extend(block.objective);
        rows.extend(block.rows);
        variables.extend(block.variables);
    }
    let doc = LpDocument { sense: Sense::Minimize, objective, rows, variables };
    doc.validate()?;
    Ok(doc)
}

// ---------------------------------------------------------------------------
// Oracles for small instances
// ---------------------------------------------------------------------------

const BRUTE_FORCE_CAP: usize = 10;

/// Exhaustive search over every assignment of consumers to brands consistent
/// with the jar counts. Returns the maximum total surplus and all optimal
/// brand-assignment vectors (brand per consumer).
pub fn brute_force_oracle<F: Scalar>(
    shocks: &ShockMatrix<F>,
    counts: &[usize],
) -> Result<(F, Vec<Vec<usize>>)> {
    let n = shocks.consumers();
    if n > BRUTE_FORCE_CAP {
        return Err(Error::Refused(format!(
            "brute-force oracle capped at N = {BRUTE_FORCE_CAP}, got {n}"
        )));
    }
    if counts.len() != shocks.brands() || counts.iter().sum::<usize>() != n {
        return Err(Error::Precondition("counts do not match the shock matrix".into()));
    }
    let mut remaining = counts.to_vec();
    let mut current = vec![0usize; n];
    let mut best = F::neg_infinity();
    let mut optima: Vec<Vec<usize>> = Vec::new();
    enumerate(shocks, &mut remaining, &mut current, 0, F::zero(), &mut best, &mut optima);
    Ok((best, optima))
}

fn enumerate<F: Scalar>(
    shocks: &ShockMatrix<F>,
    remaining: &mut [usize],
    current: &mut Vec<usize>,
    i: usize,
    surplus: F,
    best: &mut F,
    optima: &mut Vec<Vec<usize>>,
) {
    if i == shocks.consumers() {
        if surplus > *best {
            *best = surplus;
            optima.clear();
            optima.push(current.clone());
        } else if surplus == *best {
            optima.push(current.clone());
        }
        return;
    }
    for j in 0..remaining.len() {
        if remaining[j] == 0 {
            continue;
        }
        remaining[j] -= 1;
        current[i] = j;
        enumerate(shocks, remaining, current, i + 1, surplus + shocks.get(i, j), best, optima);
        remaining[j] += 1;
    }
}

/// Axis-aligned search box for the free components of delta.
#[derive(Debug, Clone)]
pub struct DeltaBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

const GRID_DIM_CAP: usize = 2;

/// Independent oracle for the identified set: every grid point whose
/// simulated demand counts reproduce the market counts exactly (lowest-index
/// tie-breaking). Feasible only for one or two free dimensions.
pub fn grid_search_identified_set<F: Scalar, M: UtilityModel<F> + Sync>(
    model: &M,
    market: &DiscreteMarket<F>,
    delta_box: &DeltaBox,
    step: f64,
) -> Result<Vec<DeltaVector<F>>> {
    let free = market.brands() - 1;
    if free > GRID_DIM_CAP {
        return Err(Error::Refused(format!(
            "grid search capped at {GRID_DIM_CAP} free dimensions, market has {free}"
        )));
    }
    if delta_box.lower.len() != free || delta_box.upper.len() != free {
        return Err(Error::Precondition("box dimensions must match free components".into()));
    }
    if step <= 0.0 {
        return Err(Error::Precondition("grid step must be positive".into()));
    }
    let axes: Vec<Vec<f64>> = (0..free)
        .map(|k| {
            let mut axis = Vec::new();
            let mut t = 0usize;
            loop {
                let v = delta_box.lower[k] + step * t as f64;
                if v > delta_box.upper[k] + step * 1e-9 {
                    break;
                }
                axis.push(v);
                t += 1;
            }
            axis
        })
        .collect();

    let mut found = Vec::new();
    let mut point = vec![0usize; free];
    'outer: loop {
        let mut delta = vec![F::zero(); market.brands()];
        for (k, &idx) in point.iter().enumerate() {
            delta[k + 1] = F::from_f64_lossy(axes[k][idx]);
        }
        let delta = DeltaVector::new(delta)?;
        let (counts, _) = simulate_demand_counts(model, market.sample(), &delta)?;
        if counts == market.counts() {
            found.push(delta);
        }
        // odometer increment over the grid
        for k in 0..free {
            point[k] += 1;
            if point[k] < axes[k].len() {
                continue 'outer;
            }
            point[k] = 0;
        }
        break;
    }
    Ok(found)
}

/// Convenience wrapper: shares implied by a brand-assignment vector.
pub fn shares_of_assignment<F: Scalar>(brands: usize, assignment: &[usize]) -> Result<MarketShares<F>> {
    let mut counts = vec![0usize; brands];
    for &j in assignment {
        counts[j] += 1;
    }
    MarketShares::from_counts(&counts, assignment.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{discretize_shares, draw_sample, MarketShares};
    use crate::model::{precompute_arum_shocks, LogitModel, Model};

    fn tiny_market(n: usize, shares: &[f64], seed: u64) -> (Model<f64>, DiscreteMarket<f64>, ShockMatrix<f64>) {
        let model = Model::Logit(LogitModel::new(shares.len()).unwrap());
        let s = MarketShares::new(shares.to_vec()).unwrap();
        let counts = discretize_shares(&s, n).unwrap();
        let sample = draw_sample(&model, n, seed).unwrap();
        let market = DiscreteMarket::new(counts, sample).unwrap();
        let shocks = precompute_arum_shocks(&model, market.sample()).unwrap();
        (model, market, shocks)
    }

    #[test]
    fn dual_lp_structure() {
        let (_, market, shocks) = tiny_market(2, &[0.5, 0.5], 9);
        let doc = export_dual_lp(&market, &shocks).unwrap();
        // 4 dual-feasibility rows plus the normalization row
        assert_eq!(doc.rows.len(), 5);
        assert_eq!(doc.variables.len(), 4);
        assert_eq!(doc.rows.last().unwrap().name, "fix_d0");
    }

    #[test]
    fn render_parse_round_trip() {
        let (_, market, shocks) = tiny_market(4, &[0.5, 0.25, 0.25], 21);
        for doc in [
            export_dual_lp(&market, &shocks).unwrap(),
            export_bounds_lp(&market, &shocks, BoundDirection::Max).unwrap(),
            export_combined_lp(&[(&market, &shocks)]).unwrap(),
        ] {
            let text = doc.render();
            let reparsed = parse_lp(&text).unwrap();
            assert_eq!(reparsed.render(), text);
        }
    }

    #[test]
    fn bounds_lp_has_one_coupling_row() {
        let (_, market, shocks) = tiny_market(2, &[0.5, 0.5], 9);
        let doc = export_bounds_lp(&market, &shocks, BoundDirection::Max).unwrap();
        let coupling: Vec<_> =
            doc.rows.iter().filter(|r| r.name == "strong_duality").collect();
        assert_eq!(coupling.len(), 1);
        assert_eq!(coupling[0].rel, Rel::Eq);
    }

    #[test]
    fn combined_lp_is_namespaced() {
        let (_, m1, s1) = tiny_market(2, &[0.5, 0.5], 9);
        let (_, m2, s2) = tiny_market(2, &[0.5, 0.5], 10);
        let doc = export_combined_lp(&[(&m1, &s1), (&m2, &s2)]).unwrap();
        let names: std::collections::HashSet<_> =
            doc.variables.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names.len(), doc.variables.len());
        assert!(names.contains("u_m0_0"));
        assert!(names.contains("d_m1_1"));
    }

    #[test]
    fn brute_force_identity_surplus() {
        let shocks = ShockMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (best, optima) = brute_force_oracle(&shocks, &[1, 1]).unwrap();
        assert_eq!(best, 2.0);
        assert_eq!(optima, vec![vec![0, 1]]);
    }

    #[test]
    fn brute_force_degenerate_costs() {
        let shocks = ShockMatrix::new(3, 2, vec![0.0; 6]).unwrap();
        let (best, optima) = brute_force_oracle(&shocks, &[2, 1]).unwrap();
        assert_eq!(best, 0.0);
        assert_eq!(optima.len(), 3); // choose which consumer gets brand 1
    }

    #[test]
    fn brute_force_refuses_large_instances() {
        let shocks = ShockMatrix::new(11, 1, vec![0.0; 11]).unwrap();
        assert!(matches!(brute_force_oracle(&shocks, &[11]), Err(Error::Refused(_))));
    }
}
