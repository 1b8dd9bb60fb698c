//! Exact transport distances between weighted point clouds.
//!
//! * `w1`: equal-size uniform clouds go through a dense Jonker–Volgenant
//!   assignment; everything else through a network simplex on a sparse
//!   nearest-neighbour arc set that is grown by full pricing until every pair
//!   has non-negative reduced cost. Both paths finish with a dual-feasibility
//!   certificate over all pairs.
//! * `winf`: bisection over the sorted pairwise distances with a perfect
//!   matching (uniform, equal sizes) or max-flow (general weights) feasibility
//!   test at each threshold.

mod assignment;
mod bottleneck;
mod coupled;
mod network_simplex;

use serde::Serialize;

use crate::error::{invalid, Error, Result};

pub use assignment::{lap_dense, Assignment};
pub use bottleneck::{hopcroft_karp, MaxFlow};
pub use coupled::{coupled_sup_distance, i_alpha_diag, j_alpha_diag, j_alpha_rows};
pub use network_simplex::{NetworkSimplex, SolveStatus};

/// Dual-feasibility slack accepted by the optimality certificate.
pub const CERTIFICATE_TOL: f64 = 1e-9;

/// Points in `R^dim` with non-negative weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedCloud {
    pub dim: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl WeightedCloud {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let c = Self { dim, points, weights };
        c.validate()?;
        Ok(c)
    }

    /// Equal weights `1/K`.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Self {
        let k = points.len() / dim.max(1);
        Self {
            dim,
            weights: vec![1.0 / k as f64; k],
            points,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.points.len() % self.dim != 0 || self.points.is_empty() {
            return Err(invalid("cloud.points", "length must be a positive multiple of dim"));
        }
        if self.weights.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: self.weights.len(),
            });
        }
        if self.points.iter().any(|v| !v.is_finite()) {
            return Err(invalid("cloud.points", "must be finite"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(invalid("cloud.weights", "must be finite and non-negative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::MassMismatch(total - 1.0));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn is_uniform(&self) -> bool {
        let w0 = 1.0 / self.len() as f64;
        self.weights.iter().all(|w| (w - w0).abs() <= 1e-15 * w0.max(1e-300) * 4.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    W1,
    Winf,
}

/// Optimal plan and its cost.
#[derive(Clone, Debug, Serialize)]
pub struct CouplingResult {
    pub kind: DistanceKind,
    pub cost: f64,
    /// `(i, j, mass)` with `i` indexing the first cloud.
    pub plan: Vec<(usize, usize, f64)>,
    pub n_a: usize,
    pub n_b: usize,
}

impl CouplingResult {
    /// Largest deviation of the plan marginals from the cloud weights.
    pub fn marginal_error(&self, a: &WeightedCloud, b: &WeightedCloud) -> f64 {
        let mut ra = vec![0.0; a.len()];
        let mut rb = vec![0.0; b.len()];
        for &(i, j, m) in &self.plan {
            ra[i] += m;
            rb[j] += m;
        }
        ra.iter()
            .zip(&a.weights)
            .chain(rb.iter().zip(&b.weights))
            .map(|(x, w)| (x - w).abs())
            .fold(0.0, f64::max)
    }

    /// JSON report `{kind, cost, n_a, n_b, discretization_error?}`.
    pub fn report(&self, discretization_error: Option<f64>) -> serde_json::Value {
        let mut v = serde_json::json!({
            "kind": self.kind,
            "cost": self.cost,
            "n_a": self.n_a,
            "n_b": self.n_b,
        });
        if let Some(e) = discretization_error {
            v["discretization_error"] = serde_json::json!(e);
        }
        v
    }
}

#[inline]
pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist2(a, b).sqrt()
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        let d = a[k] - b[k];
        s += d * d;
    }
    s
}

fn check_pair(a: &WeightedCloud, b: &WeightedCloud) -> Result<()> {
    a.validate()?;
    b.validate()?;
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch {
            expected: a.dim,
            got: b.dim,
        });
    }
    let gap = a.weights.iter().sum::<f64>() - b.weights.iter().sum::<f64>();
    if gap.abs() > 1e-10 {
        return Err(Error::MassMismatch(gap));
    }
    Ok(())
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Integer supplies proportional to the weights of both clouds, with equal
/// totals, and the mass carried by one unit.
fn integer_supplies(a: &WeightedCloud, b: &WeightedCloud) -> (Vec<i64>, Vec<i64>, f64) {
    if a.is_uniform() && b.is_uniform() {
        let (na, nb) = (a.len() as u64, b.len() as u64);
        let g = gcd(na, nb);
        let sa = vec![(nb / g) as i64; a.len()];
        let sb = vec![(na / g) as i64; b.len()];
        let total = (na / g) * nb;
        return (sa, sb, 1.0 / total as f64);
    }
    const SCALE: i64 = 1 << 40;
    let round = |w: &[f64]| -> Vec<i64> {
        let total: f64 = w.iter().sum();
        let raw: Vec<f64> = w.iter().map(|x| x / total * SCALE as f64).collect();
        let mut out: Vec<i64> = raw.iter().map(|x| x.floor() as i64).collect();
        let mut rest = SCALE - out.iter().sum::<i64>();
        let mut order: Vec<usize> = (0..w.len()).collect();
        order.sort_by(|&i, &j| (raw[j] - raw[j].floor()).total_cmp(&(raw[i] - raw[i].floor())).then(i.cmp(&j)));
        for &i in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            if rest > 0 {
                out[i] += 1;
                rest -= 1;
            } else if out[i] > 0 {
                out[i] -= 1;
                rest += 1;
            }
        }
        out
    };
    (round(&a.weights), round(&b.weights), 1.0 / SCALE as f64)
}

/// Exact Wasserstein-1 distance.
pub fn w1(a: &WeightedCloud, b: &WeightedCloud) -> Result<CouplingResult> {
    check_pair(a, b)?;
    if a.len() == b.len() && a.is_uniform() && b.is_uniform() {
        return w1_assignment(a, b);
    }
    w1_network(a, b)
}

fn w1_assignment(a: &WeightedCloud, b: &WeightedCloud) -> Result<CouplingResult> {
    let n = a.len();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = dist(a.point(i), b.point(j));
        }
    }
    let sol = lap_dense(n, &cost)?;
    // certificate: c_ij - u_i - v_j >= -tol everywhere
    for i in 0..n {
        for j in 0..n {
            let slack = cost[i * n + j] - sol.u[i] - sol.v[j];
            if slack < -CERTIFICATE_TOL {
                return Err(Error::Solver(format!("assignment dual infeasible at ({i}, {j}): {slack:e}")));
            }
        }
    }
    let m = 1.0 / n as f64;
    let mut total = 0.0;
    let plan: Vec<_> = (0..n)
        .map(|i| {
            let j = sol.row_to_col[i];
            total += cost[i * n + j];
            (i, j, m)
        })
        .collect();
    Ok(CouplingResult {
        kind: DistanceKind::W1,
        cost: total * m,
        plan,
        n_a: n,
        n_b: n,
    })
}

/// Candidate arcs: for each point its `k` nearest points of the other cloud,
/// together with the largest distance between the clouds.
fn knn_arcs(a: &WeightedCloud, b: &WeightedCloud, k: usize) -> (Vec<(usize, usize)>, f64) {
    let (na, nb) = (a.len(), b.len());
    let ka = k.min(nb);
    let kb = k.min(na);
    // best-k lists kept sorted by distance, ties by index
    let mut best_a: Vec<Vec<(f64, usize)>> = vec![Vec::with_capacity(ka + 1); na];
    let mut best_b: Vec<Vec<(f64, usize)>> = vec![Vec::with_capacity(kb + 1); nb];
    let push = |list: &mut Vec<(f64, usize)>, cap: usize, d: f64, idx: usize| {
        if list.len() == cap && d >= list[cap - 1].0 {
            return;
        }
        let pos = list.partition_point(|&(x, _)| x <= d);
        list.insert(pos, (d, idx));
        if list.len() > cap {
            list.pop();
        }
    };
    let mut max_d2: f64 = 0.0;
    for i in 0..na {
        let pa = a.point(i);
        for j in 0..nb {
            // squared distances order the same way
            let d = dist2(pa, b.point(j));
            max_d2 = max_d2.max(d);
            push(&mut best_a[i], ka, d, j);
            push(&mut best_b[j], kb, d, i);
        }
    }
    let mut arcs: Vec<(usize, usize)> = Vec::with_capacity(na * ka + nb * kb);
    for (i, l) in best_a.iter().enumerate() {
        arcs.extend(l.iter().map(|&(_, j)| (i, j)));
    }
    for (j, l) in best_b.iter().enumerate() {
        arcs.extend(l.iter().map(|&(_, i)| (i, j)));
    }
    arcs.sort_unstable();
    arcs.dedup();
    (arcs, max_d2.sqrt())
}

fn w1_network(a: &WeightedCloud, b: &WeightedCloud) -> Result<CouplingResult> {
    let (na, nb) = (a.len(), b.len());
    let (sa, sb, unit) = integer_supplies(a, b);
    let mut supply: Vec<i64> = sa;
    supply.extend(sb.iter().map(|s| -s));
    let (mut arcs, max_dist) = knn_arcs(a, b, 8);
    let mut costs: Vec<f64> = arcs.iter().map(|&(i, j)| dist(a.point(i), b.point(j))).collect();
    let endpoints: Vec<(usize, usize)> = arcs.iter().map(|&(i, j)| (i, na + j)).collect();
    let mut ns = NetworkSimplex::with_cost_bound(na + nb, &endpoints, &costs, &supply, max_dist)?;
    let mut present: std::collections::HashSet<(usize, usize)> = arcs.iter().copied().collect();
    const MAX_ROUNDS: usize = 64;
    for _round in 0..MAX_ROUNDS {
        let status = ns.run();
        let pi = ns.potentials();
        // full pricing: most negative reduced cost c_ij + pi_i - pi_j per row and per column
        let mut row_best = vec![(-CERTIFICATE_TOL, usize::MAX); na];
        let mut col_best = vec![(-CERTIFICATE_TOL, usize::MAX); nb];
        for (i, rb) in row_best.iter_mut().enumerate() {
            let pa = a.point(i);
            for (j, cb) in col_best.iter_mut().enumerate() {
                // rc < -tol needs dist < pi_j - pi_i - tol; skip the rest cheaply
                let t = pi[na + j] - pi[i] - CERTIFICATE_TOL;
                if t <= 0.0 || dist2(pa, b.point(j)) >= t * t {
                    continue;
                }
                let rc = dist(pa, b.point(j)) + pi[i] - pi[na + j];
                if rc < rb.0 {
                    *rb = (rc, j);
                }
                if rc < cb.0 {
                    *cb = (rc, i);
                }
            }
        }
        let mut added: Vec<(usize, usize)> = row_best
            .iter()
            .enumerate()
            .filter(|(_, r)| r.1 != usize::MAX)
            .map(|(i, r)| (i, r.1))
            .chain(col_best.iter().enumerate().filter(|(_, c)| c.1 != usize::MAX).map(|(j, c)| (c.1, j)))
            .filter(|p| !present.contains(p))
            .collect();
        added.sort_unstable();
        added.dedup();
        if added.is_empty() {
            if status != SolveStatus::Optimal {
                return Err(Error::Solver(format!("network simplex ended with status {status:?}")));
            }
            let flows = ns.flows();
            let mut plan = Vec::new();
            let mut total = 0.0;
            for (e, &(i, j)) in arcs.iter().enumerate() {
                if flows[e] > 0 {
                    let m = flows[e] as f64 * unit;
                    total += m * costs[e];
                    plan.push((i, j, m));
                }
            }
            plan.sort_by_key(|&(i, j, _)| (i, j));
            return Ok(CouplingResult {
                kind: DistanceKind::W1,
                cost: total,
                plan,
                n_a: na,
                n_b: nb,
            });
        }
        let new_costs: Vec<f64> = added.iter().map(|&(i, j)| dist(a.point(i), b.point(j))).collect();
        let new_ends: Vec<(usize, usize)> = added.iter().map(|&(i, j)| (i, na + j)).collect();
        ns.add_arcs(&new_ends, &new_costs)?;
        present.extend(added.iter().copied());
        arcs.extend(added);
        costs.extend(new_costs);
    }
    Err(Error::Solver("column generation did not converge".into()))
}

/// Exact bottleneck (W-infinity) distance.
pub fn winf(a: &WeightedCloud, b: &WeightedCloud) -> Result<CouplingResult> {
    check_pair(a, b)?;
    let (na, nb) = (a.len(), b.len());
    let mut d = Vec::with_capacity(na * nb);
    for i in 0..na {
        for j in 0..nb {
            d.push(dist(a.point(i), b.point(j)));
        }
    }
    let mut sorted = d.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    sorted.dedup();
    let equal = na == nb && a.is_uniform() && b.is_uniform();
    let supplies = if equal { None } else { Some(integer_supplies(a, b)) };
    let feasible = |t: f64| -> Option<Vec<(usize, usize, f64)>> {
        if equal {
            let adj: Vec<Vec<usize>> = (0..na)
                .map(|i| (0..nb).filter(|&j| d[i * nb + j] <= t).collect())
                .collect();
            let m = hopcroft_karp(na, nb, &adj);
            if m.iter().all(|x| x.is_some()) {
                let w = 1.0 / na as f64;
                Some(m.iter().enumerate().map(|(i, j)| (i, j.unwrap(), w)).collect())
            } else {
                None
            }
        } else {
            let (sa, sb, unit) = supplies.as_ref().unwrap();
            let total: i64 = sa.iter().sum();
            let (s, snk) = (na + nb, na + nb + 1);
            let mut g = MaxFlow::new(na + nb + 2);
            for (i, &x) in sa.iter().enumerate() {
                g.add_edge(s, i, x);
            }
            for (j, &x) in sb.iter().enumerate() {
                g.add_edge(na + j, snk, x);
            }
            let mut pair_edges = Vec::new();
            for i in 0..na {
                for j in 0..nb {
                    if d[i * nb + j] <= t {
                        pair_edges.push((i, j, g.add_edge(i, na + j, total)));
                    }
                }
            }
            if g.max_flow(s, snk) == total {
                Some(
                    pair_edges
                        .into_iter()
                        .filter_map(|(i, j, e)| {
                            let f = g.flow(e);
                            (f > 0).then(|| (i, j, f as f64 * unit))
                        })
                        .collect(),
                )
            } else {
                None
            }
        }
    };
    // the answer is at least the largest nearest-neighbour distance
    let mut lo_val = 0.0f64;
    for i in 0..na {
        lo_val = lo_val.max((0..nb).map(|j| d[i * nb + j]).fold(f64::INFINITY, f64::min));
    }
    for j in 0..nb {
        lo_val = lo_val.max((0..na).map(|i| d[i * nb + j]).fold(f64::INFINITY, f64::min));
    }
    let mut lo = sorted.partition_point(|&x| x < lo_val);
    let mut hi = sorted.len() - 1;
    let mut best = feasible(sorted[hi]).ok_or_else(|| Error::Solver("no feasible plan at the largest distance".into()))?;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        match feasible(sorted[mid]) {
            Some(plan) => {
                hi = mid;
                best = plan;
            }
            None => lo = mid + 1,
        }
    }
    if best.iter().any(|&(i, j, _)| d[i * nb + j] > sorted[hi]) {
        best = feasible(sorted[hi]).expect("threshold verified feasible");
    }
    let cost = best.iter().map(|&(i, j, _)| d[i * nb + j]).fold(0.0, f64::max);
    Ok(CouplingResult {
        kind: DistanceKind::Winf,
        cost,
        plan: best,
        n_a: na,
        n_b: nb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(dim: usize, pts: &[f64]) -> WeightedCloud {
        WeightedCloud::uniform(dim, pts.to_vec())
    }

    #[test]
    fn two_diracs() {
        let a = cloud(2, &[0.0, 0.0]);
        let b = cloud(2, &[3.0, 4.0]);
        assert_eq!(w1(&a, &b).unwrap().cost, 5.0);
        assert_eq!(winf(&a, &b).unwrap().cost, 5.0);
    }

    #[test]
    fn identical_clouds() {
        let a = cloud(2, &[0.0, 0.0, 1.0, 2.0, -1.0, 0.5]);
        let r = w1(&a, &a).unwrap();
        assert_eq!(r.cost, 0.0);
        for &(i, j, _) in &r.plan {
            assert_eq!(i, j);
        }
        assert_eq!(winf(&a, &a).unwrap().cost, 0.0);
    }

    #[test]
    fn winf_line_example() {
        let a = cloud(1, &[0.0, 1.0]);
        let b = cloud(1, &[0.4, 0.5]);
        let r = winf(&a, &b).unwrap();
        assert_eq!(r.cost, 0.5);
        let mut plan: Vec<_> = r.plan.iter().map(|&(i, j, _)| (i, j)).collect();
        plan.sort();
        assert_eq!(plan, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn unequal_sizes_use_network() {
        // one point against two: mass splits
        let a = cloud(1, &[0.0]);
        let b = cloud(1, &[1.0, 3.0]);
        let r = w1(&a, &b).unwrap();
        assert!((r.cost - 2.0).abs() < 1e-15);
        assert!(r.marginal_error(&a, &b) < 1e-15);
        assert_eq!(winf(&a, &b).unwrap().cost, 3.0);
        // three against two on a line: sorted quantile coupling
        let a = cloud(1, &[0.0, 1.0, 2.0]);
        let b = cloud(1, &[0.5, 1.5]);
        let r = w1(&a, &b).unwrap();
        // quantile functions differ by 0.5 on a set of measure 1
        assert!((r.cost - 0.5).abs() < 1e-14, "{}", r.cost);
        assert!(r.marginal_error(&a, &b) < 1e-12);
    }

    #[test]
    fn general_weights() {
        let a = WeightedCloud::new(1, vec![0.0, 10.0], vec![0.25, 0.75]).unwrap();
        let b = WeightedCloud::new(1, vec![1.0, 9.0], vec![0.5, 0.5]).unwrap();
        let r = w1(&a, &b).unwrap();
        // 0.25 moves 0->1, 0.25 moves 10->1, 0.5 moves 10->9
        let expect = 0.25 * 1.0 + 0.25 * 9.0 + 0.5 * 1.0;
        assert!((r.cost - expect).abs() < 1e-12, "{}", r.cost);
        assert!(r.marginal_error(&a, &b) < 1e-10);
        assert_eq!(winf(&a, &b).unwrap().cost, 9.0);
    }

    #[test]
    fn rejects_mass_mismatch() {
        assert!(WeightedCloud::new(1, vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
        let a = cloud(1, &[0.0]);
        let b = cloud(2, &[0.0, 1.0]);
        assert!(w1(&a, &b).is_err());
    }

    #[test]
    fn network_matches_assignment() {
        // same instance through both solvers
        let pts_a: Vec<f64> = (0..40).map(|k| ((k * 37 % 101) as f64 / 101.0).sin()).collect();
        let pts_b: Vec<f64> = (0..40).map(|k| ((k * 53 % 97) as f64 / 97.0).cos()).collect();
        let a = cloud(2, &pts_a);
        let b = cloud(2, &pts_b);
        let lap = w1_assignment(&a, &b).unwrap();
        let ns = w1_network(&a, &b).unwrap();
        assert!((lap.cost - ns.cost).abs() < 1e-12, "{} vs {}", lap.cost, ns.cost);
    }

    #[test]
    fn report_json() {
        let a = cloud(2, &[0.0, 0.0]);
        let b = cloud(2, &[3.0, 4.0]);
        let v = w1(&a, &b).unwrap().report(Some(0.01));
        assert_eq!(v["kind"], "w1");
        assert_eq!(v["cost"], 5.0);
        assert_eq!(v["n_a"], 1);
        assert_eq!(v["discretization_error"], 0.01);
    }
}
