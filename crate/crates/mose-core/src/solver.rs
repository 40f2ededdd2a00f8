//! Coupling solvers for the inner transport problem.
//!
//! The relaxed constraint set bounds every row marginal by `gamma` and pins
//! the column marginals to the label frequencies `v`. Three solvers cover it:
//!
//! * [`solve_gamma_one`] — the `gamma = 1` fast path: move each label's mass
//!   to its nearest prediction. Exactly optimal, `O(N)` per label.
//! * [`solve_relaxed_greedy`] — the greedy strategy for `gamma < 1`: process
//!   labels in ascending order of their minimum cost and fill predictions in
//!   ascending cost order subject to the row bound. Feasible, near-optimal.
//! * [`solve_exact_relaxed`] / [`solve_exact_transport`] — a transportation
//!   simplex used as the exact reference and by the matched-IoU metric.
//!
//! Ties are broken toward the lowest index everywhere so results are
//! reproducible.

use crate::ad;
use crate::error::SolverError;

/// Pairwise ground-cost matrix, `N` predictions by `M` labels.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    n: usize,
    m: usize,
    c: Vec<f64>,
    /// Optional tag naming the cost function that produced the matrix.
    pub provenance: Option<String>,
}

impl CostMatrix {
    /// Entries must be finite and nonnegative.
    pub fn new(n: usize, m: usize, c: Vec<f64>) -> Result<Self, SolverError> {
        if c.len() != n * m {
            return Err(SolverError::InvalidInput(format!(
                "cost matrix {n}x{m} needs {} entries, got {}",
                n * m,
                c.len()
            )));
        }
        for (idx, &v) in c.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(SolverError::InvalidInput(format!(
                    "cost entry ({}, {}) = {v} must be finite and >= 0",
                    idx / m,
                    idx % m
                )));
            }
        }
        Ok(CostMatrix { n, m, c, provenance: None })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, SolverError> {
        let n = rows.len();
        let m = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != m) {
            return Err(SolverError::InvalidInput("ragged cost matrix".into()));
        }
        Self::new(n, m, rows.iter().flatten().copied().collect())
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.m
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.c[i * self.m + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.c
    }

    fn max_abs(&self) -> f64 {
        self.c.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
    }
}

/// A nonnegative transport plan with its declared row bound.
#[derive(Debug, Clone)]
pub struct CouplingMatrix {
    n: usize,
    m: usize,
    p: Vec<f64>,
    /// Row-marginal bound the plan was solved under (1 means unbounded).
    pub gamma: f64,
}

impl CouplingMatrix {
    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.m
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.m + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.p
    }

    pub fn row_marginals(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.p[i * self.m..(i + 1) * self.m].iter().sum())
            .collect()
    }

    pub fn col_marginals(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.m];
        for i in 0..self.n {
            for (j, vj) in v.iter_mut().enumerate() {
                *vj += self.p[i * self.m + j];
            }
        }
        v
    }

    pub fn total_mass(&self) -> f64 {
        self.p.iter().sum()
    }

    pub fn objective(&self, c: &CostMatrix) -> f64 {
        assert_eq!((self.n, self.m), (c.n, c.m), "coupling/cost shape mismatch");
        self.p.iter().zip(&c.c).map(|(p, c)| p * c).sum()
    }

    /// Verify the relaxed constraints: column marginals equal `v`, row
    /// marginals below `gamma` (when `gamma < 1`), all entries nonnegative,
    /// total mass 1.
    pub fn check_relaxed(&self, v: &[f64], tol: f64) -> Result<(), SolverError> {
        if self.p.iter().any(|&x| x < -tol) {
            return Err(SolverError::InvalidInput("negative coupling entry".into()));
        }
        for (j, (&got, &want)) in self.col_marginals().iter().zip(v).enumerate() {
            if (got - want).abs() > tol {
                return Err(SolverError::InvalidInput(format!(
                    "column marginal {j}: {got} != {want}"
                )));
            }
        }
        if self.gamma < 1.0 {
            for (i, &r) in self.row_marginals().iter().enumerate() {
                if r > self.gamma + tol {
                    return Err(SolverError::InvalidInput(format!(
                        "row marginal {i}: {r} exceeds gamma {}",
                        self.gamma
                    )));
                }
            }
        }
        if (self.total_mass() - 1.0).abs() > tol {
            return Err(SolverError::InvalidInput(format!(
                "total mass {} != 1",
                self.total_mass()
            )));
        }
        Ok(())
    }
}

fn validate_marginal(v: &[f64], name: &str) -> Result<(), SolverError> {
    if v.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(SolverError::InvalidInput(format!("{name} must be nonnegative and finite")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(SolverError::InvalidInput(format!("{name} sums to {s}, expected 1")));
    }
    Ok(())
}

/// Optimal plan for the relaxed set at `gamma = 1`: each label's mass goes
/// to its nearest prediction (ties to the lowest row index).
pub fn solve_gamma_one(c: &CostMatrix, v: &[f64]) -> CouplingMatrix {
    assert_eq!(v.len(), c.m, "marginal length mismatch");
    let mut p = vec![0.0; c.n * c.m];
    for j in 0..c.m {
        let mut best = 0usize;
        for i in 1..c.n {
            if c.at(i, j) < c.at(best, j) {
                best = i;
            }
        }
        p[best * c.m + j] = v[j];
    }
    CouplingMatrix { n: c.n, m: c.m, p, gamma: 1.0 }
}

/// Greedy solver for the relaxed set with `gamma < 1`.
///
/// Labels are processed in ascending order of their minimum cost; each
/// label fills predictions in ascending cost order, spilling residual mass
/// to the next-cheapest prediction with remaining row capacity. Dispatches
/// to [`solve_gamma_one`] when `gamma = 1`.
pub fn solve_relaxed_greedy(
    c: &CostMatrix,
    v: &[f64],
    gamma: f64,
) -> Result<CouplingMatrix, SolverError> {
    if v.len() != c.m {
        return Err(SolverError::InvalidInput(format!(
            "marginal length {} != {} columns",
            v.len(),
            c.m
        )));
    }
    validate_marginal(v, "v")?;
    if gamma > 1.0 + 1e-12 {
        return Err(SolverError::InvalidInput(format!("gamma {gamma} > 1")));
    }
    if (c.n as f64) * gamma < 1.0 - 1e-12 {
        return Err(SolverError::Infeasible(format!(
            "N*gamma = {} < 1: row capacity cannot carry the label mass",
            c.n as f64 * gamma
        )));
    }
    if gamma >= 1.0 - 1e-12 {
        return Ok(solve_gamma_one(c, v));
    }

    // Sort labels by their minimum cost over predictions, ascending.
    let min_cost: Vec<f64> = (0..c.m)
        .map(|j| (0..c.n).map(|i| c.at(i, j)).fold(f64::INFINITY, f64::min))
        .collect();
    let mut label_order: Vec<usize> = (0..c.m).collect();
    label_order.sort_by(|&a, &b| {
        min_cost[a].partial_cmp(&min_cost[b]).unwrap().then(a.cmp(&b))
    });

    let mut p = vec![0.0; c.n * c.m];
    let mut row_load = vec![0.0f64; c.n];
    for &j in &label_order {
        let mut rows: Vec<usize> = (0..c.n).collect();
        rows.sort_by(|&a, &b| c.at(a, j).partial_cmp(&c.at(b, j)).unwrap().then(a.cmp(&b)));
        let mut need = v[j];
        for &i in &rows {
            if need <= 0.0 {
                break;
            }
            let cap = gamma - row_load[i];
            if cap <= 0.0 {
                continue;
            }
            let take = need.min(cap);
            p[i * c.m + j] += take;
            row_load[i] += take;
            need -= take;
        }
        if need > 1e-9 {
            return Err(SolverError::Infeasible(format!(
                "label {j} left {need} mass unplaced under gamma {gamma}"
            )));
        }
    }
    Ok(CouplingMatrix { n: c.n, m: c.m, p, gamma })
}

/// Exact transportation plan with equality marginals on both sides, via
/// the network simplex specialized to the bipartite transportation graph.
pub fn solve_exact_transport(
    c: &CostMatrix,
    u: &[f64],
    v: &[f64],
) -> Result<CouplingMatrix, SolverError> {
    if u.len() != c.n || v.len() != c.m {
        return Err(SolverError::InvalidInput("marginal lengths do not match cost matrix".into()));
    }
    if u.iter().chain(v).any(|&x| !x.is_finite() || x < 0.0) {
        return Err(SolverError::InvalidInput("marginals must be nonnegative and finite".into()));
    }
    let (su, sv): (f64, f64) = (u.iter().sum(), v.iter().sum());
    if (su - sv).abs() > 1e-6 * su.max(sv).max(1.0) {
        return Err(SolverError::Infeasible(format!(
            "unbalanced transportation problem: supplies {su} vs demands {sv}"
        )));
    }
    // Rebalance demands exactly onto the supply total so the initial basis
    // closes; the adjustment is within the caller's tolerance.
    let scale = if sv > 0.0 { su / sv } else { 1.0 };
    let v_bal: Vec<f64> = v.iter().map(|x| x * scale).collect();

    let flow = transportation_simplex(c.n, c.m, &c.c, u, &v_bal)?;
    Ok(CouplingMatrix { n: c.n, m: c.m, p: flow, gamma: 1.0 })
}

/// Exact solver for the relaxed set (row marginals bounded by `gamma`),
/// encoded as an equality-constrained problem with a zero-cost slack column
/// absorbing the unused row capacity `N*gamma - 1`.
pub fn solve_exact_relaxed(
    c: &CostMatrix,
    v: &[f64],
    gamma: f64,
) -> Result<CouplingMatrix, SolverError> {
    if v.len() != c.m {
        return Err(SolverError::InvalidInput("marginal length mismatch".into()));
    }
    validate_marginal(v, "v")?;
    let slack = c.n as f64 * gamma - 1.0;
    if slack < -1e-12 {
        return Err(SolverError::Infeasible(format!(
            "N*gamma = {} < 1: relaxed polytope is empty",
            c.n as f64 * gamma
        )));
    }
    let slack = slack.max(0.0);

    let mut ext = Vec::with_capacity(c.n * (c.m + 1));
    for i in 0..c.n {
        ext.extend_from_slice(&c.c[i * c.m..(i + 1) * c.m]);
        ext.push(0.0);
    }
    let u = vec![gamma; c.n];
    let mut v_ext = v.to_vec();
    v_ext.push(slack);
    // Rebalance demands onto the exact row-capacity total.
    let su = c.n as f64 * gamma;
    let sv: f64 = v_ext.iter().sum();
    if sv > 0.0 {
        let scale = su / sv;
        for x in v_ext.iter_mut() {
            *x *= scale;
        }
    }

    let flow = transportation_simplex(c.n, c.m + 1, &ext, &u, &v_ext)?;
    let mut p = vec![0.0; c.n * c.m];
    for i in 0..c.n {
        p[i * c.m..(i + 1) * c.m].copy_from_slice(&flow[i * (c.m + 1)..i * (c.m + 1) + c.m]);
    }
    Ok(CouplingMatrix { n: c.n, m: c.m, p, gamma })
}

/// Transportation simplex over dense `n x m` costs with balanced marginals.
///
/// The basis is a spanning tree of the bipartite supply/demand graph,
/// seeded by the northwest-corner rule. Entering arcs take the most
/// negative reduced cost (switching to Bland's rule if pivots stall),
/// leaving arcs take the minimum flow with lowest-index tie-breaking.
fn transportation_simplex(
    n: usize,
    m: usize,
    cost: &[f64],
    supply: &[f64],
    demand: &[f64],
) -> Result<Vec<f64>, SolverError> {
    let cells = n * m;
    let mut flow = vec![0.0f64; cells];
    let mut basic = vec![false; cells];

    // Northwest-corner initial basis: walk from (0,0) to (n-1,m-1) moving
    // one index at a time; exactly n+m-1 cells become basic.
    {
        let mut su = supply.to_vec();
        let mut sv = demand.to_vec();
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let t = su[i].min(sv[j]).max(0.0);
            flow[i * m + j] = t;
            basic[i * m + j] = true;
            su[i] -= t;
            sv[j] -= t;
            if i == n - 1 && j == m - 1 {
                break;
            }
            if (su[i] <= sv[j] && i < n - 1) || j == m - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    let max_abs = cost.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let tol = (n + m).max(16) as f64 * 4.0 * f64::EPSILON * (1.0 + max_abs);

    // Node ids: rows 0..n, columns n..n+m.
    let nodes = n + m;
    let mut row_u = vec![0.0f64; n];
    let mut col_w = vec![0.0f64; m];
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    let mut parent = vec![usize::MAX; nodes];
    let mut order = Vec::with_capacity(nodes);

    let soft_cap = 200 * (n + m) * (n + m);
    let hard_cap = 4 * soft_cap + 10_000;
    let mut iter = 0usize;
    loop {
        iter += 1;
        if iter > hard_cap {
            return Err(SolverError::NoConvergence(format!(
                "transportation simplex exceeded {hard_cap} pivots"
            )));
        }

        // Rebuild tree adjacency and duals from the basic cells.
        for a in adj.iter_mut() {
            a.clear();
        }
        for i in 0..n {
            for j in 0..m {
                if basic[i * m + j] {
                    adj[i].push(n + j);
                    adj[n + j].push(i);
                }
            }
        }
        order.clear();
        parent.fill(usize::MAX);
        order.push(0);
        parent[0] = 0;
        let mut head = 0;
        while head < order.len() {
            let x = order[head];
            head += 1;
            for &y in &adj[x] {
                if parent[y] == usize::MAX {
                    parent[y] = x;
                    order.push(y);
                }
            }
        }
        if order.len() != nodes {
            // A disconnected basis means a degenerate component carries zero
            // mass; stitch it with an artificial zero-flow basic cell.
            let mut stitched = false;
            'stitch: for i in 0..n {
                for j in 0..m {
                    let (ri, cj) = (parent[i] != usize::MAX, parent[n + j] != usize::MAX);
                    if ri != cj {
                        basic[i * m + j] = true;
                        stitched = true;
                        break 'stitch;
                    }
                }
            }
            if !stitched {
                return Err(SolverError::NoConvergence("basis lost connectivity".into()));
            }
            continue;
        }
        row_u[0] = 0.0;
        for &x in order.iter().skip(1) {
            let p = parent[x];
            if x < n {
                // x is a row, parent is a column: u_i = c_ij - w_j.
                row_u[x] = cost[x * m + (p - n)] - col_w[p - n];
            } else {
                col_w[x - n] = cost[p * m + (x - n)] - row_u[p];
            }
        }

        // Entering arc: most negative reduced cost (Bland after soft cap).
        let bland = iter > soft_cap;
        let mut enter = None;
        let mut best = -tol;
        'scan: for i in 0..n {
            for j in 0..m {
                if basic[i * m + j] {
                    continue;
                }
                let r = cost[i * m + j] - row_u[i] - col_w[j];
                if r < best {
                    best = r;
                    enter = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                }
            }
        }
        let (ei, ej) = match enter {
            Some(e) => e,
            None => break,
        };

        // Unique tree path from row ei to column ej; the entering arc closes
        // the cycle. Even path positions gain theta, odd positions lose it.
        let path = tree_path(ei, n + ej, &adj, nodes);
        let mut cycle: Vec<(usize, usize, bool)> = Vec::with_capacity(path.len());
        // path alternates row, col, row, col ... starting at ei, ending at ej.
        let mut gain = false; // first tree arc (ei -> first col) is a losing arc
        for w in path.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (i, j) = if a < n { (a, b - n) } else { (b, a - n) };
            cycle.push((i, j, gain));
            gain = !gain;
        }

        let mut theta = f64::INFINITY;
        let mut leave: Option<(usize, usize)> = None;
        for &(i, j, g) in &cycle {
            if !g {
                let f = flow[i * m + j];
                let take = match leave {
                    None => true,
                    Some(l) => f < theta || (f == theta && (i, j) < l),
                };
                if take {
                    theta = theta.min(f);
                    leave = Some((i, j));
                }
            }
        }
        let (li, lj) = leave.expect("cycle must contain a leaving arc");
        let theta = theta.max(0.0);

        flow[ei * m + ej] += theta;
        basic[ei * m + ej] = true;
        for &(i, j, g) in &cycle {
            if g {
                flow[i * m + j] += theta;
            } else {
                flow[i * m + j] -= theta;
            }
        }
        flow[li * m + lj] = 0.0;
        basic[li * m + lj] = false;
    }

    for f in flow.iter_mut() {
        if *f < 0.0 {
            *f = 0.0;
        }
    }
    Ok(flow)
}

/// Unique path between two nodes of the basis tree (BFS parents).
fn tree_path(from: usize, to: usize, adj: &[Vec<usize>], nodes: usize) -> Vec<usize> {
    let mut parent = vec![usize::MAX; nodes];
    let mut queue = std::collections::VecDeque::new();
    parent[from] = from;
    queue.push_back(from);
    while let Some(x) = queue.pop_front() {
        if x == to {
            break;
        }
        for &y in &adj[x] {
            if parent[y] == usize::MAX {
                parent[y] = x;
                queue.push_back(y);
            }
        }
    }
    let mut path = vec![to];
    let mut x = to;
    while x != from {
        x = parent[x];
        path.push(x);
    }
    path.reverse();
    path
}

/// Result of a Hungarian assignment on the padded square matrix.
#[derive(Debug, Clone)]
pub struct Assignment {
    /// For each real row, the real column it is matched to (`None` when the
    /// row is matched to padding).
    pub row_to_col: Vec<Option<usize>>,
    /// Total cost over real cells, summed in row order.
    pub total_cost: f64,
}

/// Minimum-cost perfect matching on the square matrix obtained by padding
/// a rectangular cost matrix with zero-cost cells.
pub fn hungarian(c: &CostMatrix) -> Assignment {
    let dim = c.n.max(c.m);
    let a = |i: usize, j: usize| -> f64 {
        if i < c.n && j < c.m {
            c.at(i, j)
        } else {
            0.0
        }
    };

    // Potential-based shortest augmenting path formulation, 1-indexed with
    // index 0 as the virtual start column/row.
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; dim + 1];
    let mut v = vec![0.0f64; dim + 1];
    let mut p = vec![0usize; dim + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; dim + 1];
    for i in 1..=dim {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; dim + 1];
        let mut used = vec![false; dim + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=dim {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=dim {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![None; c.n];
    for j in 1..=dim {
        let i = p[j];
        if i >= 1 && i - 1 < c.n && j - 1 < c.m {
            row_to_col[i - 1] = Some(j - 1);
        }
    }
    let total_cost = row_to_col
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| c.at(i, j)))
        .sum();
    Assignment { row_to_col, total_cost }
}

/// `KL(p || u)` between probability-mass vectors, `u` clamped below at
/// 1e-12 before the log and `0 log 0 := 0`.
pub fn kl_marginal(p: &[f64], u: &[f64]) -> f64 {
    assert_eq!(p.len(), u.len(), "kl_marginal length mismatch");
    let (sp, su): (f64, f64) = (p.iter().sum(), u.iter().sum());
    assert!(
        (sp - 1.0).abs() <= 1e-6 && (su - 1.0).abs() <= 1e-6,
        "kl_marginal expects probability vectors (sums {sp}, {su})"
    );
    ad::kl_divergence(p, u)
}

/// Gradient of [`kl_marginal`] with respect to `u`.
pub fn kl_marginal_grad_u(p: &[f64], u: &[f64]) -> Vec<f64> {
    ad::kl_divergence_grad_u(p, u)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[&[f64]]) -> CostMatrix {
        CostMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn gamma_one_single_cell() {
        let c = cm(&[&[0.7]]);
        let p = solve_gamma_one(&c, &[1.0]);
        assert_eq!(p.values(), &[1.0]);
    }

    #[test]
    fn gamma_one_picks_nearest_prediction() {
        let c = cm(&[&[0.2], &[0.5]]);
        let p = solve_gamma_one(&c, &[1.0]);
        assert_eq!(p.values(), &[1.0, 0.0]);
        assert!((p.objective(&c) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn gamma_one_dominant_row_takes_everything() {
        let c = cm(&[&[0.9, 0.8, 0.7], &[0.1, 0.2, 0.3], &[0.5, 0.5, 0.5]]);
        let v = [0.2, 0.3, 0.5];
        let p = solve_gamma_one(&c, &v);
        assert_eq!(&p.values()[3..6], &v);
        assert!(p.values()[..3].iter().all(|&x| x == 0.0));
        assert!(p.values()[6..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gamma_one_tie_goes_to_lowest_index() {
        let c = cm(&[&[0.4], &[0.4], &[0.4]]);
        let p = solve_gamma_one(&c, &[1.0]);
        assert_eq!(p.values(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn greedy_trivial_and_dispatch() {
        let c = cm(&[&[0.3]]);
        let p = solve_relaxed_greedy(&c, &[1.0], 1.0).unwrap();
        assert_eq!(p.values(), &[1.0]);
    }

    #[test]
    fn greedy_respects_row_bound() {
        let c = cm(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let p = solve_relaxed_greedy(&c, &[0.5, 0.5], 0.5).unwrap();
        p.check_relaxed(&[0.5, 0.5], 1e-9).unwrap();
        // row 0 can only carry gamma = 0.5; the rest spills to row 1.
        let rows = p.row_marginals();
        assert!((rows[0] - 0.5).abs() < 1e-12);
        assert!((rows[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn greedy_infeasible_gamma_is_an_error() {
        let c = cm(&[&[0.0], &[1.0]]);
        let err = solve_relaxed_greedy(&c, &[1.0], 0.3).unwrap_err();
        assert!(matches!(err, SolverError::Infeasible(_)));
    }

    #[test]
    fn exact_transport_identity_case() {
        let c = cm(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let p = solve_exact_transport(&c, &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((p.at(0, 0) - 0.5).abs() < 1e-12);
        assert!((p.at(1, 1) - 0.5).abs() < 1e-12);
        assert!(p.objective(&c).abs() < 1e-12);
    }

    #[test]
    fn exact_transport_1x1() {
        let c = cm(&[&[0.42]]);
        let p = solve_exact_transport(&c, &[1.0], &[1.0]).unwrap();
        assert_eq!(p.values(), &[1.0]);
    }

    #[test]
    fn exact_relaxed_matches_gamma_one_at_gamma_one() {
        let c = cm(&[&[0.3, 0.9], &[0.8, 0.1], &[0.5, 0.5]]);
        let v = [0.6, 0.4];
        let fast = solve_gamma_one(&c, &v);
        let exact = solve_exact_relaxed(&c, &v, 1.0).unwrap();
        assert!((fast.objective(&c) - exact.objective(&c)).abs() < 1e-12);
    }

    #[test]
    fn hungarian_diagonal_zeros() {
        let c = cm(&[&[0.0, 1.0, 1.0], &[1.0, 0.0, 1.0], &[1.0, 1.0, 0.0]]);
        let a = hungarian(&c);
        assert_eq!(a.total_cost, 0.0);
        assert_eq!(a.row_to_col, vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn hungarian_equal_costs_fixed_total() {
        let c = cm(&[&[0.7; 4], &[0.7; 4], &[0.7; 4], &[0.7; 4]]);
        let a = hungarian(&c);
        assert!((a.total_cost - 4.0 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn kl_marginal_zero_and_log2() {
        assert_eq!(kl_marginal(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        let v = kl_marginal(&[1.0, 0.0], &[0.5, 0.5]);
        assert!((v - 2.0f64.ln()).abs() < 1e-15);
    }
}
