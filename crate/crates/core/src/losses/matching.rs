use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Optimal injective assignment of ground-truth rows to query columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `assignment[i]` is the query matched to ground truth `i`.
    pub assignment: Vec<usize>,
    pub total_cost: f64,
}

impl MatchResult {
    /// Inverse view: for each of `m` queries, the ground truth it is matched to.
    pub fn query_to_gt(&self, m: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; m];
        for (i, &q) in self.assignment.iter().enumerate() {
            out[q] = Some(i);
        }
        out
    }
}

fn tie_tol(scale: f64) -> f64 {
    1e-9 * scale.max(1.0)
}

fn check(cost: ArrayView2<f64>) -> Result<()> {
    let (n, m) = cost.dim();
    if n > m {
        return Err(Error::Capacity {
            needed: n,
            available: m,
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Domain("matching cost must be finite".into()));
    }
    Ok(())
}

/// Kuhn-Munkres with potentials; rows `n <= m` columns. Returns the column
/// of every row.
fn solve(cost: &Array2<f64>) -> Vec<usize> {
    let (n, m) = cost.dim();
    if n == 0 {
        return Vec::new();
    }
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
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
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

fn sub_optimum(cost: ArrayView2<f64>, rows: &[usize], cols: &[usize]) -> f64 {
    let sub = Array2::from_shape_fn((rows.len(), cols.len()), |(a, b)| cost[[rows[a], cols[b]]]);
    solve(&sub)
        .iter()
        .enumerate()
        .map(|(a, &b)| sub[[a, b]])
        .sum()
}

/// Minimum-cost matching of `N_gt x M` costs. Among optimal assignments the
/// lexicographically smallest `(gt, query)` sequence is returned.
pub fn hungarian_match(cost: ArrayView2<f64>) -> Result<MatchResult> {
    check(cost)?;
    let (n, m) = cost.dim();
    let optimum = sub_optimum(
        cost,
        &(0..n).collect::<Vec<_>>(),
        &(0..m).collect::<Vec<_>>(),
    );
    let tol = tie_tol(cost.iter().fold(0.0f64, |a, c| a.max(c.abs())) * n as f64);
    let mut assignment = Vec::with_capacity(n);
    let mut fixed = 0.0;
    let mut free: Vec<usize> = (0..m).collect();
    for i in 0..n {
        let rest: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for (slot, &q) in free.iter().enumerate() {
            let cols: Vec<usize> = free.iter().copied().filter(|&c| c != q).collect();
            let total = fixed + cost[[i, q]] + sub_optimum(cost, &rest, &cols);
            if total <= optimum + tol {
                chosen = Some(slot);
                break;
            }
        }
        // the optimal completion always exists, so some slot qualifies
        let slot = chosen.unwrap_or(0);
        let q = free.remove(slot);
        fixed += cost[[i, q]];
        assignment.push(q);
    }
    Ok(MatchResult {
        assignment,
        total_cost: fixed,
    })
}

/// Exhaustive search over every injective assignment, in lexicographic
/// order, keeping the first strict improvement.
pub fn brute_force_match(cost: ArrayView2<f64>) -> Result<MatchResult> {
    check(cost)?;
    let (n, m) = cost.dim();
    let tol = tie_tol(cost.iter().fold(0.0f64, |a, c| a.max(c.abs())) * n as f64);
    let mut best: Option<MatchResult> = None;
    let mut current = Vec::with_capacity(n);
    let mut used = vec![false; m];
    fn rec(
        cost: ArrayView2<f64>,
        current: &mut Vec<usize>,
        used: &mut [bool],
        acc: f64,
        tol: f64,
        best: &mut Option<MatchResult>,
    ) {
        let i = current.len();
        if i == cost.nrows() {
            if best.as_ref().map_or(true, |b| acc < b.total_cost - tol) {
                *best = Some(MatchResult {
                    assignment: current.clone(),
                    total_cost: acc,
                });
            }
            return;
        }
        for q in 0..cost.ncols() {
            if !used[q] {
                used[q] = true;
                current.push(q);
                rec(cost, current, used, acc + cost[[i, q]], tol, best);
                current.pop();
                used[q] = false;
            }
        }
    }
    rec(cost, &mut current, &mut used, 0.0, tol, &mut best);
    Ok(best.unwrap_or(MatchResult {
        assignment: Vec::new(),
        total_cost: 0.0,
    }))
}
