//! Minimum-cost injective assignment of ground-truth rows to prediction
//! columns.
//!
//! Ties between optimal assignments are broken lexicographically: row 0
//! takes the lowest-indexed column that still admits an optimum, then row 1,
//! and so on. Both solvers implement the same rule so their outputs can be
//! compared exactly.

use crate::error::{Error, Result};

/// Largest row count accepted by [`brute_force_match`].
pub const BRUTE_FORCE_MAX_ROWS: usize = 8;

/// `columns[j]` is the prediction matched to ground-truth object `j`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Assignment {
    pub columns: Vec<usize>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Sum of `cost[j][columns[j]]` in row order.
    pub fn total(&self, cost: &[Vec<f64>]) -> f64 {
        self.columns.iter().enumerate().map(|(j, &c)| cost[j][c]).sum()
    }

    /// `(truth, prediction)` pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.columns.iter().copied().enumerate()
    }
}

fn validate(cost: &[Vec<f64>]) -> Result<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::Invalid("ragged cost matrix".into()));
    }
    if rows > cols {
        return Err(Error::TooManyTargets { rows, cols });
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("cost matrix has non-finite entries".into()));
    }
    Ok((rows, cols))
}

fn tolerance(optimum: f64) -> f64 {
    1e-9 * optimum.abs().max(1.0)
}

/// Shortest augmenting path with potentials, `O(rows² · cols)`.
/// Returns the column of every row.
fn solve(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let (n, m) = (rows.len(), cols.len());
    let a = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = cols[j - 1];
        }
    }
    out
}

fn optimum(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    solve(cost, rows, cols)
        .iter()
        .zip(rows)
        .map(|(&c, &r)| cost[r][c])
        .sum()
}

/// Hungarian algorithm on a `K × N` cost matrix, `K ≤ N`.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let (k, n) = validate(cost)?;
    if k == 0 {
        return Ok(Assignment::default());
    }
    let all_rows: Vec<usize> = (0..k).collect();
    let all_cols: Vec<usize> = (0..n).collect();
    let first = solve(cost, &all_rows, &all_cols);
    let best: f64 = first.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
    let tol = tolerance(best);

    // Fix rows in order, each to the lowest column that still reaches the optimum.
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut fixed_cost = 0.0;
    for r in 0..k {
        let rest_rows: Vec<usize> = (r + 1..k).collect();
        let mut picked = None;
        for c in 0..n {
            if chosen.contains(&c) {
                continue;
            }
            if c == first[r] && chosen == first[..r] {
                picked = Some(c);
                break;
            }
            let rest_cols: Vec<usize> = (0..n).filter(|x| *x != c && !chosen.contains(x)).collect();
            let rest = if rest_rows.is_empty() {
                0.0
            } else {
                optimum(cost, &rest_rows, &rest_cols)
            };
            if fixed_cost + cost[r][c] + rest <= best + tol {
                picked = Some(c);
                break;
            }
        }
        let c = picked.expect("the optimal column is always admissible");
        fixed_cost += cost[r][c];
        chosen.push(c);
    }
    Ok(Assignment { columns: chosen })
}

/// Exhaustive search over all injective maps; `K ≤ 8`.
pub fn brute_force_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let (k, n) = validate(cost)?;
    if k > BRUTE_FORCE_MAX_ROWS {
        return Err(Error::BruteForceTooLarge {
            rows: k,
            max: BRUTE_FORCE_MAX_ROWS,
        });
    }
    if k == 0 {
        return Ok(Assignment::default());
    }
    // Two lexicographic sweeps: the first finds the minimum, the second
    // stops at the first assignment within tolerance of it.
    struct Search<'a> {
        cost: &'a [Vec<f64>],
        current: Vec<usize>,
        used: Vec<bool>,
    }
    impl Search<'_> {
        fn visit(&mut self, partial: f64, on_leaf: &mut dyn FnMut(&[usize], f64) -> bool) -> bool {
            let r = self.current.len();
            if r == self.cost.len() {
                return on_leaf(&self.current, partial);
            }
            for c in 0..self.used.len() {
                if !self.used[c] {
                    self.used[c] = true;
                    self.current.push(c);
                    let stop = self.visit(partial + self.cost[r][c], on_leaf);
                    self.current.pop();
                    self.used[c] = false;
                    if stop {
                        return true;
                    }
                }
            }
            false
        }
    }
    let mut search = Search {
        cost,
        current: Vec::with_capacity(k),
        used: vec![false; n],
    };
    let mut best = f64::INFINITY;
    search.visit(0.0, &mut |_, t| {
        best = best.min(t);
        false
    });
    let tol = tolerance(best);
    let mut columns = Vec::new();
    search.visit(0.0, &mut |cols, t| {
        if t <= best + tol {
            columns = cols.to_vec();
            return true;
        }
        false
    });
    Ok(Assignment { columns })
}
