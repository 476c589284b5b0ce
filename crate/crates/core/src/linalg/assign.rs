use super::Matrix;
use crate::error::{Error, Result};

/// A partial permutation of rows onto columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn col_for_row(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|(r, _)| *r == row).map(|&(_, c)| c)
    }

    pub fn row_for_col(&self, col: usize) -> Option<usize> {
        self.pairs.iter().find(|(_, c)| *c == col).map(|&(r, _)| r)
    }
}

/// Minimum-cost assignment of `min(rows, cols)` rows to distinct columns.
///
/// The problem is padded to a square with zero-cost dummy rows or columns and
/// solved with the shortest-augmenting-path Hungarian method. Among all
/// optimal assignments the lexicographically smallest pair list is returned:
/// the dual potentials identify the tight edges, and rows are then fixed in
/// order to their smallest tight column that still admits a perfect tight
/// matching of the remainder.
pub fn hungarian_assign(cost: &Matrix) -> Result<Assignment> {
    if !cost.is_finite() {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }
    let (n_rows, n_cols) = cost.shape();
    let n = n_rows.max(n_cols);
    let c = |i: usize, j: usize| -> f64 {
        if i < n_rows && j < n_cols {
            cost[(i, j)]
        } else {
            0.0
        }
    };

    let (row_pot, col_pot, mut col_of) = solve_square(n, &c);
    let tol = 1e-9 * (1.0 + cost.max_abs());
    let tight = |i: usize, j: usize| c(i, j) - row_pot[i] - col_pot[j] <= tol;

    let mut row_of = vec![0; n];
    for (i, &j) in col_of.iter().enumerate() {
        row_of[j] = i;
    }

    for i in 0..n_rows {
        let current = col_of[i];
        for j in 0..current {
            if !tight(i, j) {
                continue;
            }
            if j >= n_cols && current >= n_cols {
                break;
            }
            // Row i takes column j; the displaced owner must reach `current`
            // through tight edges without disturbing rows already fixed.
            let owner = row_of[j];
            if owner < i {
                continue;
            }
            let mut visited = vec![false; n];
            visited[j] = true;
            let mut path = Vec::new();
            if find_path(owner, current, i, &tight, &row_of, &mut visited, &mut path, n) {
                for &(r, col) in path.iter().rev() {
                    col_of[r] = col;
                    row_of[col] = r;
                }
                col_of[i] = j;
                row_of[j] = i;
                break;
            }
        }
    }

    let pairs: Vec<(usize, usize)> = (0..n_rows)
        .filter(|&i| col_of[i] < n_cols)
        .map(|i| (i, col_of[i]))
        .collect();
    let total_cost = pairs.iter().map(|&(i, j)| cost[(i, j)]).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Alternating-path search: moves `row` onto a tight column so that, after a
/// chain of displacements, `target` (the column freed by the fixed row) ends up
/// occupied. Rows `<= fixed` are never moved.
#[allow(clippy::too_many_arguments)]
fn find_path(
    row: usize,
    target: usize,
    fixed: usize,
    tight: &impl Fn(usize, usize) -> bool,
    row_of: &[usize],
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
    n: usize,
) -> bool {
    for col in 0..n {
        if visited[col] || !tight(row, col) {
            continue;
        }
        visited[col] = true;
        if col == target {
            path.push((row, col));
            return true;
        }
        let next = row_of[col];
        if next > fixed && find_path(next, target, fixed, tight, row_of, visited, path, n) {
            path.push((row, col));
            return true;
        }
    }
    false
}

/// Square Hungarian method. Returns row potentials, column potentials and the
/// column assigned to each row; `c(i, j) - u[i] - v[j] >= 0` with equality on
/// the assignment.
fn solve_square(n: usize, c: &impl Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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

    let mut col_of = vec![0; n];
    for j in 1..=n {
        col_of[p[j] - 1] = j - 1;
    }
    (u[1..].to_vec(), v[1..].to_vec(), col_of)
}
