//! Kuhn–Munkres assignment on dense square matrices.
//!
//! The solver works on a min-cost matrix via shortest augmenting paths with
//! row/column potentials, O(n³). Among all optimal assignments it returns the
//! lexicographically smallest one: every optimal assignment is a perfect
//! matching on the edges that are tight under the final potentials, so the
//! first solution is rerouted along tight alternating cycles position by
//! position.

use crate::error::{shape_err, KcdError, Result};
use crate::linalg::Matrix;

/// Relative slack under which a reduced cost counts as zero.
const TIGHT_REL_TOL: f64 = 1e-11;

/// Solution of a square assignment problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `cols_for_row[r]` is the column assigned to row `r`.
    pub cols_for_row: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost perfect assignment of rows to columns.
pub fn solve_min(cost: &Matrix) -> Result<Assignment> {
    let n = cost.rows();
    if cost.cols() != n {
        return shape_err(format!("assignment needs a square matrix, got {}x{}", n, cost.cols()));
    }
    if let Some(v) = cost.as_slice().iter().find(|v| !v.is_finite()) {
        return Err(KcdError::InvalidValue(format!("assignment cost {v} is not finite")));
    }
    if n == 0 {
        return Ok(Assignment { cols_for_row: vec![], cost: 0.0 });
    }

    let (mut row_of_col, u, v) = shortest_augmenting_path(cost);
    let scale = cost.as_slice().iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let tol = TIGHT_REL_TOL * if scale > 0.0 { scale } else { 1.0 };
    let tight = |r: usize, c: usize| cost[(r, c)] - u[r] - v[c] <= tol;

    let mut col_of_row = vec![0usize; n];
    for (c, &r) in row_of_col.iter().enumerate() {
        col_of_row[r] = c;
    }
    lexicographic_reroute(n, &tight, &mut col_of_row, &mut row_of_col);

    let total = col_of_row.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum();
    Ok(Assignment { cols_for_row: col_of_row, cost: total })
}

/// Maximum-weight perfect assignment: costs are `max(W) − W`, all nonnegative.
pub fn solve_max(weights: &Matrix) -> Result<Assignment> {
    if let Some(v) = weights.as_slice().iter().find(|v| !v.is_finite()) {
        return Err(KcdError::InvalidValue(format!("assignment weight {v} is not finite")));
    }
    let top = weights.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cost = weights.map(|w| top - w);
    let mut a = solve_min(&cost)?;
    a.cost = a.cols_for_row.iter().enumerate().map(|(r, &c)| weights[(r, c)]).sum();
    Ok(a)
}

/// Returns `(row_of_col, u, v)` with zero-based indices.
fn shortest_augmenting_path(a: &Matrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = a.rows();
    // one-based with a virtual column 0, following the classical statement
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a[(i0 - 1, j - 1)] - u[i0] - v[j];
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

    let row_of_col = (1..=n).map(|j| p[j] - 1).collect();
    (row_of_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Turn any perfect matching on the tight graph into the lexicographically
/// smallest one (ordered by `col_of_row[0], col_of_row[1], ...`).
fn lexicographic_reroute(
    n: usize,
    tight: &impl Fn(usize, usize) -> bool,
    col_of_row: &mut [usize],
    row_of_col: &mut [usize],
) {
    let mut fixed = vec![false; n];
    for r in 0..n {
        let c0 = col_of_row[r];
        // rows that can give up their column and still reach c0 through an
        // alternating path; `next_col[s]` is the column row s moves to
        let mut next_col: Vec<Option<usize>> = vec![None; n];
        let mut queue = Vec::new();
        for s in 0..n {
            if s != r && !fixed[s] && tight(s, c0) {
                next_col[s] = Some(c0);
                queue.push(s);
            }
        }
        let mut head = 0;
        while head < queue.len() {
            let g = queue[head];
            head += 1;
            let freed = col_of_row[g];
            for s in 0..n {
                if s != r && !fixed[s] && next_col[s].is_none() && tight(s, freed) {
                    next_col[s] = Some(freed);
                    queue.push(s);
                }
            }
        }

        let best = (0..c0).find(|&c| {
            let holder = row_of_col[c];
            !fixed[holder] && tight(r, c) && next_col[holder].is_some()
        });
        if let Some(c) = best {
            let mut moves = vec![(r, c)];
            let mut cur = row_of_col[c];
            loop {
                let target = next_col[cur].expect("row on a reachable chain");
                moves.push((cur, target));
                if target == c0 {
                    break;
                }
                cur = row_of_col[target];
            }
            for (row, col) in moves {
                col_of_row[row] = col;
                row_of_col[col] = row;
            }
        }
        fixed[r] = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classic_min_cost() {
        let c = Matrix::from_rows(&[
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ])
        .unwrap();
        let a = solve_min(&c).unwrap();
        assert_eq!(a.cost, 5.0);
        assert_eq!(a.cols_for_row, vec![1, 0, 2]);
    }

    #[test]
    fn all_ties_give_identity() {
        let c = Matrix::zeros(5, 5);
        assert_eq!(solve_min(&c).unwrap().cols_for_row, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn partial_ties_pick_lexicographic_smallest() {
        // optimal value 2 reachable by [1,0,2] and [2,0,1]... only via tight moves
        let w = Matrix::from_rows(&[
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 1.0],
        ])
        .unwrap();
        let a = solve_max(&w).unwrap();
        assert_eq!(a.cost, 3.0);
        assert_eq!(a.cols_for_row, vec![1, 0, 2]);
    }

    #[test]
    fn rejects_nan_and_rectangular() {
        let mut w = Matrix::zeros(2, 2);
        w[(0, 1)] = f64::NAN;
        assert!(matches!(solve_max(&w), Err(KcdError::InvalidValue(_))));
        assert!(matches!(solve_min(&Matrix::zeros(2, 3)), Err(KcdError::ShapeMismatch(_))));
    }
}
