//! Minimum-cost bipartite assignment.

use crate::error::{Error, Result};

/// Optimal assignment for an `n × m` cost matrix (row-major), `n ≥ m`.
///
/// Returns one `(row, col)` pair per column, sorted by row. The result is
/// deterministic: rows are scanned in index order and only a strictly
/// smaller reduced cost displaces an earlier row. `n < m` is handled by
/// transposing, in which case every row is assigned instead.
pub fn hungarian(cost: &[f64], n: usize, m: usize) -> Result<Vec<(usize, usize)>> {
    if cost.len() != n * m {
        return Err(Error::Dimension(format!(
            "cost matrix has {} entries, expected {n}×{m}",
            cost.len()
        )));
    }
    if let Some(bad) = cost.iter().find(|c| !c.is_finite()) {
        return Err(Error::Contract(format!("non-finite matching cost {bad}")));
    }
    if n == 0 || m == 0 {
        return Ok(Vec::new());
    }
    if n < m {
        let mut t = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                t[j * n + i] = cost[i * m + j];
            }
        }
        let mut pairs: Vec<_> = solve(&t, m, n).into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return Ok(pairs);
    }
    let mut pairs = solve(cost, n, m);
    pairs.sort_unstable();
    Ok(pairs)
}

/// Shortest augmenting paths with potentials. Columns of the `n × m`
/// matrix act as the side being assigned (`m ≤ n`).
fn solve(cost: &[f64], n: usize, m: usize) -> Vec<(usize, usize)> {
    // 1-based: u over columns (m), v over rows (n), p[row] = column
    let inf = f64::INFINITY;
    let at = |col: usize, row: usize| cost[(row - 1) * m + (col - 1)];
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for col in 1..=m {
        p[0] = col;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0, j) - u[i0] - v[j];
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
    (1..=n)
        .filter(|&row| p[row] != 0)
        .map(|row| (row - 1, p[row] - 1))
        .collect()
}

/// Summed cost of an assignment.
pub fn assignment_cost(cost: &[f64], m: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i * m + j]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let pairs = hungarian(&[1.0, 2.0, 3.0, 1.0], 2, 2).unwrap();
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_cost(&[1.0, 2.0, 3.0, 1.0], 2, &pairs), 2.0);
    }

    #[test]
    fn more_rows_than_columns() {
        // column 0 prefers row 2
        let cost = [5.0, 5.0, 1.0];
        assert_eq!(hungarian(&cost, 3, 1).unwrap(), vec![(2, 0)]);
    }

    #[test]
    fn wide_matrix_assigns_every_row() {
        let cost = [3.0, 1.0, 2.0];
        assert_eq!(hungarian(&cost, 1, 3).unwrap(), vec![(0, 1)]);
    }

    #[test]
    fn ties_prefer_low_rows() {
        let cost = [0.0; 6];
        assert_eq!(hungarian(&cost, 3, 2).unwrap(), vec![(0, 0), (1, 1)]);
        assert_eq!(hungarian(&[1.0; 3], 3, 1).unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn non_finite_cost_rejected() {
        assert!(matches!(
            hungarian(&[0.0, f64::NAN], 2, 1),
            Err(Error::Contract(_))
        ));
    }
}
