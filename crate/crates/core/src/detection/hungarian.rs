use crate::error::{param_err, Result};

/// Minimum-cost assignment for an `n × m` cost matrix given row-major.
///
/// Returns `min(n, m)` `(row, col)` pairs sorted by row. Costs must be finite.
pub fn hungarian_match(cost: &[f64], n: usize, m: usize) -> Result<Vec<(usize, usize)>> {
    if cost.len() != n * m {
        return param_err(format!("cost has {} entries, expected {n}x{m}", cost.len()));
    }
    if let Some(v) = cost.iter().find(|v| !v.is_finite()) {
        return param_err(format!("non-finite cost {v}"));
    }
    if n == 0 || m == 0 {
        return Ok(Vec::new());
    }
    if n <= m {
        Ok(assign_rows(|i, j| cost[i * m + j], n, m)
            .into_iter()
            .enumerate()
            .collect())
    } else {
        let cols = assign_rows(|j, i| cost[i * m + j], m, n);
        let mut pairs: Vec<(usize, usize)> =
            cols.into_iter().enumerate().map(|(j, i)| (i, j)).collect();
        pairs.sort_unstable();
        Ok(pairs)
    }
}

/// Shortest augmenting path assignment with potentials; requires `n <= m`.
/// Returns the column assigned to each row.
fn assign_rows(cost: impl Fn(usize, usize) -> f64, n: usize, m: usize) -> Vec<usize> {
    // 1-based arrays with index 0 as the virtual source
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
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &[f64], m: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i * m + j]).sum()
}
