//! Minimum-cost injective assignment of rows to columns (rows ≤ cols), shortest
//! augmenting path form of the Hungarian method with row/column potentials.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `cols_of_row[i]` is the column assigned to row `i`.
    pub cols_of_row: Vec<usize>,
    /// Sum of `cost[i][cols_of_row[i]]` in row order.
    pub total_cost: f64,
}

pub fn solve(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::ShapeMismatch("ragged cost matrix".into()));
    }
    if n > m {
        return Err(Error::Precondition(format!(
            "{n} rows cannot be injectively assigned to {m} columns"
        )));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Precondition("cost matrix has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(Assignment {
            cols_of_row: Vec::new(),
            total_cost: 0.0,
        });
    }

    // 1-based indexing; column 0 is the virtual start of each augmenting path.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut row_of_col = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols_of_row = vec![0usize; n];
    for j in 1..=m {
        if row_of_col[j] != 0 {
            cols_of_row[row_of_col[j] - 1] = j - 1;
        }
    }
    let total_cost = cols_of_row
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i][j])
        .sum();
    Ok(Assignment {
        cols_of_row,
        total_cost,
    })
}
