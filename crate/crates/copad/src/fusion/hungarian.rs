//! Minimum-cost linear assignment via shortest augmenting paths with row and
//! column potentials. Rectangular matrices are handled by transposing so the
//! smaller side is assigned completely; infeasible entries enter the solve as
//! a large finite sentinel and are stripped from the result afterwards.

/// Sentinel multiplier: one sentinel assignment must dominate any full finite
/// assignment, while staying small enough that reduced-cost arithmetic keeps
/// full double precision.
fn sentinel_for(costs: &[f64], n: usize) -> f64 {
    let max_finite = costs
        .iter()
        .copied()
        .filter(|c| c.is_finite())
        .fold(0.0_f64, f64::max);
    (max_finite + 1.0) * (n as f64 + 1.0) * 4.0
}

/// Solves min-cost assignment on a row-major `rows x cols` matrix. Entries of
/// `f64::INFINITY` mark infeasible pairs. Returns, per row, the assigned
/// column; rows parked on infeasible entries come back as `None`.
pub fn solve(costs: &[f64], rows: usize, cols: usize) -> Vec<Option<usize>> {
    assert_eq!(costs.len(), rows * cols, "cost matrix size mismatch");
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        // assign on the transpose, then invert the mapping
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = costs[i * cols + j];
            }
        }
        let col_to_row = solve(&t, cols, rows);
        let mut out = vec![None; rows];
        for (j, assigned) in col_to_row.into_iter().enumerate() {
            if let Some(i) = assigned {
                out[i] = Some(j);
            }
        }
        return out;
    }

    let big = sentinel_for(costs, rows.max(cols));
    let at = |i: usize, j: usize| -> f64 {
        let c = costs[i * cols + j];
        if c.is_finite() {
            c
        } else {
            big
        }
    };

    // 1-based potentials with a virtual column 0.
    let n = rows;
    let m = cols;
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; m + 1];
    let mut assigned_row = vec![0usize; m + 1]; // column -> row (1-based, 0 = free)
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut min_to = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < min_to[j] {
                    min_to[j] = cur;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        // augment along the found path
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut out = vec![None; rows];
    for j in 1..=m {
        let i = assigned_row[j];
        if i != 0 && costs[(i - 1) * cols + (j - 1)].is_finite() {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}
