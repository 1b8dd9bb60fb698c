//! Dense linear assignment (Jonker–Volgenant): column reduction with
//! reduction transfer, two rounds of augmenting row reduction, then shortest
//! augmenting paths for the rows that are still free.

use crate::error::{invalid, Error, Result};

const NONE: usize = usize::MAX;

/// Optimal assignment with the dual potentials that certify it.
#[derive(Clone, Debug)]
pub struct Assignment {
    pub row_to_col: Vec<usize>,
    pub col_to_row: Vec<usize>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Solves `min sum_i cost[i][x_i]` over permutations; `cost` is row-major `n x n`.
pub fn lap_dense(n: usize, cost: &[f64]) -> Result<Assignment> {
    if cost.len() != n * n {
        return Err(Error::DimensionMismatch {
            expected: n * n,
            got: cost.len(),
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(invalid("cost", "must be finite"));
    }
    if n == 0 {
        return Ok(Assignment {
            row_to_col: vec![],
            col_to_row: vec![],
            u: vec![],
            v: vec![],
        });
    }
    let c = |i: usize, j: usize| cost[i * n + j];
    let mut x = vec![NONE; n];
    let mut y = vec![NONE; n];
    let mut v = vec![f64::INFINITY; n];

    // column reduction: each column goes to its cheapest row
    for i in 0..n {
        for j in 0..n {
            if c(i, j) < v[j] {
                v[j] = c(i, j);
                y[j] = i;
            }
        }
    }
    let mut unique = vec![true; n];
    for j in (0..n).rev() {
        let i = y[j];
        if x[i] == NONE {
            x[i] = j;
        } else {
            unique[i] = false;
            y[j] = NONE;
        }
    }
    // reduction transfer
    let mut free_rows = Vec::with_capacity(n);
    for i in 0..n {
        if x[i] == NONE {
            free_rows.push(i);
        } else if unique[i] && n > 1 {
            let j = x[i];
            let mut min = f64::INFINITY;
            for j2 in 0..n {
                if j2 != j {
                    min = min.min(c(i, j2) - v[j2]);
                }
            }
            v[j] -= min;
        }
    }

    // augmenting row reduction
    for _ in 0..2 {
        if free_rows.is_empty() {
            break;
        }
        let n_free = free_rows.len();
        let mut current = 0;
        let mut new_free = 0;
        let mut rr_cnt = 0usize;
        while current < n_free {
            rr_cnt += 1;
            let free_i = free_rows[current];
            current += 1;
            let mut j1 = 0;
            let mut v1 = c(free_i, 0) - v[0];
            let mut j2 = NONE;
            let mut v2 = f64::INFINITY;
            for j in 1..n {
                let h = c(free_i, j) - v[j];
                if h < v2 {
                    if h >= v1 {
                        v2 = h;
                        j2 = j;
                    } else {
                        v2 = v1;
                        v1 = h;
                        j2 = j1;
                        j1 = j;
                    }
                }
            }
            let mut i0 = y[j1];
            let v1_new = v[j1] - (v2 - v1);
            let v1_lowers = v1_new < v[j1];
            if rr_cnt < current * n {
                if v1_lowers {
                    v[j1] = v1_new;
                } else if i0 != NONE && j2 != NONE {
                    j1 = j2;
                    i0 = y[j2];
                }
                if i0 != NONE {
                    if v1_lowers {
                        current -= 1;
                        free_rows[current] = i0;
                    } else {
                        free_rows[new_free] = i0;
                        new_free += 1;
                    }
                }
            } else if i0 != NONE {
                free_rows[new_free] = i0;
                new_free += 1;
            }
            x[free_i] = j1;
            y[j1] = free_i;
        }
        free_rows.truncate(new_free);
    }

    // shortest augmenting paths
    let mut pred = vec![0usize; n];
    let mut cols = vec![0usize; n];
    let mut d = vec![0.0; n];
    for &start in &free_rows {
        let end = find_path(n, &c, start, &y, &mut v, &mut pred, &mut cols, &mut d);
        let mut j = end;
        loop {
            let i = pred[j];
            y[j] = i;
            let prev = x[i];
            x[i] = j;
            if i == start {
                break;
            }
            j = prev;
        }
    }

    let u: Vec<f64> = (0..n).map(|i| c(i, x[i]) - v[x[i]]).collect();
    Ok(Assignment {
        row_to_col: x,
        col_to_row: y,
        u,
        v,
    })
}

#[allow(clippy::too_many_arguments)]
fn find_path<C: Fn(usize, usize) -> f64>(
    n: usize,
    c: &C,
    start: usize,
    y: &[usize],
    v: &mut [f64],
    pred: &mut [usize],
    cols: &mut [usize],
    d: &mut [f64],
) -> usize {
    for j in 0..n {
        cols[j] = j;
        pred[j] = start;
        d[j] = c(start, j) - v[j];
    }
    let (mut lo, mut hi) = (0usize, 0usize);
    let mut n_ready = 0;
    let mut final_j = NONE;
    while final_j == NONE {
        if lo == hi {
            // move the columns at minimal distance into the scan list
            n_ready = lo;
            hi = lo + 1;
            let mut mind = d[cols[lo]];
            for k in hi..n {
                let j = cols[k];
                if d[j] <= mind {
                    if d[j] < mind {
                        hi = lo;
                        mind = d[j];
                    }
                    cols[k] = cols[hi];
                    cols[hi] = j;
                    hi += 1;
                }
            }
            for &j in &cols[lo..hi] {
                if y[j] == NONE {
                    final_j = j;
                }
            }
        }
        if final_j == NONE {
            // scan; on success the ready set stays as it was before the scan
            let scan_lo = lo;
            while lo != hi {
                let j = cols[lo];
                lo += 1;
                let i = y[j];
                let mind = d[j];
                let h = c(i, j) - v[j] - mind;
                let mut k = hi;
                while k < n {
                    let j2 = cols[k];
                    let red = c(i, j2) - v[j2] - h;
                    if red < d[j2] {
                        d[j2] = red;
                        pred[j2] = i;
                        if red == mind {
                            if y[j2] == NONE {
                                final_j = j2;
                                break;
                            }
                            cols[k] = cols[hi];
                            cols[hi] = j2;
                            hi += 1;
                        }
                    }
                    k += 1;
                }
                if final_j != NONE {
                    lo = scan_lo;
                    break;
                }
            }
        }
    }
    let mind = d[cols[lo]];
    for &j in &cols[..n_ready] {
        v[j] += d[j] - mind;
    }
    final_j
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(n: usize, cost: &[f64]) -> f64 {
        fn rec(n: usize, cost: &[f64], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(n, cost, row + 1, used, acc + cost[row * n + j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(n, cost, 0, &mut vec![false; n], 0.0, &mut best);
        best
    }

    #[test]
    fn small_instances_match_brute_force() {
        let mut s = 12345u64;
        let mut rnd = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            (s >> 33) as f64 / (1u64 << 31) as f64
        };
        for n in 1..=7 {
            for rep in 0..30 {
                // include integer costs with many ties
                let cost: Vec<f64> = (0..n * n)
                    .map(|_| if rep % 2 == 0 { rnd() } else { (rnd() * 4.0).floor() })
                    .collect();
                let sol = lap_dense(n, &cost).unwrap();
                let total: f64 = (0..n).map(|i| cost[i * n + sol.row_to_col[i]]).sum();
                assert!((total - brute(n, &cost)).abs() < 1e-12);
                for i in 0..n {
                    assert_eq!(sol.col_to_row[sol.row_to_col[i]], i);
                    for j in 0..n {
                        assert!(cost[i * n + j] - sol.u[i] - sol.v[j] >= -1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_is_optimal_for_zero_diagonal() {
        let n = 50;
        let cost: Vec<f64> = (0..n * n)
            .map(|k| if k / n == k % n { 0.0 } else { 1.0 + (k % 7) as f64 })
            .collect();
        let sol = lap_dense(n, &cost).unwrap();
        assert_eq!(sol.row_to_col, (0..n).collect::<Vec<_>>());
    }
}
