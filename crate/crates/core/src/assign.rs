//! Rectangular linear assignment (Hungarian method with potentials).

/// Minimum-cost assignment of every row to a distinct column.
///
/// `cost` is row-major with `rows <= cols`; returns the column chosen for
/// each row. Runs in O(rows^2 * cols).
pub fn solve(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "assignment needs rows <= cols ({n} > {m})");
    assert!(cost.iter().all(|r| r.len() == m), "ragged cost matrix");

    // 1-based potentials; p[j] is the row matched to column j (0 = none).
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

pub fn assignment_cost(cost: &[Vec<f64>], cols: &[usize]) -> f64 {
    cols.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(cost: &[Vec<f64>]) -> f64 {
        fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row][j] + go(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        let mut used = vec![false; cost[0].len()];
        go(cost, 0, &mut used)
    }

    #[test]
    fn small_cases() {
        assert_eq!(solve(&[vec![1.0, 0.0], vec![0.0, 1.0]]), vec![1, 0]);
        assert_eq!(solve(&[vec![5.0, 1.0, 3.0]]), vec![1]);
        assert!(solve(&[]).is_empty());
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            n in 1usize..5,
            extra in 0usize..3,
            vals in proptest::collection::vec(-10.0f64..10.0, 64),
        ) {
            let m = n + extra;
            let cost: Vec<Vec<f64>> = (0..n).map(|i| (0..m).map(|j| vals[i * 8 + j]).collect()).collect();
            let cols = solve(&cost);
            let mut seen = cols.clone();
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), n);
            prop_assert!((assignment_cost(&cost, &cols) - brute(&cost)).abs() < 1e-9);
        }
    }
}
