//! Exact linear assignment by shortest augmenting paths.
//!
//! Square dense solver in the Jonker–Volgenant family: one Dijkstra-style
//! augmentation per row over reduced costs, maintaining feasible dual
//! potentials (u, v) with u[i] + v[j] <= cost[i][j] and equality on the
//! matched pairs. O(N³) worst case.

/// Optimal assignment for a square cost matrix given in row-major order.
///
/// Returns (col_of_row, u, v) where `col_of_row[i]` is the column matched to
/// row `i` and (u, v) are optimal dual potentials.
pub fn solve_assignment(n: usize, cost: &[f64]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    assert_eq!(cost.len(), n * n);
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    let mut col_of_row = vec![usize::MAX; n];
    let mut row_of_col = vec![usize::MAX; n];

    let mut shortest = vec![0.0f64; n];
    let mut path = vec![usize::MAX; n];
    let mut in_sr = vec![false; n];
    let mut in_sc = vec![false; n];
    let mut remaining: Vec<usize> = Vec::with_capacity(n);

    for cur_row in 0..n {
        for j in 0..n {
            shortest[j] = f64::INFINITY;
            path[j] = usize::MAX;
            in_sc[j] = false;
            in_sr[j] = false;
        }
        remaining.clear();
        remaining.extend(0..n);

        let mut min_val = 0.0f64;
        let mut i = cur_row;
        let mut sink = usize::MAX;

        while sink == usize::MAX {
            in_sr[i] = true;
            let mut lowest = f64::INFINITY;
            let mut index = usize::MAX;
            let mut index_pos = usize::MAX;
            for (pos, &j) in remaining.iter().enumerate() {
                let r = min_val + cost[i * n + j] - u[i] - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                // prefer unassigned columns on ties so augmentation terminates
                if shortest[j] < lowest
                    || (shortest[j] == lowest && row_of_col[j] == usize::MAX)
                {
                    lowest = shortest[j];
                    index = j;
                    index_pos = pos;
                }
            }
            min_val = lowest;
            debug_assert!(min_val.is_finite(), "infeasible assignment instance");
            let j = index;
            if row_of_col[j] == usize::MAX {
                sink = j;
            } else {
                i = row_of_col[j];
            }
            in_sc[j] = true;
            remaining.swap_remove(index_pos);
        }

        // dual update
        u[cur_row] += min_val;
        for r in 0..n {
            if in_sr[r] && r != cur_row {
                u[r] += min_val - shortest[col_of_row[r]];
            }
        }
        for j in 0..n {
            if in_sc[j] {
                v[j] -= min_val - shortest[j];
            }
        }

        // augment along the alternating path
        let mut j = sink;
        loop {
            let r = path[j];
            row_of_col[j] = r;
            std::mem::swap(&mut col_of_row[r], &mut j);
            if r == cur_row {
                break;
            }
        }
    }
    (col_of_row, u, v)
}
