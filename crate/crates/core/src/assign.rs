//! Minimum-cost one-to-one assignment (Hungarian algorithm) over a
//! rectangular f64 cost matrix with a cost gate.
//!
//! Cells above the gate are forbidden: the solver first maximizes the
//! number of admissible pairs, then minimizes their total cost, and any
//! forbidden pair forced by the matching shape is dropped from the result
//! (its row stays unassigned). A single contested detection therefore
//! costs one match, not a cascade of gated pairs.

/// Solver cost: number of forbidden cells used, the real cost sum, and a
/// tie weight, compared lexicographically.
///
/// The tie weight makes the assignment containing the lowest
/// `(row, col)` cells win among equal-cost optima: cell index
/// `idx = row * cols + col` weighs `-2^(100-idx)` (zero beyond index 100),
/// so a lower-index cell dominates any combination of higher-index ones.
#[derive(Clone, Copy, PartialEq, Debug)]
struct Cost {
    forbidden: i64,
    c: f64,
    t: i128,
}

impl Cost {
    const ZERO: Cost = Cost {
        forbidden: 0,
        c: 0.0,
        t: 0,
    };
    const INF: Cost = Cost {
        forbidden: i64::MAX,
        c: f64::INFINITY,
        t: 0,
    };

    fn real(c: f64, idx: usize) -> Self {
        let t = if idx <= 100 { -(1i128 << (100 - idx)) } else { 0 };
        Cost { forbidden: 0, c, t }
    }

    fn gated() -> Self {
        Cost {
            forbidden: 1,
            c: 0.0,
            t: 0,
        }
    }

    fn add(self, rhs: Cost) -> Cost {
        Cost {
            forbidden: self.forbidden.saturating_add(rhs.forbidden),
            c: self.c + rhs.c,
            t: self.t.saturating_add(rhs.t),
        }
    }

    fn sub(self, rhs: Cost) -> Cost {
        Cost {
            forbidden: self.forbidden.saturating_sub(rhs.forbidden),
            c: self.c - rhs.c,
            t: self.t.saturating_sub(rhs.t),
        }
    }

    fn lt(self, rhs: Cost) -> bool {
        if self.forbidden != rhs.forbidden {
            return self.forbidden < rhs.forbidden;
        }
        if self.c != rhs.c {
            return self.c < rhs.c;
        }
        self.t < rhs.t
    }
}

/// Solve the min-cost assignment for `cost` (rows × cols, all entries
/// finite and non-negative); pairs with cost above `gate` never count as
/// matches.
///
/// Returns `(row, col)` pairs sorted by row. Rows and columns left out by
/// the rectangular shape or the gate are simply absent. Ties between
/// equal-cost assignments resolve towards the lowest `(row, col)` indices.
pub fn hungarian_assign(cost: &[Vec<f64>], gate: f64) -> Vec<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    debug_assert!(cost.iter().all(|r| r.len() == cols));
    debug_assert!(cost.iter().flatten().all(|&c| c.is_finite() && c >= 0.0));

    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| -> Cost {
        let (r, c) = if transposed { (j, i) } else { (i, j) };
        if cost[r][c] > gate {
            Cost::gated()
        } else {
            Cost::real(cost[r][c], r * cols + c)
        }
    };

    // Potentials-based Hungarian, O(n·n·m) with n <= m. Column 0 is a
    // virtual slot; p[j] holds the 1-based row matched to column j.
    let mut u = vec![Cost::ZERO; n + 1];
    let mut v = vec![Cost::ZERO; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![Cost::INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = Cost::INF;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1).sub(u[i0]).sub(v[j]);
                if cur.lt(minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j].lt(delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] = u[p[j]].add(delta);
                    v[j] = v[j].sub(delta);
                } else {
                    minv[j] = minv[j].sub(delta);
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

    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for j in 1..=m {
        if p[j] == 0 {
            continue;
        }
        let (r, c) = if transposed { (j - 1, p[j] - 1) } else { (p[j] - 1, j - 1) };
        if cost[r][c] <= gate {
            pairs.push((r, c));
        }
    }
    pairs.sort_unstable();
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injective row -> column maps.
    pub(crate) fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
        let rows = cost.len();
        let cols = cost.first().map_or(0, |r| r.len());
        fn recurse(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let rows = cost.len();
            let cols = used.len();
            if row == rows {
                if acc < *best {
                    *best = acc;
                }
                return;
            }
            // When rows > cols some rows stay unmatched: allow skipping only
            // as many rows as the deficit requires.
            let assigned = used.iter().filter(|&&u| u).count();
            let remaining_rows = rows - row;
            let remaining_cols = cols - assigned;
            if remaining_rows > remaining_cols {
                recurse(cost, row + 1, used, acc, best);
            }
            for c in 0..cols {
                if !used[c] {
                    used[c] = true;
                    recurse(cost, row + 1, used, acc + cost[row][c], best);
                    used[c] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        let mut used = vec![false; cols];
        recurse(cost, 0, &mut used, 0.0, &mut best);
        if rows == 0 || cols == 0 {
            0.0
        } else {
            best
        }
    }

    fn total(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| cost[r][c]).sum()
    }

    #[test]
    fn two_by_two_basic() {
        let cost = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        let pairs = hungarian_assign(&cost, f64::INFINITY);
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(total(&cost, &pairs), 2.0);
    }

    #[test]
    fn tie_break_prefers_low_indices() {
        let cost = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let pairs = hungarian_assign(&cost, f64::INFINITY);
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn gate_drops_expensive_pairs() {
        let cost = vec![vec![0.5, 10.0], vec![10.0, 3.0]];
        let pairs = hungarian_assign(&cost, 2.0);
        assert_eq!(pairs, vec![(0, 0)]);
    }

    #[test]
    fn contested_cell_costs_one_match_not_a_cascade() {
        // Rows 0 and 1 both want column 0; everything else is far away.
        // The loser must stay unmatched instead of grabbing a gated cell
        // and displacing the rest of the frame.
        let cost = vec![
            vec![0.0, 6.0, 9.0],
            vec![0.1, 6.0, 9.0],
            vec![9.0, 0.0, 9.0],
            vec![9.0, 9.0, 0.0],
        ];
        let pairs = hungarian_assign(&cost, 2.0);
        assert_eq!(pairs, vec![(0, 0), (2, 1), (3, 2)]);
    }

    #[test]
    fn gate_maximizes_admissible_matches() {
        // Ungated optimum pairs (0,0)+(1,1); under the gate the only way
        // to keep two matches is the more expensive admissible diagonal.
        let cost = vec![vec![0.0, 1.5], vec![5.0, 0.4]];
        let pairs = hungarian_assign(&cost, 2.0);
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        let cost = vec![vec![0.0, 1.5], vec![5.0, 9.0]];
        let pairs = hungarian_assign(&cost, 2.0);
        assert_eq!(pairs, vec![(0, 0)]);
    }

    #[test]
    fn gate_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let rows = rng.random_range(1..7);
            let cols = rng.random_range(1..7);
            let cost: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.random_range(0.0..4.0)).collect())
                .collect();
            let mut prev = 0usize;
            for gate in [0.5, 1.0, 2.0, 3.0, f64::INFINITY] {
                let n = hungarian_assign(&cost, gate).len();
                assert!(n >= prev, "gate raise reduced matches for {cost:?}");
                prev = n;
            }
        }
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..1000 {
            let rows = rng.random_range(1..=5);
            let cols = rng.random_range(1..=5);
            let cost: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.random_range(0.0..10.0)).collect())
                .collect();
            let pairs = hungarian_assign(&cost, f64::INFINITY);
            assert_eq!(pairs.len(), rows.min(cols));
            let got = total(&cost, &pairs);
            let want = brute_force_min(&cost);
            assert!(
                (got - want).abs() < 1e-9,
                "case {case}: hungarian {got} vs brute force {want} for {cost:?}"
            );
        }
    }

    #[test]
    fn rectangular_4x6_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let cost: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..6).map(|_| rng.random_range(0.0..10.0)).collect())
                .collect();
            let pairs = hungarian_assign(&cost, f64::INFINITY);
            let got = total(&cost, &pairs);
            let want = brute_force_min(&cost);
            assert!((got - want).abs() < 1e-9);
        }
    }
}
