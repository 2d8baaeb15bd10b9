use crate::error::{invalid, Result};

/// Lengths at which per-sample loss curves are probed.
pub const ORACLE_GRID: [usize; 9] = [1, 2, 4, 6, 8, 10, 12, 14, 16];

/// Per-sample lengths minimizing total loss subject to `mean length <= budget`.
///
/// Each curve is replaced by its lower convex hull; hull segments from all
/// samples are taken greedily by loss reduction per token while they fit.
/// Ties go to the lower sample index.
pub fn oracle_allocate(curves: &[Vec<f64>], grid: &[usize], budget: f64) -> Result<Vec<usize>> {
    if curves.is_empty() {
        return invalid("no loss curves");
    }
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return invalid("grid must be nonempty and strictly increasing");
    }
    if let Some(c) = curves.iter().find(|c| c.len() != grid.len()) {
        return invalid(format!(
            "curve has {} points, grid has {}",
            c.len(),
            grid.len()
        ));
    }
    if curves.iter().flatten().any(|v| !v.is_finite()) {
        return invalid("loss curves must be finite");
    }
    if !(budget >= grid[0] as f64) {
        return invalid(format!(
            "budget {budget} below the smallest length {}",
            grid[0]
        ));
    }

    // (gain per token, sample, hull index of the segment end, tokens)
    let mut segments: Vec<(f64, usize, usize, usize)> = Vec::new();
    let mut hulls = Vec::with_capacity(curves.len());
    for (i, c) in curves.iter().enumerate() {
        let hull = lower_hull(grid, c);
        for k in 1..hull.len() {
            let (a, b) = (hull[k - 1], hull[k]);
            let tokens = grid[b] - grid[a];
            let gain = (c[a] - c[b]) / tokens as f64;
            if gain > 0.0 {
                segments.push((gain, i, k, tokens));
            }
        }
        hulls.push(hull);
    }
    segments.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let total_budget = (budget * curves.len() as f64 + 1e-9).floor() as usize;
    let mut spent = grid[0] * curves.len();
    let mut at = vec![0usize; curves.len()];
    let mut blocked = vec![false; curves.len()];
    for (_, i, k, tokens) in segments {
        if blocked[i] || at[i] + 1 != k {
            blocked[i] = true;
            continue;
        }
        if spent + tokens <= total_budget {
            spent += tokens;
            at[i] = k;
        } else {
            blocked[i] = true;
        }
    }
    Ok(at.iter().zip(&hulls).map(|(&k, h)| grid[h[k]]).collect())
}

/// Grid indices of the lower convex hull, left to right.
fn lower_hull(grid: &[usize], curve: &[f64]) -> Vec<usize> {
    let mut hull: Vec<usize> = Vec::new();
    for j in 0..grid.len() {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let (xa, xb, xj) = (grid[a] as f64, grid[b] as f64, grid[j] as f64);
            // Drop b when it lies on or above the chord a-j.
            let cross = (xb - xa) * (curve[j] - curve[a]) - (curve[b] - curve[a]) * (xj - xa);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(j);
    }
    hull
}

#[cfg(test)]
mod tests {
    use super::*;

    fn convex(scale: f64) -> Vec<f64> {
        ORACLE_GRID.iter().map(|&n| scale / n as f64).collect()
    }

    #[test]
    fn identical_curves_get_uniform_allocation() {
        let curves = vec![convex(1.0); 10];
        for budget in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let alloc = oracle_allocate(&curves, &ORACLE_GRID, budget).unwrap();
            assert!(
                alloc.iter().all(|&n| n as f64 == budget),
                "{budget}: {alloc:?}"
            );
        }
    }

    #[test]
    fn slack_goes_to_the_curve_that_improves() {
        let flat = vec![0.5; ORACLE_GRID.len()];
        let curves = vec![flat, convex(1.0)];
        let alloc = oracle_allocate(&curves, &ORACLE_GRID, 8.5).unwrap();
        assert_eq!(alloc, vec![1, 16]);
    }

    #[test]
    fn respects_budget() {
        let curves: Vec<Vec<f64>> = (1..20).map(|i| convex(i as f64)).collect();
        for budget in [1.0, 3.3, 7.9, 12.0] {
            let alloc = oracle_allocate(&curves, &ORACLE_GRID, budget).unwrap();
            let mean = alloc.iter().sum::<usize>() as f64 / alloc.len() as f64;
            assert!(mean <= budget + 1e-12);
        }
    }

    #[test]
    fn hull_skips_nonconvex_points() {
        let grid = [1, 2, 3];
        assert_eq!(lower_hull(&grid, &[1.0, 0.9, 0.0]), vec![0, 2]);
        assert_eq!(lower_hull(&grid, &[1.0, 0.2, 0.0]), vec![0, 1, 2]);
    }

    /// Brute force over all allocations on the hull points of tiny instances.
    #[test]
    fn matches_brute_force_on_convex_curves() {
        let grid = [1, 2, 4];
        let curves = vec![
            vec![1.0, 0.4, 0.1],
            vec![0.8, 0.5, 0.3],
            vec![0.6, 0.2, 0.15],
        ];
        for budget in [1.0, 1.5, 2.0, 2.5, 3.0, 4.0] {
            let alloc = oracle_allocate(&curves, &grid, budget).unwrap();
            let cost = |a: &[usize]| -> f64 {
                a.iter()
                    .zip(&curves)
                    .map(|(&n, c)| c[grid.iter().position(|&g| g == n).unwrap()])
                    .sum()
            };
            let mut best = f64::INFINITY;
            for a in 0..3 {
                for b in 0..3 {
                    for c in 0..3 {
                        let pick = [grid[a], grid[b], grid[c]];
                        if pick.iter().sum::<usize>() as f64 <= budget * 3.0 {
                            best = best.min(cost(&pick));
                        }
                    }
                }
            }
            assert!(
                (cost(&alloc) - best).abs() < 1e-12,
                "budget {budget}: {alloc:?}"
            );
        }
    }

    #[test]
    fn rejects_infeasible_budget() {
        assert!(oracle_allocate(&[convex(1.0)], &ORACLE_GRID, 0.5).is_err());
        assert!(oracle_allocate(&[], &ORACLE_GRID, 4.0).is_err());
    }
}
