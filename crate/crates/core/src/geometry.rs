//! Exact linear separability oracle: counts convex-hull vertices of a batch
//! via phase-one simplex feasibility, validating the theoretical ceiling on
//! sparsity-based recovery.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::DenseVector;

/// Pivot tolerance inside the simplex.
const PIVOT_TOL: f64 = 1e-12;
/// Feasibility tolerance on the phase-one objective (constraint residual).
const FEAS_TOL: f64 = 1e-9;

/// A set of points with a common dimension.
#[derive(Debug, Clone)]
pub struct PointCloud {
    points: Vec<DenseVector>,
    dim: usize,
}

impl PointCloud {
    pub fn new(points: Vec<DenseVector>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud needs at least one point"));
        }
        let dim = points[0].len();
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::shape("point cloud has mixed or zero dimensions"));
        }
        Ok(Self { points, dim })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[DenseVector] {
        &self.points
    }
}

/// True iff point `i` is NOT in the convex hull of the remaining points,
/// decided by exact feasibility of `sum l_k x_k = x_i, sum l_k = 1, l >= 0`
/// via a dense phase-one simplex with Bland's rule.
///
/// Identical duplicated points are both non-separable.
pub fn is_separable(cloud: &PointCloud, i: usize) -> Result<bool> {
    if i >= cloud.len() {
        return Err(Error::invalid(format!(
            "index {i} out of range for {} points",
            cloud.len()
        )));
    }
    if cloud.len() == 1 {
        // Nothing to separate from; the hull of the empty set is empty.
        return Ok(true);
    }
    let d = cloud.dim();
    let m = d + 1; // equality constraints
    let n_struct = cloud.len() - 1;

    // Constraint matrix: columns are the other points with a trailing 1
    // (convexity row); rhs is x_i with a trailing 1.
    let mut a = vec![vec![0.0f64; n_struct]; m];
    let mut b = vec![0.0f64; m];
    let others: Vec<usize> = (0..cloud.len()).filter(|&k| k != i).collect();
    for (col, &k) in others.iter().enumerate() {
        for row in 0..d {
            a[row][col] = cloud.points[k].get(row);
        }
        a[m - 1][col] = 1.0;
    }
    for row in 0..d {
        b[row] = cloud.points[i].get(row);
    }
    b[m - 1] = 1.0;

    let residual = phase_one_infeasibility(a, b);
    Ok(residual > FEAS_TOL)
}

/// Minimum attainable sum of artificial variables for `A x = b, x >= 0`.
/// Zero (within tolerance) means the system is feasible.
fn phase_one_infeasibility(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> f64 {
    let m = b.len();
    let n_struct = a.first().map_or(0, Vec::len);

    // Make rhs nonnegative so the artificial basis is feasible.
    for row in 0..m {
        if b[row] < 0.0 {
            b[row] = -b[row];
            for v in &mut a[row] {
                *v = -*v;
            }
        }
    }

    // Tableau columns: structural vars, then m artificials. Basis starts as
    // the artificials. Reduced-cost row for min sum(artificials), priced out
    // against the artificial basis.
    let n_total = n_struct + m;
    let mut tableau = vec![vec![0.0f64; n_total]; m];
    for row in 0..m {
        tableau[row][..n_struct].copy_from_slice(&a[row]);
        tableau[row][n_struct + row] = 1.0;
    }
    let mut basis: Vec<usize> = (n_struct..n_total).collect();
    let mut reduced: Vec<f64> = (0..n_total)
        .map(|j| {
            let c_j = if j >= n_struct { 1.0 } else { 0.0 };
            let priced: f64 = (0..m).map(|row| tableau[row][j]).sum();
            c_j - priced
        })
        .collect();

    // Bland's rule: entering = lowest index with negative reduced cost,
    // leaving = lowest basis index among minimum-ratio rows.
    let max_iters = 200 * (m + n_total);
    for _ in 0..max_iters {
        let entering = match (0..n_total).find(|&j| reduced[j] < -PIVOT_TOL) {
            Some(j) => j,
            None => break,
        };
        let mut leaving: Option<usize> = None;
        let mut best_ratio = f64::INFINITY;
        for row in 0..m {
            let coef = tableau[row][entering];
            if coef > PIVOT_TOL {
                let ratio = b[row] / coef;
                let better = ratio < best_ratio - PIVOT_TOL
                    || ((ratio - best_ratio).abs() <= PIVOT_TOL
                        && leaving.is_some_and(|l| basis[row] < basis[l]));
                if leaving.is_none() || better {
                    best_ratio = ratio;
                    leaving = Some(row);
                }
            }
        }
        let Some(pivot_row) = leaving else {
            // Unbounded phase-one cannot happen (objective bounded below by
            // zero); treat defensively as feasible-unknown.
            break;
        };

        // Pivot.
        let pivot = tableau[pivot_row][entering];
        for v in &mut tableau[pivot_row] {
            *v /= pivot;
        }
        b[pivot_row] /= pivot;
        for row in 0..m {
            if row == pivot_row {
                continue;
            }
            let factor = tableau[row][entering];
            if factor != 0.0 {
                for j in 0..n_total {
                    tableau[row][j] -= factor * tableau[pivot_row][j];
                }
                b[row] -= factor * b[pivot_row];
            }
        }
        let factor = reduced[entering];
        if factor != 0.0 {
            for j in 0..n_total {
                reduced[j] -= factor * tableau[pivot_row][j];
            }
        }
        basis[pivot_row] = entering;
    }

    // Objective value: sum of basic artificial variables.
    (0..m)
        .filter(|&row| basis[row] >= n_struct)
        .map(|row| b[row].max(0.0))
        .sum()
}

/// Number of points that are linearly separable from the rest, i.e. the
/// count of convex-hull vertices.
pub fn hull_vertex_count(cloud: &PointCloud) -> Result<usize> {
    let flags = separability_flags(cloud)?;
    Ok(flags.iter().filter(|&&s| s).count())
}

/// Per-index separability, solved in parallel.
pub fn separability_flags(cloud: &PointCloud) -> Result<Vec<bool>> {
    (0..cloud.len())
        .into_par_iter()
        .map(|i| is_separable(cloud, i))
        .collect()
}

/// Synthetic input distributions used by the growth-order formulas and the
/// data generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Ball,
    Cube,
    Gauss,
}

/// Order-of-growth of the expected recoverable-point count for each
/// distribution; constants unspecified, trend comparison only.
pub fn theoretical_order(dist: Distribution, n: usize, d: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid("theoretical_order needs n >= 2"));
    }
    let nf = n as f64;
    let df = d as f64;
    Ok(match dist {
        Distribution::Ball => nf.powf((df - 1.0) / (df + 1.0)),
        Distribution::Cube => nf.ln().powf(df - 1.0),
        Distribution::Gauss => nf.ln().powf((df - 1.0) / 2.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn cloud(points: &[&[f64]]) -> PointCloud {
        PointCloud::new(
            points
                .iter()
                .map(|p| DenseVector::from(p.to_vec()))
                .collect(),
        )
        .unwrap()
    }

    /// Independent planar hull oracle: gift-wrapping angular sweep. Returns
    /// the set of vertex indices. Assumes general position.
    fn planar_hull_vertices(points: &[DenseVector]) -> Vec<bool> {
        let n = points.len();
        let mut on_hull = vec![false; n];
        // Leftmost (then lowest) point is always a vertex.
        let mut start = 0;
        for i in 1..n {
            let (xi, yi) = (points[i].get(0), points[i].get(1));
            let (xs, ys) = (points[start].get(0), points[start].get(1));
            if xi < xs || (xi == xs && yi < ys) {
                start = i;
            }
        }
        let mut p = start;
        loop {
            on_hull[p] = true;
            let mut q = (p + 1) % n;
            for r in 0..n {
                if r == p {
                    continue;
                }
                let cross = (points[q].get(0) - points[p].get(0))
                    * (points[r].get(1) - points[p].get(1))
                    - (points[q].get(1) - points[p].get(1))
                        * (points[r].get(0) - points[p].get(0));
                if cross < 0.0 {
                    q = r;
                }
            }
            p = q;
            if p == start {
                break;
            }
        }
        on_hull
    }

    #[test]
    fn triangle_vertices_are_separable() {
        let c = cloud(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        for i in 0..3 {
            assert!(is_separable(&c, i).unwrap());
        }
    }

    #[test]
    fn centroid_is_interior() {
        let c = cloud(&[
            &[0.0, 0.0],
            &[1.0, 0.0],
            &[0.0, 1.0],
            &[1.0 / 3.0, 1.0 / 3.0],
        ]);
        assert!(!is_separable(&c, 3).unwrap());
        assert_eq!(hull_vertex_count(&c).unwrap(), 3);
    }

    #[test]
    fn square_with_center_has_four_vertices() {
        let c = cloud(&[
            &[0.0, 0.0],
            &[1.0, 0.0],
            &[1.0, 1.0],
            &[0.0, 1.0],
            &[0.5, 0.5],
        ]);
        assert_eq!(hull_vertex_count(&c).unwrap(), 4);
    }

    #[test]
    fn circle_boundary_points_are_all_extreme() {
        let n = 100;
        let points: Vec<DenseVector> = (0..n)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                DenseVector::from(vec![t.cos(), t.sin()])
            })
            .collect();
        let c = PointCloud::new(points).unwrap();
        assert_eq!(hull_vertex_count(&c).unwrap(), n);
    }

    #[test]
    fn duplicated_points_are_both_interior() {
        let c = cloud(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]);
        assert!(!is_separable(&c, 1).unwrap());
        assert!(!is_separable(&c, 3).unwrap());
    }

    #[test]
    fn lp_matches_planar_sweep_on_random_clouds() {
        for seed in 0..100u64 {
            let mut rng = SeededRng::new(seed);
            let n = 8 + rng.index(20);
            let points: Vec<DenseVector> = (0..n)
                .map(|_| {
                    DenseVector::from(vec![rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)])
                })
                .collect();
            let sweep = planar_hull_vertices(&points);
            let c = PointCloud::new(points).unwrap();
            let lp = separability_flags(&c).unwrap();
            assert_eq!(lp, sweep, "seed {seed}");
        }
    }

    #[test]
    fn removing_interior_point_preserves_other_verdicts() {
        let mut rng = SeededRng::new(1234);
        let points: Vec<DenseVector> = (0..30)
            .map(|_| DenseVector::from(vec![rng.normal(0.0, 1.0), rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)]))
            .collect();
        let c = PointCloud::new(points.clone()).unwrap();
        let flags = separability_flags(&c).unwrap();
        let interior = flags.iter().position(|s| !s).expect("some interior point");

        let remaining: Vec<DenseVector> = points
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != interior)
            .map(|(_, p)| p.clone())
            .collect();
        let c2 = PointCloud::new(remaining).unwrap();
        let flags2 = separability_flags(&c2).unwrap();
        let kept: Vec<bool> = flags
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != interior)
            .map(|(_, s)| *s)
            .collect();
        assert_eq!(flags2, kept);
    }

    #[test]
    fn cube_vertex_fraction_shrinks_with_n() {
        // Trend check over 20 seeds: fraction of hull vertices at n=200 is
        // below the fraction at n=50 on average (uniform unit square).
        let mut frac_small = 0.0;
        let mut frac_large = 0.0;
        for seed in 0..20u64 {
            for (n, acc) in [(50usize, &mut frac_small), (200usize, &mut frac_large)] {
                let mut rng = SeededRng::new(1000 + seed);
                let points: Vec<DenseVector> = (0..n)
                    .map(|_| DenseVector::from(vec![rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)]))
                    .collect();
                let c = PointCloud::new(points).unwrap();
                *acc += hull_vertex_count(&c).unwrap() as f64 / n as f64 / 20.0;
            }
        }
        assert!(
            frac_large < frac_small,
            "vertex fraction should shrink: n=50 {frac_small:.3} vs n=200 {frac_large:.3}"
        );
    }

    #[test]
    fn growth_orders_evaluate_directly() {
        assert_eq!(theoretical_order(Distribution::Ball, 10, 1).unwrap(), 1.0);
        let e2 = std::f64::consts::E.powi(2).round() as usize + 1; // ln ~ 2
        let cube = theoretical_order(Distribution::Cube, e2, 2).unwrap();
        assert!((cube - (e2 as f64).ln()).abs() < 1e-12);
        let e4 = std::f64::consts::E.powi(4).ceil() as usize;
        let gauss = theoretical_order(Distribution::Gauss, e4, 3).unwrap();
        assert!((gauss - (e4 as f64).ln()).abs() < 1e-9);
        assert!(theoretical_order(Distribution::Ball, 1, 2).is_err());
    }
}
