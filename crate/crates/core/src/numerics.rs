//! Numerical primitives shared by the rest of the crate.
//!
//! Everything here is a pure function over `f64` slices: cosine similarity,
//! the exponential-cosine kernel used for neighbor weighting, Euclidean
//! projection onto the probability simplex, a projected-gradient solver for
//! simplex-constrained least squares, and weighted parameter blending.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on `Σ w = 1` accepted by [`WeightVector::new`].
pub const SIMPLEX_SUM_TOL: f64 = 1e-6;

/// Default objective-decrease tolerance for [`solve_simplex_lsq`].
pub const DEFAULT_LSQ_TOL: f64 = 1e-10;
/// Default iteration cap for [`solve_simplex_lsq`].
pub const DEFAULT_LSQ_MAX_ITERS: usize = 100_000;

/// Step-size safety factor applied on top of the power-iteration estimate of
/// the Lipschitz constant, which approaches the true value from below.
const LIPSCHITZ_INFLATION: f64 = 1.0 + 1e-3;

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidInput(format!("{what}: non-finite entry at {i}"))),
        None => Ok(()),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A point on the probability simplex: nonnegative entries summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("weight vector is empty".into()));
        }
        ensure_finite(&weights, "weights")?;
        if let Some(i) = weights.iter().position(|&w| w < 0.0) {
            return Err(Error::InvalidInput(format!(
                "weight {i} is negative ({})",
                weights[i]
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::InvalidInput(format!("weights sum to {sum}, not 1")));
        }
        Ok(WeightVector(weights))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("weight vector is empty".into()));
        }
        Ok(WeightVector(vec![1.0 / n as f64; n]))
    }

    pub fn one_hot(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::shape(format!("index < {n}"), index));
        }
        let mut w = vec![0.0; n];
        w[index] = 1.0;
        Ok(WeightVector(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest weight; the first one wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.0.iter().enumerate() {
            if w > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;
    fn try_from(value: Vec<f64>) -> Result<Self> {
        WeightVector::new(value)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(value: WeightVector) -> Self {
        value.0
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{rows}x{cols} entries"), data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix whose j-th column is `columns[j]`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if let Some(bad) = columns.iter().find(|c| c.len() != rows) {
            return Err(Error::shape(format!("columns of length {rows}"), bad.len()));
        }
        let mut data = vec![0.0; rows * cols];
        for (j, column) in columns.iter().enumerate() {
            for (i, &v) in column.iter().enumerate() {
                data[i * cols + j] = v;
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, col)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    fn transpose_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &p) in out.iter_mut().zip(self.row(i)) {
                *o += p * vi;
            }
        }
        out
    }
}

/// Cosine of the angle between `a` and `b`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("empty vector".into()));
    }
    ensure_finite(a, "cosine lhs")?;
    ensure_finite(b, "cosine rhs")?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(cosine_with_norms(a, na, b, nb))
}

/// Cosine with precomputed norms. Uses exactly the arithmetic of
/// [`cosine_similarity`], so callers caching norms see identical values.
pub(crate) fn cosine_with_norms(a: &[f64], norm_a: f64, b: &[f64], norm_b: f64) -> f64 {
    (dot(a, b) / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

/// Normalized exponential-cosine kernel weights of `query` against each
/// neighbor: `exp(cos(q, n_k)) / Σ_l exp(cos(q, n_l))`.
pub fn knn_kernel_weights(query: &[f64], neighbors: &[&[f64]]) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(Error::InvalidInput("no neighbors".into()));
    }
    let sims = neighbors
        .iter()
        .map(|n| cosine_similarity(query, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(kernel_from_similarities(&sims))
}

pub(crate) fn kernel_from_similarities(sims: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = sims.iter().map(|s| s.exp()).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / z).collect()
}

/// Euclidean projection onto `{w : w ≥ 0, Σ w = 1}` by sort-and-threshold.
pub fn project_to_simplex(v: &[f64]) -> Result<WeightVector> {
    if v.is_empty() {
        return Err(Error::InvalidInput("cannot project an empty vector".into()));
    }
    ensure_finite(v, "projection input")?;
    Ok(WeightVector(simplex_projection(v)))
}

fn simplex_projection(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));

    let mut cumulative = 0.0;
    let mut threshold = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            threshold = candidate;
        }
    }
    v.iter().map(|&x| (x - threshold).max(0.0)).collect()
}

/// Output of [`solve_simplex_lsq`].
#[derive(Clone, Debug)]
pub struct SimplexLsq {
    pub weights: WeightVector,
    /// `(1/m) ‖P w − y‖²` at the returned weights.
    pub proxy_error: f64,
    pub iterations: usize,
    /// Objective after each accepted iterate, starting with the uniform start.
    pub objective_trace: Vec<f64>,
}

/// Mean squared residual `(1/m) Σ_i (Σ_j w_j P_ij − y_i)²`.
pub fn simplex_objective(p: &Matrix, y: &[f64], w: &[f64]) -> f64 {
    let m = p.rows() as f64;
    p.mul_vec(w)
        .iter()
        .zip(y)
        .map(|(pred, t)| (pred - t).powi(2))
        .sum::<f64>()
        / m
}

/// Minimizes the mean squared error of the blended predictions `P w` against
/// `y` over the simplex by projected gradient descent.
///
/// The step is `1/L` with `L = (2/m) σ_max(P)²` from power iteration. Starts at
/// uniform weights and stops once an iteration lowers the objective by less
/// than `tol` times the starting objective, or after `max_iters`. A step that would raise the objective is
/// rejected and ends the run, so the trace is non-increasing.
pub fn solve_simplex_lsq(p: &Matrix, y: &[f64], tol: f64, max_iters: usize) -> Result<SimplexLsq> {
    let (m, n) = (p.rows(), p.cols());
    if m == 0 {
        return Err(Error::EmptyDataset);
    }
    if n == 0 {
        return Err(Error::InvalidInput("prediction matrix has no columns".into()));
    }
    if y.len() != m {
        return Err(Error::shape(format!("{m} targets"), y.len()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    ensure_finite(p.as_slice(), "prediction matrix")?;
    ensure_finite(y, "targets")?;

    let mut w = vec![1.0 / n as f64; n];
    let mut objective = simplex_objective(p, y, &w);
    let mut trace = vec![objective];

    let lipschitz = 2.0 / m as f64 * largest_eigenvalue_gram(p) * LIPSCHITZ_INFLATION;
    let mut iterations = 0;
    if n > 1 && lipschitz > 0.0 {
        let step = 1.0 / lipschitz;
        let scale = 2.0 / m as f64;
        // Relative to the starting objective so that rescaling P and y by the
        // same factor leaves the stopping iteration unchanged.
        let threshold = tol * trace[0].max(f64::MIN_POSITIVE);
        while iterations < max_iters {
            let residual: Vec<f64> = p.mul_vec(&w).iter().zip(y).map(|(a, b)| a - b).collect();
            let grad = p.transpose_mul_vec(&residual);
            let moved: Vec<f64> = w
                .iter()
                .zip(&grad)
                .map(|(wi, gi)| wi - step * scale * gi)
                .collect();
            let candidate = simplex_projection(&moved);
            let next = simplex_objective(p, y, &candidate);
            iterations += 1;
            if next > objective {
                break;
            }
            let decrease = objective - next;
            w = candidate;
            objective = next;
            trace.push(objective);
            if decrease < threshold {
                break;
            }
        }
    }

    Ok(SimplexLsq {
        weights: WeightVector(w),
        proxy_error: objective,
        iterations,
        objective_trace: trace,
    })
}

/// Largest eigenvalue of `PᵀP` (that is, `σ_max(P)²`) by power iteration.
fn largest_eigenvalue_gram(p: &Matrix) -> f64 {
    let n = p.cols();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut estimate = 0.0;
    for _ in 0..1000 {
        let w = p.transpose_mul_vec(&p.mul_vec(&v));
        let len = norm(&w);
        if len == 0.0 {
            return 0.0;
        }
        let rayleigh = dot(&v, &w);
        v = w.into_iter().map(|x| x / len).collect();
        if (rayleigh - estimate).abs() <= 1e-12 * rayleigh.abs() {
            // Rayleigh quotient of the current unit vector never overshoots.
            return rayleigh.max(estimate);
        }
        estimate = rayleigh;
    }
    // Bound with the latest (normalized) iterate as well.
    let w = p.transpose_mul_vec(&p.mul_vec(&v));
    dot(&v, &w).max(estimate)
}

/// Entrywise weighted sum `Σ_j w_j params[j]`.
///
/// Zero weights are skipped, so a one-hot weight vector reproduces the
/// selected parameter vector bit for bit.
pub fn blend_parameters(params: &[&[f64]], w: &WeightVector) -> Result<Vec<f64>> {
    if params.len() != w.len() {
        return Err(Error::shape(
            format!("{} parameter vectors", w.len()),
            params.len(),
        ));
    }
    let len = params.first().map_or(0, |p| p.len());
    if let Some(bad) = params.iter().find(|p| p.len() != len) {
        return Err(Error::shape(format!("{len} parameters"), bad.len()));
    }
    let mut out: Option<Vec<f64>> = None;
    for (p, &wj) in params.iter().zip(w.as_slice()) {
        if wj == 0.0 {
            continue;
        }
        match out.as_mut() {
            None => out = Some(p.iter().map(|x| wj * x).collect()),
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(p.iter()) {
                    *a += wj * x;
                }
            }
        }
    }
    Ok(out.unwrap_or_else(|| vec![0.0; len]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Grid search over the simplex for N ≤ 3 at the given step.
    fn grid_oracle(p: &Matrix, y: &[f64], step: f64) -> (Vec<f64>, f64) {
        let ticks = (1.0 / step).round() as usize;
        let mut best = (vec![], f64::INFINITY);
        let mut consider = |w: Vec<f64>| {
            let e = simplex_objective(p, y, &w);
            if e < best.1 {
                best = (w, e);
            }
        };
        match p.cols() {
            1 => consider(vec![1.0]),
            2 => (0..=ticks).for_each(|a| {
                let w1 = a as f64 / ticks as f64;
                consider(vec![w1, 1.0 - w1]);
            }),
            3 => {
                for a in 0..=ticks {
                    for b in 0..=ticks - a {
                        let (w1, w2) = (a as f64 / ticks as f64, b as f64 / ticks as f64);
                        consider(vec![w1, w2, (1.0 - w1 - w2).max(0.0)]);
                    }
                }
            }
            _ => unreachable!("grid oracle only covers N <= 3"),
        }
        best
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine_similarity(&[1., 2., 3.], &[1., 2., 3.]).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(cosine_similarity(&[1., 0.], &[0., 1.]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine_similarity(&[1., 0.], &[1., 1.]).unwrap(),
            0.7071067811865476,
            epsilon = 1e-15
        );
        assert!(matches!(cosine_similarity(&[0., 0.], &[1., 1.]), Err(Error::ZeroVector)));
        assert!(matches!(cosine_similarity(&[1.], &[1., 1.]), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(cosine_similarity(&[f64::NAN], &[1.]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn kernel_weight_examples() {
        assert_eq!(knn_kernel_weights(&[3., -1.], &[&[0.2, 5.]]).unwrap(), vec![1.0]);
        let w = knn_kernel_weights(&[1., 0.], &[&[1., 0.], &[0., 1.]]).unwrap();
        assert_abs_diff_eq!(w[0], 0.7310585786, epsilon = 1e-10);
        assert_abs_diff_eq!(w[1], 0.2689414214, epsilon = 1e-10);
        let w = knn_kernel_weights(&[1., 1.], &[&[1., 1.], &[1., 1.]]).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        assert!(matches!(knn_kernel_weights(&[1., 1.], &[&[0., 0.]]), Err(Error::ZeroVector)));
    }

    #[test]
    fn projection_examples_match_grid_oracle() {
        // Oracle: closest point of the 1-simplex on a 1e-4 grid.
        let oracle = |v: [f64; 2]| {
            (0..=10_000)
                .map(|a| {
                    let w1 = a as f64 / 10_000.0;
                    (w1, (w1 - v[0]).powi(2) + (1.0 - w1 - v[1]).powi(2))
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(w1, _)| [w1, 1.0 - w1])
                .unwrap()
        };
        let [a, b] = oracle([0.3, -0.1]);
        assert_abs_diff_eq!(a, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(b, 0.3, epsilon = 1e-12);
        assert_eq!(oracle([2.0, 0.0]), [1.0, 0.0]);

        assert_eq!(project_to_simplex(&[0.5, 0.5]).unwrap().as_slice(), &[0.5, 0.5]);
        let w = project_to_simplex(&[0.3, -0.1]).unwrap();
        assert_abs_diff_eq!(w.as_slice()[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(w.as_slice()[1], 0.3, epsilon = 1e-12);
        assert_eq!(project_to_simplex(&[2.0, 0.0]).unwrap().as_slice(), &[1.0, 0.0]);
        assert!(project_to_simplex(&[f64::INFINITY]).is_err());
        assert!(project_to_simplex(&[]).is_err());
    }

    #[test]
    fn lsq_single_column_is_a_point() {
        let p = Matrix::from_columns(&[vec![1.0, 2.0, 4.0]]).unwrap();
        let y = [0.0, 2.0, 5.0];
        let sol = solve_simplex_lsq(&p, &y, DEFAULT_LSQ_TOL, DEFAULT_LSQ_MAX_ITERS).unwrap();
        assert_eq!(sol.weights.as_slice(), &[1.0]);
        assert_abs_diff_eq!(sol.proxy_error, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn lsq_prefers_perfect_predictor() {
        let y = vec![0.3, -1.2, 2.5, 0.0, 1.1];
        let off: Vec<f64> = y.iter().map(|v| v + 10.0).collect();
        let p = Matrix::from_columns(&[y.clone(), off]).unwrap();
        let sol = solve_simplex_lsq(&p, &y, DEFAULT_LSQ_TOL, DEFAULT_LSQ_MAX_ITERS).unwrap();
        assert!(sol.weights.as_slice()[0] > 0.9999);
        assert!(sol.proxy_error < 1e-8);
    }

    #[test]
    fn lsq_midpoint_instance_matches_grid() {
        let p = Matrix::from_columns(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        let y = [1.0, 1.0];
        let (grid_w, grid_e) = grid_oracle(&p, &y, 1e-4);
        assert_abs_diff_eq!(grid_w[0], 0.5, epsilon = 1e-12);
        assert_eq!(grid_e, 0.0);
        let sol = solve_simplex_lsq(&p, &y, DEFAULT_LSQ_TOL, DEFAULT_LSQ_MAX_ITERS).unwrap();
        assert_abs_diff_eq!(sol.weights.as_slice()[0], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.weights.as_slice()[1], 0.5, epsilon = 1e-9);
        assert!(sol.proxy_error < 1e-15);
    }

    #[test]
    fn lsq_errors() {
        let p = Matrix::from_row_major(0, 2, vec![]).unwrap();
        assert!(matches!(solve_simplex_lsq(&p, &[], 1e-10, 10), Err(Error::EmptyDataset)));
        let p = Matrix::from_columns(&[vec![f64::NAN, 1.0]]).unwrap();
        assert!(matches!(solve_simplex_lsq(&p, &[1.0, 1.0], 1e-10, 10), Err(Error::InvalidInput(_))));
        let p = Matrix::from_columns(&[vec![0.0, 1.0]]).unwrap();
        assert!(solve_simplex_lsq(&p, &[1.0, 1.0], 0.0, 10).is_err());
        assert!(solve_simplex_lsq(&p, &[1.0], 1e-10, 10).is_err());
    }

    #[test]
    fn lsq_matches_grid_on_random_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.random_range(1..=3);
            let m = rng.random_range(1..=30);
            let cols: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let y: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = Matrix::from_columns(&cols).unwrap();
            let sol = solve_simplex_lsq(&p, &y, DEFAULT_LSQ_TOL, DEFAULT_LSQ_MAX_ITERS).unwrap();
            let (_, grid_e) = grid_oracle(&p, &y, 0.01);
            assert!(sol.proxy_error <= grid_e + 1e-4, "{} vs grid {}", sol.proxy_error, grid_e);
            for pair in sol.objective_trace.windows(2) {
                assert!(pair[1] <= pair[0]);
            }
        }
    }

    #[test]
    fn blend_examples() {
        let a = vec![0.1, -0.0, 3.25e-7];
        let w = WeightVector::new(vec![1.0]).unwrap();
        let out = blend_parameters(&[&a], &w).unwrap();
        assert!(out.iter().zip(&a).all(|(x, y)| x.to_bits() == y.to_bits()));

        let w = WeightVector::new(vec![0.3, 0.7]).unwrap();
        let out = blend_parameters(&[&a, &a], &w).unwrap();
        for (x, y) in out.iter().zip(&a) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }

        let w = WeightVector::new(vec![0.25, 0.75]).unwrap();
        let out = blend_parameters(&[&[0.0, 4.0], &[2.0, 0.0]], &w).unwrap();
        assert_eq!(out, vec![1.5, 1.0]);

        let w = WeightVector::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            blend_parameters(&[&[0.0, 4.0], &[2.0]], &w),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(blend_parameters(&[&[0.0]], &w).is_err());
    }

    #[test]
    fn weight_vector_validation() {
        assert!(WeightVector::new(vec![0.5, 0.5 + 5e-7]).is_ok());
        assert!(WeightVector::new(vec![0.5, 0.6]).is_err());
        assert!(WeightVector::new(vec![1.1, -0.1]).is_err());
        assert!(WeightVector::new(vec![]).is_err());
        let json = serde_json::to_string(&WeightVector::uniform(4).unwrap()).unwrap();
        assert_eq!(json, "[0.25,0.25,0.25,0.25]");
        assert!(serde_json::from_str::<WeightVector>("[0.9,0.9]").is_err());
    }

    fn simplex_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>() + 1e-9;
            v.iter().map(|x| (x + 1e-9 / v.len() as f64) / s).collect()
        })
    }

    proptest! {
        #[test]
        fn kernel_weights_sum_to_one_and_permute(
            query in prop::collection::vec(0.1f64..2.0, 3),
            raw in prop::collection::vec(prop::collection::vec(0.1f64..2.0, 3), 1..8),
            shift in 0usize..8,
        ) {
            let refs: Vec<&[f64]> = raw.iter().map(Vec::as_slice).collect();
            let w = knn_kernel_weights(&query, &refs).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(w.iter().all(|&x| x >= 0.0));

            let k = shift % refs.len();
            let mut rotated = refs.clone();
            rotated.rotate_left(k);
            let wr = knn_kernel_weights(&query, &rotated).unwrap();
            let mut expected = w.clone();
            expected.rotate_left(k);
            for (a, b) in wr.iter().zip(&expected) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }

        #[test]
        fn projection_is_idempotent_and_feasible(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let w = project_to_simplex(&v).unwrap();
            prop_assert!(w.as_slice().iter().all(|&x| x >= 0.0));
            prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_SUM_TOL);
            prop_assert!(WeightVector::new(w.as_slice().to_vec()).is_ok());
            let again = project_to_simplex(w.as_slice()).unwrap();
            for (a, b) in again.as_slice().iter().zip(w.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn projection_beats_random_feasible_points(
            v in prop::collection::vec(-5.0f64..5.0, 2..6),
            seed in any::<u64>(),
        ) {
            let w = project_to_simplex(&v).unwrap();
            let dist = |u: &[f64]| u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..50 {
                let raw: Vec<f64> = (0..v.len()).map(|_| rng.random::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                let u: Vec<f64> = raw.iter().map(|x| x / s).collect();
                prop_assert!(dist(w.as_slice()) <= dist(&u) + 1e-12);
            }
        }

        #[test]
        fn blend_is_linear_in_weights(
            params in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 5), 3),
            u in simplex_strategy(3),
            v in simplex_strategy(3),
            alpha in 0.0f64..=1.0,
        ) {
            let refs: Vec<&[f64]> = params.iter().map(Vec::as_slice).collect();
            let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let lhs = blend_parameters(&refs, &WeightVector::new(mix).unwrap()).unwrap();
            let bu = blend_parameters(&refs, &WeightVector::new(u).unwrap()).unwrap();
            let bv = blend_parameters(&refs, &WeightVector::new(v).unwrap()).unwrap();
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (alpha * bu[i] + (1.0 - alpha) * bv[i])).abs() <= 1e-12);
            }
        }
    }
}
