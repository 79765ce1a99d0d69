//! Graph construction and closed-form propagation.
//!
//! Each function comes in two flavours: an `*_on` form that records onto a
//! [`GradTape`] so gradients flow through it during training, and a plain
//! form over [`Matrix`] values for reporting and tests. The plain forms run
//! the tape code on a scratch tape, so both share one implementation.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::relation::RelationMap;
use crate::tape::{GradTape, Var};

/// Below this the kernel width is considered degenerate and replaced by 1.
pub const SIGMA_SQ_FLOOR: f64 = 1e-12;

/// Adjacency, its normalization and the propagation matrix for one graph.
#[derive(Debug, Clone)]
pub struct PropagationGraph {
    pub n: usize,
    pub adjacency: Matrix,
    pub normalized: Matrix,
    pub propagation: Matrix,
    pub alpha: f64,
    pub sigma_sq: f64,
}

impl PropagationGraph {
    pub fn from_adjacency(adjacency: Matrix, sigma_sq: f64, alpha: f64) -> Result<Self> {
        let normalized = symmetric_normalize(&adjacency)?;
        let propagation = propagation_matrix(&normalized, alpha)?;
        Ok(Self {
            n: adjacency.rows(),
            adjacency,
            normalized,
            propagation,
            alpha,
            sigma_sq,
        })
    }

    /// Gaussian graph over the rows of `z`.
    pub fn gaussian(z: &Matrix, alpha: f64) -> Result<Self> {
        let d2 = crate::matrix::pairwise_sq_distances(z)?;
        let (a, sigma_sq) = gaussian_adjacency(&d2)?;
        Self::from_adjacency(a, sigma_sq, alpha)
    }

    /// Propagation matrix with round-off negatives clamped to zero. Only for
    /// display; the differentiable path never clamps.
    pub fn propagation_for_report(&self) -> Matrix {
        self.propagation.map(|v| v.max(0.0))
    }
}

fn off_diagonal_mask(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })
}

/// Gaussian kernel `exp(-d / σ²)` over a matrix of nonnegative pairwise
/// dissimilarities, diagonal forced to zero. σ² is the population standard
/// deviation of the off-diagonal entries, or 1 when that is degenerate.
///
/// Returns the adjacency node and the σ² that was used.
pub fn gaussian_kernel_on(tape: &mut GradTape, dist: Var) -> Result<(Var, f64)> {
    let (n, cols) = tape.value(dist).shape();
    if n != cols {
        return Err(Error::invalid(format!("adjacency needs a square matrix, got {n}x{cols}")));
    }
    if n < 2 {
        return Err(Error::invalid(format!("adjacency needs at least 2 nodes, got {n}")));
    }
    let count = (n * (n - 1)) as f64;
    let mask = tape.input(off_diagonal_mask(n));

    let off = tape.mul(dist, mask)?;
    let total = tape.sum(off)?;
    let neg_mean = tape.scale(total, -1.0 / count)?;
    let centered = tape.shift_by(dist, neg_mean)?;
    let centered = tape.mul(centered, mask)?;
    let sq = tape.square(centered)?;
    let ss = tape.sum(sq)?;
    let var = tape.scale(ss, 1.0 / count)?;
    let std = tape.sqrt(var)?;

    let computed = tape.scalar(std);
    let (inv_width, sigma_sq) = if computed < SIGMA_SQ_FLOOR {
        (tape.input(Matrix::scalar(1.0)), 1.0)
    } else {
        (tape.powf(std, -1.0)?, computed)
    };
    let neg = tape.scale(dist, -1.0)?;
    let scaled = tape.scale_by(neg, inv_width)?;
    let kernel = tape.exp(scaled)?;
    Ok((tape.mul(kernel, mask)?, sigma_sq))
}

/// Gaussian adjacency from squared distances.
pub fn gaussian_adjacency(d2: &Matrix) -> Result<(Matrix, f64)> {
    if d2.rows() != d2.cols() {
        return Err(Error::invalid("squared-distance matrix must be square"));
    }
    if !d2.is_symmetric(1e-9) {
        return Err(Error::invalid("squared-distance matrix must be symmetric"));
    }
    if d2.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("squared distances must be nonnegative"));
    }
    let mut tape = GradTape::new();
    let d = tape.input(d2.clone());
    let (a, sigma_sq) = gaussian_kernel_on(&mut tape, d)?;
    Ok((tape.value(a).clone(), sigma_sq))
}

/// Matrix of l1 norms of an n²xc stack of relation vectors, as nxn.
pub fn relation_l1_on(tape: &mut GradTape, relations: Var, n: usize) -> Result<Var> {
    let a = tape.abs(relations)?;
    let s = tape.row_sum(a)?;
    tape.reshape(s, n, n)
}

/// Adjacency from a complete (rectified) relation map: Gaussian kernel over
/// the l1 norms of its relation vectors.
pub fn adjacency_from_relations(rel: &RelationMap) -> Result<(Matrix, f64)> {
    if !rel.is_complete() {
        return Err(Error::IncompleteRelationMap(format!(
            "need all {0}x{0} relation vectors; query blocks are absent",
            rel.n()
        )));
    }
    let mut tape = GradTape::new();
    let r = tape.input(rel.vectors().clone());
    let l1 = relation_l1_on(&mut tape, r, rel.n())?;
    let (a, sigma_sq) = gaussian_kernel_on(&mut tape, l1)?;
    Ok((tape.value(a).clone(), sigma_sq))
}

/// Normalized Gaussian graph `D^{-1/2} A D^{-1/2}` from pairwise
/// dissimilarities. Normalization cancels any constant factor on `A`, so the
/// kernel is evaluated on distances offset by their off-diagonal minimum,
/// which keeps widely spread graphs from underflowing to zero.
pub fn normalized_gaussian_on(tape: &mut GradTape, dist: Var) -> Result<Var> {
    let d = tape.value(dist);
    let n = d.rows();
    let floor = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| d.get(i, j))
        .fold(f64::INFINITY, f64::min);
    let shifted = if floor.is_finite() && floor > 0.0 {
        let offset = tape.input(off_diagonal_mask(n).map(|m| m * floor));
        tape.sub(dist, offset)?
    } else {
        dist
    };
    let (a, _) = gaussian_kernel_on(tape, shifted)?;
    symmetric_normalize_on(tape, a)
}

/// `D^{-1/2} A D^{-1/2}` with `D` the row-sum degrees.
pub fn symmetric_normalize_on(tape: &mut GradTape, a: Var) -> Result<Var> {
    let (n, cols) = tape.value(a).shape();
    if n != cols {
        return Err(Error::invalid("normalization needs a square adjacency"));
    }
    let deg = tape.row_sum(a)?;
    if let Some(row) = tape.value(deg).data().iter().position(|&d| d <= 0.0) {
        return Err(Error::IsolatedNode { row });
    }
    let inv_sqrt = tape.powf(deg, -0.5)?;
    let inv_sqrt_t = tape.transpose(inv_sqrt)?;
    let outer = tape.matmul(inv_sqrt, inv_sqrt_t)?;
    tape.mul(a, outer)
}

pub fn symmetric_normalize(a: &Matrix) -> Result<Matrix> {
    if a.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("adjacency must be nonnegative"));
    }
    let mut tape = GradTape::new();
    let av = tape.input(a.clone());
    let s = symmetric_normalize_on(&mut tape, av)?;
    Ok(tape.value(s).clone())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// `(1 - α)(I - αS)⁻¹`, computed by solving against the identity.
pub fn propagation_matrix_on(tape: &mut GradTape, s: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let (n, cols) = tape.value(s).shape();
    if n != cols {
        return Err(Error::invalid("propagation needs a square matrix"));
    }
    let eye = tape.input(Matrix::identity(n));
    let scaled = tape.scale(s, -alpha)?;
    let system = tape.add(eye, scaled)?;
    let inv = tape.solve(system, eye)?;
    tape.scale(inv, 1.0 - alpha)
}

pub fn propagation_matrix(s: &Matrix, alpha: f64) -> Result<Matrix> {
    let mut tape = GradTape::new();
    let sv = tape.input(s.clone());
    let p = propagation_matrix_on(&mut tape, sv, alpha)?;
    Ok(tape.value(p).clone())
}

pub fn propagate_on(tape: &mut GradTape, p: Var, z: Var) -> Result<Var> {
    tape.matmul(p, z)
}

pub fn propagate(p: &Matrix, z: &Matrix) -> Result<Matrix> {
    p.matmul(z)
}

/// Truncated series `(1 - α) Σ_{t=0..k} αᵗ Sᵗ Z`. Converges to
/// `propagate(propagation_matrix(S, α), Z)` when the spectral radius of `αS`
/// is below one.
pub fn neumann_propagate(s: &Matrix, alpha: f64, z: &Matrix, k: usize) -> Result<Matrix> {
    if k == 0 {
        return Err(Error::invalid("neumann_propagate needs k >= 1"));
    }
    if s.rows() != s.cols() || s.cols() != z.rows() {
        return Err(Error::invalid(format!(
            "neumann_propagate shapes {:?} and {:?}",
            s.shape(),
            z.shape()
        )));
    }
    let mut term = z.clone();
    let mut total = z.clone();
    for _ in 0..k {
        term = s.matmul(&term)?.scale(alpha);
        total.add_assign(&term);
    }
    Ok(total.scale(1.0 - alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::pairwise_sq_distances;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn coincident_points_fall_back_to_unit_width() {
        let (a, s2) = gaussian_adjacency(&Matrix::zeros(2, 2)).unwrap();
        assert_eq!(s2, 1.0);
        assert_eq!(a, m(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
    }

    #[test]
    fn three_node_width_is_population_std() {
        // off-diagonal multiset {1, 1, 4, 4, 1, 1}: mean 2, variance 2.
        let d2 = m(&[vec![0.0, 1.0, 4.0], vec![1.0, 0.0, 1.0], vec![4.0, 1.0, 0.0]]);
        let (a, s2) = gaussian_adjacency(&d2).unwrap();
        assert!((s2 - 2f64.sqrt()).abs() < 1e-15);
        assert!((a.get(0, 1) - (-1.0 / 2f64.sqrt()).exp()).abs() < 1e-15);
        assert!((a.get(0, 2) - (-4.0 / 2f64.sqrt()).exp()).abs() < 1e-15);
        assert_eq!(a.get(1, 1), 0.0);
    }

    #[test]
    fn adjacency_is_scale_invariant() {
        let z = m(&[vec![0.1, 2.0], vec![-1.0, 0.3], vec![0.7, 0.7], vec![2.0, -0.5]]);
        let d2 = pairwise_sq_distances(&z).unwrap();
        let (a, s) = gaussian_adjacency(&d2).unwrap();
        let (b, t) = gaussian_adjacency(&d2.scale(7.5)).unwrap();
        assert!((t / s - 7.5).abs() < 1e-12);
        assert!(a.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn adjacency_rejects_single_node_and_asymmetry() {
        assert!(gaussian_adjacency(&Matrix::zeros(1, 1)).is_err());
        assert!(gaussian_adjacency(&m(&[vec![0.0, 1.0], vec![2.0, 0.0]])).is_err());
    }

    #[test]
    fn normalization_of_two_node_graphs() {
        let swap = m(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(symmetric_normalize(&swap).unwrap(), swap);
        let heavy = m(&[vec![0.0, 2.0], vec![2.0, 0.0]]);
        assert!(symmetric_normalize(&heavy).unwrap().max_abs_diff(&swap) < 1e-15);
    }

    #[test]
    fn isolated_node_names_its_row() {
        let a = m(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]);
        assert!(matches!(symmetric_normalize(&a), Err(Error::IsolatedNode { row: 2 })));
    }

    fn normalized_via_tape(d: &Matrix) -> Result<Matrix> {
        let mut tape = GradTape::new();
        let v = tape.input(d.clone());
        let s = normalized_gaussian_on(&mut tape, v)?;
        Ok(tape.value(s).clone())
    }

    #[test]
    fn offset_kernel_normalizes_like_the_plain_one() {
        let z = m(&[vec![0.1, 2.0], vec![-1.0, 0.3], vec![0.7, 0.7], vec![2.0, -0.5]]);
        let d2 = pairwise_sq_distances(&z).unwrap();
        let (a, _) = gaussian_adjacency(&d2).unwrap();
        let plain = symmetric_normalize(&a).unwrap();
        assert!(normalized_via_tape(&d2).unwrap().max_abs_diff(&plain) < 1e-14);

        // Tightly clustered far-apart distances underflow the plain kernel.
        let far = d2.map(|v| if v > 0.0 { 1e6 + v } else { 0.0 });
        let (a, _) = gaussian_adjacency(&far).unwrap();
        assert!(symmetric_normalize(&a).is_err());
        assert!(normalized_via_tape(&far).unwrap().max_abs_diff(&plain) < 1e-9);
    }

    #[test]
    fn two_node_propagation_by_hand() {
        // 0.5 * (I - 0.5 S)^-1 = 0.5 * (4/3) [[1, .5], [.5, 1]]
        let s = m(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let p = propagation_matrix(&s, 0.5).unwrap();
        let want = m(&[vec![2.0 / 3.0, 1.0 / 3.0], vec![1.0 / 3.0, 2.0 / 3.0]]);
        assert!(p.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn alpha_limits_rejected() {
        let s = Matrix::identity(2);
        assert!(propagation_matrix(&s, 0.0).is_err());
        assert!(propagation_matrix(&s, 1.0).is_err());
    }

    #[test]
    fn tiny_alpha_is_identity() {
        let s = m(&[vec![0.0, 0.6, 0.4], vec![0.6, 0.0, 0.5], vec![0.4, 0.5, 0.0]]);
        let p = propagation_matrix(&s, 1e-12).unwrap();
        assert!(p.max_abs_diff(&Matrix::identity(3)) < 1e-9);
    }

    #[test]
    fn neumann_two_terms() {
        let s = m(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let z = m(&[vec![1.0, 2.0], vec![3.0, -1.0]]);
        let alpha = 0.01;
        let got = neumann_propagate(&s, alpha, &z, 1).unwrap();
        let sz = s.matmul(&z).unwrap();
        let want = z.add(&sz.scale(alpha)).unwrap().scale(1.0 - alpha);
        assert!(got.max_abs_diff(&want) < 1e-15);
        assert!(neumann_propagate(&s, alpha, &z, 0).is_err());
    }

    #[test]
    fn neumann_gap_shrinks_with_k_at_high_alpha() {
        let z = m(&[vec![0.3, 1.0], vec![-0.2, 0.5], vec![1.5, -1.0], vec![0.0, 0.0]]);
        let g = PropagationGraph::gaussian(&z, 0.9).unwrap();
        let exact = propagate(&g.propagation, &z).unwrap();
        let mut last = f64::INFINITY;
        for k in [1, 2, 4, 8, 16, 32, 64, 128] {
            let gap = neumann_propagate(&g.normalized, 0.9, &z, k)
                .unwrap()
                .max_abs_diff(&exact);
            assert!(gap < last, "k={k}: {gap} !< {last}");
            last = gap;
        }
    }

    #[test]
    fn report_clamp_leaves_graph_untouched() {
        let z = m(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]]);
        let g = PropagationGraph::gaussian(&z, 0.2).unwrap();
        let clamped = g.propagation_for_report();
        assert!(clamped.data().iter().all(|&v| v >= 0.0));
        assert!(g.propagation.max_abs_diff(&clamped) <= 1e-12);
    }
}
