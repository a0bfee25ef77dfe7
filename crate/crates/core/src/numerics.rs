//! Dense real/complex linear algebra used by every other module.
//!
//! Thin, contract-checked layer over nalgebra: LU solves with an explicit
//! pivot threshold, SVD with descending singular values, and a symmetric
//! eigensolver. Matrices are `DMatrix<Complex64>` built from row-major data.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

/// Complex dense matrix; constructors take row-major entries.
pub type ComplexMatrix = DMatrix<Complex64>;
/// Complex column vector.
pub type ComplexVector = DVector<Complex64>;
/// Real dense matrix.
pub type RealMatrix = DMatrix<f64>;

/// Relative threshold below which a singular value counts as zero.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("matrix is numerically singular (pivot {pivot:.3e} < {threshold:.3e})")]
    SingularMatrix { pivot: f64, threshold: f64 },
    #[error("iterative decomposition failed to converge")]
    ConvergenceFailure,
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
}

/// Builds a validated complex matrix from row-major entries.
pub fn complex_matrix(
    rows: usize,
    cols: usize,
    entries: &[Complex64],
) -> Result<ComplexMatrix, NumericsError> {
    if rows == 0 || cols == 0 || entries.len() != rows * cols {
        return Err(NumericsError::InvalidDimensions(format!(
            "{rows}x{cols} with {} entries",
            entries.len()
        )));
    }
    for (k, e) in entries.iter().enumerate() {
        if !e.re.is_finite() || !e.im.is_finite() {
            return Err(NumericsError::NonFinite(k / cols, k % cols));
        }
    }
    Ok(DMatrix::from_row_slice(rows, cols, entries))
}

fn max_abs(a: &ComplexMatrix) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// LU factorization with partial pivoting, reusable for several right-hand sides.
pub struct LuFactors {
    lu: nalgebra::linalg::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>,
    min_pivot: f64,
    max_pivot: f64,
    threshold: f64,
}

impl LuFactors {
    pub fn new(a: &ComplexMatrix) -> Result<Self, NumericsError> {
        if !a.is_square() {
            return Err(NumericsError::InvalidDimensions(format!(
                "LU of {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let threshold = 1e-14 * max_abs(a).max(f64::MIN_POSITIVE);
        let lu = nalgebra::linalg::LU::new(a.clone());
        let u = lu.u();
        let mut min_pivot = f64::INFINITY;
        let mut max_pivot: f64 = 0.0;
        for i in 0..u.nrows() {
            let p = u[(i, i)].norm();
            min_pivot = min_pivot.min(p);
            max_pivot = max_pivot.max(p);
        }
        if min_pivot < threshold {
            return Err(NumericsError::SingularMatrix {
                pivot: min_pivot,
                threshold,
            });
        }
        Ok(Self {
            lu,
            min_pivot,
            max_pivot,
            threshold,
        })
    }

    pub fn solve(&self, b: &ComplexVector) -> Result<ComplexVector, NumericsError> {
        self.lu
            .solve(b)
            .ok_or(NumericsError::SingularMatrix {
                pivot: self.min_pivot,
                threshold: self.threshold,
            })
    }

    /// Cheap conditioning proxy: ratio of extreme pivot magnitudes.
    pub fn pivot_ratio(&self) -> f64 {
        self.max_pivot / self.min_pivot
    }
}

/// Solves A·x = b by LU with partial pivoting.
pub fn solve_linear(a: &ComplexMatrix, b: &ComplexVector) -> Result<ComplexVector, NumericsError> {
    if a.nrows() != b.len() {
        return Err(NumericsError::InvalidDimensions(format!(
            "A is {}x{}, b has {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    LuFactors::new(a)?.solve(b)
}

/// Singular value decomposition A = U·Σ·V* with σ sorted descending.
pub struct SvdResult {
    pub singular_values: Vec<f64>,
    pub u: ComplexMatrix,
    pub v_t: ComplexMatrix,
}

impl SvdResult {
    /// Number of singular values with σ_k > tol·σ_1.
    pub fn rank(&self, tol: f64) -> usize {
        let s1 = self.singular_values.first().copied().unwrap_or(0.0);
        if s1 == 0.0 {
            return 0;
        }
        self.singular_values.iter().filter(|&&s| s > tol * s1).count()
    }

    pub fn reconstruct(&self) -> ComplexMatrix {
        let mut sigma = ComplexMatrix::zeros(self.u.ncols(), self.v_t.nrows());
        for (i, &s) in self.singular_values.iter().enumerate() {
            sigma[(i, i)] = Complex64::new(s, 0.0);
        }
        &self.u * sigma * &self.v_t
    }
}

/// Full SVD with descending singular values.
pub fn svd(a: &ComplexMatrix) -> Result<SvdResult, NumericsError> {
    let svd = nalgebra::linalg::SVD::try_new(a.clone(), true, true, f64::EPSILON * 4.0, 4000)
        .ok_or(NumericsError::ConvergenceFailure)?;
    let u = svd.u.ok_or(NumericsError::ConvergenceFailure)?;
    let v_t = svd.v_t.ok_or(NumericsError::ConvergenceFailure)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .unwrap()
    });
    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u_sorted = ComplexMatrix::from_columns(
        &order.iter().map(|&i| u.column(i).into_owned()).collect::<Vec<_>>(),
    );
    let vt_sorted = ComplexMatrix::from_rows(
        &order.iter().map(|&i| v_t.row(i).into_owned()).collect::<Vec<_>>(),
    );
    Ok(SvdResult {
        singular_values,
        u: u_sorted,
        v_t: vt_sorted,
    })
}

/// Numerical rank at the module-wide relative threshold [`RANK_TOL`].
pub fn numerical_rank(a: &ComplexMatrix) -> Result<usize, NumericsError> {
    Ok(svd(a)?.rank(RANK_TOL))
}

/// Eigenvalues of a real symmetric matrix, sorted descending.
///
/// The input is symmetrized first; asymmetry beyond 1e-12·‖A‖ is a caller bug
/// but does not fail the decomposition.
pub fn eigen_symmetric(a: &RealMatrix) -> Result<Vec<f64>, NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::InvalidDimensions(format!(
            "{}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = nalgebra::linalg::SymmetricEigen::try_new(sym, f64::EPSILON * 4.0, 4000)
        .ok_or(NumericsError::ConvergenceFailure)?;
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(vals)
}

/// Eigen decomposition of a real symmetric matrix (values descending, vectors
/// as columns in matching order).
pub fn eigen_symmetric_full(a: &RealMatrix) -> Result<(Vec<f64>, RealMatrix), NumericsError> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = nalgebra::linalg::SymmetricEigen::try_new(sym, f64::EPSILON * 4.0, 4000)
        .ok_or(NumericsError::ConvergenceFailure)?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = RealMatrix::from_columns(
        &order
            .iter()
            .map(|&i| eig.eigenvectors.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    Ok((vals, vecs))
}

/// Minimum-norm least-squares solution of A·x ≈ b for real A.
pub fn lstsq(a: &RealMatrix, b: &DVector<f64>) -> Result<DVector<f64>, NumericsError> {
    let svd = nalgebra::linalg::SVD::try_new(a.clone(), true, true, f64::EPSILON * 4.0, 4000)
        .ok_or(NumericsError::ConvergenceFailure)?;
    svd.solve(b, RANK_TOL * 1e-4)
        .map_err(|_| NumericsError::ConvergenceFailure)
}

/// Minimum-norm least-squares solution for complex A.
pub fn lstsq_complex(
    a: &ComplexMatrix,
    b: &ComplexVector,
) -> Result<ComplexVector, NumericsError> {
    let svd = nalgebra::linalg::SVD::try_new(a.clone(), true, true, f64::EPSILON * 4.0, 4000)
        .ok_or(NumericsError::ConvergenceFailure)?;
    svd.solve(b, RANK_TOL * 1e-4)
        .map_err(|_| NumericsError::ConvergenceFailure)
}
