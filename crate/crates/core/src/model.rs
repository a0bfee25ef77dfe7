//! Statistical domain objects: count tables, likelihood evaluation, margins,
//! the duality constant Ω_U, and the closed-form rank-1 estimate.
//!
//! Symmetric tables store only the upper triangle u_ij (i ≤ j). The algebraic
//! convention that doubles diagonal entries before imposing rank constraints
//! lives in [`crate::formulation`]; everything here speaks in statistical
//! coordinates (true cell probabilities).

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::numerics::RealMatrix;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("probability entry ({0}, {1}) is not strictly positive")]
    NonpositiveProbability(usize, usize),
    #[error("count entry ({0}, {1}) is not strictly positive")]
    NonpositiveCount(usize, usize),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid rank model: {0}")]
    InvalidModel(String),
}

/// Rank-constrained model selector: m×n matrices of rank ≤ r, optionally the
/// symmetric variant (then m = n).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RankModel {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub symmetric: bool,
}

impl RankModel {
    pub fn general(m: usize, n: usize, r: usize) -> Result<Self, ModelError> {
        if m < 1 || n < m {
            return Err(ModelError::InvalidModel(format!(
                "need 1 <= m <= n, got m={m}, n={n}"
            )));
        }
        if r < 1 || r > m {
            return Err(ModelError::InvalidModel(format!(
                "need 1 <= r <= min(m,n), got r={r} for {m}x{n}"
            )));
        }
        Ok(Self {
            m,
            n,
            r,
            symmetric: false,
        })
    }

    pub fn symmetric(n: usize, r: usize) -> Result<Self, ModelError> {
        if n < 2 || r < 1 || r > n {
            return Err(ModelError::InvalidModel(format!(
                "need 1 <= r <= n, n >= 2, got n={n}, r={r}"
            )));
        }
        Ok(Self {
            m: n,
            n,
            r,
            symmetric: true,
        })
    }

    /// Number of unknowns (= equations) of the kernel formulation.
    pub fn system_size(&self) -> usize {
        if self.symmetric {
            self.n * (self.n + 1) / 2
        } else {
            self.m * self.n
        }
    }

    /// Rank of the dual model under ML duality (m − r + 1).
    pub fn dual_rank(&self) -> usize {
        self.m - self.r + 1
    }

    pub fn is_self_dual(&self) -> bool {
        self.dual_rank() == self.r
    }
}

/// Positive m×n count table (full storage) or symmetric upper triangle.
///
/// Counts are reals, not integers, so one-parameter families such as U(a, b)
/// with real a stay representable.
#[derive(Debug, Clone)]
pub struct DataMatrix {
    m: usize,
    n: usize,
    symmetric: bool,
    /// Row-major m·n entries, or row-major upper triangle of length n(n+1)/2.
    entries: Vec<f64>,
}

impl DataMatrix {
    pub fn general(m: usize, n: usize, entries: Vec<f64>) -> Result<Self, ModelError> {
        if m == 0 || n == 0 || entries.len() != m * n {
            return Err(ModelError::InvalidShape(format!(
                "{m}x{n} with {} entries",
                entries.len()
            )));
        }
        for (k, &u) in entries.iter().enumerate() {
            if !(u > 0.0) || !u.is_finite() {
                return Err(ModelError::NonpositiveCount(k / n, k % n));
            }
        }
        Ok(Self {
            m,
            n,
            symmetric: false,
            entries,
        })
    }

    /// Symmetric table from the row-major upper triangle (u_11, u_12, …, u_nn).
    pub fn symmetric(n: usize, upper: Vec<f64>) -> Result<Self, ModelError> {
        if n == 0 || upper.len() != n * (n + 1) / 2 {
            return Err(ModelError::InvalidShape(format!(
                "symmetric {n}x{n} needs {} entries, got {}",
                n * (n + 1) / 2,
                upper.len()
            )));
        }
        for (k, &u) in upper.iter().enumerate() {
            if !(u > 0.0) || !u.is_finite() {
                return Err(ModelError::NonpositiveCount(k, k));
            }
        }
        Ok(Self {
            m: n,
            n,
            symmetric: true,
            entries: upper,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn raw_entries(&self) -> &[f64] {
        &self.entries
    }

    fn upper_index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        // offset of row i within the packed upper triangle
        i * self.n - i * (i + 1) / 2 + j
    }

    /// Cell count u_ij (symmetric tables answer for both (i,j) and (j,i)).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.symmetric {
            self.entries[self.upper_index(i, j)]
        } else {
            self.entries[i * self.n + j]
        }
    }

    /// Grand total u_++ (symmetric: Σ_{i≤j} u_ij).
    pub fn total(&self) -> f64 {
        self.entries.iter().sum()
    }

    /// Full matrix of cell counts (symmetric tables are mirrored).
    pub fn full_matrix(&self) -> RealMatrix {
        RealMatrix::from_fn(self.m, self.n, |i, j| self.get(i, j))
    }

    /// Row sums u_i+ of the full matrix.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.m)
            .map(|i| (0..self.n).map(|j| self.get(i, j)).sum())
            .collect()
    }

    /// Column sums u_+j of the full matrix.
    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|j| (0..self.m).map(|i| self.get(i, j)).sum())
            .collect()
    }

    /// The doubled-diagonal matrix D⋆U used by the symmetric formulation; for
    /// general tables this is the table itself.
    pub fn algebraic_matrix(&self) -> RealMatrix {
        let mut a = self.full_matrix();
        if self.symmetric {
            for i in 0..self.n {
                a[(i, i)] *= 2.0;
            }
        }
        a
    }

    pub fn scaled(&self, c: f64) -> DataMatrix {
        DataMatrix {
            m: self.m,
            n: self.n,
            symmetric: self.symmetric,
            entries: self.entries.iter().map(|u| u * c).collect(),
        }
    }
}

/// Log-likelihood  Σ u_ij·log p_ij − u_++·log p_++  (symmetric: sums over i ≤ j).
///
/// `p` is a full matrix of statistical probabilities; entries must be strictly
/// positive where counted.
pub fn log_likelihood(u: &DataMatrix, p: &RealMatrix) -> Result<f64, ModelError> {
    if p.nrows() != u.m || p.ncols() != u.n {
        return Err(ModelError::InvalidShape(format!(
            "P is {}x{}, data is {}x{}",
            p.nrows(),
            p.ncols(),
            u.m,
            u.n
        )));
    }
    let mut ll = 0.0;
    let mut p_total = 0.0;
    for i in 0..u.m {
        for j in 0..u.n {
            if u.symmetric && j < i {
                continue;
            }
            let pij = p[(i, j)];
            if pij <= 0.0 {
                return Err(ModelError::NonpositiveProbability(i, j));
            }
            ll += u.get(i, j) * pij.ln();
            p_total += pij;
        }
    }
    Ok(ll - u.total() * p_total.ln())
}

/// The constant Hadamard product of ML duality.
///
/// General tables: Ω_ij = u_ij·u_i+·u_+j / u_++³. Symmetric tables use the
/// doubled-diagonal matrix Ũ = D⋆U with its margins ũ: the algebraic pairing
/// constant is Ũ⋆(ũũᵀ)/(2u_++³), reported here in statistical coordinates
/// (entry (i,j) divided by D_ij²) so that P⋆Q = Ω holds for statistical
/// critical points.
pub fn omega_matrix(u: &DataMatrix) -> RealMatrix {
    if u.symmetric {
        let ua = u.algebraic_matrix();
        let ut: Vec<f64> = (0..u.n).map(|i| ua.row(i).sum()).collect();
        let total = u.total();
        RealMatrix::from_fn(u.n, u.n, |i, j| {
            let d = if i == j { 2.0 } else { 1.0 };
            ua[(i, j)] * ut[i] * ut[j] / (2.0 * total.powi(3)) / (d * d)
        })
    } else {
        let rs = u.row_sums();
        let cs = u.col_sums();
        let total = u.total();
        RealMatrix::from_fn(u.m, u.n, |i, j| u.get(i, j) * rs[i] * cs[j] / total.powi(3))
    }
}

/// Same formula on complex data (used for the duality-closure completeness
/// certificate at the generic seed matrix).
pub fn omega_matrix_complex(
    u_alg: &DMatrix<Complex64>,
    total: Complex64,
    symmetric: bool,
) -> DMatrix<Complex64> {
    let n = u_alg.ncols();
    let m = u_alg.nrows();
    let rs: Vec<Complex64> = (0..m).map(|i| u_alg.row(i).sum()).collect();
    let cs: Vec<Complex64> = (0..n).map(|j| u_alg.column(j).sum()).collect();
    if symmetric {
        DMatrix::from_fn(n, n, |i, j| {
            let d = if i == j { 2.0 } else { 1.0 };
            u_alg[(i, j)] * rs[i] * rs[j] / (2.0 * total.powi(3)) / (d * d)
        })
    } else {
        DMatrix::from_fn(m, n, |i, j| u_alg[(i, j)] * rs[i] * cs[j] / total.powi(3))
    }
}

/// Closed-form maximum likelihood estimate in the rank-1 (independence) model.
pub fn rank_one_mle(u: &DataMatrix) -> RealMatrix {
    let total = u.total();
    if u.symmetric {
        // Derived from the Veronese parameterization x·xᵀ of the doubled
        // matrix: x_i = √2·ũ_i/(2u_++).
        let ua = u.algebraic_matrix();
        let ut: Vec<f64> = (0..u.n).map(|i| ua.row(i).sum()).collect();
        RealMatrix::from_fn(u.n, u.n, |i, j| {
            let d = if i == j { 2.0 } else { 1.0 };
            ut[i] * ut[j] / (2.0 * total * total) / d
        })
    } else {
        let rs = u.row_sums();
        let cs = u.col_sums();
        RealMatrix::from_fn(u.m, u.n, |i, j| rs[i] * cs[j] / (total * total))
    }
}

/// Row sums, column sums, and grand total of an arbitrary real matrix.
pub fn margins(m: &RealMatrix) -> (Vec<f64>, Vec<f64>, f64) {
    let rows: Vec<f64> = (0..m.nrows()).map(|i| m.row(i).sum()).collect();
    let cols: Vec<f64> = (0..m.ncols()).map(|j| m.column(j).sum()).collect();
    let total = rows.iter().sum();
    (rows, cols, total)
}

/// Margins of a complex matrix.
pub fn margins_complex(
    m: &DMatrix<Complex64>,
) -> (Vec<Complex64>, Vec<Complex64>, Complex64) {
    let rows: Vec<Complex64> = (0..m.nrows()).map(|i| m.row(i).sum()).collect();
    let cols: Vec<Complex64> = (0..m.ncols()).map(|j| m.column(j).sum()).collect();
    let total = rows.iter().sum();
    (rows, cols, total)
}

/// Uniform probability matrix on the same shape as `u` (handy in tests).
pub fn uniform_probability(m: usize, n: usize) -> RealMatrix {
    RealMatrix::from_element(m, n, 1.0 / (m as f64 * n as f64))
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn diana_u42() -> DataMatrix {
        let mut e = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                e.push(if i == j { 4.0 } else { 2.0 });
            }
        }
        DataMatrix::general(4, 4, e).unwrap()
    }

    fn diana_p42() -> RealMatrix {
        RealMatrix::from_fn(4, 4, |i, j| {
            if (i < 2) == (j < 2) {
                6.0 / 80.0
            } else {
                4.0 / 80.0
            }
        })
    }

    #[test]
    fn log_likelihood_uniform() {
        let u = DataMatrix::general(2, 2, vec![1.0; 4]).unwrap();
        let p = RealMatrix::from_element(2, 2, 0.25);
        let ll = log_likelihood(&u, &p).unwrap();
        assert!((ll - 4.0 * 0.25f64.ln()).abs() < 1e-12);
        assert!((ll + 5.545177).abs() < 1e-5);
    }

    #[test]
    fn log_likelihood_example_symmetric_point() {
        // First critical point of the n=3 symmetric example data.
        let u = DataMatrix::symmetric(3, vec![10.0, 9.0, 1.0, 21.0, 3.0, 7.0]).unwrap();
        let p = vec![0.1037, 0.3623, 0.0186, 0.3179, 0.0607, 0.1368];
        let mut pm = RealMatrix::zeros(3, 3);
        let mut k = 0;
        for i in 0..3 {
            for j in i..3 {
                pm[(i, j)] = p[k];
                pm[(j, i)] = p[k];
                k += 1;
            }
        }
        let ll = log_likelihood(&u, &pm).unwrap();
        assert!((ll - (-82.18102)).abs() < 1e-3, "ll = {ll}");
    }

    #[test]
    fn log_likelihood_matches_direct_sum_oracle() {
        let u = diana_u42();
        let p = diana_p42();
        let ll = log_likelihood(&u, &p).unwrap();
        // independent summation
        let mut direct = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                direct += u.get(i, j) * p[(i, j)].ln();
            }
        }
        let ptot: f64 = p.iter().sum();
        direct -= u.total() * ptot.ln();
        assert!((ll - direct).abs() < 1e-10);
    }

    #[test]
    fn log_likelihood_rejects_nonpositive() {
        let u = DataMatrix::general(2, 2, vec![1.0; 4]).unwrap();
        let mut p = RealMatrix::from_element(2, 2, 0.25);
        p[(0, 1)] = 0.0;
        assert!(matches!(
            log_likelihood(&u, &p),
            Err(ModelError::NonpositiveProbability(0, 1))
        ));
    }

    #[test]
    fn log_likelihood_permutation_invariant() {
        let u = DataMatrix::general(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = RealMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.05, 0.15, 0.3, 0.2]);
        let ll = log_likelihood(&u, &p).unwrap();
        // swap columns 0 and 2 in both
        let u2 = DataMatrix::general(2, 3, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]).unwrap();
        let p2 = RealMatrix::from_row_slice(2, 3, &[0.05, 0.2, 0.1, 0.2, 0.3, 0.15]);
        let ll2 = log_likelihood(&u2, &p2).unwrap();
        assert!((ll - ll2).abs() < 1e-12);
    }

    #[test]
    fn omega_all_ones() {
        let u = DataMatrix::general(3, 4, vec![1.0; 12]).unwrap();
        let om = omega_matrix(&u);
        for e in om.iter() {
            assert!((e - 1.0 / 144.0).abs() < 1e-15);
        }
    }

    #[test]
    fn omega_diana_is_u_over_640() {
        let u = diana_u42();
        let om = omega_matrix(&u);
        for i in 0..4 {
            for j in 0..4 {
                assert!((om[(i, j)] - u.get(i, j) / 640.0).abs() < 1e-14);
            }
        }
        assert!((om[(0, 0)] - 0.00625).abs() < 1e-14);
    }

    #[test]
    fn omega_matches_brute_force_margins() {
        let mut rng = crate::rng_stream(31, 0);
        let e: Vec<f64> = (0..9).map(|_| rng.random_range(0.2..4.0)).collect();
        let u = DataMatrix::general(3, 3, e.clone()).unwrap();
        let om = omega_matrix(&u);
        let total: f64 = e.iter().sum();
        for i in 0..3 {
            for j in 0..3 {
                let ri: f64 = (0..3).map(|l| e[i * 3 + l]).sum();
                let cj: f64 = (0..3).map(|k| e[k * 3 + j]).sum();
                let expect = e[i * 3 + j] * ri * cj / total.powi(3);
                assert!((om[(i, j)] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn omega_scale_invariant() {
        let mut rng = crate::rng_stream(32, 0);
        let e: Vec<f64> = (0..12).map(|_| rng.random_range(0.5..3.0)).collect();
        let u = DataMatrix::general(3, 4, e).unwrap();
        let om = omega_matrix(&u);
        for c in [0.3, 2.0, 17.5] {
            let om_scaled = omega_matrix(&u.scaled(c));
            assert!((&om_scaled - &om).abs().max() < 1e-12 * om.abs().max());
        }
    }

    #[test]
    fn rank_one_mle_uniform_and_diana() {
        let u = DataMatrix::general(2, 2, vec![1.0; 4]).unwrap();
        let p = rank_one_mle(&u);
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let p = rank_one_mle(&diana_u42());
        assert!(p.iter().all(|&x| (x - 0.0625).abs() < 1e-15));
    }

    #[test]
    fn rank_one_mle_beats_random_rank_one_points() {
        let mut rng = crate::rng_stream(33, 0);
        let e: Vec<f64> = (0..12).map(|_| rng.random_range(0.5..5.0)).collect();
        let u = DataMatrix::general(3, 4, e).unwrap();
        let p_hat = rank_one_mle(&u);
        let ll_hat = log_likelihood(&u, &p_hat).unwrap();
        for _ in 0..1000 {
            let mut a: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..1.0)).collect();
            let mut b: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..1.0)).collect();
            let sa: f64 = a.iter().sum();
            let sb: f64 = b.iter().sum();
            a.iter_mut().for_each(|x| *x /= sa);
            b.iter_mut().for_each(|x| *x /= sb);
            let p = RealMatrix::from_fn(3, 4, |i, j| a[i] * b[j]);
            let ll = log_likelihood(&u, &p).unwrap();
            assert!(ll <= ll_hat + 1e-9);
        }
    }

    #[test]
    fn rank_one_mle_margin_property_exact() {
        let mut rng = crate::rng_stream(34, 0);
        let e: Vec<f64> = (0..12).map(|_| rng.random_range(0.5..5.0)).collect();
        let u = DataMatrix::general(3, 4, e).unwrap();
        let p = rank_one_mle(&u);
        let (rows, cols, total) = margins(&p);
        let urs = u.row_sums();
        let ucs = u.col_sums();
        for (pi, ui) in rows.iter().zip(&urs) {
            assert!((pi - ui / u.total()).abs() < 1e-14);
        }
        for (pj, uj) in cols.iter().zip(&ucs) {
            assert!((pj - uj / u.total()).abs() < 1e-14);
        }
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_mle_symmetric_is_critical() {
        // The symmetric rank-1 estimate must maximize the symmetric likelihood
        // among nearby rank-1 symmetric matrices.
        let u = DataMatrix::symmetric(3, vec![10.0, 9.0, 1.0, 21.0, 3.0, 7.0]).unwrap();
        let p = rank_one_mle(&u);
        let ll = log_likelihood(&u, &p).unwrap();
        let mut rng = crate::rng_stream(35, 0);
        // perturb the underlying Veronese parameter x and renormalize
        let ua = u.algebraic_matrix();
        let ut: Vec<f64> = (0..3).map(|i| ua.row(i).sum()).collect();
        for _ in 0..200 {
            let x: Vec<f64> = ut
                .iter()
                .map(|&t| t * (1.0 + 0.01 * rng.random_range(-1.0..1.0)))
                .collect();
            let s: f64 = x.iter().sum();
            let x: Vec<f64> = x.iter().map(|v| v * 2f64.sqrt() / s).collect();
            let q = RealMatrix::from_fn(3, 3, |i, j| {
                let d = if i == j { 2.0 } else { 1.0 };
                x[i] * x[j] / d
            });
            assert!(log_likelihood(&u, &q).unwrap() <= ll + 1e-12);
        }
    }

    #[test]
    fn margins_identity_and_diana() {
        let (r, c, t) = margins(&RealMatrix::identity(2, 2));
        assert_eq!(r, vec![1.0, 1.0]);
        assert_eq!(c, vec![1.0, 1.0]);
        assert_eq!(t, 2.0);
        let u = diana_u42();
        assert_eq!(u.row_sums(), vec![10.0, 10.0, 10.0, 10.0]);
        let (rows, _, total) = margins(&diana_p42());
        for x in rows {
            assert!((x - 0.25).abs() < 1e-15);
        }
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn symmetric_storage_round_trip() {
        let u = DataMatrix::symmetric(3, vec![10.0, 9.0, 1.0, 21.0, 3.0, 7.0]).unwrap();
        assert_eq!(u.get(0, 1), 9.0);
        assert_eq!(u.get(1, 0), 9.0);
        assert_eq!(u.get(2, 2), 7.0);
        assert_eq!(u.total(), 51.0);
        let a = u.algebraic_matrix();
        assert_eq!(a[(0, 0)], 20.0);
        assert_eq!(a[(1, 2)], 3.0);
        // full-matrix sum is 2·u_++ under the doubled-diagonal convention
        assert!((a.sum() - 102.0).abs() < 1e-12);
    }
}
