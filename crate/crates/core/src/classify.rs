//! Turns raw solver endpoints into statistical answers: reality, positivity
//! and rank flags, log-likelihood ranking, local-maximum testing through the
//! projected Lagrangian Hessian, duality matching against Ω_U, distinctness
//! certification, and the one-parameter family sweep for the 4×4 symmetric
//! data pattern.
//!
//! The extremum test works in packed probability coordinates θ (all cells for
//! general models, the upper triangle for symmetric ones). The variety is cut
//! out by the (r+1)-minors of the cell matrix — the doubled-diagonal matrix
//! in the symmetric case — and a critical point is a local maximum iff the
//! Lagrangian Hessian is negative definite on the tangent space intersected
//! with the sum-zero hyperplane. The multiplier vector solving
//! ∇logℓ = Σ λ_a ∇g_a is computed by least squares over the full minor set;
//! the quadratic form on the tangent space does not depend on which solution
//! is picked, because a multiplier combination with vanishing gradient also
//! has vanishing tangential Hessian on the smooth locus.

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::formulation::{build_system, KernelSystem, SystemData, UnknownVector};
use crate::model::{log_likelihood, omega_matrix, DataMatrix, RankModel};
use crate::monodromy::SolutionArchive;
use crate::numerics::{eigen_symmetric, lstsq, ComplexMatrix, LuFactors, RealMatrix};
use crate::tracker::{transport_solutions, TrackerOptions};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("no duality bijection under tolerance (worst unmatched defect {0:.3e})")]
    NoBijection(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Track(#[from] crate::tracker::TrackError),
    #[error(transparent)]
    Formulation(#[from] crate::formulation::FormulationError),
}

/// Extremum type of a positive critical point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Extremum {
    Max,
    Min,
    Saddle,
    Untested,
}

/// A classified critical point.
#[derive(Debug, Clone)]
pub struct CriticalPoint {
    /// Lifted matrix in statistical coordinates.
    pub p: ComplexMatrix,
    /// Log-likelihood against the raw counts; `None` for nonreal points.
    pub log_l: Option<f64>,
    pub is_real: bool,
    pub is_positive: bool,
    /// Numerical rank of the algebraic matrix (doubled diagonal if symmetric).
    pub numerical_rank: usize,
    pub extremum: Extremum,
    /// Residual of the kernel system at the (normalized) classification data.
    pub newton_residual: f64,
    /// Relative least-squares defect of the multiplier fit; present when the
    /// Hessian test ran.
    pub multiplier_residual: Option<f64>,
}

const REALITY_TOL: f64 = 1e-8;
const POSITIVITY_TOL: f64 = 1e-10;
const HESSIAN_TOL: f64 = 1e-8;

/// Packed coordinate chart: which matrix cells each probability coordinate
/// feeds, with multiplicity (the symmetric chart doubles diagonals).
struct CoordMap {
    m: usize,
    n: usize,
    /// positions[q] = list of (row, col, coefficient)
    positions: Vec<Vec<(usize, usize, f64)>>,
}

impl CoordMap {
    fn new(model: RankModel) -> Self {
        let (m, n) = (model.m, model.n);
        let mut positions = Vec::new();
        if model.symmetric {
            for i in 0..n {
                for j in i..n {
                    if i == j {
                        positions.push(vec![(i, i, 2.0)]);
                    } else {
                        positions.push(vec![(i, j, 1.0), (j, i, 1.0)]);
                    }
                }
            }
        } else {
            for i in 0..m {
                for j in 0..n {
                    positions.push(vec![(i, j, 1.0)]);
                }
            }
        }
        CoordMap { m, n, positions }
    }

    fn len(&self) -> usize {
        self.positions.len()
    }

    /// Packed coordinates of a full statistical matrix.
    fn pack(&self, p: &RealMatrix) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        for (q, pos) in self.positions.iter().enumerate() {
            let (i, j, _) = pos[0];
            out[q] = p[(i, j)];
        }
        out
    }

    /// Cell matrix A(θ): the matrix whose minors cut out the variety.
    fn cell_matrix(&self, theta: &DVector<f64>) -> RealMatrix {
        let mut a = RealMatrix::zeros(self.m, self.n);
        for (q, pos) in self.positions.iter().enumerate() {
            for &(i, j, c) in pos {
                a[(i, j)] = c * theta[q];
            }
        }
        a
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

fn det_sub(a: &RealMatrix, rows: &[usize], cols: &[usize]) -> f64 {
    let k = rows.len();
    match k {
        0 => 1.0,
        1 => a[(rows[0], cols[0])],
        2 => {
            a[(rows[0], cols[0])] * a[(rows[1], cols[1])]
                - a[(rows[0], cols[1])] * a[(rows[1], cols[0])]
        }
        _ => RealMatrix::from_fn(k, k, |i, j| a[(rows[i], cols[j])]).determinant(),
    }
}

fn without(set: &[usize], drop: &[usize]) -> Vec<usize> {
    set.iter().copied().filter(|i| !drop.contains(i)).collect()
}

/// ∂det(A[S,T])/∂A_kl for k ∈ S, l ∈ T.
fn cofactor(a: &RealMatrix, s: &[usize], t: &[usize], k: usize, l: usize) -> f64 {
    let pa = s.iter().position(|&x| x == k).unwrap();
    let pb = t.iter().position(|&x| x == l).unwrap();
    let sign = if (pa + pb) % 2 == 0 { 1.0 } else { -1.0 };
    sign * det_sub(a, &without(s, &[k]), &without(t, &[l]))
}

/// ∂²det(A[S,T])/∂A_{k1,l1}∂A_{k2,l2}.
fn second_cofactor(
    a: &RealMatrix,
    s: &[usize],
    t: &[usize],
    k1: usize,
    l1: usize,
    k2: usize,
    l2: usize,
) -> f64 {
    if k1 == k2 || l1 == l2 {
        return 0.0;
    }
    let pa = s.iter().position(|&x| x == k1).unwrap();
    let pb = t.iter().position(|&x| x == l1).unwrap();
    let pc = s.iter().position(|&x| x == k2).unwrap();
    let pd = t.iter().position(|&x| x == l2).unwrap();
    let mut sign = if (pa + pb + pc + pd) % 2 == 0 { 1.0 } else { -1.0 };
    if (pa < pc) != (pb < pd) {
        sign = -sign;
    }
    sign * det_sub(a, &without(s, &[k1, k2]), &without(t, &[l1, l2]))
}

struct MinorSet {
    minors: Vec<(Vec<usize>, Vec<usize>)>,
}

impl MinorSet {
    fn new(model: RankModel) -> Self {
        let k = model.r + 1;
        let mut minors = Vec::new();
        if k <= model.m.min(model.n) {
            for s in combinations(model.m, k) {
                for t in combinations(model.n, k) {
                    minors.push((s.clone(), t));
                }
            }
        }
        MinorSet { minors }
    }

    /// Gradients of every minor w.r.t. packed coordinates, as columns.
    fn gradients(&self, a: &RealMatrix, map: &CoordMap) -> RealMatrix {
        let mut g = RealMatrix::zeros(map.len(), self.minors.len());
        for (idx, (s, t)) in self.minors.iter().enumerate() {
            for (q, pos) in map.positions.iter().enumerate() {
                let mut val = 0.0;
                for &(i, j, c) in pos {
                    if s.contains(&i) && t.contains(&j) {
                        val += c * cofactor(a, s, t, i, j);
                    }
                }
                g[(q, idx)] = val;
            }
        }
        g
    }

    /// Σ_a λ_a · Hessian(g_a) w.r.t. packed coordinates.
    fn weighted_hessian(
        &self,
        a: &RealMatrix,
        map: &CoordMap,
        lambda: &DVector<f64>,
    ) -> RealMatrix {
        let kdim = map.len();
        let mut h = RealMatrix::zeros(kdim, kdim);
        for (idx, (s, t)) in self.minors.iter().enumerate() {
            let w = lambda[idx];
            if w == 0.0 {
                continue;
            }
            for q1 in 0..kdim {
                for q2 in 0..=q1 {
                    let mut val = 0.0;
                    for &(i1, j1, c1) in &map.positions[q1] {
                        if !(s.contains(&i1) && t.contains(&j1)) {
                            continue;
                        }
                        for &(i2, j2, c2) in &map.positions[q2] {
                            if !(s.contains(&i2) && t.contains(&j2)) {
                                continue;
                            }
                            val += c1 * c2 * second_cofactor(a, s, t, i1, j1, i2, j2);
                        }
                    }
                    h[(q1, q2)] += w * val;
                    if q1 != q2 {
                        h[(q2, q1)] += w * val;
                    }
                }
            }
        }
        h
    }
}

/// Gradient and Hessian of the log-likelihood in packed coordinates.
fn loglik_derivatives(
    u: &DataMatrix,
    map: &CoordMap,
    theta: &DVector<f64>,
) -> (DVector<f64>, RealMatrix) {
    let total = u.total();
    let p_sum: f64 = theta.iter().sum();
    let k = map.len();
    let mut grad = DVector::zeros(k);
    for (q, pos) in map.positions.iter().enumerate() {
        let (i, j, _) = pos[0];
        grad[q] = u.get(i, j) / theta[q] - total / p_sum;
    }
    let mut hess = RealMatrix::from_element(k, k, total / (p_sum * p_sum));
    for (q, pos) in map.positions.iter().enumerate() {
        let (i, j, _) = pos[0];
        hess[(q, q)] -= u.get(i, j) / (theta[q] * theta[q]);
    }
    (grad, hess)
}

/// Orthonormal basis of the hyperplane orthogonal to `v` (columns).
fn orthogonal_complement(v: &DVector<f64>) -> RealMatrix {
    let n = v.len();
    let norm = v.norm();
    if norm < 1e-14 {
        return RealMatrix::identity(n, n);
    }
    // Householder reflector sending v/|v| to ∓e1; its other columns span v⊥.
    let mut w = v / norm;
    w[0] += if w[0] >= 0.0 { 1.0 } else { -1.0 };
    let w = &w / w.norm();
    let h = RealMatrix::identity(n, n) - &w * w.transpose() * 2.0;
    h.columns(1, n - 1).into_owned()
}

/// Extends orthonormal columns to a full orthonormal basis of R^dim.
fn complete_orthonormal(cols: &RealMatrix, dim: usize) -> RealMatrix {
    let mut basis: Vec<DVector<f64>> = cols.column_iter().map(|c| c.into_owned()).collect();
    for e in 0..dim {
        if basis.len() >= dim {
            break;
        }
        let mut v = DVector::zeros(dim);
        v[e] = 1.0;
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        if v.norm() > 1e-8 {
            v /= v.norm();
            basis.push(v);
        }
    }
    RealMatrix::from_columns(&basis)
}

/// Tangent-space basis of the rank-≤r variety at a regular point, already
/// intersected with the sum-zero hyperplane, as columns in packed coordinates.
fn reduced_tangent_basis(
    model: RankModel,
    map: &CoordMap,
    a: &RealMatrix,
) -> Result<RealMatrix, ClassifyError> {
    let r = model.r;
    let mut dirs: Vec<DVector<f64>> = Vec::new();
    if model.symmetric {
        let q = {
            // eigenpairs sorted by |λ| so the leading r span the range space
            let eig = nalgebra::linalg::SymmetricEigen::new(a.clone());
            let mut order: Vec<usize> = (0..model.n).collect();
            order.sort_by(|&i, &j| {
                eig.eigenvalues[j]
                    .abs()
                    .partial_cmp(&eig.eigenvalues[i].abs())
                    .unwrap()
            });
            RealMatrix::from_columns(
                &order
                    .iter()
                    .map(|&i| eig.eigenvectors.column(i).into_owned())
                    .collect::<Vec<_>>(),
            )
        };
        for aa in 0..model.n {
            for bb in aa..model.n {
                if aa >= r && bb >= r {
                    continue;
                }
                let qa = q.column(aa);
                let qb = q.column(bb);
                let x = if aa == bb {
                    qa * qb.transpose()
                } else {
                    (qa * qb.transpose() + qb * qa.transpose()) * 0.5
                };
                // algebraic tangent matrix → packed statistical coordinates
                let mut dir = DVector::zeros(map.len());
                for (qi, pos) in map.positions.iter().enumerate() {
                    let (i, j, c) = pos[0];
                    dir[qi] = x[(i, j)] / c;
                }
                dirs.push(dir);
            }
        }
    } else {
        let svd = nalgebra::linalg::SVD::try_new(a.clone(), true, true, f64::EPSILON * 4.0, 4000)
            .ok_or(crate::numerics::NumericsError::ConvergenceFailure)?;
        let full_u = complete_orthonormal(svd.u.as_ref().unwrap(), model.m);
        let full_v = complete_orthonormal(&svd.v_t.as_ref().unwrap().transpose(), model.n);
        for arow in 0..model.m {
            for bcol in 0..model.n {
                if arow >= r && bcol >= r {
                    continue;
                }
                let x = full_u.column(arow) * full_v.column(bcol).transpose();
                dirs.push(map.pack(&x));
            }
        }
    }
    let mut basis = RealMatrix::from_columns(&dirs);
    // intersect with the sum-zero hyperplane: coefficients w with σᵀw = 0
    let sigma = basis.transpose() * DVector::from_element(map.len(), 1.0);
    let w = orthogonal_complement(&sigma);
    basis = basis * w;
    Ok(basis)
}

/// Extremum decision and multiplier residual for a positive rank-r point.
fn hessian_classification(
    u: &DataMatrix,
    model: RankModel,
    p_real: &RealMatrix,
) -> Result<(Extremum, f64), ClassifyError> {
    let map = CoordMap::new(model);
    let theta = map.pack(p_real);
    let a = map.cell_matrix(&theta);
    let minors = MinorSet::new(model);
    let (grad_f, hess_f) = loglik_derivatives(u, &map, &theta);

    // Multipliers of L = logℓ + Σ λ_a g_a: ∇L = 0 means ∇f = −Σ λ_a ∇g_a.
    let (lambda, lam_residual) = if minors.minors.is_empty() {
        (DVector::zeros(0), 0.0)
    } else {
        let g = minors.gradients(&a, &map);
        let lambda = lstsq(&g, &(-&grad_f))?;
        let defect = (&g * &lambda + &grad_f).norm() / grad_f.norm().max(1e-300);
        (lambda, defect)
    };

    let mut h = hess_f;
    if !minors.minors.is_empty() {
        h += minors.weighted_hessian(&a, &map, &lambda);
    }
    let basis = reduced_tangent_basis(model, &map, &a)?;
    let w = basis.transpose() * h * &basis;
    let eigs = eigen_symmetric(&w)?;
    let scale = eigs.iter().fold(0.0f64, |acc, e| acc.max(e.abs())).max(1.0);
    let tol = HESSIAN_TOL * scale;
    let pos = eigs.iter().filter(|&&e| e > tol).count();
    let neg = eigs.iter().filter(|&&e| e < -tol).count();
    let zero = eigs.len() - pos - neg;
    let extremum = if pos > 0 && neg > 0 {
        Extremum::Saddle
    } else if zero > 0 {
        Extremum::Untested
    } else if pos == 0 {
        Extremum::Max
    } else {
        Extremum::Min
    };
    Ok((extremum, lam_residual))
}

/// Classifies one solver endpoint.
///
/// `u` carries the raw counts (for the log-likelihood); `data` is the
/// normalized complex data the solution actually solves.
pub fn classify_point(
    u: &DataMatrix,
    sys: &KernelSystem,
    data: &SystemData,
    x: &UnknownVector,
) -> Result<CriticalPoint, ClassifyError> {
    let model = sys.model();
    let p = sys.lift_to_matrix(x);
    let p_alg = sys.lift_algebraic(x);
    let newton_residual = sys.evaluate(data, x).norm() / data.norm_inf().max(1.0);

    let scale = p.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
    let max_im = p.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    let is_real = max_im < REALITY_TOL * scale;
    let is_positive = is_real && p.iter().all(|z| z.re > POSITIVITY_TOL);
    let numerical_rank = crate::numerics::numerical_rank(&p_alg)?;

    let mut log_l = None;
    let mut extremum = Extremum::Untested;
    let mut multiplier_residual = None;
    if is_positive {
        let p_real = p.map(|z| z.re);
        log_l = Some(
            log_likelihood(u, &p_real).map_err(|e| ClassifyError::ShapeMismatch(e.to_string()))?,
        );
        if numerical_rank == model.r {
            let (e, lam_res) = hessian_classification(u, model, &p_real)?;
            extremum = e;
            multiplier_residual = Some(lam_res);
        }
    }
    Ok(CriticalPoint {
        p,
        log_l,
        is_real,
        is_positive,
        numerical_rank,
        extremum,
        newton_residual,
        multiplier_residual,
    })
}

/// Classifies a whole endpoint set in parallel.
pub fn classify_all(
    u: &DataMatrix,
    sys: &KernelSystem,
    data: &SystemData,
    xs: &[UnknownVector],
) -> Result<Vec<CriticalPoint>, ClassifyError> {
    xs.par_iter()
        .map(|x| classify_point(u, sys, data, x))
        .collect()
}

/// Bijection between critical points of dual ranks with P ⋆ Q = Ω_U.
#[derive(Debug, Clone)]
pub struct DualityPairing {
    /// (index into the rank-r set, index into the dual set)
    pub pairs: Vec<(usize, usize)>,
    /// Worst relative ∞-norm deviation of P_i ⋆ Q_j from Ω_U.
    pub max_residual: f64,
}

const DUALITY_TOL: f64 = 1e-8;

/// Greedy-then-verified matching of two critical-point sets under the
/// Hadamard-product relation.
pub fn match_dual(
    points_r: &[CriticalPoint],
    points_dual: &[CriticalPoint],
    u: &DataMatrix,
) -> Result<DualityPairing, ClassifyError> {
    if points_r.len() != points_dual.len() {
        return Err(ClassifyError::NoBijection(f64::INFINITY));
    }
    let omega = omega_matrix(u).map(|v| Complex64::new(v, 0.0));
    let scale = omega.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut used = vec![false; points_dual.len()];
    let mut pairs = Vec::with_capacity(points_r.len());
    let mut max_residual = 0.0f64;
    for (i, a) in points_r.iter().enumerate() {
        let mut best = f64::INFINITY;
        let mut best_j = usize::MAX;
        for (j, b) in points_dual.iter().enumerate() {
            if used[j] {
                continue;
            }
            let mut defect = 0.0f64;
            for ((x, y), w) in a.p.iter().zip(b.p.iter()).zip(omega.iter()) {
                defect = defect.max((x * y - w).norm());
            }
            let defect = defect / scale;
            if defect < best {
                best = defect;
                best_j = j;
            }
        }
        if best_j == usize::MAX || best > DUALITY_TOL {
            return Err(ClassifyError::NoBijection(best));
        }
        used[best_j] = true;
        pairs.push((i, best_j));
        max_residual = max_residual.max(best);
    }
    Ok(DualityPairing {
        pairs,
        max_residual,
    })
}

/// Newton-contraction and separation certificate for a solution set.
#[derive(Debug, Clone)]
pub struct CertificationReport {
    /// Per point: both Newton steps contracted by ≥ 10× (or started at the
    /// numerical floor).
    pub newton_certified: Vec<bool>,
    pub min_separation: f64,
    pub violations: Vec<String>,
}

impl CertificationReport {
    pub fn all_certified(&self) -> bool {
        self.violations.is_empty() && self.newton_certified.iter().all(|&b| b)
    }
}

const SEPARATION_TOL: f64 = 1e-6;

/// Certifies that every point is a contracting Newton fixed point (hence an
/// isolated regular zero) and that all lifted matrices are pairwise separated.
pub fn certify_distinct(
    solutions: &[UnknownVector],
    sys: &KernelSystem,
    data: &SystemData,
) -> CertificationReport {
    let mut newton_certified = Vec::with_capacity(solutions.len());
    let mut violations = Vec::new();
    for (i, x) in solutions.iter().enumerate() {
        let mut cur = x.clone();
        let mut norms = Vec::new();
        for _ in 0..3 {
            let (f, jac) = sys.evaluate_with_jacobian(data, &cur);
            let Ok(lu) = LuFactors::new(&jac) else {
                break;
            };
            let Ok(delta) = lu.solve(&f) else {
                break;
            };
            cur -= &delta;
            norms.push(delta.norm());
        }
        let floor = 1e-13 * (1.0 + x.norm());
        let ok =
            norms.len() == 3 && norms.windows(2).all(|w| w[1] <= w[0] / 10.0 || w[0] < floor);
        if !ok {
            violations.push(format!("point {i}: Newton contraction not certified"));
        }
        newton_certified.push(ok);
    }
    let lifted: Vec<ComplexMatrix> = solutions.iter().map(|x| sys.lift_to_matrix(x)).collect();
    let mut min_separation = f64::INFINITY;
    for i in 0..lifted.len() {
        for j in 0..i {
            let d = (&lifted[i] - &lifted[j]).norm();
            if d < min_separation {
                min_separation = d;
            }
            if d < SEPARATION_TOL {
                violations.push(format!("points {j} and {i} separated by only {d:.3e}"));
            }
        }
    }
    CertificationReport {
        newton_certified,
        min_separation,
        violations,
    }
}

/// The 4×4 one-parameter data family: diagonal a, off-diagonal b.
pub fn diana_data(a: f64, b: f64) -> DataMatrix {
    let mut e = Vec::with_capacity(16);
    for i in 0..4 {
        for j in 0..4 {
            e.push(if i == j { a } else { b });
        }
    }
    DataMatrix::general(4, 4, e).expect("positive family parameters")
}

/// Closed-form global maximizer of the rank-2 likelihood for `diana_data`.
pub fn diana_mle(a: f64, b: f64) -> RealMatrix {
    RealMatrix::from_fn(4, 4, |i, j| {
        let same_block = (i < 2) == (j < 2);
        (if same_block { a + b } else { 2.0 * b }) / (8.0 * (a + 3.0 * b))
    })
}

/// One row of the family sweep.
#[derive(Debug, Clone)]
pub struct DianaRow {
    pub a: f64,
    pub count_total: usize,
    pub count_real: usize,
    pub count_positive: usize,
    pub min_pairwise_distance: f64,
    /// Entrywise deviation of the best positive point from the closed form.
    pub mle_deviation: f64,
    pub tracking_failures: usize,
}

/// Transports a rank-2 archive across the family a ∈ (1, 4), b = (4−a)/3 and
/// reports counts, the minimum pairwise distance of the full complex set, and
/// the deviation of the computed maximizer from the closed form.
pub fn diana_sweep(
    archive: &SolutionArchive,
    a_values: &[f64],
    rng_seed: u64,
    topts: &TrackerOptions,
) -> Result<Vec<DianaRow>, ClassifyError> {
    let model = archive.model;
    if model.symmetric || model.m != 4 || model.n != 4 || model.r != 2 {
        return Err(ClassifyError::ShapeMismatch(
            "family sweep needs a (4,4,2) archive".into(),
        ));
    }
    let plain = build_system(model, false, 0)?;
    let mut rows = Vec::new();
    for (ia, &a) in a_values.iter().enumerate() {
        let b = (4.0 - a) / 3.0;
        let u = diana_data(a, b);
        let u_norm = u.scaled(10.0 / u.total());
        let target = SystemData::from_data(&u_norm);
        let sys = build_system(model, true, rng_seed ^ ((ia as u64) << 8))?;
        let xs: Result<Vec<UnknownVector>, _> = archive
            .solutions
            .iter()
            .map(|x| plain.convert_solution(&sys, x))
            .collect();
        let xs = xs?;
        let results = transport_solutions(&sys, &archive.u0, &xs, &target, rng_seed, topts)?;
        let endpoints: Vec<UnknownVector> = results
            .iter()
            .filter(|r| r.is_success())
            .map(|r| r.endpoint.clone())
            .collect();
        let tracking_failures = results.len() - endpoints.len();
        let points = classify_all(&u, &sys, &target, &endpoints)?;
        let count_real = points.iter().filter(|p| p.is_real).count();
        let count_positive = points.iter().filter(|p| p.is_positive).count();
        let mut min_d = f64::INFINITY;
        for i in 0..points.len() {
            for j in 0..i {
                min_d = min_d.min((&points[i].p - &points[j].p).norm());
            }
        }
        let mle_deviation = points
            .iter()
            .filter(|p| p.is_positive)
            .max_by(|x, y| x.log_l.partial_cmp(&y.log_l).unwrap())
            .map(|best| {
                let closed = diana_mle(a, b);
                let mut dev = 0.0f64;
                for i in 0..4 {
                    for j in 0..4 {
                        dev = dev.max((best.p[(i, j)].re - closed[(i, j)]).abs());
                    }
                }
                dev
            })
            .unwrap_or(f64::INFINITY);
        rows.push(DianaRow {
            a,
            count_total: points.len(),
            count_real,
            count_positive,
            min_pairwise_distance: min_d,
            mle_deviation,
            tracking_failures,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formulation::build_system;

    fn fd_check_minor_derivatives(model: RankModel) {
        let map = CoordMap::new(model);
        let minors = MinorSet::new(model);
        let mut rng = crate::rng_stream(71, 0);
        use rand::Rng;
        let theta = DVector::from_fn(map.len(), |_, _| rng.random_range(0.2..1.0));
        let a = map.cell_matrix(&theta);
        let g = minors.gradients(&a, &map);
        let h = 1e-6;
        for idx in 0..minors.minors.len().min(6) {
            for q in 0..map.len() {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[q] += h;
                tm[q] -= h;
                let (s, t) = &minors.minors[idx];
                let fp = det_sub(&map.cell_matrix(&tp), s, t);
                let fm = det_sub(&map.cell_matrix(&tm), s, t);
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (g[(q, idx)] - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                    "{model:?} minor {idx} coord {q}: {} vs {}",
                    g[(q, idx)],
                    fd
                );
            }
        }
        // weighted Hessian against finite differences of the gradient
        let lambda = DVector::from_fn(minors.minors.len(), |i, _| 0.3 + 0.1 * i as f64);
        let hess = minors.weighted_hessian(&a, &map, &lambda);
        for q in 0..map.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[q] += h;
            tm[q] -= h;
            let gp = minors.gradients(&map.cell_matrix(&tp), &map) * &lambda;
            let gm = minors.gradients(&map.cell_matrix(&tm), &map) * &lambda;
            let fd = (gp - gm) / (2.0 * h);
            for q2 in 0..map.len() {
                assert!(
                    (hess[(q2, q)] - fd[q2]).abs() < 1e-5 * (1.0 + fd[q2].abs()),
                    "{model:?} hess ({q2},{q})"
                );
            }
        }
    }

    #[test]
    fn minor_derivatives_match_finite_differences() {
        fd_check_minor_derivatives(RankModel::general(3, 3, 2).unwrap());
        fd_check_minor_derivatives(RankModel::general(3, 4, 2).unwrap());
        fd_check_minor_derivatives(RankModel::symmetric(3, 2).unwrap());
        fd_check_minor_derivatives(RankModel::symmetric(4, 2).unwrap());
    }

    #[test]
    fn rank_one_mle_classifies_as_max() {
        let u = DataMatrix::general(
            3,
            4,
            vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0, 5.0, 3.0, 5.0, 8.0],
        )
        .unwrap();
        let model = RankModel::general(3, 4, 1).unwrap();
        let p = crate::model::rank_one_mle(&u);
        let (ext, lam_res) = hessian_classification(&u, model, &p).unwrap();
        assert_eq!(ext, Extremum::Max);
        assert!(lam_res < 1e-8, "multiplier residual {lam_res}");
    }

    #[test]
    fn full_model_mle_classifies_as_max() {
        // r = m: no constraints; U/u_++ maximizes logℓ on the simplex.
        let u =
            DataMatrix::general(3, 3, vec![2.0, 1.0, 3.0, 1.0, 4.0, 1.0, 2.0, 2.0, 5.0]).unwrap();
        let model = RankModel::general(3, 3, 3).unwrap();
        let p = u.full_matrix() * (1.0 / u.total());
        let (ext, _) = hessian_classification(&u, model, &p).unwrap();
        assert_eq!(ext, Extremum::Max);
    }

    #[test]
    fn symmetric_rank_one_mle_classifies_as_max() {
        let u = DataMatrix::symmetric(3, vec![10.0, 9.0, 1.0, 21.0, 3.0, 7.0]).unwrap();
        let model = RankModel::symmetric(3, 1).unwrap();
        let p = crate::model::rank_one_mle(&u);
        let (ext, _) = hessian_classification(&u, model, &p).unwrap();
        assert_eq!(ext, Extremum::Max);
    }

    #[test]
    fn duality_involution_on_3x3_rank2() {
        let archive = crate::monodromy::monodromy_solve(
            RankModel::general(3, 3, 2).unwrap(),
            &crate::monodromy::MonodromyOptions::default(),
            11,
        )
        .unwrap();
        let u =
            DataMatrix::general(3, 3, vec![5.0, 2.0, 1.0, 2.0, 7.0, 3.0, 1.0, 4.0, 6.0]).unwrap();
        let u_norm = u.scaled(10.0 / u.total());
        let target = SystemData::from_data(&u_norm);
        let plain = build_system(archive.model, false, 0).unwrap();
        let sys = build_system(archive.model, true, 3).unwrap();
        let xs: Vec<_> = archive
            .solutions
            .iter()
            .map(|x| plain.convert_solution(&sys, x).unwrap())
            .collect();
        let res =
            transport_solutions(&sys, &archive.u0, &xs, &target, 5, &TrackerOptions::default())
                .unwrap();
        assert!(res.iter().all(|r| r.is_success()));
        let endpoints: Vec<_> = res.iter().map(|r| r.endpoint.clone()).collect();
        let points = classify_all(&u, &sys, &target, &endpoints).unwrap();
        let pairing = match_dual(&points, &points, &u).unwrap();
        assert!(pairing.max_residual < 1e-8);
        // involution with matching flags
        let mut map = vec![usize::MAX; 10];
        for &(i, j) in &pairing.pairs {
            map[i] = j;
        }
        for i in 0..10 {
            assert_eq!(map[map[i]], i);
            assert_eq!(points[i].is_real, points[map[i]].is_real);
            assert_eq!(points[i].is_positive, points[map[i]].is_positive);
        }
        // reality closure: nonreal points pair off under conjugation
        for p in points.iter().filter(|p| !p.is_real) {
            let conj = p.p.map(|z| z.conj());
            let found = points
                .iter()
                .any(|q| (&q.p - &conj).norm() < 1e-8 * (1.0 + conj.norm()));
            assert!(found, "conjugate partner missing");
        }
        // margins hold for every endpoint, real or complex
        let urs = u_norm.row_sums();
        let ucs = u_norm.col_sums();
        for p in &points {
            let (pr, pc, _) = crate::model::margins_complex(&p.p);
            for (a, b) in pr.iter().zip(&urs) {
                assert!((a - Complex64::new(b / 10.0, 0.0)).norm() < 1e-8);
            }
            for (a, b) in pc.iter().zip(&ucs) {
                assert!((a - Complex64::new(b / 10.0, 0.0)).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn rank_one_pair_matches_trivially() {
        let u =
            DataMatrix::general(3, 3, vec![5.0, 2.0, 1.0, 2.0, 7.0, 3.0, 1.0, 4.0, 6.0]).unwrap();
        let p1 = crate::model::rank_one_mle(&u).map(|v| Complex64::new(v, 0.0));
        let q1 = u.full_matrix().map(|v| Complex64::new(v / u.total(), 0.0));
        let mk = |p: ComplexMatrix| CriticalPoint {
            p,
            log_l: None,
            is_real: true,
            is_positive: true,
            numerical_rank: 0,
            extremum: Extremum::Untested,
            newton_residual: 0.0,
            multiplier_residual: None,
        };
        let pairing = match_dual(&[mk(p1)], &[mk(q1)], &u).unwrap();
        assert!(pairing.max_residual < 1e-12);
    }

    #[test]
    fn certify_distinct_flags_duplicates() {
        let archive = crate::monodromy::monodromy_solve(
            RankModel::general(3, 3, 2).unwrap(),
            &crate::monodromy::MonodromyOptions::default(),
            13,
        )
        .unwrap();
        let sys = build_system(archive.model, false, 0).unwrap();
        let report = certify_distinct(&archive.solutions, &sys, &archive.u0);
        assert!(report.all_certified(), "{:?}", report.violations);
        assert!(report.min_separation > 1e-6);
        let mut bad = archive.solutions.clone();
        bad.push(bad[0].clone());
        let report = certify_distinct(&bad, &sys, &archive.u0);
        assert!(!report.all_certified());
        assert!(report
            .violations
            .iter()
            .any(|v| v.contains("separated by only")));
    }

    #[test]
    fn max_points_match_hill_climb_oracle() {
        // sample-based cross-check of the Hessian labels on a 3×3 instance
        let u =
            DataMatrix::general(3, 3, vec![4.0, 1.0, 2.0, 2.0, 6.0, 1.0, 1.0, 3.0, 5.0]).unwrap();
        let model = RankModel::general(3, 3, 2).unwrap();
        let archive = crate::monodromy::monodromy_solve(
            model,
            &crate::monodromy::MonodromyOptions::default(),
            17,
        )
        .unwrap();
        let u_norm = u.scaled(10.0 / u.total());
        let target = SystemData::from_data(&u_norm);
        let plain = build_system(model, false, 0).unwrap();
        let sys = build_system(model, true, 23).unwrap();
        let xs: Vec<_> = archive
            .solutions
            .iter()
            .map(|x| plain.convert_solution(&sys, x).unwrap())
            .collect();
        let res =
            transport_solutions(&sys, &archive.u0, &xs, &target, 29, &TrackerOptions::default())
                .unwrap();
        let endpoints: Vec<_> = res.iter().map(|r| r.endpoint.clone()).collect();
        let points = classify_all(&u, &sys, &target, &endpoints).unwrap();
        assert!(points.iter().any(|p| p.extremum == Extremum::Max));
        let mut rng = crate::rng_stream(31, 0);
        use rand::Rng;
        for point in points.iter().filter(|p| p.is_positive) {
            let p_real = point.p.map(|z| z.re);
            let base_ll = crate::model::log_likelihood(&u, &p_real).unwrap();
            let svd = nalgebra::linalg::SVD::new(p_real.clone(), true, true);
            let ud = svd.u.unwrap();
            let vt = svd.v_t.unwrap();
            let mut improved = false;
            for _ in 0..200 {
                let mut aa = ud.columns(0, 2).into_owned();
                let mut bb = vt.rows(0, 2).into_owned();
                for v in aa.iter_mut() {
                    *v += 1e-4 * rng.random_range(-1.0..1.0);
                }
                for v in bb.iter_mut() {
                    *v += 1e-4 * rng.random_range(-1.0..1.0);
                }
                let mut s2 = nalgebra::DMatrix::zeros(2, 2);
                s2[(0, 0)] = svd.singular_values[0];
                s2[(1, 1)] = svd.singular_values[1];
                let mut q = aa * s2 * bb;
                let total: f64 = q.iter().sum();
                q /= total;
                if q.iter().all(|&v| v > 0.0) {
                    let ll = crate::model::log_likelihood(&u, &q).unwrap();
                    if ll > base_ll + 1e-9 {
                        improved = true;
                        break;
                    }
                }
            }
            let is_max = point.extremum == Extremum::Max;
            assert_eq!(
                is_max, !improved,
                "hessian label {:?} disagrees with sampling (logL {})",
                point.extremum, base_ll
            );
        }
    }

    #[test]
    fn diana_closed_forms() {
        let u = diana_data(4.0, 2.0);
        assert_eq!(u.total(), 40.0);
        assert_eq!(u.row_sums(), vec![10.0; 4]);
        let p = diana_mle(4.0, 2.0);
        assert!((p[(0, 0)] - 6.0 / 80.0).abs() < 1e-15);
        assert!((p[(0, 2)] - 4.0 / 80.0).abs() < 1e-15);
        let (rows, _, total) = crate::model::margins(&p);
        assert!((total - 1.0).abs() < 1e-12);
        for r in rows {
            assert!((r - 0.25).abs() < 1e-12);
        }
    }
}
