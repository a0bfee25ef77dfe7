//! The square kernel system whose solutions are exactly the critical points
//! of the likelihood function on the rank-≤r variety.
//!
//! General model: unknowns are the blocks (P1, L1, R1, Λ) of
//!
//! ```text
//! P = [P1, P1·R1; L1·P1, L1·P1·R1],   L = [L1, −I],   R = [R1; −I]
//! ```
//!
//! and the residual is P ⋆ (R·Λ·L)ᵀ + u_++·P − U, with the diagonal entry of
//! each of the first m columns (and the last entry of the remaining columns)
//! replaced by the column-sum equation u_++·Σ_i P_ij − u_+j. The symmetric
//! model uses P = [P1, P1·L1ᵀ; L1·P1, L1·P1·L1ᵀ] with symmetric P1, Λ, the
//! doubled-diagonal data D⋆U, and the upper-triangular equations with every
//! diagonal equation replaced by its column sum.
//!
//! Random orthogonal patches conjugate the blocks so that critical points
//! whose leading principal blocks degenerate (common for structured real
//! data) remain representable in the chart.

use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

use crate::model::RankModel;
use crate::numerics::{lstsq_complex, ComplexMatrix, ComplexVector, RealMatrix};

#[derive(Debug, Error)]
pub enum FormulationError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("degenerate seed (|p_++| below 1e-8 before rescaling)")]
    DegenerateSeed,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("chart is degenerate for this point (leading block not invertible)")]
    ChartDegenerate,
}

/// Vector of chart unknowns in block order (P1, L1, R1, Λ); symmetric systems
/// store the upper triangles of P1 and Λ.
pub type UnknownVector = ComplexVector;

/// Complex data seen by the system: the (doubled-diagonal, for symmetric
/// models) data matrix and the grand total u_++ (symmetric: Σ_{i≤j} u_ij).
///
/// Both fields are affine functions of the underlying data, so homotopy arcs
/// interpolate them together.
#[derive(Debug, Clone)]
pub struct SystemData {
    pub u_alg: ComplexMatrix,
    pub total: Complex64,
}

impl SystemData {
    pub fn from_data(u: &crate::model::DataMatrix) -> Self {
        let a = u.algebraic_matrix();
        SystemData {
            u_alg: a.map(|x| Complex64::new(x, 0.0)),
            total: Complex64::new(u.total(), 0.0),
        }
    }

    /// a·self + b·other, entrywise and on totals.
    pub fn combine(&self, a: Complex64, other: &SystemData, b: Complex64) -> SystemData {
        SystemData {
            u_alg: &self.u_alg * a + &other.u_alg * b,
            total: a * self.total + b * other.total,
        }
    }

    pub fn scale(&self, c: Complex64) -> SystemData {
        SystemData {
            u_alg: &self.u_alg * c,
            total: c * self.total,
        }
    }

    pub fn norm_inf(&self) -> f64 {
        self.u_alg.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
struct Patches {
    /// (m−r)×(m−r), left factor of the kernel rows.
    o1: RealMatrix,
    /// (n−r)×(n−r), right factor of the kernel columns (general only).
    o2: RealMatrix,
    /// m×m row rotation of P.
    o3: RealMatrix,
    /// n×n column rotation of P (symmetric systems reuse o3).
    o4: RealMatrix,
}

/// Shapes and offsets of the unknown blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub p1_len: usize,
    pub l1_len: usize,
    pub r1_len: usize,
    pub lambda_len: usize,
}

impl BlockLayout {
    pub fn total(&self) -> usize {
        self.p1_len + self.l1_len + self.r1_len + self.lambda_len
    }
}

/// The square polynomial system for one rank model and one choice of chart.
#[derive(Debug, Clone)]
pub struct KernelSystem {
    model: RankModel,
    patches: Option<Patches>,
}

fn random_orthogonal(rng: &mut impl Rng, k: usize) -> RealMatrix {
    if k == 0 {
        return RealMatrix::zeros(0, 0);
    }
    let a = RealMatrix::from_fn(k, k, |_, _| rng.sample(rand_distr::StandardNormal));
    let qr = nalgebra::linalg::QR::new(a);
    let mut q = qr.q();
    let r = qr.r();
    // sign-normalize so the factorization (hence the patch) is deterministic
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            for i in 0..k {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

pub(crate) fn complex_gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> ComplexMatrix {
    ComplexMatrix::from_fn(rows, cols, |_, _| {
        Complex64::new(
            rng.sample(rand_distr::StandardNormal),
            rng.sample(rand_distr::StandardNormal),
        )
    })
}

pub(crate) fn unit_complex(rng: &mut impl Rng) -> Complex64 {
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    Complex64::new(theta.cos(), theta.sin())
}

/// Builds the kernel system for `model`, optionally with random orthogonal
/// patches drawn from `rng_seed`.
pub fn build_system(
    model: RankModel,
    patched: bool,
    rng_seed: u64,
) -> Result<KernelSystem, FormulationError> {
    if model.r == model.m && model.m == model.n {
        return Err(FormulationError::InvalidModel(
            "full-rank square model has the closed-form critical point U/u_++".into(),
        ));
    }
    if model.r > model.m {
        return Err(FormulationError::InvalidModel(format!(
            "rank {} exceeds min dimension {}",
            model.r, model.m
        )));
    }
    let patches = if patched {
        let mut rng = crate::rng_stream(rng_seed, 0x70617463);
        let (m, n, r) = (model.m, model.n, model.r);
        Some(Patches {
            o1: random_orthogonal(&mut rng, m - r),
            o2: random_orthogonal(&mut rng, n - r),
            o3: random_orthogonal(&mut rng, m),
            o4: if model.symmetric {
                RealMatrix::zeros(0, 0)
            } else {
                random_orthogonal(&mut rng, n)
            },
        })
    } else {
        None
    };
    Ok(KernelSystem { model, patches })
}

struct Blocks {
    p1: ComplexMatrix,
    l1: ComplexMatrix,
    r1: ComplexMatrix,
    lambda: ComplexMatrix,
}

impl KernelSystem {
    pub fn model(&self) -> RankModel {
        self.model
    }

    pub fn is_patched(&self) -> bool {
        self.patches.is_some()
    }

    pub fn size(&self) -> usize {
        self.model.system_size()
    }

    pub fn layout(&self) -> BlockLayout {
        let (m, n, r) = (self.model.m, self.model.n, self.model.r);
        if self.model.symmetric {
            BlockLayout {
                p1_len: r * (r + 1) / 2,
                l1_len: (n - r) * r,
                r1_len: 0,
                lambda_len: (n - r) * (n - r + 1) / 2,
            }
        } else {
            BlockLayout {
                p1_len: r * r,
                l1_len: (m - r) * r,
                r1_len: r * (n - r),
                lambda_len: (n - r) * (m - r),
            }
        }
    }

    fn o3(&self) -> Option<&RealMatrix> {
        self.patches.as_ref().map(|p| &p.o3)
    }

    fn unpack(&self, x: &UnknownVector) -> Blocks {
        let (m, n, r) = (self.model.m, self.model.n, self.model.r);
        let lay = self.layout();
        debug_assert_eq!(x.len(), lay.total());
        let mut k = 0;
        if self.model.symmetric {
            let mut p1 = ComplexMatrix::zeros(r, r);
            for a in 0..r {
                for b in a..r {
                    p1[(a, b)] = x[k];
                    p1[(b, a)] = x[k];
                    k += 1;
                }
            }
            let mut l1 = ComplexMatrix::zeros(n - r, r);
            for a in 0..n - r {
                for b in 0..r {
                    l1[(a, b)] = x[k];
                    k += 1;
                }
            }
            let mut lambda = ComplexMatrix::zeros(n - r, n - r);
            for a in 0..n - r {
                for b in a..n - r {
                    lambda[(a, b)] = x[k];
                    lambda[(b, a)] = x[k];
                    k += 1;
                }
            }
            Blocks {
                p1,
                l1,
                r1: ComplexMatrix::zeros(0, 0),
                lambda,
            }
        } else {
            let p1 = ComplexMatrix::from_fn(r, r, |a, b| x[a * r + b]);
            k += r * r;
            let l1 = ComplexMatrix::from_fn(m - r, r, |a, b| x[k + a * r + b]);
            k += (m - r) * r;
            let r1 = ComplexMatrix::from_fn(r, n - r, |a, b| x[k + a * (n - r) + b]);
            k += r * (n - r);
            let lambda = ComplexMatrix::from_fn(n - r, m - r, |a, b| x[k + a * (m - r) + b]);
            Blocks {
                p1,
                l1,
                r1,
                lambda,
            }
        }
    }

    fn pack(&self, b: &Blocks) -> UnknownVector {
        let (m, n, r) = (self.model.m, self.model.n, self.model.r);
        let mut xs = Vec::with_capacity(self.size());
        if self.model.symmetric {
            for a in 0..r {
                for bidx in a..r {
                    xs.push(b.p1[(a, bidx)]);
                }
            }
            for a in 0..n - r {
                for bidx in 0..r {
                    xs.push(b.l1[(a, bidx)]);
                }
            }
            for a in 0..n - r {
                for bidx in a..n - r {
                    xs.push(b.lambda[(a, bidx)]);
                }
            }
        } else {
            xs.extend(b.p1.row_iter().flat_map(|row| row.iter().copied().collect::<Vec<_>>()));
            for a in 0..m - r {
                for c in 0..r {
                    xs.push(b.l1[(a, c)]);
                }
            }
            for a in 0..r {
                for c in 0..n - r {
                    xs.push(b.r1[(a, c)]);
                }
            }
            for a in 0..n - r {
                for c in 0..m - r {
                    xs.push(b.lambda[(a, c)]);
                }
            }
        }
        UnknownVector::from_vec(xs)
    }

    /// [I; L1] for the symmetric model, [I; L1] (m×r) for the general one.
    fn j_left(&self, b: &Blocks) -> ComplexMatrix {
        let r = self.model.r;
        let rows = if self.model.symmetric {
            self.model.n
        } else {
            self.model.m
        };
        let mut j = ComplexMatrix::zeros(rows, r);
        for a in 0..r {
            j[(a, a)] = Complex64::ONE;
        }
        for a in r..rows {
            for c in 0..r {
                j[(a, c)] = b.l1[(a - r, c)];
            }
        }
        j
    }

    /// [I, R1] (r×n), general model only.
    fn k_right(&self, b: &Blocks) -> ComplexMatrix {
        let (n, r) = (self.model.n, self.model.r);
        let mut k = ComplexMatrix::zeros(r, n);
        for a in 0..r {
            k[(a, a)] = Complex64::ONE;
        }
        for a in 0..r {
            for c in r..n {
                k[(a, c)] = b.r1[(a, c - r)];
            }
        }
        k
    }


    /// The lifted matrix in algebraic coordinates (doubled diagonal for the
    /// symmetric model), patches applied.
    pub fn lift_algebraic(&self, x: &UnknownVector) -> ComplexMatrix {
        let b = self.unpack(x);
        let j = self.j_left(&b);
        let blk = if self.model.symmetric {
            &j * &b.p1 * j.transpose()
        } else {
            &j * &b.p1 * self.k_right(&b)
        };
        match &self.patches {
            None => blk,
            Some(p) => {
                let o3 = p.o3.map(|x| Complex64::new(x, 0.0));
                if self.model.symmetric {
                    &o3 * blk * o3.transpose()
                } else {
                    let o4 = p.o4.map(|x| Complex64::new(x, 0.0));
                    &o3 * blk * o4.transpose()
                }
            }
        }
    }

    /// The lifted matrix in statistical coordinates: the full m×n matrix of
    /// cell probabilities (symmetric model: diagonal halved back).
    pub fn lift_to_matrix(&self, x: &UnknownVector) -> ComplexMatrix {
        let mut p = self.lift_algebraic(x);
        if self.model.symmetric {
            for i in 0..self.model.n {
                p[(i, i)] *= 0.5;
            }
        }
        p
    }

    /// The kernel-row matrix L, patches applied.
    fn l_matrix(&self, b: &Blocks) -> ComplexMatrix {
        let (m, r) = if self.model.symmetric {
            (self.model.n, self.model.r)
        } else {
            (self.model.m, self.model.r)
        };
        let mut l = ComplexMatrix::zeros(m - r, m);
        for a in 0..m - r {
            for c in 0..r {
                l[(a, c)] = b.l1[(a, c)];
            }
            l[(a, r + a)] = -Complex64::ONE;
        }
        match &self.patches {
            None => l,
            Some(p) => {
                let o1 = p.o1.map(|x| Complex64::new(x, 0.0));
                let o3 = p.o3.map(|x| Complex64::new(x, 0.0));
                o1 * l * o3.transpose()
            }
        }
    }

    /// The kernel-column matrix R (general model), patches applied.
    fn r_matrix(&self, b: &Blocks) -> ComplexMatrix {
        let (n, r) = (self.model.n, self.model.r);
        let mut rm = ComplexMatrix::zeros(n, n - r);
        for a in 0..r {
            for c in 0..n - r {
                rm[(a, c)] = b.r1[(a, c)];
            }
        }
        for c in 0..n - r {
            rm[(r + c, c)] = -Complex64::ONE;
        }
        match &self.patches {
            None => rm,
            Some(p) => {
                let o4 = p.o4.map(|x| Complex64::new(x, 0.0));
                let o2 = p.o2.map(|x| Complex64::new(x, 0.0));
                o4 * rm * o2.transpose()
            }
        }
    }

    /// The Hadamard multiplier matrix: (R·Λ·L)ᵀ for the general model,
    /// Lᵀ·Λ·L for the symmetric one. Same shape as the lifted matrix.
    pub fn multiplier_matrix(&self, x: &UnknownVector) -> ComplexMatrix {
        let b = self.unpack(x);
        let l = self.l_matrix(&b);
        if self.model.symmetric {
            l.transpose() * &b.lambda * &l
        } else {
            let r = self.r_matrix(&b);
            (r * &b.lambda * l).transpose()
        }
    }

    /// Residual F(x; U). Zero exactly at critical points of ℓ_U.
    pub fn evaluate(&self, data: &SystemData, x: &UnknownVector) -> ComplexVector {
        let p = self.lift_algebraic(x);
        let g = self.multiplier_matrix(x);
        self.residual_from(&p, &g, data)
    }

    fn residual_from(
        &self,
        p: &ComplexMatrix,
        mult: &ComplexMatrix,
        data: &SystemData,
    ) -> ComplexVector {
        let (m, n) = (p.nrows(), p.ncols());
        let c = data.total;
        let e = ComplexMatrix::from_fn(m, n, |i, j| {
            p[(i, j)] * mult[(i, j)] + c * p[(i, j)] - data.u_alg[(i, j)]
        });
        let col_res: Vec<Complex64> = (0..n)
            .map(|j| c * p.column(j).sum() - data.u_alg.column(j).sum())
            .collect();
        self.flatten(&e, &col_res)
    }

    /// Packs the equation matrix into the residual vector, applying the
    /// column-sum replacement rule.
    fn flatten(&self, e: &ComplexMatrix, col_res: &[Complex64]) -> ComplexVector {
        let (m, n) = (e.nrows(), e.ncols());
        if self.model.symmetric {
            let mut out = Vec::with_capacity(self.size());
            for i in 0..n {
                for j in i..n {
                    out.push(if i == j { col_res[i] } else { e[(i, j)] });
                }
            }
            ComplexVector::from_vec(out)
        } else {
            let mut out: Vec<Complex64> = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    out.push(e[(i, j)]);
                }
            }
            for (j, &cr) in col_res.iter().enumerate() {
                let d = j.min(m - 1);
                out[d * n + j] = cr;
            }
            ComplexVector::from_vec(out)
        }
    }

    /// ∂F/∂t along a data path with derivative `d_data` (the system is affine
    /// in the data, so this only needs the lifted matrix).
    pub fn ft(&self, d_data: &SystemData, x: &UnknownVector) -> ComplexVector {
        let p = self.lift_algebraic(x);
        let (m, n) = (p.nrows(), p.ncols());
        let dc = d_data.total;
        let e = ComplexMatrix::from_fn(m, n, |i, j| dc * p[(i, j)] - d_data.u_alg[(i, j)]);
        let col_res: Vec<Complex64> = (0..n)
            .map(|j| dc * p.column(j).sum() - d_data.u_alg.column(j).sum())
            .collect();
        self.flatten(&e, &col_res)
    }

    /// Residual and analytic Jacobian at (x, U).
    pub fn evaluate_with_jacobian(
        &self,
        data: &SystemData,
        x: &UnknownVector,
    ) -> (ComplexVector, ComplexMatrix) {
        let b = self.unpack(x);
        let nsys = self.size();
        let c = data.total;
        let j_left = self.j_left(&b);
        let p = {
            let blk = if self.model.symmetric {
                &j_left * &b.p1 * j_left.transpose()
            } else {
                &j_left * &b.p1 * self.k_right(&b)
            };
            match &self.patches {
                None => blk,
                Some(pt) => {
                    let o3 = pt.o3.map(|v| Complex64::new(v, 0.0));
                    if self.model.symmetric {
                        &o3 * blk * o3.transpose()
                    } else {
                        &o3 * blk * pt.o4.map(|v| Complex64::new(v, 0.0)).transpose()
                    }
                }
            }
        };
        let mult = {
            let l = self.l_matrix(&b);
            if self.model.symmetric {
                l.transpose() * &b.lambda * &l
            } else {
                (self.r_matrix(&b) * &b.lambda * l).transpose()
            }
        };
        let f = self.residual_from(&p, &mult, data);

        // Directional derivative per unknown; the system is small enough that
        // re-walking the block products dominates nothing downstream.
        let mut jac = ComplexMatrix::zeros(nsys, nsys);
        let zero_data = SystemData {
            u_alg: ComplexMatrix::zeros(p.nrows(), p.ncols()),
            total: Complex64::ZERO,
        };
        let mut dir = UnknownVector::zeros(nsys);
        for k in 0..nsys {
            dir[k] = Complex64::ONE;
            let col = self.directional(&b, &j_left, &p, &mult, c, &dir, &zero_data);
            jac.set_column(k, &col);
            dir[k] = Complex64::ZERO;
        }
        (f, jac)
    }

    /// Derivative of F in the unknown direction `dx` (data held fixed).
    fn directional(
        &self,
        b: &Blocks,
        j_left: &ComplexMatrix,
        p: &ComplexMatrix,
        mult: &ComplexMatrix,
        c: Complex64,
        dx: &UnknownVector,
        zero_data: &SystemData,
    ) -> ComplexVector {
        let db = self.unpack(dx);
        let dj = {
            let r = self.model.r;
            let rows = j_left.nrows();
            let mut dj = ComplexMatrix::zeros(rows, r);
            for a in r..rows {
                for cc in 0..r {
                    dj[(a, cc)] = db.l1[(a - r, cc)];
                }
            }
            dj
        };
        let dp_blk = if self.model.symmetric {
            &dj * &b.p1 * j_left.transpose()
                + j_left * &db.p1 * j_left.transpose()
                + j_left * &b.p1 * dj.transpose()
        } else {
            let k_right = self.k_right(b);
            let mut dk = ComplexMatrix::zeros(self.model.r, self.model.n);
            for a in 0..self.model.r {
                for cc in self.model.r..self.model.n {
                    dk[(a, cc)] = db.r1[(a, cc - self.model.r)];
                }
            }
            &dj * &b.p1 * &k_right + j_left * &db.p1 * &k_right + j_left * &b.p1 * dk
        };
        let dp = match &self.patches {
            None => dp_blk,
            Some(pt) => {
                let o3 = pt.o3.map(|v| Complex64::new(v, 0.0));
                if self.model.symmetric {
                    &o3 * dp_blk * o3.transpose()
                } else {
                    &o3 * dp_blk * pt.o4.map(|v| Complex64::new(v, 0.0)).transpose()
                }
            }
        };
        let dmult = {
            let l = self.l_matrix(b);
            let dl_raw = {
                let rows = l.nrows();
                let cols_inner = if self.model.symmetric {
                    self.model.n
                } else {
                    self.model.m
                };
                let mut dl = ComplexMatrix::zeros(rows, cols_inner);
                for a in 0..rows {
                    for cc in 0..self.model.r {
                        dl[(a, cc)] = db.l1[(a, cc)];
                    }
                }
                match &self.patches {
                    None => dl,
                    Some(pt) => {
                        let o1 = pt.o1.map(|v| Complex64::new(v, 0.0));
                        let o3 = pt.o3.map(|v| Complex64::new(v, 0.0));
                        o1 * dl * o3.transpose()
                    }
                }
            };
            if self.model.symmetric {
                dl_raw.transpose() * &b.lambda * &l
                    + l.transpose() * &db.lambda * &l
                    + l.transpose() * &b.lambda * dl_raw
            } else {
                let r_m = self.r_matrix(b);
                let dr_raw = {
                    let mut dr = ComplexMatrix::zeros(self.model.n, self.model.n - self.model.r);
                    for a in 0..self.model.r {
                        for cc in 0..self.model.n - self.model.r {
                            dr[(a, cc)] = db.r1[(a, cc)];
                        }
                    }
                    match &self.patches {
                        None => dr,
                        Some(pt) => {
                            let o4 = pt.o4.map(|v| Complex64::new(v, 0.0));
                            let o2 = pt.o2.map(|v| Complex64::new(v, 0.0));
                            o4 * dr * o2.transpose()
                        }
                    }
                };
                (dr_raw * &b.lambda * &l + &r_m * &db.lambda * &l + r_m * &b.lambda * dl_raw)
                    .transpose()
            }
        };
        let (m, n) = (p.nrows(), p.ncols());
        let e = ComplexMatrix::from_fn(m, n, |i, j| {
            dp[(i, j)] * mult[(i, j)] + p[(i, j)] * dmult[(i, j)] + c * dp[(i, j)]
        });
        let col_res: Vec<Complex64> = (0..n).map(|j| c * dp.column(j).sum()).collect();
        let _ = zero_data;
        self.flatten(&e, &col_res)
    }

    /// Draws a random chart point and manufactures the complex data matrix it
    /// solves exactly, seeding monodromy without any solving.
    pub fn seed_solution(
        &self,
        rng: &mut impl Rng,
    ) -> Result<(UnknownVector, SystemData), FormulationError> {
        let (m, n, r) = (self.model.m, self.model.n, self.model.r);
        for _ in 0..64 {
            let mut blocks = if self.model.symmetric {
                let p1 = {
                    let g = complex_gaussian(rng, r, r);
                    &g + g.transpose()
                };
                let lam = {
                    let g = complex_gaussian(rng, n - r, n - r);
                    &g + g.transpose()
                };
                Blocks {
                    p1,
                    l1: complex_gaussian(rng, n - r, r),
                    r1: ComplexMatrix::zeros(0, 0),
                    lambda: lam,
                }
            } else {
                Blocks {
                    p1: complex_gaussian(rng, r, r),
                    l1: complex_gaussian(rng, m - r, r),
                    r1: complex_gaussian(rng, r, n - r),
                    lambda: complex_gaussian(rng, n - r, m - r),
                }
            };
            let x = self.pack(&blocks);
            let p = self.lift_algebraic(&x);
            let p_total = if self.model.symmetric {
                p.sum() * 0.5
            } else {
                p.sum()
            };
            if p_total.norm() < 1e-8 {
                continue;
            }
            blocks.p1 /= p_total;
            let x = self.pack(&blocks);
            let p = self.lift_algebraic(&x);
            let mult = self.multiplier_matrix(&x);
            let c = unit_complex(rng) * 10.0;
            let u_alg = ComplexMatrix::from_fn(p.nrows(), p.ncols(), |i, j| {
                p[(i, j)] * mult[(i, j)] + c * p[(i, j)]
            });
            let data = SystemData { u_alg, total: c };
            return Ok((x, data));
        }
        Err(FormulationError::DegenerateSeed)
    }

    /// Re-expresses a solution of `self` in the chart of `other` (same model,
    /// different patches). The underlying critical matrix is unchanged.
    pub fn convert_solution(
        &self,
        other: &KernelSystem,
        x: &UnknownVector,
    ) -> Result<UnknownVector, FormulationError> {
        if self.model != other.model {
            return Err(FormulationError::ShapeMismatch(
                "chart conversion across different models".into(),
            ));
        }
        let p = self.lift_algebraic(x);
        let b = self.unpack(x);
        let r = self.model.r;
        // Ambient normal matrix N with (general) multiplier = Nᵀ: N = R·Λ·L,
        // or the symmetric multiplier M = LᵀΛL itself.
        let l = self.l_matrix(&b);
        if self.model.symmetric {
            let mmat = l.transpose() * &b.lambda * &l;
            let o3 = other.o3();
            let pb = match o3 {
                None => p.clone(),
                Some(q) => {
                    let qc = q.map(|v| Complex64::new(v, 0.0));
                    qc.transpose() * &p * qc
                }
            };
            let k = match o3 {
                None => mmat,
                Some(q) => {
                    let qc = q.map(|v| Complex64::new(v, 0.0));
                    qc.transpose() * mmat * qc
                }
            };
            let p1 = pb.view((0, 0), (r, r)).into_owned();
            let bottom = pb.view((r, 0), (self.model.n - r, r)).into_owned();
            let l1 = solve_right(&p1, &bottom)?;
            let xi = k
                .view((r, r), (self.model.n - r, self.model.n - r))
                .into_owned();
            let lambda = match &other.patches {
                None => xi,
                Some(pt) => {
                    let o1 = pt.o1.map(|v| Complex64::new(v, 0.0));
                    &o1 * xi * o1.transpose()
                }
            };
            Ok(other.pack(&Blocks {
                p1,
                l1,
                r1: ComplexMatrix::zeros(0, 0),
                lambda,
            }))
        } else {
            let n_amb = self.r_matrix(&b) * &b.lambda * &l; // n×m
            let (pb, k) = match &other.patches {
                None => (p.clone(), n_amb.clone()),
                Some(pt) => {
                    let o3 = pt.o3.map(|v| Complex64::new(v, 0.0));
                    let o4 = pt.o4.map(|v| Complex64::new(v, 0.0));
                    (
                        o3.transpose() * &p * &o4,
                        o4.transpose() * n_amb * &o3,
                    )
                }
            };
            let (m, n) = (self.model.m, self.model.n);
            let p1 = pb.view((0, 0), (r, r)).into_owned();
            let l1 = solve_right(&p1, &pb.view((r, 0), (m - r, r)).into_owned())?;
            let r1 = solve_left(&p1, &pb.view((0, r), (r, n - r)).into_owned())?;
            let xi = k.view((r, r), (n - r, m - r)).into_owned();
            let lambda = match &other.patches {
                None => xi,
                Some(pt) => {
                    let o2 = pt.o2.map(|v| Complex64::new(v, 0.0));
                    let o1 = pt.o1.map(|v| Complex64::new(v, 0.0));
                    o2 * xi * o1.transpose()
                }
            };
            Ok(other.pack(&Blocks {
                p1,
                l1,
                r1,
                lambda,
            }))
        }
    }

    /// Recovers chart coordinates from a lifted algebraic matrix, fitting Λ by
    /// linear least squares over the unreplaced equations. Works (in the
    /// least-squares sense) even for rank-deficient matrices; callers use the
    /// residual to decide whether the critical equations actually hold.
    pub fn recover_solution(
        &self,
        p_alg: &ComplexMatrix,
        data: &SystemData,
    ) -> Result<UnknownVector, FormulationError> {
        let r = self.model.r;
        let (m, n) = (p_alg.nrows(), p_alg.ncols());
        let pb = match &self.patches {
            None => p_alg.clone(),
            Some(pt) => {
                let o3 = pt.o3.map(|v| Complex64::new(v, 0.0));
                if self.model.symmetric {
                    o3.transpose() * p_alg * o3
                } else {
                    let o4 = pt.o4.map(|v| Complex64::new(v, 0.0));
                    o3.transpose() * p_alg * o4
                }
            }
        };
        let p1 = pb.view((0, 0), (r, r)).into_owned();
        let l1 = lstsq_right(&p1, &pb.view((r, 0), (m - r, r)).into_owned())?;
        let r1 = if self.model.symmetric {
            ComplexMatrix::zeros(0, 0)
        } else {
            lstsq_left(&p1, &pb.view((0, r), (r, n - r)).into_owned())?
        };
        // Fit Λ linearly: F(Λ) = P ⋆ mult(Λ) + c·P − U with mult affine in Λ.
        let mut blocks = Blocks {
            p1,
            l1,
            r1,
            lambda: if self.model.symmetric {
                ComplexMatrix::zeros(n - r, n - r)
            } else {
                ComplexMatrix::zeros(n - r, m - r)
            },
        };
        let lay = self.layout();
        let nlam = lay.lambda_len;
        let x0 = self.pack(&blocks);
        let f0 = self.evaluate(data, &x0);
        let mut t = ComplexMatrix::zeros(f0.len(), nlam);
        for k in 0..nlam {
            let mut dx = UnknownVector::zeros(self.size());
            dx[lay.p1_len + lay.l1_len + lay.r1_len + k] = Complex64::ONE;
            let db = self.unpack(&dx);
            // multiplier is linear in Λ and P is Λ-independent
            let dmult = {
                let l = self.l_matrix(&blocks);
                if self.model.symmetric {
                    l.transpose() * &db.lambda * &l
                } else {
                    (self.r_matrix(&blocks) * &db.lambda * &l).transpose()
                }
            };
            let p_lift = self.lift_algebraic(&x0);
            let e = ComplexMatrix::from_fn(m, n, |i, j| p_lift[(i, j)] * dmult[(i, j)]);
            let col0 = vec![Complex64::ZERO; n];
            t.set_column(k, &self.flatten(&e, &col0));
        }
        let rhs = -f0;
        let lam_vec =
            lstsq_complex(&t, &rhs).map_err(|_| FormulationError::ChartDegenerate)?;
        if self.model.symmetric {
            let mut k = 0;
            for a in 0..n - r {
                for b in a..n - r {
                    blocks.lambda[(a, b)] = lam_vec[k];
                    blocks.lambda[(b, a)] = lam_vec[k];
                    k += 1;
                }
            }
        } else {
            for a in 0..n - r {
                for b in 0..m - r {
                    blocks.lambda[(a, b)] = lam_vec[a * (m - r) + b];
                }
            }
        }
        Ok(self.pack(&blocks))
    }
}

fn solve_right(
    p1: &ComplexMatrix,
    bottom: &ComplexMatrix,
) -> Result<ComplexMatrix, FormulationError> {
    // X·P1 = bottom  ⇔  P1ᵀ·Xᵀ = bottomᵀ
    let lu = nalgebra::linalg::LU::new(p1.transpose());
    lu.solve(&bottom.transpose())
        .map(|xt| xt.transpose())
        .ok_or(FormulationError::ChartDegenerate)
}

fn solve_left(
    p1: &ComplexMatrix,
    right: &ComplexMatrix,
) -> Result<ComplexMatrix, FormulationError> {
    let lu = nalgebra::linalg::LU::new(p1.clone());
    lu.solve(right).ok_or(FormulationError::ChartDegenerate)
}

fn lstsq_right(
    p1: &ComplexMatrix,
    bottom: &ComplexMatrix,
) -> Result<ComplexMatrix, FormulationError> {
    let mut cols = Vec::new();
    for i in 0..bottom.nrows() {
        let rhs = bottom.row(i).transpose();
        let sol = lstsq_complex(&p1.transpose(), &rhs)
            .map_err(|_| FormulationError::ChartDegenerate)?;
        cols.push(sol);
    }
    Ok(ComplexMatrix::from_rows(
        &cols.iter().map(|c| c.transpose()).collect::<Vec<_>>(),
    ))
}

fn lstsq_left(
    p1: &ComplexMatrix,
    right: &ComplexMatrix,
) -> Result<ComplexMatrix, FormulationError> {
    let mut cols = Vec::new();
    for j in 0..right.ncols() {
        let rhs = right.column(j).into_owned();
        let sol = lstsq_complex(p1, &rhs).map_err(|_| FormulationError::ChartDegenerate)?;
        cols.push(sol);
    }
    Ok(ComplexMatrix::from_columns(&cols))
}
