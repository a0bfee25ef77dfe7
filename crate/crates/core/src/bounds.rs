//! Closed-form root-count bounds for the kernel system: the Bézout product
//! and the 4-homogeneous coefficient bound, both as exact big integers.

use num_bigint::BigUint;

use crate::model::{ModelError, RankModel};

/// Both bounds for one model.
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub model: RankModel,
    pub bezout: BigUint,
    pub multihomogeneous: BigUint,
}

/// Bézout bound 2^r · 3^(n−r) · 4^(n(m−1)).
pub fn bezout_bound(m: usize, n: usize, r: usize) -> Result<BigUint, ModelError> {
    check(m, n, r)?;
    let two = BigUint::from(2u32).pow(r as u32);
    let three = BigUint::from(3u32).pow((n - r) as u32);
    let four = BigUint::from(4u32).pow((n * (m - 1)) as u32);
    Ok(two * three * four)
}

fn check(m: usize, n: usize, r: usize) -> Result<(), ModelError> {
    if !(1 <= r && r < m && m <= n) {
        return Err(ModelError::InvalidModel(format!(
            "bounds need 1 <= r < m <= n, got ({m}, {n}, {r})"
        )));
    }
    Ok(())
}

/// Dense polynomial in (w, x, y, z) with exponents truncated to a box; exact
/// big-integer coefficients.
struct Poly4 {
    dims: [usize; 4],
    coeffs: Vec<BigUint>,
}

impl Poly4 {
    fn one(dims: [usize; 4]) -> Self {
        let len = dims.iter().map(|d| d + 1).product();
        let mut coeffs = vec![BigUint::ZERO; len];
        coeffs[0] = BigUint::from(1u32);
        Poly4 { dims, coeffs }
    }

    fn idx(&self, e: [usize; 4]) -> usize {
        ((e[0] * (self.dims[1] + 1) + e[1]) * (self.dims[2] + 1) + e[2]) * (self.dims[3] + 1)
            + e[3]
    }

    /// Multiply by a linear form given as the subset of variables it contains
    /// (e.g. w+x+y = [true, true, true, false]), truncating at the box.
    fn mul_linear(&mut self, vars: [bool; 4]) {
        let mut out = vec![BigUint::ZERO; self.coeffs.len()];
        for e0 in 0..=self.dims[0] {
            for e1 in 0..=self.dims[1] {
                for e2 in 0..=self.dims[2] {
                    for e3 in 0..=self.dims[3] {
                        let c = &self.coeffs[self.idx([e0, e1, e2, e3])];
                        if c == &BigUint::ZERO {
                            continue;
                        }
                        let e = [e0, e1, e2, e3];
                        for (v, used) in vars.iter().enumerate() {
                            if !used || e[v] + 1 > self.dims[v] {
                                continue;
                            }
                            let mut shifted = e;
                            shifted[v] += 1;
                            let i = self.idx(shifted);
                            out[i] += c;
                        }
                    }
                }
            }
        }
        self.coeffs = out;
    }
}

/// 4-homogeneous Bézout bound: coefficient of w^(r²)·x^(r(m−r))·y^(r(n−r))·z^((n−r)(m−r))
/// in (w+x)^r · (w+x+y)^(n−r) · (w+x+y+z)^(n(m−1)).
pub fn multihomogeneous_bound(m: usize, n: usize, r: usize) -> Result<BigUint, ModelError> {
    check(m, n, r)?;
    let target = [r * r, r * (m - r), r * (n - r), (n - r) * (m - r)];
    let mut p = Poly4::one(target);
    for _ in 0..r {
        p.mul_linear([true, true, false, false]);
    }
    for _ in 0..n - r {
        p.mul_linear([true, true, true, false]);
    }
    for _ in 0..n * (m - 1) {
        p.mul_linear([true, true, true, true]);
    }
    let i = p.idx(target);
    Ok(p.coeffs[i].clone())
}

/// Bound report for a model (general models only; the symmetric system has
/// its own degree structure not covered by these formulas).
pub fn bound_report(model: RankModel) -> Result<BoundReport, ModelError> {
    if model.symmetric {
        return Err(ModelError::InvalidModel(
            "bounds are defined for the general model".into(),
        ));
    }
    Ok(BoundReport {
        model,
        bezout: bezout_bound(model.m, model.n, model.r)?,
        multihomogeneous: multihomogeneous_bound(model.m, model.n, model.r)?,
    })
}
