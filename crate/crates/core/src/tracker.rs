//! Numerical path tracking between data matrices.
//!
//! A homotopy arc deforms the data (not the equations): U(t) interpolates
//! from U_start at t = 1 to U_end at t = 0 through the gamma-trick arc, so
//! for all but finitely many γ on the unit circle no intermediate system
//! degenerates. The predictor integrates the Davidenko system
//! J·dx/dt = −∂F/∂t with a classical 4th-order Runge–Kutta step; the
//! corrector is Newton at frozen t.

use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::formulation::{KernelSystem, SystemData, UnknownVector};
use crate::numerics::{ComplexVector, LuFactors};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("{failed} of {total} paths failed after retries")]
    TooManyFailures { failed: usize, total: usize },
}

/// Gamma-trick arc from one data matrix to another, t ∈ [1, 0].
#[derive(Debug, Clone)]
pub struct HomotopyArc {
    pub start: SystemData,
    pub end: SystemData,
    pub gamma: Complex64,
}

impl HomotopyArc {
    pub fn new(start: SystemData, end: SystemData, gamma: Complex64) -> Self {
        let gamma = gamma / gamma.norm();
        HomotopyArc { start, end, gamma }
    }

    /// Straight-line arc (γ = 1).
    pub fn linear(start: SystemData, end: SystemData) -> Self {
        HomotopyArc {
            start,
            end,
            gamma: Complex64::ONE,
        }
    }

    /// Data at arc parameter t: (γt·U_start + (1−t)·U_end)/(1+(γ−1)t).
    pub fn at(&self, t: f64) -> SystemData {
        let g = self.gamma;
        let d = Complex64::ONE + (g - Complex64::ONE) * t;
        let a = g * t / d;
        let b = Complex64::new(1.0 - t, 0.0) / d;
        self.start.combine(a, &self.end, b)
    }

    /// d/dt of the data along the arc: γ/(1+(γ−1)t)²·(U_start − U_end).
    pub fn derivative(&self, t: f64) -> SystemData {
        let g = self.gamma;
        let d = Complex64::ONE + (g - Complex64::ONE) * t;
        let coef = g / (d * d);
        self.start.combine(coef, &self.end, -coef)
    }
}

/// Step-control policy for the predictor-corrector loop.
#[derive(Debug, Clone)]
pub struct TrackerOptions {
    pub initial_step: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub max_newton_iters: usize,
    pub corrector_tol: f64,
    pub step_growth_after: usize,
    pub step_growth: f64,
    pub step_shrink: f64,
    pub endpoint_tol: f64,
    pub max_steps: usize,
    /// ‖x‖ beyond which the path is declared divergent (solution at infinity).
    pub divergence_norm: f64,
    /// Pivot-ratio ceiling; beyond it the step is rejected so that doubtful
    /// regions are crossed with smaller steps or reported, never trusted.
    pub condition_limit: f64,
    /// Below this t the step size is capped at `tight_max_step`.
    pub tight_t: f64,
    pub tight_max_step: f64,
    /// Lifted-matrix distance under which two endpoints count as the same
    /// path (triggers a re-track with a fresh γ).
    pub duplicate_tol: f64,
    /// Extra γ draws per path before giving up.
    pub max_retries: usize,
}

impl Default for TrackerOptions {
    fn default() -> Self {
        TrackerOptions {
            initial_step: 0.05,
            min_step: 1e-7,
            max_step: 0.1,
            max_newton_iters: 3,
            corrector_tol: 1e-9,
            step_growth_after: 4,
            step_growth: 2.0,
            step_shrink: 0.5,
            endpoint_tol: 1e-11,
            max_steps: 50_000,
            divergence_norm: 1e10,
            condition_limit: 1e13,
            tight_t: 0.01,
            tight_max_step: 1e-3,
            duplicate_tol: 1e-6,
            max_retries: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathStatus {
    Success,
    Diverged,
    MinStepReached,
    MaxSteps,
}

#[derive(Debug, Clone)]
pub struct PathResult {
    pub status: PathStatus,
    pub endpoint: UnknownVector,
    pub steps: usize,
    pub final_residual: f64,
}

impl PathResult {
    pub fn is_success(&self) -> bool {
        self.status == PathStatus::Success
    }
}

fn finite(x: &ComplexVector) -> bool {
    x.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// One Davidenko slope evaluation: solves J(x,t)·k = −F_t(x,t).
fn slope(
    sys: &KernelSystem,
    arc: &HomotopyArc,
    x: &UnknownVector,
    t: f64,
    opts: &TrackerOptions,
) -> Option<ComplexVector> {
    let data = arc.at(t);
    let (_, jac) = sys.evaluate_with_jacobian(&data, x);
    let lu = LuFactors::new(&jac).ok()?;
    if lu.pivot_ratio() > opts.condition_limit {
        return None;
    }
    let ft = sys.ft(&arc.derivative(t), x);
    let k = lu.solve(&(-ft)).ok()?;
    finite(&k).then_some(k)
}

/// Tracks one solution of the start system to the end system along `arc`.
pub fn track_path(
    sys: &KernelSystem,
    arc: &HomotopyArc,
    x_start: &UnknownVector,
    opts: &TrackerOptions,
) -> PathResult {
    let mut x = x_start.clone();
    let mut t = 1.0f64;
    let mut h = opts.initial_step;
    let mut streak = 0usize;
    let mut steps = 0usize;

    let fail = |status: PathStatus, x: &UnknownVector, steps: usize, res: f64| PathResult {
        status,
        endpoint: x.clone(),
        steps,
        final_residual: res,
    };

    while t > 0.0 {
        if steps >= opts.max_steps {
            return fail(PathStatus::MaxSteps, &x, steps, f64::NAN);
        }
        steps += 1;
        let mut h_eff = h.min(t);
        if t < opts.tight_t {
            h_eff = h_eff.min(opts.tight_max_step);
        }
        let t_next = if t - h_eff < 1e-15 { 0.0 } else { t - h_eff };
        let dt = t_next - t;

        // RK4 predictor
        let predicted = (|| {
            let k1 = slope(sys, arc, &x, t, opts)?;
            let x2 = &x + &k1 * Complex64::new(dt / 2.0, 0.0);
            let k2 = slope(sys, arc, &x2, t + dt / 2.0, opts)?;
            let x3 = &x + &k2 * Complex64::new(dt / 2.0, 0.0);
            let k3 = slope(sys, arc, &x3, t + dt / 2.0, opts)?;
            let x4 = &x + &k3 * Complex64::new(dt, 0.0);
            let k4 = slope(sys, arc, &x4, t_next, opts)?;
            let sum = k1 + k2 * Complex64::new(2.0, 0.0) + k3 * Complex64::new(2.0, 0.0) + k4;
            Some(&x + sum * Complex64::new(dt / 6.0, 0.0))
        })();

        // Newton corrector at frozen t_next
        let corrected = predicted.and_then(|mut xc| {
            if !finite(&xc) {
                return None;
            }
            let data = arc.at(t_next);
            for _ in 0..opts.max_newton_iters {
                let (f, jac) = sys.evaluate_with_jacobian(&data, &xc);
                let lu = LuFactors::new(&jac).ok()?;
                if lu.pivot_ratio() > opts.condition_limit {
                    return None;
                }
                let delta = lu.solve(&f).ok()?;
                xc -= &delta;
                if !finite(&xc) {
                    return None;
                }
                if delta.norm() <= opts.corrector_tol * (1.0 + xc.norm()) {
                    return Some(xc);
                }
            }
            None
        });

        match corrected {
            Some(xc) => {
                x = xc;
                t = t_next;
                if x.norm() > opts.divergence_norm {
                    return fail(PathStatus::Diverged, &x, steps, f64::NAN);
                }
                streak += 1;
                if streak >= opts.step_growth_after {
                    h = (h * opts.step_growth).min(opts.max_step);
                    streak = 0;
                }
            }
            None => {
                streak = 0;
                h *= opts.step_shrink;
                if h < opts.min_step {
                    let res = sys.evaluate(&arc.at(t), &x).norm();
                    return fail(PathStatus::MinStepReached, &x, steps, res);
                }
            }
        }
    }

    // Endpoint polish at t = 0.
    let data = arc.at(0.0);
    let scale = data.norm_inf().max(1.0);
    let mut res = sys.evaluate(&data, &x).norm();
    for _ in 0..12 {
        if res <= opts.endpoint_tol * scale {
            break;
        }
        let (f, jac) = sys.evaluate_with_jacobian(&data, &x);
        let Ok(lu) = LuFactors::new(&jac) else { break };
        let Ok(delta) = lu.solve(&f) else { break };
        x -= &delta;
        if !finite(&x) {
            return fail(PathStatus::Diverged, &x, steps, f64::NAN);
        }
        res = sys.evaluate(&data, &x).norm();
    }
    let status = if res <= opts.endpoint_tol * scale {
        PathStatus::Success
    } else {
        PathStatus::MinStepReached
    };
    PathResult {
        status,
        endpoint: x,
        steps,
        final_residual: res,
    }
}

fn gamma_for(seed: u64, index: usize, attempt: usize) -> Complex64 {
    let mut rng = crate::rng_stream(seed, 0x6761 ^ ((index as u64) << 8) ^ attempt as u64);
    crate::formulation::unit_complex(&mut rng)
}

/// Tracks every solution from `start` to `end` along a shared gamma-trick
/// arc, retrying failed or colliding paths with per-path γ draws. Results
/// stay in input order. Errors when more than 10% of paths fail after the
/// retry budget.
pub fn transport_solutions(
    sys: &KernelSystem,
    start: &SystemData,
    solutions: &[UnknownVector],
    end: &SystemData,
    rng_seed: u64,
    opts: &TrackerOptions,
) -> Result<Vec<PathResult>, TrackError> {
    let shared_gamma = gamma_for(rng_seed, usize::MAX, 0);
    let track_with = |x: &UnknownVector, gamma: Complex64| {
        let arc = HomotopyArc::new(start.clone(), end.clone(), gamma);
        track_path(sys, &arc, x, opts)
    };

    let mut results: Vec<PathResult> = solutions
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut best = track_with(x, shared_gamma);
            let mut attempt = 1;
            while !best.is_success() && attempt <= opts.max_retries {
                best = track_with(x, gamma_for(rng_seed, i, attempt));
                attempt += 1;
            }
            best
        })
        .collect();

    // Two successful paths landing on the same endpoint means a crossing: one
    // of them followed the wrong branch. Re-track with fresh γ until distinct.
    let mut lifted: Vec<Option<crate::numerics::ComplexMatrix>> = results
        .iter()
        .map(|r| r.is_success().then(|| sys.lift_to_matrix(&r.endpoint)))
        .collect();
    for round in 0..opts.max_retries {
        let mut collided = Vec::new();
        for i in 0..results.len() {
            if lifted[i].is_none() {
                continue;
            }
            for j in 0..i {
                if let (Some(pi), Some(pj)) = (&lifted[i], &lifted[j]) {
                    if (pi - pj).norm() < opts.duplicate_tol {
                        collided.push(i);
                        break;
                    }
                }
            }
        }
        if collided.is_empty() {
            break;
        }
        let retracked: Vec<(usize, PathResult)> = collided
            .par_iter()
            .map(|&i| {
                (
                    i,
                    track_with(&solutions[i], gamma_for(rng_seed, i, 100 + round)),
                )
            })
            .collect();
        for (i, r) in retracked {
            lifted[i] = r.is_success().then(|| sys.lift_to_matrix(&r.endpoint));
            results[i] = r;
        }
    }

    let failed = results.iter().filter(|r| !r.is_success()).count();
    if failed * 10 > results.len() {
        return Err(TrackError::TooManyFailures {
            failed,
            total: results.len(),
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formulation::build_system;
    use crate::model::RankModel;

    #[test]
    fn arc_endpoints_exact() {
        let sys = build_system(RankModel::general(3, 3, 2).unwrap(), false, 0).unwrap();
        let mut rng = crate::rng_stream(1, 0);
        let (_, d0) = sys.seed_solution(&mut rng).unwrap();
        let (_, d1) = sys.seed_solution(&mut rng).unwrap();
        let arc = HomotopyArc::new(d0.clone(), d1.clone(), Complex64::new(0.6, 0.8));
        assert!((arc.at(1.0).u_alg - &d0.u_alg).norm() < 1e-13);
        assert!((arc.at(0.0).u_alg - &d1.u_alg).norm() < 1e-13);
        // finite-difference check of the arc derivative
        let h = 1e-7;
        let fd = arc
            .at(0.5 + h)
            .combine(Complex64::ONE, &arc.at(0.5 - h), -Complex64::ONE)
            .scale(Complex64::new(1.0 / (2.0 * h), 0.0));
        let an = arc.derivative(0.5);
        assert!((fd.u_alg - an.u_alg).norm() < 1e-6);
    }

    #[test]
    fn stationary_homotopy_returns_start() {
        let sys = build_system(RankModel::general(3, 3, 2).unwrap(), false, 0).unwrap();
        let mut rng = crate::rng_stream(2, 0);
        let (x0, d0) = sys.seed_solution(&mut rng).unwrap();
        let arc = HomotopyArc::new(d0.clone(), d0.clone(), Complex64::new(0.0, 1.0));
        let r = track_path(&sys, &arc, &x0, &TrackerOptions::default());
        assert!(r.is_success());
        assert!((r.endpoint - &x0).norm() < 1e-9 * (1.0 + x0.norm()));
    }

    #[test]
    fn single_path_to_second_generic_point_and_back() {
        let sys = build_system(RankModel::general(3, 3, 2).unwrap(), false, 0).unwrap();
        let mut rng = crate::rng_stream(3, 0);
        let (x0, d0) = sys.seed_solution(&mut rng).unwrap();
        let (_, d1) = sys.seed_solution(&mut rng).unwrap();
        let opts = TrackerOptions::default();
        let gamma = Complex64::new(0.6, 0.8);
        let fwd = track_path(
            &sys,
            &HomotopyArc::new(d0.clone(), d1.clone(), gamma),
            &x0,
            &opts,
        );
        assert!(fwd.is_success());
        assert!(sys.evaluate(&d1, &fwd.endpoint).norm() < 1e-9);
        // Returning along γ⁻¹ = γ̄ retraces the same data curve, so the same
        // branch comes back; a fresh γ would instead realize a monodromy
        // permutation of the fiber.
        let back = track_path(
            &sys,
            &HomotopyArc::new(d1, d0.clone(), gamma.conj()),
            &fwd.endpoint,
            &opts,
        );
        assert!(back.is_success());
        let p0 = sys.lift_to_matrix(&x0);
        let p1 = sys.lift_to_matrix(&back.endpoint);
        assert!((p0 - p1).norm() < 1e-6);
    }

    #[test]
    fn identity_transport_of_batch() {
        let sys = build_system(RankModel::symmetric(3, 2).unwrap(), false, 0).unwrap();
        let mut rng = crate::rng_stream(4, 0);
        let (x0, d0) = sys.seed_solution(&mut rng).unwrap();
        let res =
            transport_solutions(&sys, &d0, &[x0.clone()], &d0, 7, &TrackerOptions::default())
                .unwrap();
        assert_eq!(res.len(), 1);
        assert!(res[0].is_success());
        assert!((res[0].endpoint.clone() - x0).norm() < 1e-8);
    }
}
