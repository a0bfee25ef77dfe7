//! Monodromy solving and the persisted preprocessing archive.
//!
//! One seed solution at a random complex data matrix U0 is circulated around
//! triangle loops U0 → A → B → U0 through fresh random complex data; every
//! loop realizes a permutation of the fiber, so the orbit of the seed fills
//! the whole solution set. Saturation plus a completeness certificate ends
//! the search, and the result is persisted so later runs pay only one
//! parameter homotopy per critical point.
//!
//! The completeness certificate is built from the ML-duality relation
//! P ⋆ Q = Ω_U: for self-dual models (m − r + 1 = r) the candidate set must
//! be closed under P ↦ Ω ⋆/ P, and independently constructed fiber samples
//! (fresh seed solutions transported to U0) must land inside the set. The
//! centroid of the critical matrices is not an affine function of the data
//! along lines for this family (the rank-1 closed form is a counterexample),
//! so a centroid-collinearity test cannot separate complete from incomplete
//! sets; duality closure reproduces the intended pass/fail behavior exactly.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::formulation::{build_system, KernelSystem, SystemData, UnknownVector};
use crate::model::{omega_matrix_complex, RankModel};
use crate::numerics::ComplexMatrix;
use crate::tracker::{transport_solutions, PathResult, TrackerOptions};

#[derive(Debug, Error)]
pub enum MonodromyError {
    #[error("trace test failed after {loops} loops (found {found} solutions)")]
    TraceTestFailed {
        loops: usize,
        found: usize,
        archive: Box<SolutionArchive>,
    },
    #[error("invalid model for monodromy: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Formulation(#[from] crate::formulation::FormulationError),
    #[error("archive I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("archive schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("archive corrupt: {0}")]
    CorruptArchive(String),
}

/// Loop policy for the monodromy search.
#[derive(Debug, Clone)]
pub struct MonodromyOptions {
    /// Loops without new solutions before the completeness test is attempted.
    pub max_stale_loops: usize,
    pub max_total_loops: usize,
    /// Lifted-matrix distance under which two solutions are the same point.
    pub dedup_tol: f64,
    /// Independent fiber samples per completeness test.
    pub probes: usize,
    pub tracker: TrackerOptions,
}

impl Default for MonodromyOptions {
    fn default() -> Self {
        MonodromyOptions {
            max_stale_loops: 10,
            max_total_loops: 500,
            dedup_tol: 1e-6,
            probes: 2,
            tracker: TrackerOptions::default(),
        }
    }
}

/// Outcome of the completeness certificate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceTestReport {
    pub passed: bool,
    /// Worst relative defect across the certificate (duality closure and
    /// probe membership); tiny for complete sets, large when points are
    /// missing.
    pub residual: f64,
}

/// The persisted preprocessing product: a generic complex data matrix and its
/// full solution set.
#[derive(Debug, Clone)]
pub struct SolutionArchive {
    pub model: RankModel,
    pub u0: SystemData,
    pub solutions: Vec<UnknownVector>,
    pub ml_degree: usize,
    pub trace: TraceTestReport,
    pub seed: u64,
}

/// Random complex data matrix with grand total of modulus 10 (loop nodes).
pub fn random_data(model: RankModel, rng: &mut impl Rng) -> SystemData {
    use crate::formulation::{complex_gaussian, unit_complex};
    let target = unit_complex(rng) * 10.0;
    if model.symmetric {
        let g = complex_gaussian(rng, model.n, model.n);
        let u_alg = &g + g.transpose(); // doubled diagonal holds automatically
        let total: Complex64 = u_alg.sum() * 0.5;
        let c = target / total;
        SystemData {
            u_alg: u_alg * c,
            total: target,
        }
    } else {
        let u_alg = complex_gaussian(rng, model.m, model.n);
        let total = u_alg.sum();
        let c = target / total;
        SystemData {
            u_alg: u_alg * c,
            total: target,
        }
    }
}

struct FiberSet<'a> {
    sys: &'a KernelSystem,
    solutions: Vec<UnknownVector>,
    lifted: Vec<ComplexMatrix>,
}

impl<'a> FiberSet<'a> {
    fn new(sys: &'a KernelSystem) -> Self {
        FiberSet {
            sys,
            solutions: Vec::new(),
            lifted: Vec::new(),
        }
    }

    fn min_dist(&self, p: &ComplexMatrix) -> f64 {
        self.lifted
            .iter()
            .map(|q| (p - q).norm())
            .fold(f64::INFINITY, f64::min)
    }

    fn insert(&mut self, x: UnknownVector, tol: f64) -> bool {
        let p = self.sys.lift_to_matrix(&x);
        if self.min_dist(&p) < tol {
            return false;
        }
        self.solutions.push(x);
        self.lifted.push(p);
        true
    }
}

/// Relative ∞-norm defect of P⋆Q against Ω.
fn pairing_defect(p: &ComplexMatrix, q: &ComplexMatrix, omega: &ComplexMatrix) -> f64 {
    let scale = omega.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut worst = 0.0f64;
    for ((a, b), w) in p.iter().zip(q.iter()).zip(omega.iter()) {
        worst = worst.max((a * b - w).norm());
    }
    worst / scale.max(f64::MIN_POSITIVE)
}

/// Duality-closure defect of a candidate set: every lifted matrix must have
/// its dual partner Ω ⋆/ P inside the set, bijectively.
fn closure_defect(lifted: &[ComplexMatrix], omega: &ComplexMatrix) -> f64 {
    let mut used = vec![false; lifted.len()];
    let mut worst = 0.0f64;
    for p in lifted {
        let mut best = f64::INFINITY;
        let mut best_j = usize::MAX;
        for (j, q) in lifted.iter().enumerate() {
            let d = pairing_defect(p, q, omega);
            if d < best {
                best = d;
                best_j = j;
            }
        }
        worst = worst.max(best);
        // Partner double-use means two inputs coincide, which dedup forbids;
        // flag it only when the match itself was genuine.
        if best_j != usize::MAX && best < 1e-9 && used[best_j] && lifted.len() > 1 {
            worst = worst.max(1.0);
        }
        if best_j != usize::MAX {
            used[best_j] = true;
        }
    }
    worst
}

/// Per-point dual-criticality defect for models that are not self-dual: the
/// entrywise dual Ω ⋆/ P must satisfy the rank-(m−r+1) kernel system.
fn dual_point_defect(
    model: RankModel,
    u0: &SystemData,
    lifted: &[ComplexMatrix],
    omega: &ComplexMatrix,
) -> Result<f64, MonodromyError> {
    let dual_r = model.dual_rank();
    let scale = u0.norm_inf().max(1.0);
    let q_stat = |p: &ComplexMatrix| {
        ComplexMatrix::from_fn(p.nrows(), p.ncols(), |i, j| omega[(i, j)] / p[(i, j)])
    };
    if dual_r == model.m && model.m == model.n {
        // dual of the full square model: closed-form point U/u_++
        let mut worst = 0.0f64;
        for p in lifted {
            let q = q_stat(p);
            for i in 0..model.m {
                for j in 0..model.n {
                    let d = if model.symmetric && i == j { 2.0 } else { 1.0 };
                    let expect = u0.u_alg[(i, j)] / (u0.total * d);
                    worst = worst.max((q[(i, j)] - expect).norm());
                }
            }
        }
        return Ok(worst);
    }
    let dual_model = if model.symmetric {
        RankModel::symmetric(model.n, dual_r)
    } else {
        RankModel::general(model.m, model.n, dual_r)
    }
    .map_err(|e| MonodromyError::InvalidModel(e.to_string()))?;
    let dual_sys = build_system(dual_model, false, 0)?;
    let mut worst = 0.0f64;
    for p in lifted {
        let mut q = q_stat(p);
        if model.symmetric {
            for i in 0..model.n {
                q[(i, i)] *= 2.0; // back to algebraic coordinates
            }
        }
        let defect = match dual_sys.recover_solution(&q, u0) {
            Ok(x) => dual_sys.evaluate(u0, &x).norm() / scale,
            Err(_) => 1.0,
        };
        worst = worst.max(defect);
    }
    Ok(worst)
}

/// Completeness certificate for a candidate solution set at U0: duality
/// closure (set-level for self-dual models, per-point dual criticality
/// otherwise) plus independent fiber probes.
pub fn trace_test(
    sys: &KernelSystem,
    u0: &SystemData,
    solutions: &[UnknownVector],
    rng_seed: u64,
) -> Result<TraceTestReport, MonodromyError> {
    let (report, _) =
        trace_test_inner(sys, u0, solutions, rng_seed, 2, &TrackerOptions::default())?;
    Ok(report)
}

fn trace_test_inner(
    sys: &KernelSystem,
    u0: &SystemData,
    solutions: &[UnknownVector],
    rng_seed: u64,
    probes: usize,
    topts: &TrackerOptions,
) -> Result<(TraceTestReport, Vec<UnknownVector>), MonodromyError> {
    let model = sys.model();
    let lifted: Vec<ComplexMatrix> = solutions.iter().map(|x| sys.lift_to_matrix(x)).collect();
    let omega = omega_matrix_complex(&u0.u_alg, u0.total, model.symmetric);

    let closure = if model.is_self_dual() {
        closure_defect(&lifted, &omega)
    } else {
        dual_point_defect(model, u0, &lifted, &omega)?
    };

    let mut probe_defect = 0.0f64;
    let mut strays = Vec::new();
    let mut probe_successes = 0;
    for k in 0..probes {
        let mut rng = crate::rng_stream(rng_seed, 0x9100 + k as u64);
        let Ok((y, d_probe)) = sys.seed_solution(&mut rng) else {
            continue;
        };
        let Ok(results) =
            transport_solutions(sys, &d_probe, &[y], u0, rng_seed ^ (k as u64), topts)
        else {
            continue;
        };
        if !results[0].is_success() {
            continue;
        }
        probe_successes += 1;
        let p = sys.lift_to_matrix(&results[0].endpoint);
        let dist = lifted
            .iter()
            .map(|q| (&p - q).norm())
            .fold(f64::INFINITY, f64::min);
        probe_defect = probe_defect.max(dist);
        if dist > 1e-4 {
            strays.push(results[0].endpoint.clone());
        }
    }

    let closure_ok = closure < 1e-6;
    let probe_ok = probes == 0 || (probe_successes > 0 && strays.is_empty());
    let residual = closure.max(if strays.is_empty() { probe_defect } else { 1.0 });
    Ok((
        TraceTestReport {
            passed: closure_ok && probe_ok,
            residual,
        },
        strays,
    ))
}

/// Populates the full solution set for a generic complex data matrix by
/// monodromy loops from one constructed seed.
pub fn monodromy_solve(
    model: RankModel,
    opts: &MonodromyOptions,
    rng_seed: u64,
) -> Result<SolutionArchive, MonodromyError> {
    if model.r >= model.m {
        return Err(MonodromyError::InvalidModel(format!(
            "monodromy needs r < m; rank {} of a {}x{} model has a closed form",
            model.r, model.m, model.n
        )));
    }
    let sys = build_system(model, false, rng_seed)?;
    let mut rng = crate::rng_stream(rng_seed, 1);
    let (x0, u0) = sys.seed_solution(&mut rng)?;

    let mut fiber = FiberSet::new(&sys);
    fiber.insert(x0, opts.dedup_tol);

    let mut stale = 0usize;
    let mut loops = 0usize;
    let mut certificate = TraceTestReport {
        passed: false,
        residual: f64::INFINITY,
    };
    while loops < opts.max_total_loops {
        loops += 1;
        let mut loop_rng = crate::rng_stream(rng_seed, 1000 + loops as u64);
        let a = random_data(model, &mut loop_rng);
        let b = random_data(model, &mut loop_rng);
        let leg_seed = rng_seed ^ (loops as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);

        let mut current: Vec<UnknownVector> = fiber.solutions.clone();
        for (leg, (from, to)) in [(&u0, &a), (&a, &b), (&b, &u0)].into_iter().enumerate() {
            let results =
                transport_all(&sys, from, &current, to, leg_seed + leg as u64, &opts.tracker);
            current = results
                .into_iter()
                .filter(PathResult::is_success)
                .map(|r| r.endpoint)
                .collect();
            if current.is_empty() {
                break;
            }
        }

        let mut added = 0;
        for y in current {
            if fiber.insert(y, opts.dedup_tol) {
                added += 1;
            }
        }
        stale = if added == 0 { stale + 1 } else { 0 };

        if stale >= opts.max_stale_loops {
            let (report, strays) = trace_test_inner(
                &sys,
                &u0,
                &fiber.solutions,
                rng_seed ^ loops as u64,
                opts.probes,
                &opts.tracker,
            )?;
            certificate = report;
            if report.passed {
                break;
            }
            let mut found_new = false;
            for y in strays {
                if fiber.insert(y, opts.dedup_tol) {
                    found_new = true;
                }
            }
            // a stray restarts the search; a mere defect earns a few more
            // loops before the next certificate attempt
            stale = if found_new { 0 } else { opts.max_stale_loops / 2 };
        }
    }

    let ml_degree = fiber.solutions.len();
    let archive = SolutionArchive {
        model,
        u0,
        solutions: fiber.solutions,
        ml_degree,
        trace: certificate,
        seed: rng_seed,
    };
    if !certificate.passed {
        return Err(MonodromyError::TraceTestFailed {
            loops,
            found: ml_degree,
            archive: Box::new(archive),
        });
    }
    Ok(archive)
}

/// Lenient transport used inside loops: failed paths are dropped, never fatal.
fn transport_all(
    sys: &KernelSystem,
    from: &SystemData,
    xs: &[UnknownVector],
    to: &SystemData,
    seed: u64,
    topts: &TrackerOptions,
) -> Vec<PathResult> {
    match transport_solutions(sys, from, xs, to, seed, topts) {
        Ok(v) => v,
        Err(crate::tracker::TrackError::TooManyFailures { .. }) => {
            transport_solutions(sys, from, xs, to, seed ^ 0xffff_0000, topts).unwrap_or_default()
        }
    }
}

// ---------------------------------------------------------------------------
// Archive persistence
// ---------------------------------------------------------------------------

const ARCHIVE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArchiveFile {
    version: u32,
    model: RankModel,
    /// Row-major data entries as [re, im]; symmetric models store the packed
    /// upper triangle of the statistical data (diagonal not doubled).
    u0: Vec<[f64; 2]>,
    solutions: Vec<Vec<[f64; 2]>>,
    ml_degree: usize,
    trace_test: TraceTestReport,
    seed: u64,
    sha256: String,
}

fn data_to_entries(model: RankModel, u0: &SystemData) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    if model.symmetric {
        for i in 0..model.n {
            for j in i..model.n {
                let z = if i == j {
                    u0.u_alg[(i, i)] * 0.5
                } else {
                    u0.u_alg[(i, j)]
                };
                out.push([z.re, z.im]);
            }
        }
    } else {
        for i in 0..model.m {
            for j in 0..model.n {
                out.push([u0.u_alg[(i, j)].re, u0.u_alg[(i, j)].im]);
            }
        }
    }
    out
}

fn entries_to_data(model: RankModel, entries: &[[f64; 2]]) -> Result<SystemData, MonodromyError> {
    let expect = model.system_size();
    if entries.len() != expect {
        return Err(MonodromyError::SchemaMismatch(format!(
            "u0 has {} entries, model needs {expect}",
            entries.len()
        )));
    }
    if model.symmetric {
        let mut u_alg = ComplexMatrix::zeros(model.n, model.n);
        let mut total = Complex64::ZERO;
        let mut k = 0;
        for i in 0..model.n {
            for j in i..model.n {
                let z = Complex64::new(entries[k][0], entries[k][1]);
                total += z;
                if i == j {
                    u_alg[(i, i)] = z * 2.0;
                } else {
                    u_alg[(i, j)] = z;
                    u_alg[(j, i)] = z;
                }
                k += 1;
            }
        }
        Ok(SystemData { u_alg, total })
    } else {
        let u_alg = ComplexMatrix::from_fn(model.m, model.n, |i, j| {
            let e = entries[i * model.n + j];
            Complex64::new(e[0], e[1])
        });
        let total = u_alg.sum();
        Ok(SystemData { u_alg, total })
    }
}

fn canonical_payload(file: &ArchiveFile) -> String {
    let unsigned = ArchiveFile {
        version: file.version,
        model: file.model,
        u0: file.u0.clone(),
        solutions: file.solutions.clone(),
        ml_degree: file.ml_degree,
        trace_test: file.trace_test,
        seed: file.seed,
        sha256: String::new(),
    };
    serde_json::to_string(&unsigned).expect("archive serialization cannot fail")
}

fn digest(payload: &str) -> String {
    let mut h = Sha256::new();
    h.update(payload.as_bytes());
    h.finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl SolutionArchive {
    fn to_file(&self) -> ArchiveFile {
        let mut file = ArchiveFile {
            version: ARCHIVE_VERSION,
            model: self.model,
            u0: data_to_entries(self.model, &self.u0),
            solutions: self
                .solutions
                .iter()
                .map(|x| x.iter().map(|z| [z.re, z.im]).collect())
                .collect(),
            ml_degree: self.ml_degree,
            trace_test: self.trace,
            seed: self.seed,
            sha256: String::new(),
        };
        file.sha256 = digest(&canonical_payload(&file));
        file
    }

    /// Checksum of the canonical payload, as embedded in the file.
    pub fn checksum(&self) -> String {
        self.to_file().sha256
    }
}

/// Writes the archive as a JSON document with an embedded checksum.
pub fn save_archive(
    archive: &SolutionArchive,
    path: &std::path::Path,
) -> Result<(), MonodromyError> {
    let file = archive.to_file();
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| MonodromyError::CorruptArchive(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Reads an archive back, verifying schema version and checksum.
pub fn load_archive(path: &std::path::Path) -> Result<SolutionArchive, MonodromyError> {
    let text = std::fs::read_to_string(path)?;
    let file: ArchiveFile = serde_json::from_str(&text)
        .map_err(|e| MonodromyError::SchemaMismatch(e.to_string()))?;
    if file.version != ARCHIVE_VERSION {
        return Err(MonodromyError::SchemaMismatch(format!(
            "archive version {} (supported: {ARCHIVE_VERSION})",
            file.version
        )));
    }
    let expect = digest(&canonical_payload(&file));
    if expect != file.sha256 {
        return Err(MonodromyError::CorruptArchive("checksum mismatch".into()));
    }
    let u0 = entries_to_data(file.model, &file.u0)?;
    let size = file.model.system_size();
    let mut solutions = Vec::with_capacity(file.solutions.len());
    for s in &file.solutions {
        if s.len() != size {
            return Err(MonodromyError::SchemaMismatch(format!(
                "solution has {} coordinates, system needs {size}",
                s.len()
            )));
        }
        solutions.push(UnknownVector::from_iterator(
            size,
            s.iter().map(|e| Complex64::new(e[0], e[1])),
        ));
    }
    Ok(SolutionArchive {
        model: file.model,
        u0,
        solutions,
        ml_degree: file.ml_degree,
        trace: file.trace_test,
        seed: file.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solve_33_2() -> SolutionArchive {
        monodromy_solve(
            RankModel::general(3, 3, 2).unwrap(),
            &MonodromyOptions::default(),
            42,
        )
        .unwrap()
    }

    #[test]
    fn finds_all_ten_for_3x3_rank2() {
        let archive = solve_33_2();
        assert_eq!(archive.ml_degree, 10);
        assert!(archive.trace.passed);
        assert!(archive.trace.residual < 1e-8);
        let sys = build_system(archive.model, false, 0).unwrap();
        for x in &archive.solutions {
            assert!(sys.evaluate(&archive.u0, x).norm() < 1e-10 * archive.u0.norm_inf());
        }
        let lifted: Vec<_> = archive
            .solutions
            .iter()
            .map(|x| sys.lift_to_matrix(x))
            .collect();
        for i in 0..lifted.len() {
            for j in 0..i {
                assert!((&lifted[i] - &lifted[j]).norm() > 1e-6);
            }
        }
    }

    #[test]
    fn trace_test_fails_with_point_removed() {
        let archive = solve_33_2();
        let sys = build_system(archive.model, false, 0).unwrap();
        let partial = &archive.solutions[..9];
        let report = trace_test(&sys, &archive.u0, partial, 7).unwrap();
        assert!(!report.passed);
        assert!(report.residual > 1e-3);
        let full = trace_test(&sys, &archive.u0, &archive.solutions, 7).unwrap();
        assert!(full.passed);
        assert!(full.residual < 1e-8);
    }

    #[test]
    fn symmetric_3x3_rank2_has_six_solutions() {
        let archive = monodromy_solve(
            RankModel::symmetric(3, 2).unwrap(),
            &MonodromyOptions::default(),
            5,
        )
        .unwrap();
        assert_eq!(archive.ml_degree, 6);
        assert!(archive.trace.passed);
    }

    #[test]
    fn margins_hold_at_complex_data() {
        let archive = solve_33_2();
        let sys = build_system(archive.model, false, 0).unwrap();
        let (rows, cols, total) = crate::model::margins_complex(&archive.u0.u_alg);
        assert!((total - archive.u0.total).norm() < 1e-9);
        for x in &archive.solutions {
            let p = sys.lift_to_matrix(x);
            let (pr, pc, pt) = crate::model::margins_complex(&p);
            assert!((pt - Complex64::ONE).norm() < 1e-8);
            for (a, b) in pr.iter().zip(&rows) {
                assert!((a - b / total).norm() < 1e-8);
            }
            for (a, b) in pc.iter().zip(&cols) {
                assert!((a - b / total).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn archive_round_trip_bitwise() {
        let archive = solve_33_2();
        let dir = std::env::temp_dir().join(format!("mlrank-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.json");
        save_archive(&archive, &path).unwrap();
        let loaded = load_archive(&path).unwrap();
        assert_eq!(loaded.ml_degree, archive.ml_degree);
        assert_eq!(loaded.seed, archive.seed);
        for (a, b) in loaded.solutions.iter().zip(&archive.solutions) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.re.to_bits(), y.re.to_bits());
                assert_eq!(x.im.to_bits(), y.im.to_bits());
            }
        }
        let sys = build_system(loaded.model, false, 0).unwrap();
        for x in &loaded.solutions {
            assert!(sys.evaluate(&loaded.u0, x).norm() < 1e-10 * loaded.u0.norm_inf());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn tampered_archive_rejected() {
        let archive = solve_33_2();
        let dir = std::env::temp_dir().join(format!("mlrank-test-t-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.json");
        save_archive(&archive, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        let needle = text.find("solutions").unwrap();
        let pos = text[needle..].find('7').map(|p| p + needle).unwrap();
        text.replace_range(pos..pos + 1, "8");
        std::fs::write(&path, text).unwrap();
        match load_archive(&path) {
            Err(MonodromyError::CorruptArchive(_)) => {}
            other => panic!("expected CorruptArchive, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
