//! The uniform Hörmander condition, decided quantitatively.
//!
//! Four equivalent characterisations are evaluated on a finite sample set:
//! the smallest eigenvalue of the Gram-type matrix `C^(r)(x)`, the bounded
//! min-∞-norm combination reproducing each unit vector, the zonotope volume
//! spanned by the multi-commutator coefficient vectors, and the best `d`-tuple
//! determinant. The inequalities linking the criteria inside the equivalence
//! proof are asserted per sample, which is the crate's internal-consistency
//! alarm.
//!
//! For torus-periodic (trig-polynomial) systems a uniform grid over one
//! period is exhaustive up to mesh error; for box domains quasi-random
//! samples are used and flagged in the report.

use itertools::Itertools;
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::DMatrix;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::vecfield::{enumerate_multiindices, FieldError, FieldSystem, MultiIndex};

/// Cap on the number of d-subsets enumerated for the volume/determinant
/// criteria.
pub const SUBSET_CAP: usize = 1_000_000;

/// Default uniform positivity tolerance.
pub const DEFAULT_SIGMA_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum HormanderError {
    #[error("d-subset count {0} exceeds cap {SUBSET_CAP}")]
    SubsetCapExceeded(usize),
    #[error("empty sample set")]
    EmptySamples,
    #[error("LP solver failure: {0}")]
    LpFailure(String),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Where the uniformity check samples the base space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SampleSet {
    /// Uniform grid over one period, `n` points per axis.
    TorusGrid { n: usize },
    /// Quasi-random points in `[-half_width, half_width]^d`.
    BoxRandom {
        half_width: f64,
        count: usize,
        seed: u64,
    },
}

impl SampleSet {
    pub fn points(&self, dim: usize) -> Vec<Vec<f64>> {
        match *self {
            SampleSet::TorusGrid { n } => {
                let h = 2.0 * std::f64::consts::PI / n as f64;
                let total = n.pow(dim as u32);
                (0..total)
                    .map(|flat| {
                        let mut idx = flat;
                        let mut x = vec![0.0; dim];
                        for j in (0..dim).rev() {
                            x[j] = (idx % n) as f64 * h;
                            idx /= n;
                        }
                        x
                    })
                    .collect()
            }
            SampleSet::BoxRandom {
                half_width,
                count,
                seed,
            } => {
                let mut rng = StdRng::seed_from_u64(seed);
                (0..count)
                    .map(|_| {
                        (0..dim)
                            .map(|_| rng.gen_range(-half_width..half_width))
                            .collect()
                    })
                    .collect()
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            SampleSet::TorusGrid { n } => format!("torus grid {n} per side"),
            SampleSet::BoxRandom {
                half_width,
                count,
                seed,
            } => format!("quasi-random box ±{half_width}, {count} points, seed {seed}"),
        }
    }
}

/// The matrix `C^(r)(x) = Σ_{α∈J_r⁺(N)} a_α(x) a_α(x)ᵀ`.
#[derive(Debug, Clone)]
pub struct CrMatrix {
    pub point: Vec<f64>,
    pub order: usize,
    pub matrix: DMatrix<f64>,
}

impl CrMatrix {
    pub fn min_eigenvalue(&self) -> f64 {
        self.matrix.clone().symmetric_eigen().eigenvalues.min()
    }
}

/// Multi-commutator coefficient vectors of a system, computed once per
/// `(system, r)` and evaluated at many points.
pub struct CommutatorTable {
    pub indices: Vec<MultiIndex>,
    fields: Vec<crate::vecfield::VectorField>,
    dim: usize,
}

impl CommutatorTable {
    pub fn new(sys: &FieldSystem, r: usize) -> Result<CommutatorTable, HormanderError> {
        assert!(r >= 1);
        let indices = enumerate_multiindices(sys.field_count(), r);
        let fields = indices
            .iter()
            .map(|alpha| sys.multi_commutator(alpha))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CommutatorTable {
            indices,
            fields,
            dim: sys.dim(),
        })
    }

    /// Generator matrix: columns `a_α(x)`, one per multi-index.
    pub fn generators(&self, x: &[f64]) -> DMatrix<f64> {
        let cols: Vec<Vec<f64>> = self.fields.iter().map(|f| f.eval(x)).collect();
        DMatrix::from_fn(self.dim, cols.len(), |i, j| cols[j][i])
    }

    pub fn cr_matrix(&self, x: &[f64], order: usize) -> CrMatrix {
        let gen = self.generators(x);
        CrMatrix {
            point: x.to_vec(),
            order,
            matrix: &gen * gen.transpose(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn assemble_cr_matrix(
    sys: &FieldSystem,
    r: usize,
    x: &[f64],
) -> Result<CrMatrix, HormanderError> {
    Ok(CommutatorTable::new(sys, r)?.cr_matrix(x, r))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriterionResult {
    pub value: f64,
    pub witness_point: Vec<f64>,
    pub pass: bool,
}

/// Statement II: `σ_eig = min_x λ_min(C^(r)(x))`.
pub fn check_sigma_condition(
    sys: &FieldSystem,
    r: usize,
    samples: &SampleSet,
) -> Result<CriterionResult, HormanderError> {
    let table = CommutatorTable::new(sys, r)?;
    let points = samples.points(sys.dim());
    if points.is_empty() {
        return Err(HormanderError::EmptySamples);
    }
    let vals = par::map(&points, |x| table.cr_matrix(x, r).min_eigenvalue());
    let (idx, sigma) = argmin(&vals);
    Ok(CriterionResult {
        value: sigma,
        witness_point: points[idx].clone(),
        pass: sigma >= DEFAULT_SIGMA_TOL,
    })
}

/// Statement III: for each sample and axis solve `min ‖λ‖_∞` s.t.
/// `Σ_α λ_α a_α(x) = e_i`; returns the max of the optima, or the first
/// infeasible witness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CombinationResult {
    /// `max_x max_i` of the LP optimum; `None` when some axis is not
    /// representable (criterion fails).
    pub m_comb: Option<f64>,
    pub witness_point: Vec<f64>,
    pub pass: bool,
}

pub fn check_bounded_combination(
    sys: &FieldSystem,
    r: usize,
    samples: &SampleSet,
) -> Result<CombinationResult, HormanderError> {
    let table = CommutatorTable::new(sys, r)?;
    let points = samples.points(sys.dim());
    if points.is_empty() {
        return Err(HormanderError::EmptySamples);
    }
    let per_point: Vec<Result<Option<f64>, String>> = par::map(&points, |x| {
        let gen = table.generators(x);
        let mut worst: f64 = 0.0;
        for i in 0..sys.dim() {
            match min_inf_norm_solution(&gen, i) {
                Ok(Some(v)) => worst = worst.max(v),
                Ok(None) => return Ok(None),
                Err(e) => return Err(e),
            }
        }
        Ok(Some(worst))
    });

    let mut m_comb: f64 = 0.0;
    let mut witness = points[0].clone();
    for (x, res) in points.iter().zip(per_point) {
        match res {
            Ok(Some(v)) => {
                if v > m_comb {
                    m_comb = v;
                    witness = x.clone();
                }
            }
            Ok(None) => {
                return Ok(CombinationResult {
                    m_comb: None,
                    witness_point: x.clone(),
                    pass: false,
                })
            }
            Err(e) => return Err(HormanderError::LpFailure(e)),
        }
    }
    Ok(CombinationResult {
        m_comb: Some(m_comb),
        witness_point: witness,
        pass: true,
    })
}

/// `min ‖λ‖_∞` subject to `G λ = e_axis`. Returns `None` when infeasible.
pub fn min_inf_norm_solution(
    generators: &DMatrix<f64>,
    axis: usize,
) -> Result<Option<f64>, String> {
    let d = generators.nrows();
    let l = generators.ncols();
    // Quick infeasibility screen: e_axis must lie in the column space.
    if !in_column_space(generators, axis) {
        return Ok(None);
    }
    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let t = problem.add_var(1.0, (0.0, f64::INFINITY));
    let lambdas: Vec<_> = (0..l)
        .map(|_| problem.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    // λ_j − t ≤ 0 and −λ_j − t ≤ 0.
    for &lam in &lambdas {
        problem.add_constraint([(lam, 1.0), (t, -1.0)], ComparisonOp::Le, 0.0);
        problem.add_constraint([(lam, -1.0), (t, -1.0)], ComparisonOp::Le, 0.0);
    }
    for row in 0..d {
        let coeffs: Vec<_> = (0..l).map(|j| (lambdas[j], generators[(row, j)])).collect();
        let rhs = if row == axis { 1.0 } else { 0.0 };
        problem.add_constraint(coeffs, ComparisonOp::Eq, rhs);
    }
    match problem.solve() {
        Ok(solution) => Ok(Some(solution.objective())),
        Err(minilp::Error::Infeasible) => Ok(None),
        Err(e) => Err(format!("{e:?}")),
    }
}

fn in_column_space(generators: &DMatrix<f64>, axis: usize) -> bool {
    // e_axis ∈ range(G) iff it is fixed by the orthogonal projector onto
    // range(G), obtained from the SVD.
    let svd = generators.clone().svd(true, false);
    let u = svd.u.as_ref().expect("svd with u");
    let tol = 1e-10 * svd.singular_values.max().max(1.0);
    let rank_cols: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > tol)
        .map(|(i, _)| i)
        .collect();
    let mut proj = 0.0;
    for &c in &rank_cols {
        let uc = u.column(c);
        proj += uc[axis] * uc[axis];
    }
    (proj - 1.0).abs() < 1e-8
}

/// Statement IV: zonotope volume `2^d Σ_{d-subsets} |det|`, minimised over
/// samples.
pub fn check_volume_condition(
    sys: &FieldSystem,
    r: usize,
    samples: &SampleSet,
) -> Result<CriterionResult, HormanderError> {
    let table = CommutatorTable::new(sys, r)?;
    check_subset_cap(table.len(), sys.dim())?;
    let points = samples.points(sys.dim());
    if points.is_empty() {
        return Err(HormanderError::EmptySamples);
    }
    let vals = par::map(&points, |x| zonotope_volume(&table.generators(x)));
    let (idx, vol) = argmin(&vals);
    Ok(CriterionResult {
        value: vol,
        witness_point: points[idx].clone(),
        pass: vol >= DEFAULT_SIGMA_TOL,
    })
}

/// Exact zonotope volume of `{Σ λ_j g_j : |λ_j| ≤ 1}`:
/// `2^d · Σ over d-subsets of |det|`.
pub fn zonotope_volume(generators: &DMatrix<f64>) -> f64 {
    let d = generators.nrows();
    let l = generators.ncols();
    if l < d {
        return 0.0;
    }
    let sum: f64 = (0..l)
        .combinations(d)
        .map(|subset| subset_det(generators, &subset).abs())
        .sum();
    2f64.powi(d as i32) * sum
}

fn subset_det(generators: &DMatrix<f64>, cols: &[usize]) -> f64 {
    let d = generators.nrows();
    let m = DMatrix::from_fn(d, d, |i, j| generators[(i, cols[j])]);
    m.determinant()
}

/// Statement V: `σ_det = min_x max_{d-tuples} |det|` with the maximising
/// tuple at the worst point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeterminantResult {
    pub sigma_det: f64,
    pub witness_point: Vec<f64>,
    pub witness_tuple: Vec<MultiIndex>,
    pub pass: bool,
}

pub fn check_determinant_condition(
    sys: &FieldSystem,
    r: usize,
    samples: &SampleSet,
) -> Result<DeterminantResult, HormanderError> {
    let table = CommutatorTable::new(sys, r)?;
    check_subset_cap(table.len(), sys.dim())?;
    let points = samples.points(sys.dim());
    if points.is_empty() {
        return Err(HormanderError::EmptySamples);
    }
    let best_per_point: Vec<(f64, Vec<usize>)> =
        par::map(&points, |x| best_tuple(&table.generators(x), sys.dim()));
    let mut worst = f64::INFINITY;
    let mut widx = 0;
    for (i, (v, _)) in best_per_point.iter().enumerate() {
        if *v < worst {
            worst = *v;
            widx = i;
        }
    }
    let tuple = best_per_point[widx]
        .1
        .iter()
        .map(|&j| table.indices[j].clone())
        .collect();
    Ok(DeterminantResult {
        sigma_det: worst,
        witness_point: points[widx].clone(),
        witness_tuple: tuple,
        pass: worst >= DEFAULT_SIGMA_TOL,
    })
}

fn best_tuple(generators: &DMatrix<f64>, d: usize) -> (f64, Vec<usize>) {
    let l = generators.ncols();
    if l < d {
        return (0.0, (0..l).collect());
    }
    let mut best = -1.0;
    let mut best_cols = Vec::new();
    for subset in (0..l).combinations(d) {
        let v = subset_det(generators, &subset).abs();
        if v > best {
            best = v;
            best_cols = subset;
        }
    }
    (best.max(0.0), best_cols)
}

fn check_subset_cap(l: usize, d: usize) -> Result<(), HormanderError> {
    let mut count: usize = 1;
    for i in 0..d {
        count = count.saturating_mul(l - i.min(l)).max(1);
    }
    // binomial(l, d) ≤ l^d; the cheap overestimate is fine for a cap.
    if count > SUBSET_CAP {
        return Err(HormanderError::SubsetCapExceeded(count));
    }
    Ok(())
}

/// Smallest `r ≤ r_max` with `σ_eig ≥ σ_tol`, or `None`.
pub fn find_hormander_rank(
    sys: &FieldSystem,
    r_max: usize,
    samples: &SampleSet,
    sigma_tol: f64,
) -> Result<Option<usize>, HormanderError> {
    assert!(sigma_tol > 0.0);
    for r in 1..=r_max {
        let res = check_sigma_condition(sys, r, samples)?;
        if res.value >= sigma_tol {
            return Ok(Some(r));
        }
    }
    Ok(None)
}

/// Full per-criterion report with proof-chain consistency checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HormanderReport {
    pub order: usize,
    pub sample_grid: String,
    pub sigma_eig: CriterionResult,
    pub combination: CombinationResult,
    pub volume: CriterionResult,
    pub determinant: DeterminantResult,
    /// Smallest passing order within `1..=order`, if any.
    pub rank: Option<usize>,
    /// Worst signed margin of the per-sample proof-chain inequalities;
    /// ≥ −1e−9 when consistent.
    pub chain_margin: f64,
    /// All four criteria agree on pass/fail.
    pub criteria_agree: bool,
    pub verdict: bool,
}

/// Runs all four criteria plus the rank search and validates, per sample,
/// the inequalities from the equivalence proof:
///
/// * V ⇒ II: `λ_min(C^(r)) ≥ ‖D‖^{−(d−1)} · det D` with `D` the Gram matrix
///   of the maximising tuple,
/// * III ⇒ IV: `vol ≥ (d·M)^{−d}` whenever the LP is feasible,
/// * IV ⇒ V: `σ_det ≥ 2^{−L} L^{−1} · vol`.
pub fn analyze(
    sys: &FieldSystem,
    r: usize,
    samples: &SampleSet,
    sigma_tol: f64,
) -> Result<HormanderReport, HormanderError> {
    let sigma = check_sigma_condition(sys, r, samples)?;
    let combination = check_bounded_combination(sys, r, samples)?;
    let volume = check_volume_condition(sys, r, samples)?;
    let determinant = check_determinant_condition(sys, r, samples)?;
    let rank = find_hormander_rank(sys, r, samples, sigma_tol)?;

    let chain_margin = proof_chain_margin(sys, r, samples, combination.m_comb)?;

    let passes = [
        sigma.value >= sigma_tol,
        combination.pass && combination.m_comb.is_some(),
        volume.value >= sigma_tol,
        determinant.sigma_det >= sigma_tol,
    ];
    let criteria_agree = passes.iter().all(|&p| p == passes[0]);

    Ok(HormanderReport {
        order: r,
        sample_grid: samples.describe(),
        sigma_eig: CriterionResult {
            pass: passes[0],
            ..sigma
        },
        combination,
        volume: CriterionResult {
            pass: passes[2],
            ..volume
        },
        determinant: DeterminantResult {
            pass: passes[3],
            ..determinant
        },
        rank,
        chain_margin,
        criteria_agree,
        verdict: passes[0] && criteria_agree,
    })
}

/// Worst signed margin of the three proof-chain inequalities over all
/// samples (positive = satisfied).
pub fn proof_chain_margin(
    sys: &FieldSystem,
    r: usize,
    samples: &SampleSet,
    m_comb: Option<f64>,
) -> Result<f64, HormanderError> {
    let table = CommutatorTable::new(sys, r)?;
    let d = sys.dim();
    let l = table.len();
    let points = samples.points(d);
    let margins = par::map(&points, |x| {
        let gen = table.generators(x);
        let lam_min = {
            let cr = &gen * gen.transpose();
            cr.symmetric_eigen().eigenvalues.min()
        };
        let vol = zonotope_volume(&gen);
        let (sigma_det_x, cols) = best_tuple(&gen, d);

        let mut margin = f64::INFINITY;

        // V ⇒ II at x: λ_min ≥ ‖D‖^{−(d−1)} det D.
        if !cols.is_empty() && cols.len() == d {
            let dm = {
                let sub = DMatrix::from_fn(d, d, |i, j| gen[(i, cols[j])]);
                &sub * sub.transpose()
            };
            let norm = dm.clone().symmetric_eigen().eigenvalues.max();
            if norm > 0.0 {
                let bound = norm.powi(-(d as i32 - 1)) * dm.determinant();
                margin = margin.min(lam_min - bound);
            }
        }

        // III ⇒ IV at x (global M is valid pointwise).
        if let Some(m) = m_comb {
            if m > 0.0 {
                let bound = (d as f64 * m).powi(-(d as i32));
                margin = margin.min(vol - bound);
            }
        }

        // IV ⇒ V at x.
        let bound = 2f64.powi(-(l as i32)) / l as f64 * vol;
        margin = margin.min(sigma_det_x - bound);

        margin
    });
    Ok(margins.into_iter().fold(f64::INFINITY, f64::min))
}

/// `C^(r+1) − C^(r)` is PSD: more rank-one summands.
pub fn cr_monotonicity_defect(
    sys: &FieldSystem,
    r: usize,
    x: &[f64],
) -> Result<f64, HormanderError> {
    let lo = assemble_cr_matrix(sys, r, x)?;
    let hi = assemble_cr_matrix(sys, r + 1, x)?;
    let diff = hi.matrix - lo.matrix;
    Ok(diff.symmetric_eigen().eigenvalues.min())
}

fn argmin(vals: &[f64]) -> (usize, f64) {
    let mut idx = 0;
    let mut best = f64::INFINITY;
    for (i, &v) in vals.iter().enumerate() {
        if v < best {
            best = v;
            idx = i;
        }
    }
    (idx, best)
}
