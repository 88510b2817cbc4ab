//! Torus discretization of the operators: Fourier multipliers, vector
//! fields as matrices, the sum-of-squares and divergence forms of H,
//! double-commutator forms, commutator-bound estimation, and the
//! subelliptic constant/order machinery.
//!
//! Operators are kept in structured form (multiplier, coefficient
//! diagonal, composites) and applied matrix-free through FFTs; dense
//! matrices only appear for eigendecompositions under the size cap.

use nalgebra::{Complex, DMatrix, DVector};
use num_complex::Complex64;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

use crate::grid::TorusGrid;
use crate::par;
use crate::symexpr::Expr;
use crate::vecfield::{FieldError, FieldSystem, VectorField};

/// Largest dimension for dense eigendecompositions.
pub const DENSE_CAP: usize = 4096;

pub const NORM_TOL: f64 = 1e-6;
pub const EIG_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("dimension {dim} exceeds dense eigensolver cap {cap}")]
    CapExceeded { dim: usize, cap: usize },
    #[error("field has non-periodic coefficients")]
    NonPeriodicField,
    #[error("coefficient matrix is not symmetric (entry ({0},{1}))")]
    AsymmetricCoefficients(usize, usize),
    #[error("iteration failed to converge: {0}")]
    NoConvergence(String),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Clone)]
enum Repr {
    Identity,
    /// Diagonal in the Fourier basis; one symbol value per flat spectral
    /// index.
    Multiplier(Arc<Vec<Complex64>>),
    /// Diagonal in the node basis.
    Diagonal(Arc<Vec<Complex64>>),
    Dense(Arc<DMatrix<Complex64>>),
    Sum(Vec<GridOperator>),
    /// `Compose(a, b)` applies `b` first: the operator `a·b`.
    Compose(Box<GridOperator>, Box<GridOperator>),
    Scale(Complex64, Box<GridOperator>),
}

/// A linear operator on grid functions.
#[derive(Clone)]
pub struct GridOperator {
    grid: TorusGrid,
    repr: Repr,
    self_adjoint: bool,
    psd: bool,
}

impl GridOperator {
    pub fn identity(grid: TorusGrid) -> GridOperator {
        GridOperator {
            grid,
            repr: Repr::Identity,
            self_adjoint: true,
            psd: true,
        }
    }

    pub fn from_dense(grid: TorusGrid, m: DMatrix<Complex64>) -> GridOperator {
        assert_eq!(m.nrows(), grid.len());
        assert_eq!(m.ncols(), grid.len());
        GridOperator {
            grid,
            repr: Repr::Dense(Arc::new(m)),
            self_adjoint: false,
            psd: false,
        }
    }

    pub fn diagonal(grid: TorusGrid, values: Vec<Complex64>) -> GridOperator {
        assert_eq!(values.len(), grid.len());
        let real = values.iter().all(|v| v.im == 0.0);
        let nonneg = real && values.iter().all(|v| v.re >= 0.0);
        GridOperator {
            grid,
            repr: Repr::Diagonal(Arc::new(values)),
            self_adjoint: real,
            psd: nonneg,
        }
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.len()
    }

    pub fn flagged_self_adjoint(&self) -> bool {
        self.self_adjoint
    }

    pub fn flagged_psd(&self) -> bool {
        self.psd
    }

    pub fn with_flags(mut self, self_adjoint: bool, psd: bool) -> GridOperator {
        self.self_adjoint = self_adjoint;
        self.psd = psd;
        self
    }

    pub fn apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(v.len(), self.grid.len());
        match &self.repr {
            Repr::Identity => v.to_vec(),
            Repr::Multiplier(symbol) => {
                let mut work = v.to_vec();
                self.grid.fft_forward(&mut work);
                for (w, s) in work.iter_mut().zip(symbol.iter()) {
                    *w *= s;
                }
                self.grid.fft_inverse(&mut work);
                work
            }
            Repr::Diagonal(diag) => v.iter().zip(diag.iter()).map(|(a, d)| a * d).collect(),
            Repr::Dense(m) => {
                let vec = DVector::from_column_slice(v);
                (m.as_ref() * vec).iter().copied().collect()
            }
            Repr::Sum(ops) => {
                let mut acc = vec![Complex64::default(); v.len()];
                for op in ops {
                    let part = op.apply(v);
                    for (a, p) in acc.iter_mut().zip(part) {
                        *a += p;
                    }
                }
                acc
            }
            Repr::Compose(a, b) => a.apply(&b.apply(v)),
            Repr::Scale(c, op) => {
                let mut out = op.apply(v);
                for o in out.iter_mut() {
                    *o *= c;
                }
                out
            }
        }
    }

    /// Adjoint with respect to the grid L₂ inner product (uniform weight,
    /// so this is the conjugate transpose).
    pub fn adjoint(&self) -> GridOperator {
        let repr = match &self.repr {
            Repr::Identity => Repr::Identity,
            Repr::Multiplier(s) => Repr::Multiplier(Arc::new(s.iter().map(|c| c.conj()).collect())),
            Repr::Diagonal(d) => Repr::Diagonal(Arc::new(d.iter().map(|c| c.conj()).collect())),
            Repr::Dense(m) => Repr::Dense(Arc::new(m.adjoint())),
            Repr::Sum(ops) => Repr::Sum(ops.iter().map(|o| o.adjoint()).collect()),
            Repr::Compose(a, b) => Repr::Compose(Box::new(b.adjoint()), Box::new(a.adjoint())),
            Repr::Scale(c, op) => Repr::Scale(c.conj(), Box::new(op.adjoint())),
        };
        GridOperator {
            grid: self.grid,
            repr,
            self_adjoint: self.self_adjoint,
            psd: self.psd,
        }
    }

    pub fn compose(&self, rhs: &GridOperator) -> GridOperator {
        assert_eq!(self.grid, rhs.grid);
        GridOperator {
            grid: self.grid,
            repr: Repr::Compose(Box::new(self.clone()), Box::new(rhs.clone())),
            self_adjoint: false,
            psd: false,
        }
    }

    pub fn add(&self, rhs: &GridOperator) -> GridOperator {
        assert_eq!(self.grid, rhs.grid);
        GridOperator {
            grid: self.grid,
            repr: Repr::Sum(vec![self.clone(), rhs.clone()]),
            self_adjoint: self.self_adjoint && rhs.self_adjoint,
            psd: self.psd && rhs.psd,
        }
    }

    pub fn sum(ops: Vec<GridOperator>) -> GridOperator {
        assert!(!ops.is_empty());
        let grid = ops[0].grid;
        let sa = ops.iter().all(|o| o.self_adjoint);
        let psd = ops.iter().all(|o| o.psd);
        GridOperator {
            grid,
            repr: Repr::Sum(ops),
            self_adjoint: sa,
            psd,
        }
    }

    pub fn scale(&self, c: Complex64) -> GridOperator {
        GridOperator {
            grid: self.grid,
            repr: Repr::Scale(c, Box::new(self.clone())),
            self_adjoint: self.self_adjoint && c.im == 0.0,
            psd: self.psd && c.im == 0.0 && c.re >= 0.0,
        }
    }

    /// `[A, B] = AB − BA`.
    pub fn commutator(a: &GridOperator, b: &GridOperator) -> GridOperator {
        a.compose(b)
            .add(&b.compose(a).scale(Complex64::new(-1.0, 0.0)))
    }

    /// Materialise the matrix by applying to every basis vector
    /// (parallel over columns).
    pub fn densify(&self) -> DMatrix<Complex64> {
        let n = self.grid.len();
        let cols = par::map_indexed(n, |j| {
            let mut e = vec![Complex64::default(); n];
            e[j] = Complex64::new(1.0, 0.0);
            self.apply(&e)
        });
        DMatrix::from_fn(n, n, |i, j| cols[j][i])
    }

    /// Operator norm via Lanczos on `A*A`.
    pub fn operator_norm(&self, seed: u64) -> f64 {
        let adj = self.adjoint();
        let matvec = |v: &[Complex64]| adj.apply(&self.apply(v));
        lanczos_max_eig(self.grid.len(), matvec, NORM_TOL, 400, seed)
            .max(0.0)
            .sqrt()
    }
}

/// Diagonal-in-Fourier operator from a symbol on the frequency lattice.
pub fn fourier_multiplier_op(
    grid: TorusGrid,
    symbol: impl Fn(&[i64]) -> Complex64,
) -> GridOperator {
    let values: Vec<Complex64> = (0..grid.len())
        .map(|flat| symbol(&grid.frequency_vec(flat)))
        .collect();
    let real = values.iter().all(|v| v.im.abs() == 0.0);
    let nonneg = real && values.iter().all(|v| v.re >= 0.0);
    GridOperator {
        grid,
        repr: Repr::Multiplier(Arc::new(values)),
        self_adjoint: real,
        psd: nonneg,
    }
}

/// `Δ`: symbol `|k|²`.
pub fn laplacian(grid: TorusGrid) -> GridOperator {
    fourier_multiplier_op(grid, |k| Complex64::new(norm_sq(k), 0.0))
}

/// `Δ^γ`: symbol `|k|^{2γ}`.
pub fn laplacian_power(grid: TorusGrid, gamma: f64) -> GridOperator {
    fourier_multiplier_op(grid, move |k| Complex64::new(norm_sq(k).powf(gamma), 0.0))
}

/// `L^s = (I+Δ)^s`: symbol `(1+|k|²)^s`.
pub fn sobolev_power(grid: TorusGrid, s: f64) -> GridOperator {
    fourier_multiplier_op(grid, move |k| {
        Complex64::new((1.0 + norm_sq(k)).powf(s), 0.0)
    })
}

/// Semigroup `S_t = e^{−tL}`: symbol `e^{−t(1+|k|²)}`.
pub fn heat_semigroup(grid: TorusGrid, t: f64) -> GridOperator {
    fourier_multiplier_op(grid, move |k| {
        Complex64::new((-t * (1.0 + norm_sq(k))).exp(), 0.0)
    })
}

/// Translation by `a`: symbol `e^{i k·a}`.
pub fn translation_op(grid: TorusGrid, a: &[f64]) -> GridOperator {
    let a = a.to_vec();
    fourier_multiplier_op(grid, move |k| {
        let phase: f64 = k.iter().zip(&a).map(|(&ki, ai)| ki as f64 * ai).sum();
        Complex64::from_polar(1.0, phase)
    })
}

/// Spectral differentiation `∂_axis` (1-based axis): symbol `i k_axis`.
pub fn partial_derivative(grid: TorusGrid, axis: usize) -> GridOperator {
    assert!(axis >= 1 && axis <= grid.dim());
    fourier_multiplier_op(grid, move |k| Complex64::new(0.0, k[axis - 1] as f64))
}

fn norm_sq(k: &[i64]) -> f64 {
    k.iter().map(|&ki| (ki * ki) as f64).sum()
}

/// `X = Σ_k diag(a_k) · ∂_k` on the grid.
pub fn assemble_field_matrix(
    grid: TorusGrid,
    field: &VectorField,
) -> Result<GridOperator, SpectralError> {
    if !field.is_bounded() {
        return Err(SpectralError::NonPeriodicField);
    }
    assert_eq!(field.dim(), grid.dim());
    let mut terms = Vec::new();
    for (k, coeff) in field.coeffs().iter().enumerate() {
        if coeff.simplify() == Expr::zero() {
            continue;
        }
        let samples: Vec<Complex64> = (0..grid.len())
            .map(|i| Complex64::new(coeff.eval(&grid.point(i)), 0.0))
            .collect();
        terms.push(GridOperator::diagonal(grid, samples).compose(&partial_derivative(grid, k + 1)));
    }
    if terms.is_empty() {
        return Ok(GridOperator::identity(grid).scale(Complex64::default()));
    }
    Ok(GridOperator::sum(terms).with_flags(false, false))
}

/// `H = Σ_i Mᵢ* Mᵢ` with `Mᵢ` the assembled field matrices.
pub fn assemble_hormander_operator(
    grid: TorusGrid,
    sys: &FieldSystem,
) -> Result<GridOperator, SpectralError> {
    let terms = sys
        .fields()
        .iter()
        .map(|f| {
            let m = assemble_field_matrix(grid, f)?;
            Ok(m.adjoint().compose(&m))
        })
        .collect::<Result<Vec<_>, SpectralError>>()?;
    Ok(GridOperator::sum(terms).with_flags(true, true))
}

/// `H = −Σ_{i,j=0}^d ∂_i c_ij ∂_j` with `∂₀ = i·I`.
#[allow(clippy::needless_range_loop)] // pairwise (i,j) coefficient access
pub fn assemble_divergence_form(
    grid: TorusGrid,
    coeffs: &[Vec<Expr>],
) -> Result<GridOperator, SpectralError> {
    let d = grid.dim();
    assert_eq!(coeffs.len(), d + 1);
    for row in coeffs {
        assert_eq!(row.len(), d + 1);
    }
    for row in coeffs {
        for entry in row {
            if !entry.is_bounded() {
                return Err(SpectralError::NonPeriodicField);
            }
        }
    }
    // Symmetry is checked by sampling: entries may be written in
    // different but equal forms.
    let mut rng = StdRng::seed_from_u64(17);
    for _ in 0..16 {
        let x: Vec<f64> = (0..d)
            .map(|_| rng.gen_range(0.0..2.0 * std::f64::consts::PI))
            .collect();
        for i in 0..=d {
            for j in (i + 1)..=d {
                if (coeffs[i][j].eval(&x) - coeffs[j][i].eval(&x)).abs() > 1e-10 {
                    return Err(SpectralError::AsymmetricCoefficients(i, j));
                }
            }
        }
    }

    let deriv = |i: usize| -> GridOperator {
        if i == 0 {
            GridOperator::identity(grid).scale(Complex64::new(0.0, 1.0))
        } else {
            partial_derivative(grid, i)
        }
    };

    let mut terms = Vec::new();
    for i in 0..=d {
        for j in 0..=d {
            let samples: Vec<Complex64> = (0..grid.len())
                .map(|flat| Complex64::new(coeffs[i][j].eval(&grid.point(flat)), 0.0))
                .collect();
            if samples.iter().all(|s| s.norm() == 0.0) {
                continue;
            }
            let c = GridOperator::diagonal(grid, samples);
            terms.push(
                deriv(i)
                    .compose(&c.compose(&deriv(j)))
                    .scale(Complex64::new(-1.0, 0.0)),
            );
        }
    }
    if terms.is_empty() {
        return Ok(GridOperator::identity(grid)
            .scale(Complex64::default())
            .with_flags(true, true));
    }
    Ok(GridOperator::sum(terms).with_flags(true, false))
}

/// L₂ inner product `(u, v)` on the grid, conjugate-linear in `u`.
pub fn inner(grid: &TorusGrid, u: &[Complex64], v: &[Complex64]) -> Complex64 {
    let w = grid.spacing().powi(grid.dim() as i32);
    u.iter()
        .zip(v)
        .map(|(a, b)| a.conj() * b)
        .sum::<Complex64>()
        * w
}

/// The four-term sesquilinear form; for bounded operators it equals
/// `(ψ, [B₁,[B₂,A]]φ)` when `A`, `B₁`, `B₂` are self-adjoint:
/// `(B₂B₁ψ, Aφ) − (AB₁ψ, B₂φ) + (Aψ, B₂B₁φ) − (AB₂ψ, B₁φ)`.
pub fn double_commutator_form(
    a: &GridOperator,
    b1: &GridOperator,
    b2: &GridOperator,
    psi: &[Complex64],
    phi: &[Complex64],
) -> Complex64 {
    let grid = a.grid();
    let b1_psi = b1.apply(psi);
    let b2b1_psi = b2.apply(&b1_psi);
    let a_phi = a.apply(phi);
    let ab1_psi = a.apply(&b1_psi);
    let b2_phi = b2.apply(phi);
    let a_psi = a.apply(psi);
    let b1_phi = b1.apply(phi);
    let b2b1_phi = b2.apply(&b1_phi);
    let b2_psi = b2.apply(psi);
    let ab2_psi = a.apply(&b2_psi);
    inner(&grid, &b2b1_psi, &a_phi) - inner(&grid, &ab1_psi, &b2_phi)
        + inner(&grid, &a_psi, &b2b1_phi)
        - inner(&grid, &ab2_psi, &b1_phi)
}

/// `Σ_p c_p · (field_p as operator) ∘ ∂_axis^{q_p}` with exact symbolic
/// coefficient fields. Commuting with `∂_axis^m` stays in this class by
/// the Leibniz rule, which keeps the discretized double commutators free
/// of the band-edge alias artifact (the odd symbol `k^m` changes sign
/// under the Nyquist wrap, so forming `[∂^m, ·]` numerically injects an
/// O(n) error; differentiating the coefficients symbolically does not).
struct FieldPoly {
    axis: usize,
    terms: Vec<(VectorField, u32)>,
}

impl FieldPoly {
    fn base(f: &VectorField, axis: usize) -> FieldPoly {
        FieldPoly {
            axis,
            terms: vec![(f.clone(), 0)],
        }
    }

    /// `[∂_axis^m, Σ diag(a)D_j ∘ ∂^q] = Σ_{p=1}^m C(m,p) diag(∂^p a) D_j ∘ ∂^{q+m−p}`.
    fn commutator_partial(&self, m: u32) -> FieldPoly {
        let mut terms = Vec::new();
        for (f, q) in &self.terms {
            for p in 1..=m {
                let c = binom(m, p);
                let g = scale_diff_field(f, self.axis, p, c);
                terms.push((g, q + m - p));
            }
        }
        FieldPoly {
            axis: self.axis,
            terms,
        }
    }

    fn assemble(&self, grid: TorusGrid) -> Result<GridOperator, SpectralError> {
        let d = partial_derivative(grid, self.axis);
        let mut ops = Vec::new();
        for (f, q) in &self.terms {
            let mut op = assemble_field_matrix(grid, f)?;
            for _ in 0..*q {
                op = op.compose(&d);
            }
            ops.push(op);
        }
        if ops.is_empty() {
            return Ok(GridOperator::identity(grid).scale(Complex64::default()));
        }
        Ok(GridOperator::sum(ops).with_flags(false, false))
    }
}

fn binom(m: u32, p: u32) -> i64 {
    let mut num = 1i64;
    let mut den = 1i64;
    for i in 0..p {
        num *= (m - i) as i64;
        den *= (i + 1) as i64;
    }
    num / den
}

/// Coefficients differentiated `p` times along `axis` and scaled by `c`.
fn scale_diff_field(f: &VectorField, axis: usize, p: u32, c: i64) -> VectorField {
    let coeffs: Vec<Expr> = f
        .coeffs()
        .iter()
        .map(|e| {
            let mut d = e.clone();
            for _ in 0..p {
                d = d.differentiate(axis);
            }
            Expr::mul(Expr::int(c), d).simplify()
        })
        .collect();
    VectorField::new(f.dim(), coeffs).expect("dimension preserved")
}

/// Per-grid estimate of `Σ_k ‖L^{−m/2} [∂_k^m, [∂_k^m, H]] L^{−m/2}‖`.
///
/// With `C = [∂_k^m, M_i]` and `C₂ = [∂_k^m, C]` (both exact by Leibniz),
/// `[∂_k^m, [∂_k^m, M_i*M_i]] = C₂*M_i + 2(−1)^{m+1} C*C + M_i*C₂`.
pub fn commutator_bound_estimate(
    sys: &FieldSystem,
    grids: &[usize],
    m: usize,
) -> Result<Vec<f64>, SpectralError> {
    assert!((1..=3).contains(&m));
    grids
        .iter()
        .map(|&n| {
            let grid = TorusGrid::new(sys.dim(), n);
            let lw = sobolev_power(grid, -(m as f64) / 2.0);
            let cross_sign = if m % 2 == 1 { 2.0 } else { -2.0 };
            let mut total = 0.0;
            for k in 1..=sys.dim() {
                let mut parts = Vec::new();
                for field in sys.fields() {
                    let mi = assemble_field_matrix(grid, field)?;
                    let c = FieldPoly::base(field, k).commutator_partial(m as u32);
                    let c2 = c.commutator_partial(m as u32);
                    let c_op = c.assemble(grid)?;
                    let c2_op = c2.assemble(grid)?;
                    parts.push(c2_op.adjoint().compose(&mi));
                    parts.push(mi.adjoint().compose(&c2_op));
                    parts.push(
                        c_op.adjoint()
                            .compose(&c_op)
                            .scale(Complex64::new(cross_sign, 0.0)),
                    );
                }
                let outer = GridOperator::sum(parts);
                let op = lw.compose(&outer.compose(&lw));
                total += op.operator_norm(7 + k as u64);
            }
            Ok(total)
        })
        .collect()
}

/// Per-grid estimate of `‖L^{−(ρ+δ)} [L^ρ, [L^ρ, H]] L^{−(ρ+δ)}‖`.
pub fn fractional_commutator_bound(
    sys: &FieldSystem,
    grids: &[usize],
    rho: f64,
    delta: f64,
) -> Result<Vec<f64>, SpectralError> {
    grids
        .iter()
        .map(|&n| {
            let grid = TorusGrid::new(sys.dim(), n);
            let h = assemble_hormander_operator(grid, sys)?;
            let lr = sobolev_power(grid, rho);
            let lw = sobolev_power(grid, -(rho + delta));
            let outer = GridOperator::commutator(&lr, &GridOperator::commutator(&lr, &h));
            Ok(lw.compose(&outer.compose(&lw)).operator_norm(11))
        })
        .collect()
}

/// Per-grid `sup_t ‖[S_t, [S_t, H]]‖` over the supplied times.
pub fn semigroup_commutator_bound(
    sys: &FieldSystem,
    t_list: &[f64],
    grids: &[usize],
) -> Result<Vec<f64>, SpectralError> {
    grids
        .iter()
        .map(|&n| {
            let grid = TorusGrid::new(sys.dim(), n);
            let h = assemble_hormander_operator(grid, sys)?;
            let mut sup: f64 = 0.0;
            for (i, &t) in t_list.iter().enumerate() {
                assert!(t > 0.0);
                let st = heat_semigroup(grid, t);
                let op = GridOperator::commutator(&st, &GridOperator::commutator(&st, &h));
                sup = sup.max(op.operator_norm(23 + i as u64));
            }
            Ok(sup)
        })
        .collect()
}

/// Refined per-grid bound: `sup_t` of the norm of
/// `(I−S_t)^{−1} [S_t,[S_t,H]] (I−S_t)^{−1}` restricted to the
/// orthogonal complement of constants.
pub fn semigroup_commutator_refined(
    sys: &FieldSystem,
    t_list: &[f64],
    grids: &[usize],
) -> Result<Vec<f64>, SpectralError> {
    grids
        .iter()
        .map(|&n| {
            let grid = TorusGrid::new(sys.dim(), n);
            let h = assemble_hormander_operator(grid, sys)?;
            let proj = fourier_multiplier_op(grid, |k| {
                if k.iter().all(|&ki| ki == 0) {
                    Complex64::default()
                } else {
                    Complex64::new(1.0, 0.0)
                }
            });
            let mut sup: f64 = 0.0;
            for (i, &t) in t_list.iter().enumerate() {
                let st = heat_semigroup(grid, t);
                let inv = fourier_multiplier_op(grid, |k| {
                    if k.iter().all(|&ki| ki == 0) {
                        Complex64::default()
                    } else {
                        let s = (-t * (1.0 + norm_sq(k))).exp();
                        Complex64::new(1.0 / (1.0 - s), 0.0)
                    }
                });
                let core = GridOperator::commutator(&st, &GridOperator::commutator(&st, &h));
                let op = proj.compose(&inv.compose(&core.compose(&inv.compose(&proj))));
                sup = sup.max(op.operator_norm(41 + i as u64));
            }
            Ok(sup)
        })
        .collect()
}

/// Outcome of the quadratic-form improvement check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImprovementOutcome {
    /// Worst signed margin of the two hypotheses over the probe set.
    pub hypothesis_margin: f64,
    pub hypotheses_hold: bool,
    /// Worst signed margin of `‖Aφ‖ − (1−ε)‖B²φ‖ + c^{1/2}‖φ‖`.
    pub worst_margin: f64,
    pub pass: bool,
}

/// Checks, on `probes` random unit vectors, that the hypotheses
/// `(φ,Aφ) ≥ ‖Bφ‖²` and `|(φ,[B,[B,A]]φ)| ≤ ε‖B²φ‖² + c‖φ‖²` imply the
/// conclusion `‖Aφ‖ ≥ (1−ε)‖B²φ‖ − c^{1/2}‖φ‖`.
pub fn improvement_lemma_check(
    a: &DMatrix<Complex64>,
    b: &DMatrix<Complex64>,
    eps: f64,
    c: f64,
    probes: usize,
    seed: u64,
) -> ImprovementOutcome {
    let n = a.nrows();
    let mut rng = StdRng::seed_from_u64(seed);
    let bb = b * b;
    let comm = {
        let ab = a * b;
        let ba = b * a;
        let inner_c = &ba - &ab;
        b * &inner_c - &inner_c * b
    };

    let mut hyp_margin = f64::INFINITY;
    let mut concl_margin = f64::INFINITY;
    for _ in 0..probes {
        let phi = random_unit(n, &mut rng);
        let a_phi = a * &phi;
        let b_phi = b * &phi;
        let bb_phi = &bb * &phi;
        let form_a = phi.dotc(&a_phi).re;
        let b_norm_sq = b_phi.norm_squared();
        hyp_margin = hyp_margin.min(form_a - b_norm_sq);

        let dc = phi.dotc(&(&comm * &phi)).re.abs();
        let bb_norm_sq = bb_phi.norm_squared();
        hyp_margin = hyp_margin.min(eps * bb_norm_sq + c - dc);

        let lhs = a_phi.norm();
        let rhs = (1.0 - eps) * bb_norm_sq.sqrt() - c.sqrt();
        concl_margin = concl_margin.min(lhs - rhs);
    }
    ImprovementOutcome {
        hypothesis_margin: hyp_margin,
        hypotheses_hold: hyp_margin >= -1e-9,
        worst_margin: concl_margin,
        pass: concl_margin >= -1e-9,
    }
}

fn random_unit(n: usize, rng: &mut StdRng) -> DVector<Complex64> {
    let mut v = DVector::from_fn(n, |_, _| {
        Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    let norm = v.norm();
    v /= Complex64::new(norm, 0.0);
    v
}

/// Eigendecomposition of a flagged self-adjoint operator.
pub struct HermitianEigen {
    pub grid: TorusGrid,
    pub eigenvalues: Vec<f64>,
    pub vectors: DMatrix<Complex64>,
}

impl HermitianEigen {
    pub fn apply_function(&self, f: impl Fn(f64) -> f64, v: &[Complex64]) -> Vec<Complex64> {
        let vec = DVector::from_column_slice(v);
        let coords = self.vectors.adjoint() * vec;
        let scaled = DVector::from_fn(coords.len(), |i, _| {
            coords[i] * Complex64::new(f(self.eigenvalues[i]), 0.0)
        });
        (&self.vectors * scaled).iter().copied().collect()
    }
}

/// Dense eigendecomposition, subject to the size cap.
pub fn hermitian_eigen(op: &GridOperator, cap: usize) -> Result<HermitianEigen, SpectralError> {
    let dim = op.dim();
    if dim > cap {
        return Err(SpectralError::CapExceeded { dim, cap });
    }
    let dense = op.densify();
    let eig = dense.symmetric_eigen();
    Ok(HermitianEigen {
        grid: op.grid(),
        eigenvalues: eig.eigenvalues.iter().copied().collect(),
        vectors: eig.eigenvectors,
    })
}

/// Lanczos iteration (full reorthogonalisation) for the largest
/// eigenvalue of a Hermitian PSD operator given as a matvec.
pub fn lanczos_max_eig(
    dim: usize,
    matvec: impl Fn(&[Complex64]) -> Vec<Complex64>,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> f64 {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut q: Vec<Vec<Complex64>> = Vec::new();
    let mut v: Vec<Complex64> = (0..dim)
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    normalize(&mut v);
    q.push(v);
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut prev_lambda = f64::NEG_INFINITY;

    for it in 0..max_iter.min(dim) {
        let mut w = matvec(&q[it]);
        let alpha = dot(&q[it], &w).re;
        alphas.push(alpha);
        // Full reorthogonalisation keeps the basis clean at small cost.
        for basis in &q {
            let coef = dot(basis, &w);
            for (wi, bi) in w.iter_mut().zip(basis) {
                *wi -= coef * bi;
            }
        }
        for basis in &q {
            let coef = dot(basis, &w);
            for (wi, bi) in w.iter_mut().zip(basis) {
                *wi -= coef * bi;
            }
        }
        let beta = norm(&w);
        let lambda = tridiag_max_eig(&alphas, &betas);
        if beta < 1e-13 {
            return lambda;
        }
        if it >= 2 && (lambda - prev_lambda).abs() <= tol * lambda.abs().max(1e-30) {
            return lambda;
        }
        prev_lambda = lambda;
        betas.push(beta);
        let inv = Complex64::new(1.0 / beta, 0.0);
        q.push(w.into_iter().map(|x| x * inv).collect());
    }
    tridiag_max_eig(&alphas, &betas)
}

fn tridiag_max_eig(alphas: &[f64], betas: &[f64]) -> f64 {
    let m = alphas.len();
    if m == 0 {
        return 0.0;
    }
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alphas[i];
        if i + 1 < m {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    t.symmetric_eigen().eigenvalues.max()
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

fn normalize(v: &mut [Complex64]) {
    let n = norm(v);
    for x in v.iter_mut() {
        *x /= n;
    }
}

/// Conjugate gradients for `(I+H)x = b` with `H` Hermitian PSD.
fn cg_solve_shifted(
    h: &GridOperator,
    b: &[Complex64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<Complex64>, SpectralError> {
    let apply = |v: &[Complex64]| -> Vec<Complex64> {
        let mut out = h.apply(v);
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
        out
    };
    let mut x = vec![Complex64::default(); b.len()];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let b_norm = norm(b).max(1e-300);
    let mut rs = dot(&r, &r).re;
    for _ in 0..max_iter {
        if rs.sqrt() <= tol * b_norm {
            return Ok(x);
        }
        let ap = apply(&p);
        let alpha = rs / dot(&p, &ap).re;
        for i in 0..x.len() {
            x[i] += Complex64::new(alpha, 0.0) * p[i];
            r[i] -= Complex64::new(alpha, 0.0) * ap[i];
        }
        let rs_new = dot(&r, &r).re;
        let beta = rs_new / rs;
        for i in 0..p.len() {
            p[i] = r[i] + Complex64::new(beta, 0.0) * p[i];
        }
        rs = rs_new;
    }
    if rs.sqrt() <= tol * b_norm * 10.0 {
        Ok(x)
    } else {
        Err(SpectralError::NoConvergence(format!(
            "cg residual {:.3e}",
            rs.sqrt() / b_norm
        )))
    }
}

/// Least `c` with `c(φ,(I+H)φ) ≥ ‖Δ^{γ/2}φ‖²`, i.e. the largest
/// eigenvalue of `(I+H)^{−1/2} Δ^γ (I+H)^{−1/2}`. Dense eigensolve below
/// `dense_cap`, matrix-free Lanczos with inner CG solves above.
pub fn best_subelliptic_constant(
    h: &GridOperator,
    gamma: f64,
    dense_cap: usize,
) -> Result<f64, SpectralError> {
    assert!(gamma > 0.0 && gamma <= 1.0);
    constant_for_symbol(h, move |k| norm_sq(k).powf(gamma), dense_cap)
}

/// Same extremal problem with `L^γ = (I+Δ)^γ` in place of `Δ^γ`.
pub fn best_subelliptic_constant_sobolev(
    h: &GridOperator,
    gamma: f64,
    dense_cap: usize,
) -> Result<f64, SpectralError> {
    assert!(gamma > 0.0 && gamma <= 1.0);
    constant_for_symbol(h, move |k| (1.0 + norm_sq(k)).powf(gamma), dense_cap)
}

fn constant_for_symbol(
    h: &GridOperator,
    symbol: impl Fn(&[i64]) -> f64 + Copy,
    dense_cap: usize,
) -> Result<f64, SpectralError> {
    let grid = h.grid();
    let dim = grid.len();
    if dim <= dense_cap {
        let eig = hermitian_eigen(h, dense_cap)?;
        let num = fourier_multiplier_op(grid, move |k| Complex64::new(symbol(k), 0.0));
        let matvec = |v: &[Complex64]| {
            let w = eig.apply_function(|l| 1.0 / (1.0 + l.max(0.0)).sqrt(), v);
            let u = num.apply(&w);
            eig.apply_function(|l| 1.0 / (1.0 + l.max(0.0)).sqrt(), &u)
        };
        Ok(lanczos_max_eig(dim, matvec, EIG_TOL, 600, 3))
    } else {
        // λ_max((I+H)^{−1/2} A (I+H)^{−1/2}) = λ_max(A^{1/2}(I+H)^{−1}A^{1/2})
        // for PSD A; the right-hand operator needs only solves with I+H.
        let half = fourier_multiplier_op(grid, move |k| Complex64::new(symbol(k).sqrt(), 0.0));
        let failed = std::cell::Cell::new(false);
        let matvec = |v: &[Complex64]| {
            let u = half.apply(v);
            match cg_solve_shifted(h, &u, 1e-12, 20 * dim) {
                Ok(sol) => half.apply(&sol),
                Err(_) => {
                    failed.set(true);
                    vec![Complex64::default(); v.len()]
                }
            }
        };
        let lambda = lanczos_max_eig(dim, matvec, EIG_TOL, 300, 3);
        if failed.get() {
            return Err(SpectralError::NoConvergence("cg inside lanczos".into()));
        }
        Ok(lambda)
    }
}

/// `‖Δ^{αγ} (I+H)^{−α}‖` via the dense eigendecomposition of `H`.
pub fn power_constant(
    h: &GridOperator,
    gamma: f64,
    alpha: f64,
    dense_cap: usize,
) -> Result<f64, SpectralError> {
    let eig = hermitian_eigen(h, dense_cap)?;
    Ok(power_constant_from_eigen(&eig, gamma, alpha))
}

/// `‖Δ^{αγ} (I+H)^{−α}‖` reusing a precomputed eigendecomposition.
pub fn power_constant_from_eigen(eig: &HermitianEigen, gamma: f64, alpha: f64) -> f64 {
    assert!(alpha >= 0.0);
    if alpha == 0.0 {
        return 1.0;
    }
    let grid = eig.grid;
    // ‖Δ^{αγ}(I+H)^{−α}‖² = λ_max((I+H)^{−α} Δ^{2αγ} (I+H)^{−α}).
    let num_sq = fourier_multiplier_op(grid, move |k| {
        Complex64::new(norm_sq(k).powf(2.0 * alpha * gamma), 0.0)
    });
    let matvec = |v: &[Complex64]| {
        let w = eig.apply_function(|l| (1.0 + l.max(0.0)).powf(-alpha), v);
        let u = num_sq.apply(&w);
        eig.apply_function(|l| (1.0 + l.max(0.0)).powf(-alpha), &u)
    };
    lanczos_max_eig(grid.len(), matvec, EIG_TOL, 600, 5)
        .max(0.0)
        .sqrt()
}

/// Margin of the squared order relation `c²(I+H)² ≥ L^{2γ}` with `c` the
/// Sobolev-scale subelliptic constant: the smallest eigenvalue of
/// `c²(I+H)² − L^{2γ}`.
pub fn order_relation_margin(
    h: &GridOperator,
    gamma: f64,
    dense_cap: usize,
) -> Result<f64, SpectralError> {
    let c = best_subelliptic_constant_sobolev(h, gamma, dense_cap)?;
    let grid = h.grid();
    let eig = hermitian_eigen(h, dense_cap)?;
    let dim = grid.len();
    let shifted: Vec<f64> = eig.eigenvalues.iter().map(|l| 1.0 + l.max(0.0)).collect();
    // (I+H)² in the eigenbasis, L^{2γ} as a multiplier.
    let l2g = sobolev_power(grid, 2.0 * gamma);
    let mut m = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let mut e = vec![Complex64::default(); dim];
        e[j] = Complex64::new(1.0, 0.0);
        let hsq = {
            let coords = eig.vectors.adjoint() * DVector::from_column_slice(&e);
            let scaled = DVector::from_fn(dim, |i, _| {
                coords[i] * Complex64::new(shifted[i] * shifted[i], 0.0)
            });
            &eig.vectors * scaled
        };
        let lcol = l2g.apply(&e);
        for i in 0..dim {
            m[(i, j)] = Complex64::new(c * c, 0.0) * hsq[i] - lcol[i];
        }
    }
    Ok(m.symmetric_eigen().eigenvalues.min())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Bounded,
    Growing,
    Inconclusive,
}

pub const BOUNDED_RATIO: f64 = 1.2;
pub const GROWING_RATIO: f64 = 1.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConstant {
    pub n: usize,
    pub constant: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubellipticityReport {
    pub system: String,
    pub gamma: f64,
    pub alpha: f64,
    pub grids: Vec<GridConstant>,
    pub ratios: Vec<f64>,
    pub verdict: Verdict,
    pub runtime_seconds: f64,
}

fn verdict_for(ratios: &[f64]) -> Verdict {
    if ratios.iter().all(|&r| r <= BOUNDED_RATIO) {
        Verdict::Bounded
    } else if ratios.iter().any(|&r| r >= GROWING_RATIO) {
        Verdict::Growing
    } else {
        Verdict::Inconclusive
    }
}

/// `power_constant` across ascending grids with a bounded/growing verdict
/// on the successive ratios.
pub fn refinement_sweep(
    sys: &FieldSystem,
    system_name: &str,
    gamma: f64,
    alpha: f64,
    grids: &[usize],
) -> Result<SubellipticityReport, SpectralError> {
    let eigens = grids
        .iter()
        .map(|&n| {
            let grid = TorusGrid::new(sys.dim(), n);
            let h = assemble_hormander_operator(grid, sys)?;
            hermitian_eigen(&h, DENSE_CAP)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(sweep_from_eigens(&eigens, system_name, gamma, alpha, grids))
}

fn sweep_from_eigens(
    eigens: &[HermitianEigen],
    system_name: &str,
    gamma: f64,
    alpha: f64,
    grids: &[usize],
) -> SubellipticityReport {
    let start = std::time::Instant::now();
    let constants: Vec<f64> = eigens
        .iter()
        .map(|e| power_constant_from_eigen(e, gamma, alpha))
        .collect();
    let ratios: Vec<f64> = constants.windows(2).map(|w| w[1] / w[0]).collect();
    let verdict = verdict_for(&ratios);
    SubellipticityReport {
        system: system_name.to_string(),
        gamma,
        alpha,
        grids: grids
            .iter()
            .zip(&constants)
            .map(|(&n, &c)| GridConstant { n, constant: c })
            .collect(),
        ratios,
        verdict,
        runtime_seconds: start.elapsed().as_secs_f64(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderScanResult {
    /// Largest γ in the scan grid whose sweep verdict is bounded.
    pub gamma_star: Option<f64>,
    pub reports: Vec<SubellipticityReport>,
}

/// Scans `gamma_grid`, reusing one eigendecomposition per grid size.
pub fn order_scan(
    sys: &FieldSystem,
    system_name: &str,
    grids: &[usize],
    gamma_grid: &[f64],
) -> Result<OrderScanResult, SpectralError> {
    let eigens = grids
        .iter()
        .map(|&n| {
            let grid = TorusGrid::new(sys.dim(), n);
            let h = assemble_hormander_operator(grid, sys)?;
            hermitian_eigen(&h, DENSE_CAP)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let reports: Vec<SubellipticityReport> = gamma_grid
        .iter()
        .map(|&g| sweep_from_eigens(&eigens, system_name, g, 1.0, grids))
        .collect();
    let gamma_star = reports
        .iter()
        .filter(|r| r.verdict == Verdict::Bounded)
        .map(|r| r.gamma)
        .fold(None, |acc: Option<f64>, g| {
            Some(acc.map_or(g, |a| a.max(g)))
        });
    Ok(OrderScanResult {
        gamma_star,
        reports,
    })
}

/// Writes `(n, constant)` rows of a report as CSV.
pub fn write_constants_csv(
    report: &SubellipticityReport,
    out: &mut impl std::io::Write,
) -> std::io::Result<()> {
    writeln!(out, "n,constant")?;
    for gc in &report.grids {
        writeln!(out, "{},{}", gc.n, gc.constant)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecfield::Domain;

    fn mode(grid: &TorusGrid, k: &[i64]) -> Vec<Complex64> {
        (0..grid.len())
            .map(|i| {
                let x = grid.point(i);
                let phase: f64 = k.iter().zip(&x).map(|(&ki, xi)| ki as f64 * xi).sum();
                Complex64::from_polar(1.0, phase)
            })
            .collect()
    }

    fn rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|y| y.norm_sqr()).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    #[test]
    fn laplacian_eigenvalue_on_mode() {
        let grid = TorusGrid::new(2, 8);
        let phi = mode(&grid, &[1, 2]);
        let out = laplacian(grid).apply(&phi);
        for (o, p) in out.iter().zip(&phi) {
            assert!((o - p * 5.0).norm() < 1e-10);
        }
        let out = laplacian_power(grid, 0.5).apply(&phi);
        for (o, p) in out.iter().zip(&phi) {
            assert!((o - p * 5f64.sqrt()).norm() < 1e-10);
        }
    }

    #[test]
    fn semigroup_law_and_translation() {
        let grid = TorusGrid::new(2, 8);
        let mut rng = StdRng::seed_from_u64(1);
        let phi: Vec<Complex64> = (0..grid.len())
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let a = heat_semigroup(grid, 0.3).apply(&heat_semigroup(grid, 0.5).apply(&phi));
        let b = heat_semigroup(grid, 0.8).apply(&phi);
        assert!(rel_err(&a, &b) < 1e-12);

        let shift = translation_op(grid, &[0.4, -0.2]);
        let k = [1i64, 2];
        let out = shift.apply(&mode(&grid, &k));
        let factor = Complex64::from_polar(1.0, 1.0 * 0.4 + 2.0 * (-0.2));
        for (o, p) in out.iter().zip(&mode(&grid, &k)) {
            assert!((o - p * factor).norm() < 1e-10);
        }
    }

    #[test]
    fn field_matrix_matches_symbolic_derivative() {
        let grid = TorusGrid::new(2, 16);
        let x1 = assemble_field_matrix(grid, &VectorField::coordinate(2, 1)).unwrap();
        let phi = grid.sample(|x| x[0].sin());
        let expect = grid.sample(|x| x[0].cos());
        assert!(rel_err(&x1.apply(&phi), &expect) < 1e-10);

        let sys = FieldSystem::grushin();
        let x2 = assemble_field_matrix(grid, &sys.fields()[1]).unwrap();
        let flat = grid.sample(|x| (2.0 * x[0]).cos());
        let out = x2.apply(&flat);
        assert!(out.iter().map(|v| v.norm()).fold(0.0, f64::max) < 1e-10);
    }

    #[test]
    fn field_commutator_matches_bracket() {
        let grid = TorusGrid::new(2, 32);
        let sys = FieldSystem::grushin();
        let m1 = assemble_field_matrix(grid, &sys.fields()[0]).unwrap();
        let m2 = assemble_field_matrix(grid, &sys.fields()[1]).unwrap();
        let bracket = sys.fields()[0].lie_bracket(&sys.fields()[1]).unwrap();
        let mb = assemble_field_matrix(grid, &bracket).unwrap();
        let phi = grid.sample(|x| (x[0].sin() + x[1].cos()) * (2.0 * x[1]).sin());
        let lhs = GridOperator::commutator(&m1, &m2).apply(&phi);
        let rhs = mb.apply(&phi);
        assert!(rel_err(&lhs, &rhs) < 1e-8);
    }

    #[test]
    fn rejects_non_periodic_field() {
        let grid = TorusGrid::new(2, 8);
        let rot = VectorField::new(2, vec![Expr::neg(Expr::coord(2)), Expr::coord(1)]).unwrap();
        assert!(matches!(
            assemble_field_matrix(grid, &rot),
            Err(SpectralError::NonPeriodicField)
        ));
    }

    #[test]
    fn hormander_operator_basics() {
        let grid = TorusGrid::new(2, 8);
        let sys = FieldSystem::grushin();
        let h = assemble_hormander_operator(grid, &sys).unwrap();
        assert!(h.flagged_self_adjoint() && h.flagged_psd());

        let ones = vec![Complex64::new(1.0, 0.0); grid.len()];
        let out = h.apply(&ones);
        assert!(out.iter().map(|v| v.norm()).fold(0.0, f64::max) < 1e-10);

        // Flat system: H = Δ.
        let flat = assemble_hormander_operator(grid, &FieldSystem::flat(2)).unwrap();
        let mut rng = StdRng::seed_from_u64(2);
        let phi: Vec<Complex64> = (0..grid.len())
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), 0.0))
            .collect();
        assert!(rel_err(&flat.apply(&phi), &laplacian(grid).apply(&phi)) < 1e-10);
    }

    #[test]
    fn hormander_operator_dense_flags_verified() {
        let grid = TorusGrid::new(2, 16);
        let h = assemble_hormander_operator(grid, &FieldSystem::grushin()).unwrap();
        let dense = h.densify();
        let diff = (&dense - dense.adjoint()).norm();
        assert!(diff <= 1e-10 * dense.norm());
        let eig = dense.symmetric_eigen();
        let min = eig.eigenvalues.min();
        let max = eig.eigenvalues.max();
        assert!(min >= -1e-8 * max, "λ_min {min} λ_max {max}");
    }

    #[test]
    fn divergence_form_reference_cases() {
        let grid = TorusGrid::new(2, 8);
        let d = 2usize;
        let zero = Expr::zero();
        let one = Expr::one();

        // C = diag(0, 1, 1) → Δ.
        let mut coeffs = vec![vec![zero.clone(); d + 1]; d + 1];
        coeffs[1][1] = one.clone();
        coeffs[2][2] = one.clone();
        let h = assemble_divergence_form(grid, &coeffs).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let phi: Vec<Complex64> = (0..grid.len())
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        assert!(rel_err(&h.apply(&phi), &laplacian(grid).apply(&phi)) < 1e-10);

        // c₀₀ = 1, rest zero → identity.
        let mut coeffs = vec![vec![zero.clone(); d + 1]; d + 1];
        coeffs[0][0] = one.clone();
        let h = assemble_divergence_form(grid, &coeffs).unwrap();
        assert!(rel_err(&h.apply(&phi), &phi) < 1e-12);
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // pairwise (i,j) coefficient access
    fn divergence_form_matches_sum_of_squares_for_grushin() {
        // c_ij = Σ_k a_ki a_kj reproduces Σ Xᵢ*Xᵢ when the field rows are
        // divergence-free, which holds for the Grushin pair.
        let grid = TorusGrid::new(2, 16);
        let sys = FieldSystem::grushin();
        let d = 2usize;
        let mut coeffs = vec![vec![Expr::zero(); d + 1]; d + 1];
        for i in 1..=d {
            for j in 1..=d {
                let mut terms = Vec::new();
                for f in sys.fields() {
                    terms.push(Expr::mul(
                        f.coeffs()[i - 1].clone(),
                        f.coeffs()[j - 1].clone(),
                    ));
                }
                coeffs[i][j] = Expr::sum(terms).simplify();
            }
        }
        let div = assemble_divergence_form(grid, &coeffs).unwrap();
        let sos = assemble_hormander_operator(grid, &sys).unwrap();
        let phi = grid.sample(|x| (x[0] + 2.0 * x[1]).sin() + (3.0 * x[0]).cos());
        assert!(rel_err(&div.apply(&phi), &sos.apply(&phi)) < 1e-8);
    }

    #[test]
    fn divergence_form_rejects_asymmetric() {
        let grid = TorusGrid::new(2, 8);
        let mut coeffs = vec![vec![Expr::zero(); 3]; 3];
        coeffs[1][2] = Expr::one();
        assert!(matches!(
            assemble_divergence_form(grid, &coeffs),
            Err(SpectralError::AsymmetricCoefficients(1, 2))
        ));
    }

    fn random_hermitian(n: usize, rng: &mut StdRng) -> DMatrix<Complex64> {
        let m = DMatrix::from_fn(n, n, |_, _| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        (&m + m.adjoint()) * Complex64::new(0.5, 0.0)
    }

    #[test]
    fn double_commutator_identities() {
        let grid = TorusGrid::new(1, 64);
        let n = grid.len();
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..5 {
            let a = GridOperator::from_dense(grid, random_hermitian(n, &mut rng));
            let b = GridOperator::from_dense(grid, random_hermitian(n, &mut rng));
            let phi: Vec<Complex64> = (0..n)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();

            // Direct (ψ,[B₁,[B₂,A]]φ) against the four-term form.
            let psi: Vec<Complex64> = (0..n)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let form = double_commutator_form(&a, &b, &b, &psi, &phi);
            let direct = {
                let inner_c = GridOperator::commutator(&b, &a);
                let outer = GridOperator::commutator(&b, &inner_c);
                inner(&grid, &psi, &outer.apply(&phi))
            };
            assert!(
                (form - direct).norm() <= 1e-12 * direct.norm().max(1.0),
                "form {form} direct {direct}"
            );

            // Re(Aφ, B²φ) = (Bφ, ABφ) + ½(φ,[B,[B,A]]φ).
            let a_phi = a.apply(&phi);
            let b_phi = b.apply(&phi);
            let bb_phi = b.apply(&b_phi);
            let lhs = inner(&grid, &a_phi, &bb_phi).re;
            let rhs = inner(&grid, &b_phi, &a.apply(&b_phi)).re
                + 0.5 * double_commutator_form(&a, &b, &b, &phi, &phi).re;
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));

            // Re(B₂φ, [B₁,A]φ) = ½(φ,[B₂,[B₁,A]]φ).
            let b2 = GridOperator::from_dense(grid, random_hermitian(n, &mut rng));
            let b2_phi = b2.apply(&phi);
            let comm = GridOperator::commutator(&b, &a);
            let lhs = inner(&grid, &b2_phi, &comm.apply(&phi)).re;
            let rhs = 0.5 * double_commutator_form(&a, &b2, &b, &phi, &phi).re;
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn double_commutator_commuting_diagonals_vanish() {
        let grid = TorusGrid::new(1, 8);
        let n = grid.len();
        let a = GridOperator::diagonal(
            grid,
            (0..n).map(|i| Complex64::new(i as f64, 0.0)).collect(),
        );
        let b = GridOperator::diagonal(
            grid,
            (0..n)
                .map(|i| Complex64::new((i * i) as f64, 0.0))
                .collect(),
        );
        let phi: Vec<Complex64> = (0..n)
            .map(|i| Complex64::new(1.0 / (i + 1) as f64, 0.2))
            .collect();
        let form = double_commutator_form(&a, &b, &b, &phi, &phi);
        assert!(form.norm() < 1e-12);
    }

    #[test]
    fn commutator_bounds_laplacian_vanish() {
        let vals = commutator_bound_estimate(&FieldSystem::flat(2), &[8, 16], 1).unwrap();
        for v in vals {
            assert!(v <= 1e-10, "norm {v}");
        }
    }

    #[test]
    fn commutator_bounds_grushin_bounded() {
        let vals = commutator_bound_estimate(&FieldSystem::grushin(), &[8, 16], 1).unwrap();
        assert!(vals[0] > 0.0);
        let ratio = vals[1] / vals[0];
        assert!(ratio <= 1.25, "ratio {ratio}, vals {vals:?}");
    }

    #[test]
    fn fractional_commutator_bounded() {
        let vals =
            fractional_commutator_bound(&FieldSystem::grushin(), &[8, 16], 1.0, 0.6).unwrap();
        let ratio = vals[1] / vals[0];
        assert!(ratio <= 1.25, "ratio {ratio}, vals {vals:?}");
    }

    #[test]
    fn semigroup_bounds() {
        let ts: Vec<f64> = (0..6).map(|i| 2f64.powi(-2 * i)).collect();
        let flat = semigroup_commutator_bound(&FieldSystem::flat(2), &ts, &[8]).unwrap();
        assert!(flat[0] <= 1e-10);

        // n=8 underestimates the sup badly (too few frequencies under the
        // extremal t), so the stability check starts at n=16.
        let vals = semigroup_commutator_bound(&FieldSystem::grushin(), &ts, &[16, 32]).unwrap();
        let ratio = vals[1] / vals[0];
        assert!(ratio <= 1.25, "ratio {ratio}, vals {vals:?}");

        // Large t: S_t ≈ 0, commutator norm decays.
        let tail = semigroup_commutator_bound(&FieldSystem::grushin(), &[1e3], &[8]).unwrap();
        assert!(tail[0] <= 1e-10);

        let refined =
            semigroup_commutator_refined(&FieldSystem::grushin(), &ts, &[16, 32]).unwrap();
        let ratio = refined[1] / refined[0];
        assert!(ratio <= 1.3, "refined ratio {ratio}, vals {refined:?}");
    }

    #[test]
    fn improvement_lemma_cases() {
        let mut rng = StdRng::seed_from_u64(9);
        let n = 24;
        let b = random_hermitian(n, &mut rng);

        // A = B²: equality case, margin ~ 0 but never negative beyond fp.
        let a = &b * &b;
        let out = improvement_lemma_check(&a, &b, 0.0, 1e-9, 50, 1);
        assert!(out.hypotheses_hold, "hyp margin {}", out.hypothesis_margin);
        assert!(out.pass, "margin {}", out.worst_margin);

        // A = B² + 0.1·P with P PSD. The double-commutator hypothesis
        // needs a real c: the Frobenius norm of [B,[B,A]] dominates the
        // form on unit vectors.
        let g = DMatrix::from_fn(n, n, |_, _| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let p = &g * g.adjoint();
        let a2 = &a + p * Complex64::new(0.1, 0.0);
        let inner_c = &b * &a2 - &a2 * &b;
        let comm = &b * &inner_c - &inner_c * &b;
        let c = comm.norm();
        let out = improvement_lemma_check(&a2, &b, 0.0, c, 50, 2);
        assert!(out.hypotheses_hold, "hyp margin {}", out.hypothesis_margin);
        assert!(
            out.pass && out.worst_margin > 0.0,
            "margin {}",
            out.worst_margin
        );
    }

    #[test]
    fn subelliptic_constant_multiplier_oracles() {
        // H = Δ, d=1, n=8, γ=1: max over k of k²/(1+k²) at k=−4 → 16/17.
        let grid = TorusGrid::new(1, 8);
        let h = laplacian(grid);
        let c = best_subelliptic_constant(&h, 1.0, DENSE_CAP).unwrap();
        assert!((c - 16.0 / 17.0).abs() < 1e-7, "c = {c}");

        // H = 0 → λ_max(Δ) = 16.
        let zero = GridOperator::identity(grid).scale(Complex64::default());
        let c = best_subelliptic_constant(&zero, 1.0, DENSE_CAP).unwrap();
        assert!((c - 16.0).abs() < 1e-6, "c = {c}");

        // Small γ: Δ^γ ≤ stays dominated, c bounded by λ_max(Δ)^γ ≈ 1⁺.
        let h2 = assemble_hormander_operator(grid, &FieldSystem::flat(1)).unwrap();
        let c = best_subelliptic_constant(&h2, 0.05, DENSE_CAP).unwrap();
        assert!(c <= 16f64.powf(0.05) + 1e-6, "c = {c}");
    }

    #[test]
    fn subelliptic_constant_iterative_path_matches_dense() {
        let grid = TorusGrid::new(2, 8);
        let h = assemble_hormander_operator(grid, &FieldSystem::grushin()).unwrap();
        let dense = best_subelliptic_constant(&h, 0.5, DENSE_CAP).unwrap();
        // Cap below the grid size forces the CG/Lanczos path.
        let iterative = best_subelliptic_constant(&h, 0.5, 16).unwrap();
        assert!(
            (dense - iterative).abs() <= 1e-6 * dense,
            "dense {dense} iterative {iterative}"
        );
    }

    #[test]
    fn power_constant_oracles() {
        let grid = TorusGrid::new(1, 8);
        let h = laplacian(grid);
        let eig = hermitian_eigen(&h, DENSE_CAP).unwrap();
        assert_eq!(power_constant_from_eigen(&eig, 1.0, 0.0), 1.0);
        for alpha in [0.5, 1.0, 2.0] {
            let c = power_constant_from_eigen(&eig, 1.0, alpha);
            // sup_k |k|^{2α}/(1+|k|²)^α = (16/17)^α < 1.
            let expect = (16.0 / 17.0f64).powf(alpha);
            assert!((c - expect).abs() < 1e-6, "α={alpha}: {c} vs {expect}");
        }
    }

    #[test]
    fn power_constant_cap_enforced() {
        let grid = TorusGrid::new(2, 8);
        let h = assemble_hormander_operator(grid, &FieldSystem::grushin()).unwrap();
        assert!(matches!(
            power_constant(&h, 1.0, 1.0, 16),
            Err(SpectralError::CapExceeded { .. })
        ));
    }

    #[test]
    fn order_relation_flat() {
        let grid = TorusGrid::new(1, 16);
        let h = assemble_hormander_operator(grid, &FieldSystem::flat(1)).unwrap();
        let margin = order_relation_margin(&h, 1.0, DENSE_CAP).unwrap();
        assert!(margin >= -1e-8, "margin {margin}");
    }

    #[test]
    fn refinement_sweep_flat_bounded() {
        let report =
            refinement_sweep(&FieldSystem::flat(2), "flat-2", 1.0, 1.0, &[8, 16, 32]).unwrap();
        assert_eq!(report.verdict, Verdict::Bounded);
        for gc in &report.grids {
            assert!(gc.constant < 1.0, "n={} c={}", gc.n, gc.constant);
        }
    }

    #[test]
    fn refinement_sweep_grushin_half_vs_high() {
        let good =
            refinement_sweep(&FieldSystem::grushin(), "grushin", 0.5, 1.0, &[8, 16, 32]).unwrap();
        assert_eq!(good.verdict, Verdict::Bounded, "{good:?}");

        let bad =
            refinement_sweep(&FieldSystem::grushin(), "grushin", 0.9, 1.0, &[8, 16, 32]).unwrap();
        assert!(bad.ratios.iter().any(|&r| r >= GROWING_RATIO), "{bad:?}");
    }

    #[test]
    fn order_scan_flat_full_order() {
        let gammas: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let scan = order_scan(&FieldSystem::flat(2), "flat-2", &[8, 16, 32], &gammas).unwrap();
        assert_eq!(scan.gamma_star, Some(1.0));
    }

    #[test]
    fn degenerate_single_field_never_bounded() {
        let sys = FieldSystem::new(vec![VectorField::coordinate(2, 1)], Domain::Torus).unwrap();
        // At γ=0.1 the constants grow like n^{0.2} (per-doubling ratio
        // 1.149), below the bounded threshold, so the scan starts at γ
        // values where the growth is decisive within three grids.
        let gammas = [0.3, 0.5, 0.9];
        let scan = order_scan(&sys, "partial-1", &[8, 16, 32], &gammas).unwrap();
        assert_eq!(scan.gamma_star, None, "{:?}", scan.reports);
        for r in &scan.reports {
            assert_eq!(r.verdict, Verdict::Growing);
        }
    }

    #[test]
    fn report_serialization_and_csv() {
        let report = refinement_sweep(&FieldSystem::flat(1), "flat-1", 1.0, 1.0, &[8, 16]).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"verdict\":\"bounded\""));
        let mut buf = Vec::new();
        write_constants_csv(&report, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("n,constant\n"));
    }

    #[test]
    fn operator_norm_of_multiplier() {
        let grid = TorusGrid::new(1, 16);
        let op = laplacian(grid);
        let n = op.operator_norm(0);
        assert!((n - 64.0).abs() < 1e-3, "norm {n}");
    }
}
