//! Vector fields, Lie brackets and multi-commutators.
//!
//! A field acts as `X = Σ_k a_k ∂_k` with coefficients in the [`crate::symexpr`]
//! grammar. Multi-commutators follow the right-nested convention
//! `X_[α] = [X_{i1},[X_{i2},…,[X_{i_{n-1}},X_{i_n}]…]]`; the opposite
//! nesting flips signs of odd-length tails, so everything downstream
//! (Hörmander criteria, CBH corrections) assumes this one.

pub mod bch;

use num_rational::BigRational;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::symexpr::Expr;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FieldError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("field index {index} out of range [1,{count}]")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("coefficient references x{coord} but dimension is {dim}")]
    CoordOutOfRange { coord: usize, dim: usize },
}

/// A `C^∞` vector field `X = Σ_k a_k ∂_k` on `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    dim: usize,
    coeffs: Vec<Expr>,
}

impl VectorField {
    pub fn new(dim: usize, coeffs: Vec<Expr>) -> Result<VectorField, FieldError> {
        if coeffs.len() != dim {
            return Err(FieldError::DimensionMismatch(coeffs.len(), dim));
        }
        for c in &coeffs {
            let mc = c.max_coord();
            if mc > dim {
                return Err(FieldError::CoordOutOfRange { coord: mc, dim });
            }
        }
        Ok(VectorField { dim, coeffs })
    }

    pub fn zero(dim: usize) -> VectorField {
        VectorField {
            dim,
            coeffs: vec![Expr::zero(); dim],
        }
    }

    /// The coordinate field `∂_k`, 1-based.
    pub fn coordinate(dim: usize, k: usize) -> VectorField {
        assert!(k >= 1 && k <= dim);
        let coeffs = (1..=dim)
            .map(|j| if j == k { Expr::one() } else { Expr::zero() })
            .collect();
        VectorField { dim, coeffs }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coeffs(&self) -> &[Expr] {
        &self.coeffs
    }

    /// All coefficients carry the syntactic boundedness flag.
    pub fn is_bounded(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_bounded())
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.simplify().is_zero_const())
    }

    /// Coefficient vector `a(x)`.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.coeffs.iter().map(|c| c.eval(x)).collect()
    }

    /// `X φ = Σ_k a_k ∂_k φ`.
    pub fn apply(&self, phi: &Expr) -> Expr {
        let terms: Vec<Expr> = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, a)| a.clone().mul(phi.differentiate(i + 1)))
            .collect();
        Expr::sum(terms).simplify()
    }

    /// Lie bracket `[X,Y] = Σ_k (X b_k − Y a_k) ∂_k`.
    pub fn lie_bracket(&self, other: &VectorField) -> Result<VectorField, FieldError> {
        if self.dim != other.dim {
            return Err(FieldError::DimensionMismatch(self.dim, other.dim));
        }
        let coeffs = (0..self.dim)
            .map(|k| {
                self.apply(&other.coeffs[k])
                    .add(Expr::neg(other.apply(&self.coeffs[k])))
                    .simplify()
            })
            .collect();
        Ok(VectorField {
            dim: self.dim,
            coeffs,
        })
    }

    /// Linear combination `Σ cᵢ Xᵢ` with exact rational weights.
    pub fn linear_combination(
        dim: usize,
        terms: &[(BigRational, &VectorField)],
    ) -> Result<VectorField, FieldError> {
        let mut coeffs = vec![Expr::zero(); dim];
        for (c, field) in terms {
            if field.dim != dim {
                return Err(FieldError::DimensionMismatch(field.dim, dim));
            }
            for (k, acc) in coeffs.iter_mut().enumerate() {
                *acc = acc.clone().add(field.coeffs[k].clone().scale(c));
            }
        }
        Ok(VectorField {
            dim,
            coeffs: coeffs.into_iter().map(|c| c.simplify()).collect(),
        })
    }

    pub fn sum(&self, other: &VectorField) -> Result<VectorField, FieldError> {
        VectorField::linear_combination(
            self.dim,
            &[
                (BigRational::from_integer(1.into()), self),
                (BigRational::from_integer(1.into()), other),
            ],
        )
    }

    pub fn negate(&self) -> VectorField {
        VectorField {
            dim: self.dim,
            coeffs: self
                .coeffs
                .iter()
                .map(|c| Expr::neg(c.clone()).simplify())
                .collect(),
        }
    }
}

/// Multi-index `α = (i_1,…,i_n)` with entries in `{1,…,N}`, `|α| = n ≥ 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MultiIndex(Vec<usize>);

impl MultiIndex {
    pub fn new(entries: Vec<usize>) -> MultiIndex {
        assert!(!entries.is_empty(), "|α| ≥ 1");
        MultiIndex(entries)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn entries(&self) -> &[usize] {
        &self.0
    }
}

impl std::fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, ")")
    }
}

/// Domain descriptor carried by a field system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    /// Torus of period 2π in every coordinate.
    Torus,
    /// Sampling box `[-half_width, half_width]^d`.
    Box { half_width: f64 },
}

/// Generating fields `X_1,…,X_N` on a common domain.
#[derive(Debug, Clone)]
pub struct FieldSystem {
    dim: usize,
    fields: Vec<VectorField>,
    domain: Domain,
}

impl FieldSystem {
    pub fn new(fields: Vec<VectorField>, domain: Domain) -> Result<FieldSystem, FieldError> {
        assert!(!fields.is_empty(), "N ≥ 1");
        let dim = fields[0].dim();
        for f in &fields {
            if f.dim() != dim {
                return Err(FieldError::DimensionMismatch(f.dim(), dim));
            }
        }
        Ok(FieldSystem {
            dim,
            fields,
            domain,
        })
    }

    /// The canonical degenerate example `{∂_1, sin(x1) ∂_2}` on the torus.
    pub fn grushin() -> FieldSystem {
        let x1 = VectorField::coordinate(2, 1);
        let x2 = VectorField::new(2, vec![Expr::zero(), Expr::sin(Expr::coord(1))]).unwrap();
        FieldSystem::new(vec![x1, x2], Domain::Torus).unwrap()
    }

    /// The flat system `{∂_1,…,∂_d}` on the torus.
    pub fn flat(dim: usize) -> FieldSystem {
        let fields = (1..=dim).map(|k| VectorField::coordinate(dim, k)).collect();
        FieldSystem::new(fields, Domain::Torus).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn field_count(&self) -> usize {
        self.fields.len()
    }

    pub fn fields(&self) -> &[VectorField] {
        &self.fields
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn is_bounded(&self) -> bool {
        self.fields.iter().all(|f| f.is_bounded())
    }

    /// Right-nested multi-commutator `X_[α]`; `|α| = 1` returns the field
    /// itself.
    pub fn multi_commutator(&self, alpha: &MultiIndex) -> Result<VectorField, FieldError> {
        let n = self.fields.len();
        for &i in alpha.entries() {
            if i < 1 || i > n {
                return Err(FieldError::IndexOutOfRange { index: i, count: n });
            }
        }
        let entries = alpha.entries();
        let mut acc = self.fields[entries[entries.len() - 1] - 1].clone();
        for &i in entries[..entries.len() - 1].iter().rev() {
            acc = self.fields[i - 1].lie_bracket(&acc)?;
        }
        Ok(acc)
    }
}

/// `J_r⁺(N)`: all multi-indices of length 1..=r, ordered by (length, entries).
pub fn enumerate_multiindices(field_count: usize, max_len: usize) -> Vec<MultiIndex> {
    assert!(field_count >= 1 && max_len >= 1);
    let mut out = Vec::new();
    let mut current: Vec<Vec<usize>> = vec![vec![]];
    for _ in 1..=max_len {
        let mut next = Vec::with_capacity(current.len() * field_count);
        for prefix in &current {
            for i in 1..=field_count {
                let mut w = prefix.clone();
                w.push(i);
                next.push(w);
            }
        }
        out.extend(next.iter().cloned().map(MultiIndex::new));
        current = next;
    }
    out
}
