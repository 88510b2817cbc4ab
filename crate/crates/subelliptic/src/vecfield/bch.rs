//! Truncated Campbell–Baker–Hausdorff corrections for a pair of fields.
//!
//! Works in the free associative algebra on two letters, graded by word
//! length and truncated above a cap. Coefficients are exact rationals, so
//! the "corrected log vanishes through degree N" postcondition is checked
//! without tolerance. Degree-j log components are Lie elements; the Dynkin
//! right-nested projection turns them into bracket combinations which are
//! then instantiated as nested [`VectorField::lie_bracket`] calls.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use thiserror::Error;

use super::{FieldError, MultiIndex, VectorField};

/// Truncation-order cap; word count grows as `2^N`.
pub const MAX_ORDER: usize = 6;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BchError {
    #[error("truncation order {0} exceeds cap {MAX_ORDER}")]
    OrderCap(usize),
    #[error("order must be ≥ 2, got {0}")]
    OrderTooSmall(usize),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Graded free-algebra element on two letters, truncated above `max_deg`.
///
/// Keys are words over `{0,1}`; the empty word is the unit component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradedWord {
    max_deg: usize,
    terms: BTreeMap<Vec<u8>, BigRational>,
}

impl GradedWord {
    pub fn zero(max_deg: usize) -> GradedWord {
        GradedWord {
            max_deg,
            terms: BTreeMap::new(),
        }
    }

    pub fn one(max_deg: usize) -> GradedWord {
        let mut terms = BTreeMap::new();
        terms.insert(Vec::new(), BigRational::one());
        GradedWord { max_deg, terms }
    }

    pub fn letter(l: u8, max_deg: usize) -> GradedWord {
        let mut terms = BTreeMap::new();
        terms.insert(vec![l], BigRational::one());
        GradedWord { max_deg, terms }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    fn insert(&mut self, word: Vec<u8>, coeff: BigRational) {
        if coeff.is_zero() || word.len() > self.max_deg {
            return;
        }
        let entry = self.terms.entry(word).or_insert_with(BigRational::zero);
        *entry += coeff;
        if entry.is_zero() {
            // Avoid keeping explicit zeros so is_zero stays structural.
            let key: Vec<Vec<u8>> = self
                .terms
                .iter()
                .filter(|(_, c)| c.is_zero())
                .map(|(w, _)| w.clone())
                .collect();
            for k in key {
                self.terms.remove(&k);
            }
        }
    }

    pub fn add(&self, other: &GradedWord) -> GradedWord {
        let mut out = self.clone();
        for (w, c) in &other.terms {
            out.insert(w.clone(), c.clone());
        }
        out
    }

    pub fn scale(&self, c: &BigRational) -> GradedWord {
        if c.is_zero() {
            return GradedWord::zero(self.max_deg);
        }
        GradedWord {
            max_deg: self.max_deg,
            terms: self.terms.iter().map(|(w, a)| (w.clone(), a * c)).collect(),
        }
    }

    pub fn negate(&self) -> GradedWord {
        self.scale(&-BigRational::one())
    }

    pub fn mul(&self, other: &GradedWord) -> GradedWord {
        let mut out = GradedWord::zero(self.max_deg);
        for (w1, c1) in &self.terms {
            for (w2, c2) in &other.terms {
                if w1.len() + w2.len() > self.max_deg {
                    continue;
                }
                let mut w = w1.clone();
                w.extend_from_slice(w2);
                out.insert(w, c1 * c2);
            }
        }
        out
    }

    /// Homogeneous component of degree `deg`.
    pub fn homogeneous(&self, deg: usize) -> GradedWord {
        GradedWord {
            max_deg: self.max_deg,
            terms: self
                .terms
                .iter()
                .filter(|(w, _)| w.len() == deg)
                .map(|(w, c)| (w.clone(), c.clone()))
                .collect(),
        }
    }

    pub fn lowest_degree(&self) -> Option<usize> {
        self.terms.keys().map(|w| w.len()).min()
    }

    /// `exp` of an element with no constant term (nilpotent after
    /// truncation).
    pub fn exp(&self) -> GradedWord {
        assert!(
            self.lowest_degree().is_none_or(|d| d >= 1),
            "exp requires zero constant term"
        );
        let mut out = GradedWord::one(self.max_deg);
        let mut power = GradedWord::one(self.max_deg);
        let mut factorial = BigRational::one();
        for k in 1..=self.max_deg {
            power = power.mul(self);
            factorial *= BigRational::from_integer(BigInt::from(k));
            if power.is_zero() {
                break;
            }
            out = out.add(&power.scale(&factorial.recip()));
        }
        out
    }

    /// `log` of an element of the form `1 + u` with `u` of degree ≥ 1.
    pub fn log(&self) -> GradedWord {
        let mut u = self.clone();
        u.terms.remove(&Vec::new());
        assert!(
            self.terms.get(&Vec::new()).map(|c| c.is_one()) == Some(true),
            "log requires unit constant term"
        );
        let mut out = GradedWord::zero(self.max_deg);
        let mut power = GradedWord::one(self.max_deg);
        for k in 1..=self.max_deg {
            power = power.mul(&u);
            if power.is_zero() {
                break;
            }
            let sign = if k % 2 == 1 {
                BigRational::one()
            } else {
                -BigRational::one()
            };
            out = out.add(&power.scale(&(sign / BigRational::from_integer(BigInt::from(k)))));
        }
        out
    }

    /// Dynkin right-nested map on a homogeneous component: each word
    /// `l1 l2 … lm` is sent to `[l1,[l2,…,lm]]` expanded back into words.
    /// On a Lie element `u` of degree `m` this returns `m·u`.
    pub fn dynkin(&self) -> GradedWord {
        let mut out = GradedWord::zero(self.max_deg);
        for (w, c) in &self.terms {
            let bracket = right_nested_bracket(w, self.max_deg);
            out = out.add(&bracket.scale(c));
        }
        out
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Vec<u8>, &BigRational)> {
        self.terms.iter()
    }
}

/// Expansion of the right-nested bracket word `[l1,[l2,…,lm]]`.
fn right_nested_bracket(word: &[u8], max_deg: usize) -> GradedWord {
    match word.len() {
        0 => GradedWord::zero(max_deg),
        1 => GradedWord::letter(word[0], max_deg),
        _ => {
            let head = GradedWord::letter(word[0], max_deg);
            let tail = right_nested_bracket(&word[1..], max_deg);
            head.mul(&tail).add(&tail.mul(&head).negate())
        }
    }
}

/// One correction field `Z_j` together with its exact bracket combination
/// `Z_j = Σ_α c_α · Y_[α]` over multi-indices of length `j`.
#[derive(Debug, Clone)]
pub struct CorrectionField {
    pub degree: usize,
    pub field: VectorField,
    /// Dynkin expansion `Z_j = Σ_α c_α · Y_[α]` over `|α| = j`.
    pub combination: Vec<(MultiIndex, BigRational)>,
    /// The exact degree-`j` log component in the free algebra.
    pub graded: GradedWord,
}

/// Computes the correction fields `Z_2,…,Z_N` for the flow product
/// `exp(t(Y1+Y2)) exp(−tY1) exp(−tY2) exp(−t²Z_2) ⋯ exp(−t^N Z_N)`.
///
/// The iteration runs in the graded free algebra: after multiplying in
/// `exp(−Z_j)` the log of the product has no components of degree ≤ j;
/// on return the log vanishes through degree `N` exactly.
pub fn bch_correction_fields(
    y1: &VectorField,
    y2: &VectorField,
    order: usize,
) -> Result<Vec<CorrectionField>, BchError> {
    if order < 2 {
        return Err(BchError::OrderTooSmall(order));
    }
    if order > MAX_ORDER {
        return Err(BchError::OrderCap(order));
    }
    if y1.dim() != y2.dim() {
        return Err(FieldError::DimensionMismatch(y1.dim(), y2.dim()).into());
    }

    let a = GradedWord::letter(0, order);
    let b = GradedWord::letter(1, order);
    let mut product = a
        .add(&b)
        .exp()
        .mul(&a.negate().exp())
        .mul(&b.negate().exp());

    let mut corrections = Vec::new();
    for j in 2..=order {
        let log = product.log();
        debug_assert!(log.lowest_degree().is_none_or(|d| d >= j));
        let zj = log.homogeneous(j);
        // Friedrichs: homogeneous log components of a product of
        // exponentials of Lie elements are Lie; Dynkin then acts as j·id.
        let m = BigRational::from_integer(BigInt::from(j));
        assert_eq!(
            zj.dynkin(),
            zj.scale(&m),
            "degree-{j} log component is not a Lie element"
        );
        let combination: Vec<(MultiIndex, BigRational)> = zj
            .terms()
            .map(|(w, c)| {
                let alpha = MultiIndex::new(w.iter().map(|&l| l as usize + 1).collect());
                (alpha, c / m.clone())
            })
            .collect();
        let field = instantiate(y1, y2, &combination)?;
        product = product.mul(&zj.negate().exp());
        corrections.push(CorrectionField {
            degree: j,
            field,
            combination,
            graded: zj,
        });
    }

    let final_log = product.log();
    assert!(
        final_log.lowest_degree().is_none_or(|d| d > order),
        "corrected log retains low-degree terms"
    );
    Ok(corrections)
}

/// Instantiates a bracket combination on the concrete pair `(Y1, Y2)` via
/// the Dynkin expansion `Z = (1/j) Σ_w c_w [w1,[w2,…,wj]]`.
fn instantiate(
    y1: &VectorField,
    y2: &VectorField,
    combination: &[(MultiIndex, BigRational)],
) -> Result<VectorField, FieldError> {
    let dim = y1.dim();
    let mut acc = VectorField::zero(dim);
    for (alpha, c) in combination {
        let mut field = pick(y1, y2, *alpha.entries().last().unwrap());
        for &i in alpha.entries()[..alpha.len() - 1].iter().rev() {
            field = pick(y1, y2, i).lie_bracket(&field)?;
        }
        acc = VectorField::linear_combination(
            dim,
            &[(BigRational::one(), &acc), (c.clone(), &field)],
        )?;
    }
    Ok(acc)
}

fn pick(y1: &VectorField, y2: &VectorField, i: usize) -> VectorField {
    if i == 1 {
        y1.clone()
    } else {
        y2.clone()
    }
}
