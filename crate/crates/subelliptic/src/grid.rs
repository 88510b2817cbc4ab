//! Uniform torus grids of period 2π and FFT-backed grid functions.
//!
//! Grid functions are stored as complex vectors in lexicographic order,
//! index `(i_1,…,i_d) ↦ Σ_j i_j n^{d-1-j}` with nodes `x_j = 2π i_j / n`.
//! Frequencies run over `{−n/2,…,n/2−1}` per axis.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Discretised torus `[0,2π)^d` with `n` points per side (`n` a power of
/// two, `n ≥ 4`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TorusGrid {
    dim: usize,
    points_per_side: usize,
}

impl TorusGrid {
    pub fn new(dim: usize, points_per_side: usize) -> TorusGrid {
        assert!(dim >= 1);
        assert!(points_per_side >= 4, "n ≥ 4");
        assert!(
            points_per_side.is_power_of_two(),
            "points per side must be a power of two"
        );
        TorusGrid {
            dim,
            points_per_side,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_side(&self) -> usize {
        self.points_per_side
    }

    pub fn spacing(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.points_per_side as f64
    }

    /// Total number of nodes `n^d`.
    pub fn len(&self) -> usize {
        self.points_per_side.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Node coordinates for a flat index.
    pub fn point(&self, flat: usize) -> Vec<f64> {
        let n = self.points_per_side;
        let h = self.spacing();
        let mut idx = flat;
        let mut out = vec![0.0; self.dim];
        for j in (0..self.dim).rev() {
            out[j] = (idx % n) as f64 * h;
            idx /= n;
        }
        out
    }

    /// Signed frequency along one axis for a flat spectral index.
    pub fn frequency(&self, flat: usize, axis: usize) -> i64 {
        let n = self.points_per_side;
        let mut idx = flat;
        for _ in axis + 1..self.dim {
            idx /= n;
        }
        let k = (idx % n) as i64;
        if k < n as i64 / 2 {
            k
        } else {
            k - n as i64
        }
    }

    /// Frequency vector for a flat spectral index.
    pub fn frequency_vec(&self, flat: usize) -> Vec<i64> {
        (0..self.dim).map(|a| self.frequency(flat, a)).collect()
    }

    /// `|k|²` for a flat spectral index.
    pub fn freq_norm_sq(&self, flat: usize) -> f64 {
        (0..self.dim)
            .map(|a| {
                let k = self.frequency(flat, a) as f64;
                k * k
            })
            .sum()
    }

    /// All node coordinates in flat order.
    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Sample a scalar function on the grid.
    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> Vec<Complex64> {
        (0..self.len())
            .map(|i| Complex64::new(f(&self.point(i)), 0.0))
            .collect()
    }

    /// Forward DFT along every axis (unnormalised, rustfft convention).
    pub fn fft_forward(&self, data: &mut [Complex64]) {
        self.fft_all_axes(data, true);
    }

    /// Inverse DFT along every axis, normalised by `n^d`.
    pub fn fft_inverse(&self, data: &mut [Complex64]) {
        self.fft_all_axes(data, false);
        let scale = 1.0 / self.len() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    fn fft_all_axes(&self, data: &mut [Complex64], forward: bool) {
        assert_eq!(data.len(), self.len());
        let n = self.points_per_side;
        let fft = plan(n, forward);
        let mut scratch = vec![Complex64::default(); n];
        // Axis `a` has stride n^(d-1-a).
        for a in 0..self.dim {
            let stride = n.pow((self.dim - 1 - a) as u32);
            let block = stride * n;
            for base in (0..self.len()).step_by(block) {
                for off in 0..stride {
                    for (s, slot) in scratch.iter_mut().enumerate() {
                        *slot = data[base + off + s * stride];
                    }
                    fft.process(&mut scratch);
                    for (s, slot) in scratch.iter().enumerate() {
                        data[base + off + s * stride] = *slot;
                    }
                }
            }
        }
    }

    /// Discrete L₂ norm with the physical quadrature weight `(2π/n)^{d/2}`.
    pub fn l2_norm(&self, data: &[Complex64]) -> f64 {
        let w = self.spacing().powi(self.dim as i32);
        (data.iter().map(|v| v.norm_sqr()).sum::<f64>() * w).sqrt()
    }

    /// Evaluate the trigonometric interpolant of `data` at an arbitrary
    /// point, given precomputed Fourier coefficients (forward DFT / n^d).
    pub fn trig_eval(&self, coeffs: &[Complex64], x: &[f64]) -> Complex64 {
        let n = self.points_per_side;
        // Per-axis phase tables e^{i k x_a}.
        let mut phases: Vec<Vec<Complex64>> = Vec::with_capacity(self.dim);
        for (a, &xa) in x.iter().enumerate() {
            debug_assert!(a < self.dim);
            let mut row = Vec::with_capacity(n);
            for idx in 0..n {
                let k = if (idx as i64) < n as i64 / 2 {
                    idx as i64
                } else {
                    idx as i64 - n as i64
                };
                row.push(Complex64::from_polar(1.0, k as f64 * xa));
            }
            phases.push(row);
        }
        let mut acc = Complex64::default();
        for (flat, c) in coeffs.iter().enumerate() {
            if c.norm_sqr() == 0.0 {
                continue;
            }
            let mut idx = flat;
            let mut phase = Complex64::new(1.0, 0.0);
            for a in (0..self.dim).rev() {
                phase *= phases[a][idx % n];
                idx /= n;
            }
            acc += c * phase;
        }
        acc
    }

    /// Fourier coefficients of a grid function (normalised forward DFT).
    pub fn fourier_coefficients(&self, data: &[Complex64]) -> Vec<Complex64> {
        let mut coeffs = data.to_vec();
        self.fft_forward(&mut coeffs);
        let scale = 1.0 / self.len() as f64;
        for c in coeffs.iter_mut() {
            *c *= scale;
        }
        coeffs
    }
}

type PlanCache = HashMap<(usize, bool), Arc<dyn Fft<f64>>>;

thread_local! {
    static PLANS: RefCell<PlanCache> = RefCell::new(HashMap::new());
}

fn plan(n: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        cell.borrow_mut()
            .entry((n, forward))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if forward {
                    planner.plan_fft_forward(n)
                } else {
                    planner.plan_fft_inverse(n)
                }
            })
            .clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_fft() {
        let grid = TorusGrid::new(2, 8);
        let data = grid.sample(|x| (x[0].sin() + (2.0 * x[1]).cos()) * 0.7);
        let mut work = data.clone();
        grid.fft_forward(&mut work);
        grid.fft_inverse(&mut work);
        for (a, b) in data.iter().zip(&work) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn frequencies_cover_symmetric_range() {
        let grid = TorusGrid::new(1, 8);
        let freqs: Vec<i64> = (0..8).map(|i| grid.frequency(i, 0)).collect();
        assert_eq!(freqs, vec![0, 1, 2, 3, -4, -3, -2, -1]);
    }

    #[test]
    fn plane_wave_is_single_mode() {
        let grid = TorusGrid::new(2, 8);
        let data = grid.sample(|x| (x[0] + 2.0 * x[1]).cos());
        let coeffs = grid.fourier_coefficients(&data);
        let mut nonzero = 0;
        for (flat, c) in coeffs.iter().enumerate() {
            if c.norm() > 1e-10 {
                nonzero += 1;
                let k = grid.frequency_vec(flat);
                assert!(k == vec![1, 2] || k == vec![-1, -2]);
                assert!((c.re - 0.5).abs() < 1e-12);
            }
        }
        assert_eq!(nonzero, 2);
    }

    #[test]
    fn trig_eval_matches_function_off_grid() {
        let grid = TorusGrid::new(2, 16);
        let f = |x: &[f64]| (x[0].sin() * (3.0 * x[1]).cos()) + 0.25 * (2.0 * x[0]).cos();
        let coeffs = grid.fourier_coefficients(&grid.sample(f));
        for &(a, b) in &[(0.3, 1.1), (2.0, 4.9), (5.5, 0.01)] {
            let v = grid.trig_eval(&coeffs, &[a, b]);
            assert!((v.re - f(&[a, b])).abs() < 1e-10, "at ({a},{b})");
            assert!(v.im.abs() < 1e-10);
        }
    }

    #[test]
    fn l2_norm_of_constant() {
        let grid = TorusGrid::new(2, 8);
        let ones = vec![Complex64::new(1.0, 0.0); grid.len()];
        // ∫_{T²} 1 = (2π)², so ‖1‖₂ = 2π.
        assert!((grid.l2_norm(&ones) - 2.0 * std::f64::consts::PI).abs() < 1e-12);
    }
}
