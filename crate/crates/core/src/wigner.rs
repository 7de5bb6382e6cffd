//! Wigner functions on a rectangular phase-space grid.
//!
//! Convention: `α = (q + i p)/√2` and `∫ W dq dp = 1`, so `|W| ≤ 1/π`.
//! `W(q, p) = (1/π) Tr[ρ D(α) Π D†(α)] = (1/π) Tr[ρ D(2α) Π]`, evaluated from the
//! Fock-basis matrix elements of `D(2α)`. Those are bounded by one in modulus
//! and obey a three-term recurrence along each diagonal (normalized generalized
//! Laguerre functions), which keeps the sum stable at the grid corners.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::fock::{DensityMatrix, C64};
use crate::parallel::Execution;

/// Uniform grid including both endpoints on each axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseGrid {
    pub nq: usize,
    pub np: usize,
    pub q_min: f64,
    pub q_max: f64,
    pub p_min: f64,
    pub p_max: f64,
}

impl Default for PhaseGrid {
    fn default() -> Self {
        PhaseGrid { nq: 48, np: 48, q_min: -4.0, q_max: 4.0, p_min: -4.0, p_max: 4.0 }
    }
}

impl PhaseGrid {
    pub fn square(n: usize, half_width: f64) -> Self {
        PhaseGrid { nq: n, np: n, q_min: -half_width, q_max: half_width, p_min: -half_width, p_max: half_width }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nq < 2 || self.np < 2 {
            return Err(Error::InvalidArgument(format!("grid needs at least 2 points per axis ({}x{})", self.nq, self.np)));
        }
        if !(self.q_max > self.q_min && self.p_max > self.p_min) {
            return Err(Error::InvalidArgument("grid bounds must satisfy max > min".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nq * self.np
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dq(&self) -> f64 {
        (self.q_max - self.q_min) / (self.nq - 1) as f64
    }

    pub fn dp(&self) -> f64 {
        (self.p_max - self.p_min) / (self.np - 1) as f64
    }

    pub fn q(&self, i: usize) -> f64 {
        self.q_min + i as f64 * self.dq()
    }

    pub fn p(&self, j: usize) -> f64 {
        self.p_min + j as f64 * self.dp()
    }

    /// Flat index of `(iq, ip)`; rows are `p`, `q` varies fastest.
    pub fn index(&self, iq: usize, ip: usize) -> usize {
        ip * self.nq + iq
    }
}

/// Real Wigner raster, row-major with `q` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct WignerGrid {
    pub grid: PhaseGrid,
    pub values: Vec<f64>,
}

impl WignerGrid {
    pub fn new(grid: PhaseGrid, values: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "raster has {} values, grid needs {}",
                values.len(),
                grid.len()
            )));
        }
        Ok(WignerGrid { grid, values })
    }

    pub fn zeros(grid: PhaseGrid) -> Self {
        WignerGrid { grid, values: vec![0.0; grid.len()] }
    }

    pub fn at(&self, iq: usize, ip: usize) -> f64 {
        self.values[self.grid.index(iq, ip)]
    }

    pub fn max_abs_diff(&self, other: &WignerGrid) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Grid indices of the maximum value.
    pub fn argmax(&self) -> (usize, usize) {
        let (k, _) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
        (k % self.grid.nq, k / self.grid.nq)
    }

    pub fn scaled(&self, s: f64) -> WignerGrid {
        WignerGrid { grid: self.grid, values: self.values.iter().map(|v| v * s).collect() }
    }
}

/// Per-state coefficients `c[k][n] = (−1)ⁿ ρ_{n+k,n}` laid out diagonal by diagonal.
struct Diagonals {
    dim: usize,
    coeffs: Vec<Vec<C64>>,
}

impl Diagonals {
    fn new(rho: &DensityMatrix) -> Self {
        let dim = rho.dim();
        let m = rho.matrix();
        let coeffs = (0..dim)
            .map(|k| {
                (0..dim - k)
                    .map(|n| {
                        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
                        m[(n + k, n)] * sign
                    })
                    .collect()
            })
            .collect();
        Diagonals { dim, coeffs }
    }

    /// `π W(q, p)`.
    fn eval(&self, q: f64, p: f64) -> f64 {
        // β = 2α = √2 (q + i p), x = |β|².
        let x = 2.0 * (q * q + p * p);
        let beta_conj_phase = if x > 0.0 { C64::new(q, -p) / (q * q + p * p).sqrt() } else { C64::new(1.0, 0.0) };
        let sqrt_x = x.sqrt();
        // f0 = x^{k/2} e^{−x/2} / √k!, advanced in k.
        let mut f0 = (-0.5 * x).exp();
        let mut phase = C64::new(1.0, 0.0);
        let mut total = 0.0;
        for k in 0..self.dim {
            if k > 0 {
                f0 *= sqrt_x / (k as f64).sqrt();
                phase *= beta_conj_phase;
            }
            let c = &self.coeffs[k];
            let kf = k as f64;
            let mut prev = 0.0;
            let mut cur = f0;
            let mut acc = c[0] * cur;
            for (n, &cn) in c.iter().enumerate().skip(1) {
                let m = (n - 1) as f64;
                let next = ((2.0 * m + 1.0 + kf - x) * cur - (m * (m + kf)).sqrt() * prev)
                    / ((m + 1.0) * (m + 1.0 + kf)).sqrt();
                prev = cur;
                cur = next;
                acc += cn * cur;
            }
            if k == 0 {
                total += acc.re;
            } else {
                total += 2.0 * (phase * acc).re;
            }
        }
        total
    }
}

/// Wigner function of `rho` at a single phase-space point.
pub fn wigner_point(rho: &DensityMatrix, q: f64, p: f64) -> f64 {
    Diagonals::new(rho).eval(q, p) / PI
}

/// Wigner function of `rho` on `grid`.
pub fn wigner(rho: &DensityMatrix, grid: &PhaseGrid) -> Result<WignerGrid> {
    wigner_with(rho, grid, Execution::Sequential)
}

/// As [`wigner`], with grid rows distributed according to `exec`. Every point
/// is summed in the same fixed order, so the result does not depend on `exec`.
pub fn wigner_with(rho: &DensityMatrix, grid: &PhaseGrid, exec: Execution) -> Result<WignerGrid> {
    grid.validate()?;
    let diags = Diagonals::new(rho);
    let rows: Vec<Vec<f64>> = exec.map(grid.np, |ip| {
        let p = grid.p(ip);
        (0..grid.nq).map(|iq| diags.eval(grid.q(iq), p) / PI).collect()
    });
    let values: Vec<f64> = rows.into_iter().flatten().collect();
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericalOverflow { iq: k % grid.nq, ip: k / grid.nq });
    }
    Ok(WignerGrid { grid: *grid, values })
}

/// Cosine similarity over grid points with a flat inner product.
pub fn cosine_similarity(a: &WignerGrid, b: &WignerGrid) -> Result<f64> {
    if a.grid != b.grid || a.values.len() != b.values.len() {
        return Err(Error::GridMismatch);
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.values.iter().zip(&b.values) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Riemann sum times cell area.
pub fn norm_integral(w: &WignerGrid) -> f64 {
    w.values.iter().sum::<f64>() * w.grid.dq() * w.grid.dp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{evolve, EvolutionSpec};
    use crate::fock::{coherent, number, CoherentAmplitude, DensityMatrix};
    use approx::assert_abs_diff_eq;

    #[test]
    fn vacuum_and_fock_one_closed_forms() {
        let vac = DensityMatrix::vacuum(40).unwrap();
        assert_abs_diff_eq!(wigner_point(&vac, 0.0, 0.0), 1.0 / PI, epsilon = 1e-6);
        let one = DensityMatrix::fock(1, 40).unwrap();
        assert_abs_diff_eq!(wigner_point(&one, 0.0, 0.0), -1.0 / PI, epsilon = 1e-6);
        for &(q, p) in &[(0.3, -0.7), (1.5, 2.0), (-3.9, 3.9)] {
            let r2: f64 = q * q + p * p;
            assert_abs_diff_eq!(wigner_point(&vac, q, p), (-r2).exp() / PI, epsilon = 1e-12);
            assert_abs_diff_eq!(wigner_point(&one, q, p), (2.0 * r2 - 1.0) * (-r2).exp() / PI, epsilon = 1e-12);
        }
    }

    #[test]
    fn coherent_state_is_displaced_gaussian() {
        let alpha = CoherentAmplitude::new(1.2, -0.7);
        let rho = coherent(alpha, 40).unwrap();
        let (q0, p0) = (2f64.sqrt() * alpha.re, 2f64.sqrt() * alpha.im);
        for &(q, p) in &[(0.0, 0.0), (q0, p0), (2.0, -2.5), (-3.0, 1.0)] {
            let r2: f64 = (q - q0) * (q - q0) + (p - p0) * (p - p0);
            assert_abs_diff_eq!(wigner_point(&rho, q, p), (-r2).exp() / PI, epsilon = 1e-10);
        }
        let w = wigner(&rho, &PhaseGrid::default()).unwrap();
        let (iq, ip) = w.argmax();
        let g = w.grid;
        assert!((g.q(iq) - q0).abs() <= g.dq() && (g.p(ip) - p0).abs() <= g.dp());
    }

    #[test]
    fn bound_and_normalization() {
        let g = PhaseGrid::default();
        let vac = wigner(&DensityMatrix::vacuum(40).unwrap(), &g).unwrap();
        assert_abs_diff_eq!(norm_integral(&vac), 1.0, epsilon = 1e-3);
        assert_eq!(norm_integral(&WignerGrid::zeros(g)), 0.0);
        // |α| = 2 sits 1.17 from the window edge, so about 5% of the mass is clipped.
        // Compare with the in-window Gaussian mass from fine Simpson quadrature.
        let a2 = wigner(&coherent(CoherentAmplitude::new(2.0, 0.0), 40).unwrap(), &g).unwrap();
        let clipped = |centre: f64| {
            let m = 20_000;
            let h = 8.0 / m as f64;
            let f = |x: f64| (-(x - centre) * (x - centre)).exp() / PI.sqrt();
            let mut acc = f(-4.0) + f(4.0);
            for k in 1..m {
                acc += f(-4.0 + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0
        };
        let in_window = clipped(2.0 * 2f64.sqrt()) * clipped(0.0);
        assert_abs_diff_eq!(norm_integral(&a2), in_window, epsilon = 2e-2);
        assert!((norm_integral(&a2) - 1.0).abs() < 5e-2);
        for level in 0..6 {
            let w = wigner(&DensityMatrix::fock(level, 40).unwrap(), &g).unwrap();
            assert!(w.values.iter().all(|v| v.abs() <= 1.0 / PI + 1e-6));
        }
    }

    #[test]
    fn linearity_in_rho() {
        let g = PhaseGrid::default();
        let r1 = coherent(CoherentAmplitude::new(0.5, 1.0), 30).unwrap();
        let r2 = DensityMatrix::fock(3, 30).unwrap();
        let p = 0.35;
        let mixed = wigner(&r1.mix(&r2, p).unwrap(), &g).unwrap();
        let w1 = wigner(&r1, &g).unwrap();
        let w2 = wigner(&r2, &g).unwrap();
        for k in 0..g.len() {
            assert!((mixed.values[k] - (p * w1.values[k] + (1.0 - p) * w2.values[k])).abs() < 1e-9);
        }
    }

    #[test]
    fn parallel_rows_are_bitwise_identical() {
        let rho = coherent(CoherentAmplitude::new(-0.9, 0.4), 30).unwrap();
        let g = PhaseGrid::default();
        let a = wigner_with(&rho, &g, Execution::Sequential).unwrap();
        let b = wigner_with(&rho, &g, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    fn bilinear(w: &WignerGrid, q: f64, p: f64) -> f64 {
        let g = w.grid;
        let fx = ((q - g.q_min) / g.dq()).clamp(0.0, (g.nq - 1) as f64 - 1e-9);
        let fy = ((p - g.p_min) / g.dp()).clamp(0.0, (g.np - 1) as f64 - 1e-9);
        let (i, j) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (fx - i as f64, fy - j as f64);
        w.at(i, j) * (1.0 - tx) * (1.0 - ty)
            + w.at(i + 1, j) * tx * (1.0 - ty)
            + w.at(i, j + 1) * (1.0 - tx) * ty
            + w.at(i + 1, j + 1) * tx * ty
    }

    #[test]
    fn free_rotation_rotates_phase_space() {
        let n = 30;
        let omega = 1.3;
        let t = 0.7;
        let rho = coherent(CoherentAmplitude::new(1.2, 0.3), n).unwrap();
        let spec = EvolutionSpec::markovian(number(n).unwrap().scale(omega), vec![]);
        let out = evolve(&rho, &spec, t).unwrap();
        let g = PhaseGrid::default();
        let w0 = wigner(&rho, &g).unwrap();
        let w1 = wigner(&out, &g).unwrap();
        // e^{−iωt a†a} maps α → α e^{−iωt}: a clockwise rotation by ωt.
        let (c, s) = ((omega * t).cos(), (omega * t).sin());
        let mut err: f64 = 0.0;
        for ip in 0..g.np {
            for iq in 0..g.nq {
                let (q, p) = (g.q(iq), g.p(ip));
                let (q0, p0) = (c * q - s * p, s * q + c * p);
                err = err.max((w1.at(iq, ip) - bilinear(&w0, q0, p0)).abs());
            }
        }
        assert!(err < 2e-2, "rotation mismatch {err}");
    }

    #[test]
    fn cosine_similarity_cases() {
        let g = PhaseGrid::default();
        let w0 = wigner(&DensityMatrix::vacuum(40).unwrap(), &g).unwrap();
        let w1 = wigner(&DensityMatrix::fock(1, 40).unwrap(), &g).unwrap();
        assert_abs_diff_eq!(cosine_similarity(&w0, &w0).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cosine_similarity(&w0.scaled(3.7), &w0).unwrap(), 1.0, epsilon = 1e-12);

        // Two-loop reference over (p, q).
        let (mut dot, mut n0, mut n1) = (0.0, 0.0, 0.0);
        for ip in 0..g.np {
            for iq in 0..g.nq {
                let (a, b) = (w0.at(iq, ip), w1.at(iq, ip));
                dot += a * b;
                n0 += a * a;
                n1 += b * b;
            }
        }
        let reference = dot / (n0 * n1).sqrt();
        assert_abs_diff_eq!(cosine_similarity(&w0, &w1).unwrap(), reference, epsilon = 1e-12);

        assert!(matches!(cosine_similarity(&w0, &WignerGrid::zeros(g)), Err(Error::UndefinedSimilarity)));
        let other = WignerGrid::zeros(PhaseGrid::square(8, 4.0));
        assert!(matches!(cosine_similarity(&w0, &other), Err(Error::GridMismatch)));
    }
}
