//! Truncated Fock-space linear algebra.
//!
//! Conventions: ħ = 1, `a = (q + i p)/√2`, levels `0..cutoff`. Everything is
//! double precision.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

/// Default Fock cutoff used by the experiment configurations.
pub const DEFAULT_CUTOFF: usize = 40;

const COHERENT_TAIL_LIMIT: f64 = 1e-8;

/// A dense operator on a truncated Fock space.
#[derive(Clone, Debug, PartialEq)]
pub struct Operator {
    data: CMatrix,
}

impl Operator {
    pub fn from_matrix(data: CMatrix) -> Result<Self> {
        check_square(&data)?;
        Ok(Operator { data })
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Operator { data: CMatrix::zeros(dim, dim) })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Operator { data: CMatrix::identity(dim, dim) })
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.data
    }

    pub fn into_matrix(self) -> CMatrix {
        self.data
    }

    pub fn adjoint(&self) -> Operator {
        Operator { data: self.data.adjoint() }
    }

    pub fn scale(&self, s: f64) -> Operator {
        Operator { data: self.data.map(|z| z * s) }
    }

    pub fn add(&self, other: &Operator) -> Result<Operator> {
        same_dim(self.dim(), other.dim())?;
        Ok(Operator { data: &self.data + &other.data })
    }

    pub fn mul(&self, other: &Operator) -> Result<Operator> {
        same_dim(self.dim(), other.dim())?;
        Ok(Operator { data: &self.data * &other.data })
    }

    /// Kronecker product `self ⊗ other` (self is the slow index).
    pub fn kron(&self, other: &Operator) -> Operator {
        Operator { data: self.data.kronecker(&other.data) }
    }

    /// Largest elementwise deviation from Hermiticity.
    pub fn hermiticity_error(&self) -> f64 {
        max_abs_diff(&self.data, &self.data.adjoint())
    }
}

/// A density matrix in the truncated Fock basis.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    data: CMatrix,
}

impl DensityMatrix {
    /// Wraps a matrix, checking trace and Hermiticity.
    pub fn from_matrix(data: CMatrix) -> Result<Self> {
        check_square(&data)?;
        let tr = data.trace();
        if (tr.re - 1.0).abs() > 1e-8 || tr.im.abs() > 1e-8 {
            return Err(Error::InvalidArgument(format!("density matrix trace {tr} is not 1")));
        }
        let herm = max_abs_diff(&data, &data.adjoint());
        if herm > 1e-10 {
            return Err(Error::InvalidArgument(format!("density matrix is not Hermitian ({herm:e})")));
        }
        Ok(DensityMatrix { data })
    }

    /// Hermitizes and renormalizes the trace without further checks.
    pub(crate) fn from_matrix_normalized(mut data: CMatrix) -> Self {
        hermitize_and_normalize(&mut data);
        DensityMatrix { data }
    }

    /// Projector onto a (not necessarily normalized) pure state.
    pub fn from_pure(psi: &[C64]) -> Result<Self> {
        check_dim(psi.len())?;
        let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(Error::InvalidArgument("pure state has zero norm".into()));
        }
        let n = psi.len();
        let data = CMatrix::from_fn(n, n, |i, j| psi[i] * psi[j].conj() / norm);
        Ok(DensityMatrix { data })
    }

    pub fn fock(level: usize, cutoff: usize) -> Result<Self> {
        check_dim(cutoff)?;
        if level >= cutoff {
            return Err(Error::InvalidArgument(format!("level {level} outside cutoff {cutoff}")));
        }
        let mut psi = vec![C64::new(0.0, 0.0); cutoff];
        psi[level] = C64::new(1.0, 0.0);
        Self::from_pure(&psi)
    }

    pub fn vacuum(cutoff: usize) -> Result<Self> {
        Self::fock(0, cutoff)
    }

    pub fn maximally_mixed(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        let data = CMatrix::from_diagonal_element(dim, dim, C64::new(1.0 / dim as f64, 0.0));
        Ok(DensityMatrix { data })
    }

    /// Convex combination `p·self + (1 − p)·other`.
    pub fn mix(&self, other: &DensityMatrix, p: f64) -> Result<Self> {
        same_dim(self.dim(), other.dim())?;
        Ok(DensityMatrix { data: self.data.map(|z| z * p) + other.data.map(|z| z * (1.0 - p)) })
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.data
    }

    pub fn trace(&self) -> C64 {
        self.data.trace()
    }

    pub fn purity(&self) -> f64 {
        // Tr ρ² = Σ |ρ_ij|² for Hermitian ρ.
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn population(&self, level: usize) -> f64 {
        self.data[(level, level)].re
    }

    /// `Tr(ρ O)`.
    pub fn expect(&self, op: &Operator) -> Result<C64> {
        same_dim(self.dim(), op.dim())?;
        let n = self.dim();
        let mut acc = C64::new(0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                acc += self.data[(i, j)] * op.data[(j, i)];
            }
        }
        Ok(acc)
    }

    pub fn mean_photon_number(&self) -> f64 {
        (0..self.dim()).map(|n| n as f64 * self.population(n)).sum()
    }

    pub fn hermiticity_error(&self) -> f64 {
        max_abs_diff(&self.data, &self.data.adjoint())
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.data.clone().symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }
}

/// Complex coherent amplitude α.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoherentAmplitude {
    pub re: f64,
    pub im: f64,
}

impl CoherentAmplitude {
    pub const fn new(re: f64, im: f64) -> Self {
        CoherentAmplitude { re, im }
    }

    pub fn abs(&self) -> f64 {
        self.re.hypot(self.im)
    }

    pub fn as_complex(&self) -> C64 {
        C64::new(self.re, self.im)
    }

    pub fn scale(&self, s: f64) -> Self {
        CoherentAmplitude { re: self.re * s, im: self.im * s }
    }
}

/// Annihilation operator with `a[n−1, n] = √n`.
pub fn destroy(cutoff: usize) -> Result<Operator> {
    check_dim(cutoff)?;
    let mut m = CMatrix::zeros(cutoff, cutoff);
    for n in 1..cutoff {
        m[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    Ok(Operator { data: m })
}

pub fn create(cutoff: usize) -> Result<Operator> {
    Ok(destroy(cutoff)?.adjoint())
}

/// Number operator `a†a`, built directly as `diag(0, 1, …, N−1)`.
pub fn number(cutoff: usize) -> Result<Operator> {
    diagonal(cutoff, |n| n as f64)
}

/// Coherent-state amplitudes `e^{−|α|²/2} αⁿ/√n!` for `n < cutoff`.
pub fn coherent_amplitudes(alpha: CoherentAmplitude, cutoff: usize) -> Vec<C64> {
    let a = alpha.as_complex();
    let mut amps = Vec::with_capacity(cutoff);
    let mut c = C64::new((-0.5 * a.norm_sqr()).exp(), 0.0);
    amps.push(c);
    for n in 1..cutoff {
        c = c * a / (n as f64).sqrt();
        amps.push(c);
    }
    amps
}

/// Pure coherent state `|α⟩⟨α|` truncated at `cutoff`.
pub fn coherent(alpha: CoherentAmplitude, cutoff: usize) -> Result<DensityMatrix> {
    check_dim(cutoff)?;
    let amps = coherent_amplitudes(alpha, cutoff);
    let top = amps[cutoff - 1].norm_sqr();
    if !(top < COHERENT_TAIL_LIMIT) {
        return Err(Error::CutoffTooSmall { cutoff, tail: top, limit: COHERENT_TAIL_LIMIT });
    }
    DensityMatrix::from_pure(&amps)
}

/// Kerr Hamiltonian `K a†²a²`, i.e. `diag(K n(n−1))`.
pub fn kerr_hamiltonian(k: f64, cutoff: usize) -> Result<Operator> {
    diagonal(cutoff, |n| {
        let n = n as f64;
        k * n * (n - 1.0)
    })
}

/// Driven Kerr Hamiltonian `−Δ a†a + K a†²a² − P₀(a + a†)`.
pub fn squeezing_hamiltonian(delta: f64, k: f64, p0: f64, cutoff: usize) -> Result<Operator> {
    let mut h = diagonal(cutoff, |n| {
        let n = n as f64;
        -delta * n + k * n * (n - 1.0)
    })?;
    for n in 1..cutoff {
        let v = C64::new(-p0 * (n as f64).sqrt(), 0.0);
        h.data[(n - 1, n)] = v;
        h.data[(n, n - 1)] = v;
    }
    Ok(h)
}

/// Uhlmann fidelity `(Tr √(√ρ σ √ρ))²`, equal to `|⟨ψ|φ⟩|²` for pure states.
pub fn fidelity(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    same_dim(rho.dim(), sigma.dim())?;
    // Restrict to the numerical support of ρ; null directions only contribute
    // square-root-amplified rounding noise.
    let eig = hermitian_part(&rho.data).symmetric_eigen();
    let support: Vec<usize> = (0..rho.dim()).filter(|&i| eig.eigenvalues[i] > 1e-14).collect();
    let k = support.len();
    if k == 0 {
        return Ok(0.0);
    }
    let vecs = CMatrix::from_fn(rho.dim(), k, |r, c| eig.eigenvectors[(r, support[c])]);
    let roots: Vec<f64> = support.iter().map(|&i| eig.eigenvalues[i].sqrt()).collect();
    let projected = vecs.adjoint() * &sigma.data * &vecs;
    let inner = CMatrix::from_fn(k, k, |i, j| projected[(i, j)] * (roots[i] * roots[j]));
    let tr: f64 =
        hermitian_part(&inner).symmetric_eigenvalues().iter().map(|&l| l.max(0.0).sqrt()).sum();
    Ok((tr * tr).clamp(0.0, 1.0))
}

/// Trace distance `½ ‖ρ − σ‖₁`.
pub fn trace_distance(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    same_dim(rho.dim(), sigma.dim())?;
    let diff = hermitian_part(&(&rho.data - &sigma.data));
    Ok(0.5 * diff.symmetric_eigenvalues().iter().map(|l| l.abs()).sum::<f64>())
}

/// Total population at levels `>= from_level`; zero when `from_level >= dim`.
pub fn tail_mass(rho: &DensityMatrix, from_level: usize) -> f64 {
    (from_level..rho.dim()).map(|n| rho.population(n)).sum::<f64>().clamp(0.0, 1.0)
}

pub(crate) fn hermitize_and_normalize(m: &mut CMatrix) {
    let n = m.nrows();
    for i in 0..n {
        m[(i, i)].im = 0.0;
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)].conj());
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
    }
    let tr = m.trace().re;
    if tr != 0.0 && tr.is_finite() {
        m.iter_mut().for_each(|z| *z /= tr);
    }
}

pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()).map(|z| z * 0.5)
}

fn diagonal(cutoff: usize, f: impl Fn(usize) -> f64) -> Result<Operator> {
    check_dim(cutoff)?;
    let mut m = CMatrix::zeros(cutoff, cutoff);
    for n in 0..cutoff {
        m[(n, n)] = C64::new(f(n), 0.0);
    }
    Ok(Operator { data: m })
}

fn check_dim(dim: usize) -> Result<()> {
    if dim < 2 {
        return Err(Error::InvalidDimension { dim, reason: "Fock cutoff must be at least 2" });
    }
    Ok(())
}

fn check_square(m: &CMatrix) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch { left: m.nrows(), right: m.ncols() });
    }
    check_dim(m.nrows())
}

fn same_dim(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { left: a, right: b });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn destroy_small_cutoffs() {
        let a2 = destroy(2).unwrap();
        assert_eq!(a2.matrix()[(0, 1)], c(1.0));
        assert_eq!(a2.matrix()[(0, 0)], c(0.0));
        assert_eq!(a2.matrix()[(1, 0)], c(0.0));
        assert_eq!(a2.matrix()[(1, 1)], c(0.0));
        let a3 = destroy(3).unwrap();
        assert_abs_diff_eq!(a3.matrix()[(1, 2)].re, 1.41421, epsilon = 1e-5);
        assert!(matches!(destroy(1), Err(Error::InvalidDimension { .. })));
    }

    #[test]
    fn canonical_commutator_below_truncation_edge() {
        let n = 20;
        let a = destroy(n).unwrap();
        let ad = a.adjoint();
        let comm = a.mul(&ad).unwrap().matrix() - ad.mul(&a).unwrap().matrix();
        let mut err: f64 = 0.0;
        for i in 0..n - 1 {
            for j in 0..n - 1 {
                let expected = if i == j { 1.0 } else { 0.0 };
                err = err.max((comm[(i, j)] - c(expected)).norm());
            }
        }
        assert!(err < 1e-12);
    }

    #[test]
    fn number_operator_from_ladder_is_exact() {
        let a = destroy(12).unwrap();
        let n = a.adjoint().mul(&a).unwrap();
        // √n·√n reproduces n up to one rounding of the square root.
        for k in 0..12 {
            assert!((n.matrix()[(k, k)].re - k as f64).abs() <= 4.0 * f64::EPSILON * k as f64);
            assert_eq!(number(12).unwrap().matrix()[(k, k)].re, k as f64);
        }
    }

    #[test]
    fn vacuum_is_coherent_zero() {
        let rho = coherent(CoherentAmplitude::new(0.0, 0.0), 10).unwrap();
        assert_abs_diff_eq!(rho.population(0), 1.0, epsilon = 1e-15);
        assert_eq!(rho, DensityMatrix::vacuum(10).unwrap());
    }

    #[test]
    fn coherent_mean_photon_number() {
        let rho = coherent(CoherentAmplitude::new(0.80, -0.45), 40).unwrap();
        let n_op = number(40).unwrap();
        let n = rho.expect(&n_op).unwrap();
        assert_abs_diff_eq!(n.re, 0.8425, epsilon = 1e-6);
    }

    #[test]
    fn coherent_matches_poissonian_amplitudes() {
        let cutoff = 30;
        let rho = coherent(CoherentAmplitude::new(1.0, 0.0), cutoff).unwrap();
        // Independent closed form e^{-1/2}/√(n!) via log-gamma-free factorial product.
        let mut fact = 1.0f64;
        let psi: Vec<C64> = (0..cutoff)
            .map(|n| {
                if n > 0 {
                    fact *= n as f64;
                }
                c((-0.5f64).exp() / fact.sqrt())
            })
            .collect();
        let reference = DensityMatrix::from_pure(&psi).unwrap();
        assert!(fidelity(&rho, &reference).unwrap() >= 1.0 - 1e-10);
        for n in 0..15 {
            let lambda: f64 = 1.0;
            let mut p = (-lambda).exp();
            for k in 1..=n {
                p *= lambda / k as f64;
            }
            assert!((rho.population(n) - p).abs() <= 1e-8 * p);
        }
    }

    #[test]
    fn coherent_rejects_small_cutoff() {
        let err = coherent(CoherentAmplitude::new(2.0, 0.0), 8).unwrap_err();
        assert!(matches!(err, Error::CutoffTooSmall { .. }));
    }

    #[test]
    fn kerr_diagonal() {
        let h = kerr_hamiltonian(1.2, 10).unwrap();
        assert_abs_diff_eq!(h.matrix()[(2, 2)].re, 2.4, epsilon = 1e-12);
        assert_eq!(h.matrix()[(0, 0)].re, 0.0);
        assert_eq!(h.matrix()[(1, 1)].re, 0.0);
        let h = kerr_hamiltonian(0.5, 10).unwrap();
        assert_abs_diff_eq!(h.matrix()[(3, 3)].re, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn squeezing_hamiltonian_elements() {
        let n = 40;
        let h = squeezing_hamiltonian(1.0, 0.5, 1.0, n).unwrap();
        assert!(h.hermiticity_error() < 1e-12);
        assert_abs_diff_eq!(h.matrix()[(0, 1)].re, -1.0, epsilon = 1e-15);
        let h = squeezing_hamiltonian(0.3, 2.0, 0.7, n).unwrap();
        assert_abs_diff_eq!(h.matrix()[(0, 1)].re, -0.7, epsilon = 1e-15);

        // Cross-check against ladder-operator construction.
        let a = destroy(n).unwrap();
        let ad = a.adjoint();
        let num = ad.mul(&a).unwrap();
        let ad2a2 = ad.mul(&ad).unwrap().mul(&a).unwrap().mul(&a).unwrap();
        let built = num
            .scale(-0.3)
            .add(&ad2a2.scale(2.0))
            .unwrap()
            .add(&a.add(&ad).unwrap().scale(-0.7))
            .unwrap();
        assert!(max_abs_diff(built.matrix(), h.matrix()) < 1e-9);

        let pure_number = squeezing_hamiltonian(1.5, 0.0, 0.0, 6).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { -1.5 * i as f64 } else { 0.0 };
                assert_eq!(pure_number.matrix()[(i, j)].re, want);
            }
        }
    }

    #[test]
    fn fidelity_cases() {
        let v = DensityMatrix::vacuum(30).unwrap();
        let one = DensityMatrix::fock(1, 30).unwrap();
        assert_abs_diff_eq!(fidelity(&v, &v).unwrap(), 1.0, epsilon = 1e-10);
        assert!(fidelity(&v, &one).unwrap() < 1e-12);
        let a1 = coherent(CoherentAmplitude::new(1.0, 0.0), 30).unwrap();
        assert_abs_diff_eq!(fidelity(&a1, &v).unwrap(), (-1.0f64).exp(), epsilon = 1e-8);
        let mixed = DensityMatrix::maximally_mixed(30).unwrap();
        assert_abs_diff_eq!(fidelity(&mixed, &mixed).unwrap(), 1.0, epsilon = 1e-10);
        assert!(fidelity(&v, &DensityMatrix::vacuum(10).unwrap()).is_err());
    }

    #[test]
    fn tail_mass_cases() {
        let v = DensityMatrix::vacuum(10).unwrap();
        assert_eq!(tail_mass(&v, 1), 0.0);
        assert_eq!(tail_mass(&v, 50), 0.0);
        let a2 = coherent(CoherentAmplitude::new(2.0, 0.0), 40).unwrap();
        assert!(tail_mass(&a2, 39) < 1e-10);
        let m = DensityMatrix::maximally_mixed(4).unwrap();
        assert_abs_diff_eq!(tail_mass(&m, 2), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn trace_distance_cases() {
        let v = DensityMatrix::vacuum(5).unwrap();
        let one = DensityMatrix::fock(1, 5).unwrap();
        assert_abs_diff_eq!(trace_distance(&v, &one).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(trace_distance(&v, &v).unwrap(), 0.0, epsilon = 1e-12);
    }
}
