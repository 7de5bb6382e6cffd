//! Density-matrix time evolution.
//!
//! The master equation is integrated with fixed-step classical RK4. After every
//! step the state is re-Hermitized and its trace renormalized. Operators are
//! stored densely in [`Operator`], but the integrator works on a compressed
//! row form of `H_eff = H − (i/2) Σ L†L` and the jump operators, since every
//! operator in use is banded.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fock::{self, CMatrix, DensityMatrix, Operator, C64};

/// Default integrator step.
pub const DEFAULT_DT: f64 = 1e-3;

/// Ratio between loss and dephasing rates in the experiment configurations.
pub const DEPHASING_FRACTION: f64 = 1.0 / 20.0;

/// Guard on the population of the top Fock level of every mode.
pub const TAIL_LIMIT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelKind {
    /// Jump operator `√κ a`.
    Loss,
    /// Jump operator `√κ a†a`.
    Dephasing,
}

/// Which mode a channel acts on when the space carries an auxiliary mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    #[default]
    System,
    Auxiliary,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseChannel {
    pub kind: ChannelKind,
    pub rate: f64,
    pub mode: Mode,
}

impl NoiseChannel {
    pub fn loss(rate: f64) -> Self {
        NoiseChannel { kind: ChannelKind::Loss, rate, mode: Mode::System }
    }

    pub fn dephasing(rate: f64) -> Self {
        NoiseChannel { kind: ChannelKind::Dephasing, rate, mode: Mode::System }
    }

    /// Photon loss at `kappa` plus dephasing at `kappa / 20`.
    pub fn loss_and_dephasing(kappa: f64) -> Vec<NoiseChannel> {
        vec![Self::loss(kappa), Self::dephasing(kappa * DEPHASING_FRACTION)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Markovian,
    ReactionCoordinate,
}

/// Tensor structure of the Hilbert space: `system ⊗ auxiliary`, system index slow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub system_dim: usize,
    pub aux_dim: usize,
}

impl Layout {
    pub fn single(dim: usize) -> Self {
        Layout { system_dim: dim, aux_dim: 1 }
    }

    pub fn dim(&self) -> usize {
        self.system_dim * self.aux_dim
    }

    pub fn has_aux(&self) -> bool {
        self.aux_dim > 1
    }
}

#[derive(Clone, Debug)]
pub struct EvolutionSpec {
    pub hamiltonian: Operator,
    pub channels: Vec<NoiseChannel>,
    pub dt: f64,
    pub regime: Regime,
    pub layout: Layout,
}

impl EvolutionSpec {
    pub fn markovian(hamiltonian: Operator, channels: Vec<NoiseChannel>) -> Self {
        let layout = Layout::single(hamiltonian.dim());
        EvolutionSpec { hamiltonian, channels, dt: DEFAULT_DT, regime: Regime::Markovian, layout }
    }

    pub fn reaction_coordinate(hamiltonian: Operator, channels: Vec<NoiseChannel>) -> Self {
        EvolutionSpec { regime: Regime::ReactionCoordinate, ..Self::markovian(hamiltonian, channels) }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    /// Same spec with every channel rate set to zero.
    pub fn noiseless(&self) -> Self {
        let mut s = self.clone();
        s.channels.iter_mut().for_each(|c| c.rate = 0.0);
        s
    }

    /// Same spec with the Hamiltonian negated.
    pub fn reversed(&self) -> Self {
        let mut s = self.clone();
        s.hamiltonian = s.hamiltonian.scale(-1.0);
        s
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if self.hamiltonian.dim() != self.layout.dim() {
            return Err(Error::DimensionMismatch { left: self.hamiltonian.dim(), right: self.layout.dim() });
        }
        for c in &self.channels {
            if !(c.rate >= 0.0 && c.rate.is_finite()) {
                return Err(Error::InvalidArgument(format!("channel rate must be >= 0, got {}", c.rate)));
            }
            if c.mode == Mode::Auxiliary && !self.layout.has_aux() {
                return Err(Error::InvalidArgument("auxiliary channel without auxiliary mode".into()));
            }
        }
        Ok(())
    }
}

/// Reaction-coordinate (pseudomode) parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RcParams {
    pub rc_cutoff: usize,
    /// Exchange coupling λ between system and reaction coordinate.
    pub coupling: f64,
    /// Markovian damping γ_rc of the reaction coordinate.
    pub rc_damping: f64,
    /// Frequency Ω of the reaction coordinate.
    pub rc_frequency: f64,
}

impl RcParams {
    pub const DEFAULT_CUTOFF: usize = 6;

    /// Default memoryful configuration for an effective loss rate `kappa`:
    /// `γ_rc = 2κ`, `λ = √(κ γ_rc)/2` (so `4λ²/γ_rc = κ`), `Ω = 0`.
    pub fn for_loss_rate(kappa: f64) -> Self {
        let rc_damping = 2.0 * kappa;
        RcParams {
            rc_cutoff: Self::DEFAULT_CUTOFF,
            coupling: (kappa * rc_damping).sqrt() / 2.0,
            rc_damping,
            rc_frequency: 0.0,
        }
    }

    /// Coupling for a given damping that reproduces loss rate `kappa` in the
    /// adiabatic-elimination limit.
    pub fn markov_limit(kappa: f64, rc_damping: f64) -> Self {
        RcParams {
            rc_cutoff: Self::DEFAULT_CUTOFF,
            coupling: (kappa * rc_damping).sqrt() / 2.0,
            rc_damping,
            rc_frequency: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.rc_cutoff < 3 {
            return Err(Error::InvalidDimension { dim: self.rc_cutoff, reason: "RC cutoff must be at least 3" });
        }
        if !(self.rc_damping > 0.0) {
            return Err(Error::InvalidArgument(format!("RC damping must be > 0, got {}", self.rc_damping)));
        }
        Ok(())
    }
}

/// Integration diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvolutionStats {
    pub steps: usize,
    /// Largest `|Tr ρ − 1|` seen after a step, before renormalization.
    pub max_trace_drift: f64,
}

// ---------------------------------------------------------------------------
// Sparse kernels

#[derive(Clone, Debug)]
struct Csr {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl Csr {
    fn from_dense(m: &CMatrix) -> Self {
        let n = m.nrows();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            for j in 0..n {
                let v = m[(i, j)];
                if v != C64::new(0.0, 0.0) {
                    cols.push(j);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Csr { n, row_ptr, cols, vals }
    }

    fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `out = A · x` for row-major dense `x`.
    fn left_mul(&self, x: &[C64], out: &mut [C64]) {
        let n = self.n;
        out.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        for i in 0..n {
            let orow = &mut out[i * n..(i + 1) * n];
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                let a = self.vals[idx];
                let xrow = &x[self.cols[idx] * n..(self.cols[idx] + 1) * n];
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o += a * xv;
                }
            }
        }
    }

    /// `out += x · A` for row-major dense `x`.
    fn right_mul_add(&self, x: &[C64], out: &mut [C64]) {
        let n = self.n;
        for i in 0..n {
            let xrow = &x[i * n..(i + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (k, &xv) in xrow.iter().enumerate() {
                if xv == C64::new(0.0, 0.0) {
                    continue;
                }
                for idx in self.row_ptr[k]..self.row_ptr[k + 1] {
                    orow[self.cols[idx]] += xv * self.vals[idx];
                }
            }
        }
    }
}

/// Precompiled generator of a Markovian master equation.
struct Generator {
    n: usize,
    h_eff: Csr,
    jumps: Vec<(Csr, Csr)>,
}

impl Generator {
    fn new(spec: &EvolutionSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.layout.dim();
        let mut h_eff = spec.hamiltonian.matrix().clone();
        let mut jumps = Vec::new();
        for ch in &spec.channels {
            if ch.rate == 0.0 {
                continue;
            }
            let l = jump_operator(ch, spec.layout)?.matrix().map(|z| z * ch.rate.sqrt());
            let ldag = l.adjoint();
            let ldl = &ldag * &l;
            h_eff -= ldl.map(|z| z * Complex64::new(0.0, 0.5));
            jumps.push((Csr::from_dense(&l), Csr::from_dense(&ldag)));
        }
        Ok(Generator { n, h_eff: Csr::from_dense(&h_eff), jumps })
    }

    /// `out = L[ρ]` for Hermitian `ρ`, using `−i(H_eff ρ − ρ H_eff†) = M + M†`, `M = −i H_eff ρ`.
    fn apply(&self, rho: &[C64], out: &mut [C64], scratch: &mut [C64]) {
        let n = self.n;
        self.h_eff.left_mul(rho, scratch);
        let minus_i = C64::new(0.0, -1.0);
        for i in 0..n {
            for j in i..n {
                let a = minus_i * scratch[i * n + j];
                let b = minus_i * scratch[j * n + i];
                let v = a + b.conj();
                out[i * n + j] = v;
                out[j * n + i] = v.conj();
            }
        }
        for (l, ldag) in &self.jumps {
            l.left_mul(rho, scratch);
            ldag.right_mul_add(scratch, out);
        }
    }

    #[allow(dead_code)]
    fn nnz(&self) -> usize {
        self.h_eff.nnz() + self.jumps.iter().map(|(l, _)| l.nnz()).sum::<usize>()
    }
}

/// Dense operator for a channel on the given layout.
fn jump_operator(ch: &NoiseChannel, layout: Layout) -> Result<Operator> {
    let single = |dim: usize| match ch.kind {
        ChannelKind::Loss => fock::destroy(dim),
        ChannelKind::Dephasing => fock::number(dim),
    };
    if !layout.has_aux() {
        return single(layout.system_dim);
    }
    Ok(match ch.mode {
        Mode::System => single(layout.system_dim)?.kron(&fock::Operator::identity(layout.aux_dim)?),
        Mode::Auxiliary => fock::Operator::identity(layout.system_dim)?.kron(&single(layout.aux_dim)?),
    })
}

fn to_flat(m: &CMatrix) -> Vec<C64> {
    let n = m.nrows();
    let mut v = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            v.push(m[(i, j)]);
        }
    }
    v
}

fn from_flat(v: &[C64], n: usize) -> CMatrix {
    CMatrix::from_fn(n, n, |i, j| v[i * n + j])
}

fn flat_trace(v: &[C64], n: usize) -> C64 {
    (0..n).map(|i| v[i * n + i]).sum()
}

fn flat_hermitize_normalize(v: &mut [C64], n: usize) {
    for i in 0..n {
        v[i * n + i].im = 0.0;
        for j in (i + 1)..n {
            let avg = 0.5 * (v[i * n + j] + v[j * n + i].conj());
            v[i * n + j] = avg;
            v[j * n + i] = avg.conj();
        }
    }
    let tr = flat_trace(v, n).re;
    v.iter_mut().for_each(|z| *z /= tr);
}

/// `dρ/dt` for a Markovian spec.
pub fn lindblad_rhs(rho: &DensityMatrix, spec: &EvolutionSpec) -> Result<CMatrix> {
    if spec.regime != Regime::Markovian {
        return Err(Error::InvalidArgument("lindblad_rhs requires a Markovian spec".into()));
    }
    if rho.dim() != spec.layout.dim() {
        return Err(Error::DimensionMismatch { left: rho.dim(), right: spec.layout.dim() });
    }
    let g = Generator::new(spec)?;
    let n = rho.dim();
    let x = to_flat(rho.matrix());
    let mut out = vec![C64::new(0.0, 0.0); n * n];
    let mut scratch = out.clone();
    g.apply(&x, &mut out, &mut scratch);
    Ok(from_flat(&out, n))
}

struct Rk4 {
    g: Generator,
    k: [Vec<C64>; 4],
    stage: Vec<C64>,
    scratch: Vec<C64>,
}

impl Rk4 {
    fn new(g: Generator) -> Self {
        let len = g.n * g.n;
        let z = vec![C64::new(0.0, 0.0); len];
        Rk4 { g, k: [z.clone(), z.clone(), z.clone(), z.clone()], stage: z.clone(), scratch: z }
    }

    fn step(&mut self, y: &mut [C64], h: f64) {
        let Rk4 { g, k, stage, scratch } = self;
        g.apply(y, &mut k[0], scratch);
        for (s, (&yv, &kv)) in stage.iter_mut().zip(y.iter().zip(k[0].iter())) {
            *s = yv + kv * (0.5 * h);
        }
        g.apply(stage, &mut k[1], scratch);
        for (s, (&yv, &kv)) in stage.iter_mut().zip(y.iter().zip(k[1].iter())) {
            *s = yv + kv * (0.5 * h);
        }
        g.apply(stage, &mut k[2], scratch);
        for (s, (&yv, &kv)) in stage.iter_mut().zip(y.iter().zip(k[2].iter())) {
            *s = yv + kv * h;
        }
        g.apply(stage, &mut k[3], scratch);
        let w = h / 6.0;
        for (i, yv) in y.iter_mut().enumerate() {
            *yv += (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]) * w;
        }
    }
}

/// Evolves `rho0` to every time in `times` (non-decreasing, `>= 0`), returning one
/// state per requested time.
pub fn evolve_checkpoints(
    rho0: &DensityMatrix,
    spec: &EvolutionSpec,
    times: &[f64],
) -> Result<(Vec<DensityMatrix>, EvolutionStats)> {
    if spec.regime != Regime::Markovian {
        return Err(Error::InvalidArgument(
            "evolve requires a Markovian spec; extend reaction-coordinate specs with rc_extend".into(),
        ));
    }
    if rho0.dim() != spec.layout.dim() {
        return Err(Error::DimensionMismatch { left: rho0.dim(), right: spec.layout.dim() });
    }
    let mut prev = 0.0;
    for &t in times {
        if !(t >= prev) || !t.is_finite() {
            return Err(Error::InvalidArgument(format!("times must be finite, >= 0 and non-decreasing (got {t})")));
        }
        prev = t;
    }
    let n = rho0.dim();
    let mut rk = Rk4::new(Generator::new(spec)?);
    let mut y = to_flat(rho0.matrix());
    let mut stats = EvolutionStats::default();
    let mut t_now = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        let span = target - t_now;
        let full = (span / spec.dt * (1.0 - 1e-12)).floor() as usize;
        let mut remaining = span;
        for s in 0..=full {
            let h = if s < full { spec.dt } else { remaining };
            if h <= 0.0 {
                break;
            }
            rk.step(&mut y, h);
            remaining -= h;
            stats.steps += 1;
            let tr = flat_trace(&y, n);
            if !tr.re.is_finite() || !tr.im.is_finite() || tr.re <= 0.0 {
                return Err(Error::IntegrationBlowup { t: target - remaining });
            }
            stats.max_trace_drift = stats.max_trace_drift.max((tr - 1.0).norm());
            flat_hermitize_normalize(&mut y, n);
        }
        t_now = target;
        if y.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::IntegrationBlowup { t: target });
        }
        let rho = DensityMatrix::from_matrix_normalized(from_flat(&y, n));
        check_tails(&rho, spec.layout)?;
        out.push(rho);
    }
    Ok((out, stats))
}

/// Evolves `rho0` for time `t` under `spec`.
pub fn evolve(rho0: &DensityMatrix, spec: &EvolutionSpec, t: f64) -> Result<DensityMatrix> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("evolution time must be >= 0, got {t}")));
    }
    Ok(evolve_checkpoints(rho0, spec, &[t])?.0.pop().expect("one checkpoint"))
}

/// Population of the top level of each mode must stay below [`TAIL_LIMIT`].
fn check_tails(rho: &DensityMatrix, layout: Layout) -> Result<()> {
    let (ns, na) = (layout.system_dim, layout.aux_dim);
    let m = rho.matrix();
    let mut sys_top = 0.0;
    let mut aux_top = 0.0;
    for s in 0..ns {
        for a in 0..na {
            let p = m[(s * na + a, s * na + a)].re;
            if s == ns - 1 {
                sys_top += p;
            }
            if a == na - 1 {
                aux_top += p;
            }
        }
    }
    if sys_top > TAIL_LIMIT {
        return Err(Error::CutoffTooSmall { cutoff: ns, tail: sys_top, limit: TAIL_LIMIT });
    }
    if layout.has_aux() && aux_top > TAIL_LIMIT {
        return Err(Error::CutoffTooSmall { cutoff: na, tail: aux_top, limit: TAIL_LIMIT });
    }
    Ok(())
}

/// Noisy echo: `+H` for `τ/2`, then `−H` for `τ/2`, channels active throughout.
pub fn fiducial_sequence(rho: &DensityMatrix, spec: &EvolutionSpec, tau: f64) -> Result<DensityMatrix> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("fiducial duration must be >= 0, got {tau}")));
    }
    if tau == 0.0 {
        if rho.dim() != spec.layout.dim() {
            return Err(Error::DimensionMismatch { left: rho.dim(), right: spec.layout.dim() });
        }
        return Ok(rho.clone());
    }
    let mid = evolve(rho, spec, tau / 2.0)?;
    evolve(&mid, &spec.reversed(), tau / 2.0)
}

/// Fiducial sequence in the reaction-coordinate regime. Only the system
/// Hamiltonian is reversed; the system–RC coupling and RC damping are part of
/// the environment and keep acting unchanged.
pub fn fiducial_sequence_rc(
    rho_ext: &DensityMatrix,
    spec: &EvolutionSpec,
    rc: &RcParams,
    tau: f64,
) -> Result<DensityMatrix> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("fiducial duration must be >= 0, got {tau}")));
    }
    let forward = rc_extend(spec, rc)?;
    if tau == 0.0 {
        if rho_ext.dim() != forward.layout.dim() {
            return Err(Error::DimensionMismatch { left: rho_ext.dim(), right: forward.layout.dim() });
        }
        return Ok(rho_ext.clone());
    }
    let backward = rc_extend(&spec.reversed(), rc)?;
    let mid = evolve(rho_ext, &forward, tau / 2.0)?;
    evolve(&mid, &backward, tau / 2.0)
}

/// Maps a reaction-coordinate spec onto a Markovian spec on `system ⊗ RC`:
/// `H_ext = H ⊗ I + Ω b†b + λ(a†b + a b†)`, RC loss `√γ_rc b`. System loss
/// channels are replaced by the RC-mediated loss; dephasing stays on the system.
pub fn rc_extend(spec: &EvolutionSpec, rc: &RcParams) -> Result<EvolutionSpec> {
    if spec.regime != Regime::ReactionCoordinate {
        return Err(Error::InvalidArgument("rc_extend requires a reaction-coordinate spec".into()));
    }
    rc.validate()?;
    if spec.layout.has_aux() {
        return Err(Error::InvalidArgument("spec already carries an auxiliary mode".into()));
    }
    let ns = spec.hamiltonian.dim();
    let nr = rc.rc_cutoff;
    let id_s = Operator::identity(ns)?;
    let id_r = Operator::identity(nr)?;
    let a = fock::destroy(ns)?;
    let b = fock::destroy(nr)?;
    let h_sys = spec.hamiltonian.kron(&id_r);
    let h_rc = id_s.kron(&fock::number(nr)?).scale(rc.rc_frequency);
    let exchange = a.adjoint().kron(&b).add(&a.kron(&b.adjoint()))?.scale(rc.coupling);
    let hamiltonian = h_sys.add(&h_rc)?.add(&exchange)?;

    let mut channels: Vec<NoiseChannel> = spec
        .channels
        .iter()
        .filter(|c| c.kind == ChannelKind::Dephasing)
        .copied()
        .collect();
    channels.push(NoiseChannel { kind: ChannelKind::Loss, rate: rc.rc_damping, mode: Mode::Auxiliary });
    Ok(EvolutionSpec {
        hamiltonian,
        channels,
        dt: spec.dt,
        regime: Regime::Markovian,
        layout: Layout { system_dim: ns, aux_dim: nr },
    })
}

/// `ρ_sys ⊗ |0⟩⟨0|` on the extended space.
pub fn rc_embed(rho: &DensityMatrix, rc_dim: usize) -> Result<DensityMatrix> {
    let vac = DensityMatrix::vacuum(rc_dim)?;
    let data = rho.matrix().kronecker(vac.matrix());
    Ok(DensityMatrix::from_matrix_normalized(data))
}

/// Partial trace over the RC factor.
pub fn rc_reduce(rho_ext: &DensityMatrix, system_dim: usize, rc_dim: usize) -> Result<DensityMatrix> {
    if system_dim * rc_dim != rho_ext.dim() || system_dim < 2 || rc_dim < 1 {
        return Err(Error::InvalidArgument(format!(
            "dimension {} does not factor as {system_dim} x {rc_dim}",
            rho_ext.dim()
        )));
    }
    let m = rho_ext.matrix();
    let reduced = CMatrix::from_fn(system_dim, system_dim, |i, j| {
        (0..rc_dim).map(|r| m[(i * rc_dim + r, j * rc_dim + r)]).sum()
    });
    let mut out = reduced;
    // Hermitize only; the partial trace preserves the trace exactly up to rounding.
    let n = system_dim;
    for i in 0..n {
        out[(i, i)].im = 0.0;
        for j in (i + 1)..n {
            let avg = 0.5 * (out[(i, j)] + out[(j, i)].conj());
            out[(i, j)] = avg;
            out[(j, i)] = avg.conj();
        }
    }
    Ok(DensityMatrix::from_matrix_normalized(out))
}
