//! DAEM training data: noisy/reference Wigner pairs from fiducial echoes.
//!
//! Markovian records stack five channels, one per fiducial loss rate, over a
//! shared `(α, t_k, τ)`; the target is the forward state `ρ(t_k)`.
//! Non-Markovian records hold one channel: the reduced state after a fiducial
//! echo of duration `τ₁` in the reaction-coordinate model, with the echo of
//! duration `τ₂ = τ₁ − Δτ` from the same forward state as target.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{self, Reader, Writer};
use crate::config::{join, ConfigMap};
use crate::dynamics::{self, EvolutionSpec, NoiseChannel, RcParams, Regime};
use crate::error::{Error, Result};
use crate::fock::{self, CoherentAmplitude, DensityMatrix, Operator};
use crate::parallel::Execution;
use crate::wigner::{self, PhaseGrid, WignerGrid};

pub const DATASET_MAGIC: [u8; 4] = *b"CVQM";
pub const RASTER_MAGIC: [u8; 4] = *b"CVQR";
pub const FORMAT_VERSION: u16 = 1;

/// Salt separating the test-state stream from the training-state stream.
const TEST_SEED_SALT: u64 = 0x7E57_57A7_E5EE_D000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HamiltonianSpec {
    /// `K a†²a²`.
    Kerr { k: f64 },
    /// `−Δ a†a + K a†²a² − P₀(a + a†)`.
    Squeezing { delta: f64, k: f64, p0: f64 },
}

impl HamiltonianSpec {
    pub fn build(&self, cutoff: usize) -> Result<Operator> {
        match *self {
            HamiltonianSpec::Kerr { k } => fock::kerr_hamiltonian(k, cutoff),
            HamiltonianSpec::Squeezing { delta, k, p0 } => fock::squeezing_hamiltonian(delta, k, p0, cutoff),
        }
    }

    fn write(&self, c: &mut ConfigMap, prefix: &str) {
        match *self {
            HamiltonianSpec::Kerr { k } => {
                c.insert(&format!("{prefix}hamiltonian"), "kerr");
                c.insert(&format!("{prefix}kerr"), k);
            }
            HamiltonianSpec::Squeezing { delta, k, p0 } => {
                c.insert(&format!("{prefix}hamiltonian"), "squeezing");
                c.insert(&format!("{prefix}kerr"), k);
                c.insert(&format!("{prefix}detuning"), delta);
                c.insert(&format!("{prefix}drive"), p0);
            }
        }
    }

    fn read(c: &ConfigMap, prefix: &str, default: HamiltonianSpec) -> Result<Self> {
        let kind = c.get::<String>(&format!("{prefix}hamiltonian"))?;
        let base = match kind.as_deref() {
            None => default,
            Some("kerr") => match default {
                HamiltonianSpec::Kerr { .. } => default,
                _ => HamiltonianSpec::Kerr { k: 1.2 },
            },
            Some("squeezing") => match default {
                HamiltonianSpec::Squeezing { .. } => default,
                _ => HamiltonianSpec::Squeezing { delta: 1.0, k: 0.5, p0: 1.0 },
            },
            Some(other) => {
                return Err(Error::Config { line: 0, message: format!("unknown hamiltonian `{other}` (kerr|squeezing)") })
            }
        };
        Ok(match base {
            HamiltonianSpec::Kerr { k } => HamiltonianSpec::Kerr { k: c.get_or(&format!("{prefix}kerr"), k)? },
            HamiltonianSpec::Squeezing { delta, k, p0 } => HamiltonianSpec::Squeezing {
                delta: c.get_or(&format!("{prefix}detuning"), delta)?,
                k: c.get_or(&format!("{prefix}kerr"), k)?,
                p0: c.get_or(&format!("{prefix}drive"), p0)?,
            },
        })
    }
}

pub(crate) fn regime_name(r: Regime) -> &'static str {
    match r {
        Regime::Markovian => "markovian",
        Regime::ReactionCoordinate => "reaction_coordinate",
    }
}

pub(crate) fn parse_regime(s: &str) -> Result<Regime> {
    match s {
        "markovian" => Ok(Regime::Markovian),
        "reaction_coordinate" | "rc" => Ok(Regime::ReactionCoordinate),
        other => Err(Error::Config { line: 0, message: format!("unknown regime `{other}`") }),
    }
}

pub(crate) fn write_grid(c: &mut ConfigMap, prefix: &str, g: &PhaseGrid) {
    c.insert(&format!("{prefix}grid_n"), format!("{},{}", g.nq, g.np));
    c.insert(&format!("{prefix}grid_bounds"), join(&[g.q_min, g.q_max, g.p_min, g.p_max]));
}

pub(crate) fn read_grid(c: &ConfigMap, prefix: &str, default: PhaseGrid) -> Result<PhaseGrid> {
    let mut g = default;
    if let Some(n) = c.get_list::<usize>(&format!("{prefix}grid_n"))? {
        match n[..] {
            [a] => (g.nq, g.np) = (a, a),
            [a, b] => (g.nq, g.np) = (a, b),
            _ => return Err(Error::Config { line: 0, message: "grid_n takes one or two values".into() }),
        }
    }
    if let Some(b) = c.get_list::<f64>(&format!("{prefix}grid_bounds"))? {
        match b[..] {
            [h] => (g.q_min, g.q_max, g.p_min, g.p_max) = (-h, h, -h, h),
            [a, b2, c2, d] => (g.q_min, g.q_max, g.p_min, g.p_max) = (a, b2, c2, d),
            _ => return Err(Error::Config { line: 0, message: "grid_bounds takes one or four values".into() }),
        }
    }
    g.validate()?;
    Ok(g)
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct DaemConfig {
    pub hamiltonian: HamiltonianSpec,
    pub kappa_forward: f64,
    pub kappa_set: Vec<f64>,
    pub t_train: f64,
    pub time_samples: Vec<f64>,
    pub tau_samples: Vec<f64>,
    pub n_initial_states: usize,
    /// Initial amplitudes are drawn uniformly from `|α| ≤ max_amplitude`.
    pub max_amplitude: f64,
    pub seed: u64,
    pub regime: Regime,
    pub grid: PhaseGrid,
    pub cutoff: usize,
    pub dt: f64,
    pub rc_cutoff: usize,
    pub pairs_per_trajectory: usize,
    pub delta_tau_min: f64,
    pub delta_tau_max: f64,
}

const CONFIG_KEYS: &[&str] = &[
    "hamiltonian",
    "kerr",
    "detuning",
    "drive",
    "kappa_forward",
    "kappa_set",
    "t_train",
    "time_samples",
    "tau_samples",
    "n_initial_states",
    "max_amplitude",
    "seed",
    "regime",
    "grid_n",
    "grid_bounds",
    "cutoff",
    "dt",
    "rc_cutoff",
    "pairs_per_trajectory",
    "delta_tau_range",
];

impl DaemConfig {
    /// Kerr benchmark: `K = 1.2`, forward loss 0.3, fiducial rates 0.3..0.7.
    pub fn kerr() -> Self {
        DaemConfig {
            hamiltonian: HamiltonianSpec::Kerr { k: 1.2 },
            kappa_forward: 0.3,
            kappa_set: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            t_train: 1.0,
            time_samples: linspace(0.0, 1.0, 21),
            tau_samples: linspace(0.0, 1.0, 11),
            n_initial_states: 20,
            max_amplitude: 2.0,
            seed: 0,
            regime: Regime::Markovian,
            grid: PhaseGrid::default(),
            cutoff: 24,
            dt: 2e-3,
            rc_cutoff: RcParams::DEFAULT_CUTOFF,
            pairs_per_trajectory: 8,
            delta_tau_min: 0.05,
            delta_tau_max: 0.25,
        }
    }

    /// Driven squeezing benchmark with loss rates scaled by one third.
    pub fn squeezing() -> Self {
        DaemConfig {
            hamiltonian: HamiltonianSpec::Squeezing { delta: 1.0, k: 0.5, p0: 1.0 },
            kappa_forward: 0.1,
            kappa_set: vec![0.1, 0.133, 0.167, 0.2, 0.233],
            ..Self::kerr()
        }
    }

    /// Driven squeezing in the reaction-coordinate environment.
    pub fn nonmarkovian() -> Self {
        DaemConfig {
            hamiltonian: HamiltonianSpec::Squeezing { delta: 1.0, k: 0.5, p0: 1.0 },
            regime: Regime::ReactionCoordinate,
            // Six RC levels leave ~1e-6 of tail mass for |α| near 2.
            rc_cutoff: 7,
            ..Self::kerr()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.t_train > 0.0 && self.t_train.is_finite()) {
            return bad(format!("t_train must be positive, got {}", self.t_train));
        }
        if self.kappa_set.is_empty() || self.kappa_set.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("kappa_set must be non-empty and strictly increasing".into());
        }
        if self.regime == Regime::Markovian && self.kappa_set.len() != 5 {
            return bad(format!("Markovian protocol needs 5 loss rates, got {}", self.kappa_set.len()));
        }
        if self.kappa_set.iter().chain([&self.kappa_forward]).any(|&k| !(k >= 0.0 && k.is_finite())) {
            return bad("loss rates must be finite and >= 0".into());
        }
        for (name, xs) in [("time_samples", &self.time_samples), ("tau_samples", &self.tau_samples)] {
            if xs.is_empty() {
                return bad(format!("{name} is empty"));
            }
            if let Some(x) = xs.iter().find(|&&x| !(0.0..=self.t_train).contains(&x)) {
                return bad(format!("{name} entry {x} outside [0, {}]", self.t_train));
            }
            if xs.windows(2).any(|w| w[1] < w[0]) {
                return bad(format!("{name} must be non-decreasing"));
            }
        }
        if self.n_initial_states == 0 {
            return bad("n_initial_states must be >= 1".into());
        }
        if !(self.max_amplitude > 0.0) {
            return bad("max_amplitude must be positive".into());
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive".into());
        }
        if self.regime == Regime::ReactionCoordinate {
            if !(self.delta_tau_min > 0.0 && self.delta_tau_max >= self.delta_tau_min && self.delta_tau_max <= self.t_train) {
                return bad(format!("delta_tau range [{}, {}] invalid", self.delta_tau_min, self.delta_tau_max));
            }
            if self.pairs_per_trajectory == 0 {
                return bad("pairs_per_trajectory must be >= 1".into());
            }
        }
        self.grid.validate()
    }

    pub fn to_config(&self) -> ConfigMap {
        let mut c = ConfigMap::default();
        let p = "daem.";
        self.hamiltonian.write(&mut c, p);
        c.insert("daem.kappa_forward", self.kappa_forward);
        c.insert("daem.kappa_set", join(&self.kappa_set));
        c.insert("daem.t_train", self.t_train);
        c.insert("daem.time_samples", join(&self.time_samples));
        c.insert("daem.tau_samples", join(&self.tau_samples));
        c.insert("daem.n_initial_states", self.n_initial_states);
        c.insert("daem.max_amplitude", self.max_amplitude);
        c.insert("daem.seed", self.seed);
        c.insert("daem.regime", regime_name(self.regime));
        write_grid(&mut c, p, &self.grid);
        c.insert("daem.cutoff", self.cutoff);
        c.insert("daem.dt", self.dt);
        c.insert("daem.rc_cutoff", self.rc_cutoff);
        c.insert("daem.pairs_per_trajectory", self.pairs_per_trajectory);
        c.insert("daem.delta_tau_range", join(&[self.delta_tau_min, self.delta_tau_max]));
        c
    }

    /// Reads `daem.*` keys. `daem.preset` (kerr|squeezing|nonmarkovian) picks
    /// the defaults for unspecified keys.
    pub fn from_config(c: &ConfigMap) -> Result<Self> {
        let mut known = CONFIG_KEYS.to_vec();
        known.push("preset");
        c.reject_unknown("daem.", &known)?;
        let base = match c.get::<String>("daem.preset")?.as_deref() {
            None | Some("kerr") => Self::kerr(),
            Some("squeezing") => Self::squeezing(),
            Some("nonmarkovian") => Self::nonmarkovian(),
            Some(other) => return Err(Error::Config { line: 0, message: format!("unknown preset `{other}`") }),
        };
        let mut d = DaemConfig {
            hamiltonian: HamiltonianSpec::read(c, "daem.", base.hamiltonian)?,
            kappa_forward: c.get_or("daem.kappa_forward", base.kappa_forward)?,
            kappa_set: c.get_list("daem.kappa_set")?.unwrap_or(base.kappa_set),
            t_train: c.get_or("daem.t_train", base.t_train)?,
            time_samples: c.get_list("daem.time_samples")?.unwrap_or(base.time_samples),
            tau_samples: c.get_list("daem.tau_samples")?.unwrap_or(base.tau_samples),
            n_initial_states: c.get_or("daem.n_initial_states", base.n_initial_states)?,
            max_amplitude: c.get_or("daem.max_amplitude", base.max_amplitude)?,
            seed: c.get_or("daem.seed", base.seed)?,
            regime: match c.get::<String>("daem.regime")? {
                Some(s) => parse_regime(&s)?,
                None => base.regime,
            },
            grid: read_grid(c, "daem.", base.grid)?,
            cutoff: c.get_or("daem.cutoff", base.cutoff)?,
            dt: c.get_or("daem.dt", base.dt)?,
            rc_cutoff: c.get_or("daem.rc_cutoff", base.rc_cutoff)?,
            pairs_per_trajectory: c.get_or("daem.pairs_per_trajectory", base.pairs_per_trajectory)?,
            delta_tau_min: base.delta_tau_min,
            delta_tau_max: base.delta_tau_max,
        };
        if let Some(r) = c.get_list::<f64>("daem.delta_tau_range")? {
            match r[..] {
                [a, b] => (d.delta_tau_min, d.delta_tau_max) = (a, b),
                _ => return Err(Error::Config { line: 0, message: "delta_tau_range takes two values".into() }),
            }
        }
        d.validate().map_err(|e| Error::Config { line: 0, message: e.to_string() })?;
        Ok(d)
    }

    pub fn to_text(&self) -> String {
        self.to_config().to_text()
    }

    pub fn digest(&self) -> u64 {
        codec::digest64(self.to_text().as_bytes())
    }

    /// Forward/fiducial spec at loss rate `kappa` (dephasing at κ/20).
    pub fn spec(&self, kappa: f64) -> Result<EvolutionSpec> {
        let h = self.hamiltonian.build(self.cutoff)?;
        let channels = NoiseChannel::loss_and_dephasing(kappa);
        let spec = match self.regime {
            Regime::Markovian => EvolutionSpec::markovian(h, channels),
            Regime::ReactionCoordinate => EvolutionSpec::reaction_coordinate(h, channels),
        };
        Ok(spec.with_dt(self.dt))
    }

    pub fn rc_params(&self, kappa: f64) -> RcParams {
        RcParams { rc_cutoff: self.rc_cutoff, ..RcParams::for_loss_rate(kappa) }
    }

    pub fn training_states(&self) -> Vec<CoherentAmplitude> {
        sample_initial_states(self.n_initial_states, self.max_amplitude, self.seed)
    }

    /// Held-out states from an independent stream, none equal to a training state.
    pub fn test_states(&self, n: usize) -> Vec<CoherentAmplitude> {
        let train = self.training_states();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ TEST_SEED_SALT);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let a = draw_in_disk(&mut rng, self.max_amplitude);
            if !train.contains(&a) {
                out.push(a);
            }
        }
        out
    }
}

fn draw_in_disk(rng: &mut ChaCha8Rng, r: f64) -> CoherentAmplitude {
    loop {
        let re: f64 = rng.gen_range(-r..=r);
        let im: f64 = rng.gen_range(-r..=r);
        if re * re + im * im <= r * r {
            // Stored as f32 in dataset files; quantize so records round-trip exactly.
            return CoherentAmplitude::new(re as f32 as f64, im as f32 as f64);
        }
    }
}

/// Uniform samples from the disk `|α| ≤ max_amplitude` by rejection.
pub fn sample_initial_states(n: usize, max_amplitude: f64, seed: u64) -> Vec<CoherentAmplitude> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| draw_in_disk(&mut rng, max_amplitude)).collect()
}

/// One training example. Rasters are row-major `f32`, `q` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct DaemRecord {
    pub t_k: f32,
    pub tau: f32,
    /// Step between input and target durations; zero for Markovian records.
    pub delta_tau: f32,
    pub initial_state: CoherentAmplitude,
    pub kappa_tags: Vec<f32>,
    pub channels: Vec<Vec<f32>>,
    pub target: Vec<f32>,
}

impl DaemRecord {
    pub fn channel_grid(&self, grid: PhaseGrid, i: usize) -> Result<WignerGrid> {
        WignerGrid::new(grid, self.channels[i].iter().map(|&v| v as f64).collect())
    }

    pub fn target_grid(&self, grid: PhaseGrid) -> Result<WignerGrid> {
        WignerGrid::new(grid, self.target.iter().map(|&v| v as f64).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DaemConfig,
    pub records: Vec<DaemRecord>,
}

pub fn raster(w: &WignerGrid) -> Vec<f32> {
    w.values.iter().map(|&v| v as f32).collect()
}

fn at_record(alpha: CoherentAmplitude, t: f64, tau: f64) -> impl Fn(Error) -> Error {
    move |e| Error::Record { alpha_re: alpha.re, alpha_im: alpha.im, t, tau, source: Box::new(e) }
}

/// Algorithm-1 data for the five-channel snapshot protocol.
pub fn generate_markovian(cfg: &DaemConfig, exec: Execution) -> Result<Dataset> {
    cfg.validate()?;
    if cfg.regime != Regime::Markovian {
        return Err(Error::InvalidArgument("generate_markovian needs a Markovian config".into()));
    }
    let states = cfg.training_states();
    let forward = cfg.spec(cfg.kappa_forward)?;
    let fiducial: Vec<EvolutionSpec> = cfg.kappa_set.iter().map(|&k| cfg.spec(k)).collect::<Result<_>>()?;
    let (nk, nt, nj) = (cfg.kappa_set.len(), cfg.time_samples.len(), cfg.tau_samples.len());

    // Forward trajectories and their target rasters, per initial state.
    let trajectories: Vec<(Vec<DensityMatrix>, Vec<Vec<f32>>)> = exec.try_map(states.len(), |s| {
        let alpha = states[s];
        let err = at_record(alpha, 0.0, 0.0);
        let rho0 = fock::coherent(alpha, cfg.cutoff).map_err(&err)?;
        let (rhos, _) = dynamics::evolve_checkpoints(&rho0, &forward, &cfg.time_samples).map_err(&err)?;
        let targets = rhos
            .iter()
            .zip(&cfg.time_samples)
            .map(|(r, &t)| {
                wigner::wigner_with(r, &cfg.grid, Execution::Sequential).map(|w| raster(&w)).map_err(at_record(alpha, t, 0.0))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((rhos, targets))
    })?;

    // Fiducial channels, one task per (state, loss rate): [t_k][τ_j] rasters.
    let channels: Vec<Vec<Vec<f32>>> = exec.try_map(states.len() * nk, |task| {
        let (s, i) = (task / nk, task % nk);
        let alpha = states[s];
        let mut out = Vec::with_capacity(nt * nj);
        for (k, &t) in cfg.time_samples.iter().enumerate() {
            for &tau in &cfg.tau_samples {
                let err = at_record(alpha, t, tau);
                let rho = dynamics::fiducial_sequence(&trajectories[s].0[k], &fiducial[i], tau).map_err(&err)?;
                let w = wigner::wigner_with(&rho, &cfg.grid, Execution::Sequential).map_err(&err)?;
                out.push(raster(&w));
            }
        }
        Ok(out)
    })?;

    let tags: Vec<f32> = cfg.kappa_set.iter().map(|&k| k as f32).collect();
    let mut records = Vec::with_capacity(states.len() * nt * nj);
    for (s, &alpha) in states.iter().enumerate() {
        for (k, &t) in cfg.time_samples.iter().enumerate() {
            for (j, &tau) in cfg.tau_samples.iter().enumerate() {
                records.push(DaemRecord {
                    t_k: t as f32,
                    tau: tau as f32,
                    delta_tau: 0.0,
                    initial_state: alpha,
                    kappa_tags: tags.clone(),
                    channels: (0..nk).map(|i| channels[s * nk + i][k * nj + j].clone()).collect(),
                    target: trajectories[s].1[k].clone(),
                });
            }
        }
    }
    Ok(Dataset { config: cfg.clone(), records })
}

/// Reduced Wigner rasters after fiducial echoes of durations `tau1 >= tau2`
/// applied to the same extended state at loss rate `kappa`.
pub fn nonmarkovian_pair(
    cfg: &DaemConfig,
    rho_ext: &DensityMatrix,
    kappa: f64,
    tau1: f64,
    tau2: f64,
) -> Result<(Vec<f32>, Vec<f32>)> {
    if !(tau1 >= tau2 && tau2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("need tau1 >= tau2 >= 0, got {tau1}, {tau2}")));
    }
    let spec = cfg.spec(kappa)?;
    let rc = cfg.rc_params(kappa);
    let grid_of = |tau: f64| -> Result<Vec<f32>> {
        let ext = dynamics::fiducial_sequence_rc(rho_ext, &spec, &rc, tau)?;
        let rho = dynamics::rc_reduce(&ext, cfg.cutoff, cfg.rc_cutoff)?;
        Ok(raster(&wigner::wigner_with(&rho, &cfg.grid, Execution::Sequential)?))
    };
    let input = grid_of(tau1)?;
    let target = if tau1 == tau2 { input.clone() } else { grid_of(tau2)? };
    Ok((input, target))
}

/// Forward reaction-coordinate trajectory of `|α⟩ ⊗ |0⟩` at the configured
/// forward rate, sampled at `times`.
pub fn forward_rc_states(cfg: &DaemConfig, alpha: CoherentAmplitude, times: &[f64]) -> Result<Vec<DensityMatrix>> {
    let spec = dynamics::rc_extend(&cfg.spec(cfg.kappa_forward)?, &cfg.rc_params(cfg.kappa_forward))?;
    let rho0 = dynamics::rc_embed(&fock::coherent(alpha, cfg.cutoff)?, cfg.rc_cutoff)?;
    Ok(dynamics::evolve_checkpoints(&rho0, &spec, times)?.0)
}

fn pair_seed(seed: u64, state: usize, rate: usize) -> u64 {
    codec::digest64(format!("pairs:{seed}:{state}:{rate}").as_bytes())
}

/// Stepwise-protocol data in the reaction-coordinate regime.
pub fn generate_nonmarkovian(cfg: &DaemConfig, exec: Execution) -> Result<Dataset> {
    cfg.validate()?;
    if cfg.regime != Regime::ReactionCoordinate {
        return Err(Error::InvalidArgument("generate_nonmarkovian needs a reaction-coordinate config".into()));
    }
    let states = cfg.training_states();
    let nk = cfg.kappa_set.len();
    let forward: Vec<Vec<DensityMatrix>> = exec.try_map(states.len(), |s| {
        forward_rc_states(cfg, states[s], &cfg.time_samples).map_err(at_record(states[s], 0.0, 0.0))
    })?;

    let per_task: Vec<Vec<DaemRecord>> = exec.try_map(states.len() * nk, |task| {
        let (s, i) = (task / nk, task % nk);
        let alpha = states[s];
        let kappa = cfg.kappa_set[i];
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(cfg.seed, s, i));
        let mut out = Vec::with_capacity(cfg.pairs_per_trajectory);
        for _ in 0..cfg.pairs_per_trajectory {
            let k = rng.gen_range(0..cfg.time_samples.len());
            let dtau = rng.gen_range(cfg.delta_tau_min..=cfg.delta_tau_max) as f32;
            let tau2 = rng.gen_range(0.0..=(cfg.t_train - dtau as f64).max(0.0));
            let tau1 = ((tau2 + dtau as f64) as f32).min(cfg.t_train as f32);
            let tau2 = (tau1 as f64 - dtau as f64).max(0.0);
            let t = cfg.time_samples[k];
            let (input, target) = nonmarkovian_pair(cfg, &forward[s][k], kappa, tau1 as f64, tau2)
                .map_err(at_record(alpha, t, tau1 as f64))?;
            out.push(DaemRecord {
                t_k: t as f32,
                tau: tau1,
                delta_tau: dtau,
                initial_state: alpha,
                kappa_tags: vec![kappa as f32],
                channels: vec![input],
                target,
            });
        }
        Ok(out)
    })?;
    Ok(Dataset { config: cfg.clone(), records: per_task.into_iter().flatten().collect() })
}

/// Dispatches on the configured regime.
pub fn generate(cfg: &DaemConfig, exec: Execution) -> Result<Dataset> {
    match cfg.regime {
        Regime::Markovian => generate_markovian(cfg, exec),
        Regime::ReactionCoordinate => generate_nonmarkovian(cfg, exec),
    }
}

fn write_grid_header(w: &mut Writer, g: &PhaseGrid) {
    w.u32(g.nq as u32);
    w.u32(g.np as u32);
    for b in [g.q_min, g.q_max, g.p_min, g.p_max] {
        w.f64(b);
    }
}

fn read_grid_header(r: &mut Reader) -> Result<PhaseGrid> {
    let nq = r.u32("grid")? as usize;
    let np = r.u32("grid")? as usize;
    let g = PhaseGrid { nq, np, q_min: r.f64("grid")?, q_max: r.f64("grid")?, p_min: r.f64("grid")?, p_max: r.f64("grid")? };
    g.validate().map_err(|e| Error::Corrupt(format!("grid header: {e}")))?;
    Ok(g)
}

impl Dataset {
    pub fn grid(&self) -> PhaseGrid {
        self.config.grid
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let g = self.config.grid;
        let mut w = Writer::header(&DATASET_MAGIC, FORMAT_VERSION);
        write_grid_header(&mut w, &g);
        w.u64(self.config.digest());
        w.str(&self.config.to_text());
        w.u64(self.records.len() as u64);
        for r in &self.records {
            if r.channels.len() > u8::MAX as usize || r.kappa_tags.len() > u8::MAX as usize {
                return Err(Error::InvalidArgument("too many channels or tags for the record format".into()));
            }
            if r.target.len() != g.len() || r.channels.iter().any(|c| c.len() != g.len()) {
                return Err(Error::GridMismatch);
            }
            w.f32(r.t_k);
            w.f32(r.tau);
            w.f32(r.delta_tau);
            w.f32(r.initial_state.re as f32);
            w.f32(r.initial_state.im as f32);
            w.u8(r.channels.len() as u8);
            w.u8(r.kappa_tags.len() as u8);
            w.f32s(&r.kappa_tags);
            for c in &r.channels {
                w.f32s(c);
            }
            w.f32s(&r.target);
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, &DATASET_MAGIC, FORMAT_VERSION)?;
        let grid = read_grid_header(&mut r)?;
        let digest = r.u64("config digest")?;
        let text = r.str("config text")?;
        let config = DaemConfig::from_config(&ConfigMap::parse(&text)?)
            .map_err(|e| Error::Corrupt(format!("embedded config: {e}")))?;
        if config.digest() != digest {
            return Err(Error::Corrupt("config digest does not match embedded config".into()));
        }
        if config.grid != grid {
            return Err(Error::Corrupt("grid header does not match embedded config".into()));
        }
        let n = r.u64("record count")? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let t_k = r.f32("record")?;
            let tau = r.f32("record")?;
            let delta_tau = r.f32("record")?;
            let re = r.f32("record")?;
            let im = r.f32("record")?;
            let nc = r.u8("record")? as usize;
            let nt = r.u8("record")? as usize;
            let kappa_tags = r.f32s(nt, "record")?;
            let channels = (0..nc).map(|_| r.f32s(grid.len(), "raster")).collect::<Result<Vec<_>>>()?;
            let target = r.f32s(grid.len(), "raster")?;
            records.push(DaemRecord {
                t_k,
                tau,
                delta_tau,
                initial_state: CoherentAmplitude::new(re as f64, im as f64),
                kappa_tags,
                channels,
                target,
            });
        }
        r.finish()?;
        Ok(Dataset { config, records })
    }

    /// Hex SHA-256 of the serialized dataset.
    pub fn digest(&self) -> Result<String> {
        Ok(codec::sha256_hex(&self.to_bytes()?))
    }

    /// Writes the dataset and a `.manifest` sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        codec::write_file(path, &bytes)?;
        let mut manifest = self.config.to_text();
        manifest.push_str(&format!("dataset.records={}\n", self.records.len()));
        manifest.push_str(&format!("dataset.sha256={}\n", codec::sha256_hex(&bytes)));
        codec::write_file(&manifest_path(path), manifest.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Single-raster file in the dataset's raster encoding.
pub fn save_raster(w: &WignerGrid, path: &Path) -> Result<()> {
    let mut out = Writer::header(&RASTER_MAGIC, FORMAT_VERSION);
    write_grid_header(&mut out, &w.grid);
    out.f32s(&raster(w));
    codec::write_file(path, &out.buf)
}

pub fn load_raster(path: &Path) -> Result<WignerGrid> {
    let bytes = codec::read_file(path)?;
    let mut r = Reader::open(&bytes, &RASTER_MAGIC, FORMAT_VERSION)?;
    let grid = read_grid_header(&mut r)?;
    let values = r.f32s(grid.len(), "raster")?.into_iter().map(|v| v as f64).collect();
    r.finish()?;
    WignerGrid::new(grid, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(regime: Regime) -> DaemConfig {
        DaemConfig {
            time_samples: vec![0.0, 0.5],
            tau_samples: vec![0.0, 0.3, 0.6],
            n_initial_states: 2,
            max_amplitude: 1.0,
            seed: 3,
            grid: PhaseGrid::square(16, 4.0),
            cutoff: 12,
            dt: 1e-2,
            rc_cutoff: 6,
            pairs_per_trajectory: 2,
            regime,
            ..if regime == Regime::Markovian { DaemConfig::kerr() } else { DaemConfig::nonmarkovian() }
        }
    }

    fn sim(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn max_diff(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn markovian_records_follow_the_protocol() {
        let cfg = small(Regime::Markovian);
        let d = generate_markovian(&cfg, Execution::Parallel).unwrap();
        assert_eq!(d.records.len(), 2 * 2 * 3);
        for r in &d.records {
            assert_eq!(r.channels.len(), 5);
            assert_eq!(r.kappa_tags, vec![0.3, 0.4, 0.5, 0.6, 0.7]);
            if r.tau == 0.0 {
                for c in &r.channels {
                    assert!(max_diff(c, &r.target) <= 1e-8);
                }
            } else {
                let sims: Vec<f64> = r.channels.iter().map(|c| sim(c, &r.target)).collect();
                for w in sims.windows(2) {
                    assert!(w[1] <= w[0] + 1e-6, "{sims:?}");
                }
                for c in &r.channels {
                    assert!(max_diff(c, &r.target) >= 1e-4);
                }
            }
        }
        // Records for the same (α, t_k) share a target.
        assert_eq!(d.records[0].target, d.records[2].target);
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let cfg = small(Regime::Markovian);
        let a = generate_markovian(&cfg, Execution::Parallel).unwrap();
        let b = generate_markovian(&cfg, Execution::Sequential).unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let c = generate_markovian(&DaemConfig { seed: 4, ..cfg }, Execution::Parallel).unwrap();
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
    }

    #[test]
    fn nonmarkovian_records_and_zero_step_limit() {
        let cfg = small(Regime::ReactionCoordinate);
        let d = generate_nonmarkovian(&cfg, Execution::Parallel).unwrap();
        assert_eq!(d.records.len(), 2 * 5 * 2);
        for r in &d.records {
            assert_eq!(r.channels.len(), 1);
            assert!(r.delta_tau > 0.0 && r.tau <= cfg.t_train as f32 && r.tau >= r.delta_tau);
            assert!(max_diff(&r.channels[0], &r.target) > 0.0);
        }
        let alpha = CoherentAmplitude::new(0.5, 0.2);
        let ext = forward_rc_states(&cfg, alpha, &[0.3]).unwrap().pop().unwrap();
        let (input, target) = nonmarkovian_pair(&cfg, &ext, 0.5, 0.4, 0.4).unwrap();
        assert_eq!(input, target);
        assert!(nonmarkovian_pair(&cfg, &ext, 0.5, 0.2, 0.4).is_err());
    }

    #[test]
    fn regime_preconditions() {
        assert!(generate_markovian(&small(Regime::ReactionCoordinate), Execution::Sequential).is_err());
        assert!(generate_nonmarkovian(&small(Regime::Markovian), Execution::Sequential).is_err());
        let mut c = small(Regime::Markovian);
        c.kappa_set = vec![0.3, 0.3, 0.5, 0.6, 0.7];
        assert!(c.validate().is_err());
        let mut c = small(Regime::Markovian);
        c.tau_samples = vec![0.0, 1.5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn errors_carry_record_coordinates() {
        let mut cfg = small(Regime::Markovian);
        cfg.max_amplitude = 2.0;
        cfg.cutoff = 6;
        match generate_markovian(&cfg, Execution::Sequential) {
            Err(Error::Record { source, .. }) => assert!(matches!(*source, Error::CutoffTooSmall { .. })),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(Regime::Markovian);
        let empty = Dataset { config: cfg.clone(), records: vec![] };
        let p = dir.path().join("empty.cvqm");
        empty.save(&p).unwrap();
        assert_eq!(Dataset::load(&p).unwrap(), empty);

        let mut one = generate_markovian(&cfg, Execution::Sequential).unwrap();
        one.records.truncate(4);
        let p = dir.path().join("one.cvqm");
        one.save(&p).unwrap();
        let back = Dataset::load(&p).unwrap();
        assert_eq!(back, one);
        for (a, b) in back.records.iter().zip(&one.records) {
            assert!(a.target.iter().zip(&b.target).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let manifest = std::fs::read_to_string(manifest_path(&p)).unwrap();
        assert!(manifest.contains("daem.kappa_forward=0.3") && manifest.contains("dataset.records=4"));

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] ^= 0xFF;
        assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::MagicMismatch { .. })));
        bytes[0] ^= 0xFF;
        bytes[4] = 9;
        assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::VersionMismatch { found: 9, .. })));
        bytes[4] = 1;
        assert!(matches!(Dataset::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
    }

    #[test]
    fn config_text_round_trips_and_sampling_is_disjoint() {
        for cfg in [DaemConfig::kerr(), DaemConfig::squeezing(), DaemConfig::nonmarkovian()] {
            let back = DaemConfig::from_config(&ConfigMap::parse(&cfg.to_text()).unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
        let cfg = DaemConfig::kerr();
        let train = cfg.training_states();
        assert_eq!(train.len(), 20);
        assert!(train.iter().all(|a| a.abs() <= 2.0));
        let test = cfg.test_states(5);
        assert!(test.iter().all(|a| !train.contains(a) && a.abs() <= 2.0));
        assert_eq!(test, cfg.test_states(5));
    }

    #[test]
    fn raster_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = PhaseGrid::square(8, 3.0);
        let w = WignerGrid::new(g, (0..64).map(|i| (i as f32 * 0.01) as f64).collect()).unwrap();
        let p = dir.path().join("w.cvqr");
        save_raster(&w, &p).unwrap();
        assert_eq!(load_raster(&p).unwrap(), w);
    }
}
