//! Inference protocols and the extrapolation sweep.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{join, ConfigMap};
use crate::daem::{self, DaemConfig};
use crate::dynamics::{self, EvolutionSpec, Regime};
use crate::error::{Error, Result};
use crate::fock::{self, CoherentAmplitude, DensityMatrix};
use crate::model::{Model, ModelInput, ParamStore, Variant};
use crate::parallel::Execution;
use crate::wigner::{self, PhaseGrid, WignerGrid};

/// Outputs are clamped to `±(1/π + CLAMP_MARGIN)`.
pub const CLAMP_MARGIN: f64 = 1e-3;

fn clamp_bound() -> f64 {
    std::f64::consts::FRAC_1_PI + CLAMP_MARGIN
}

fn to_grid(grid: PhaseGrid, values: Vec<f32>) -> Result<WignerGrid> {
    let b = clamp_bound();
    WignerGrid::new(grid, values.into_iter().map(|v| (v as f64).clamp(-b, b)).collect())
}

fn check_grid(model: &Model, grid: &PhaseGrid) -> Result<()> {
    if grid.nq != model.config.grid_side || grid.np != model.config.grid_side {
        return Err(Error::CheckpointMismatch(format!(
            "model expects a {0}x{0} grid, got {1}x{2}",
            model.config.grid_side, grid.nq, grid.np
        )));
    }
    Ok(())
}

/// Single forward pass on multi-rate channels evolved for `tau_test`.
pub fn mitigate_direct(model: &Model, params: &ParamStore, channels: &[WignerGrid], tau_test: f64) -> Result<WignerGrid> {
    if model.config.stepwise() {
        return Err(Error::CheckpointMismatch("stepwise model used with the direct protocol".into()));
    }
    let grid = channels.first().ok_or_else(|| Error::InvalidArgument("no input channels".into()))?.grid;
    check_grid(model, &grid)?;
    if channels.iter().any(|c| c.grid != grid) {
        return Err(Error::GridMismatch);
    }
    let rasters: Vec<Vec<f32>> = channels.iter().map(daem::raster).collect();
    let refs: Vec<&[f32]> = rasters.iter().map(Vec::as_slice).collect();
    let out = model.forward(params, &ModelInput { wigner: &refs, tau: tau_test, delta_tau: None })?;
    to_grid(grid, out)
}

/// One stepwise application: removes `delta_tau` of noise from a state
/// carrying `tau` of it.
pub fn mitigate_step(model: &Model, params: &ParamStore, w: &WignerGrid, tau: f64, delta_tau: f64) -> Result<WignerGrid> {
    if !model.config.stepwise() {
        return Err(Error::CheckpointMismatch("direct model used with the stepwise protocol".into()));
    }
    check_grid(model, &w.grid)?;
    let raster = daem::raster(w);
    let out = model.forward(params, &ModelInput { wigner: &[&raster], tau, delta_tau: Some(delta_tau) })?;
    to_grid(w.grid, out)
}

/// Number of steps `ceil(total / dtau)`, ignoring rounding residue.
pub fn iteration_count(tau_total: f64, dtau: f64) -> usize {
    let ratio = tau_total / dtau;
    let n = ratio.round();
    if (ratio - n).abs() < 1e-9 {
        n as usize
    } else {
        ratio.ceil() as usize
    }
}

/// Unwinds `tau_total` of noise in steps of `dtau`; step `k` (from 0) feeds
/// `τ = tau_total − k·dtau` and the actual increment, so the last step may be shorter.
pub fn mitigate_iterative(model: &Model, params: &ParamStore, w: &WignerGrid, tau_total: f64, dtau: f64) -> Result<WignerGrid> {
    if !(dtau > 0.0 && dtau.is_finite()) || !(tau_total >= 0.0 && tau_total.is_finite()) {
        return Err(Error::InvalidArgument(format!("need dtau > 0 and tau_total >= 0, got {dtau}, {tau_total}")));
    }
    let n = iteration_count(tau_total, dtau);
    let mut cur = w.clone();
    for k in 0..n {
        let tau = (tau_total - k as f64 * dtau).max(0.0);
        let step = if k + 1 == n { tau } else { dtau.min(tau) };
        cur = match mitigate_step(model, params, &cur, tau, step) {
            Ok(next) => next,
            Err(Error::DivergedForward) => return Err(Error::IterationDiverged { step: k }),
            Err(e) => return Err(e),
        };
        if cur.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::IterationDiverged { step: k });
        }
    }
    Ok(cur)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Direct,
    Iterative,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Direct => "direct",
            Protocol::Iterative => "iterative",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Protocol::Direct),
            "iterative" => Ok(Protocol::Iterative),
            other => Err(Error::Config { line: 0, message: format!("unknown protocol `{other}`") }),
        }
    }
}

/// Physics, test state and time grid of one extrapolation experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub physics: DaemConfig,
    pub alpha: CoherentAmplitude,
    pub times: Vec<f64>,
    pub protocol: Protocol,
    pub dtau: f64,
}

impl Experiment {
    /// Kerr test state over `[0, 2T]`, direct protocol.
    pub fn kerr() -> Self {
        Experiment {
            physics: DaemConfig::kerr(),
            alpha: CoherentAmplitude::new(0.80, -0.45),
            times: (0..=8).map(|i| i as f64 * 0.25).collect(),
            protocol: Protocol::Direct,
            dtau: 0.1,
        }
    }

    /// Reaction-coordinate squeezing test, stepwise protocol.
    pub fn nonmarkovian() -> Self {
        Experiment {
            physics: DaemConfig::nonmarkovian(),
            alpha: CoherentAmplitude::new(0.34, 0.97),
            protocol: Protocol::Iterative,
            ..Self::kerr()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.physics.validate()?;
        let horizon = 2.0 * self.physics.t_train;
        if self.times.is_empty() {
            return Err(Error::InvalidArgument("no sweep times".into()));
        }
        if let Some(t) = self.times.iter().find(|&&t| !(0.0..=horizon + 1e-12).contains(&t)) {
            return Err(Error::InvalidArgument(format!("sweep time {t} outside [0, {horizon}]")));
        }
        if !(self.dtau > 0.0) {
            return Err(Error::InvalidArgument("dtau must be positive".into()));
        }
        match (self.protocol, self.physics.regime) {
            (Protocol::Direct, Regime::Markovian) | (Protocol::Iterative, _) => Ok(()),
            (Protocol::Direct, Regime::ReactionCoordinate) => {
                Err(Error::InvalidArgument("the direct protocol needs Markovian multi-rate channels".into()))
            }
        }
    }

    pub fn to_config(&self) -> ConfigMap {
        let mut c = self.physics.to_config();
        c.insert("experiment.alpha", join(&[self.alpha.re, self.alpha.im]));
        c.insert("experiment.times", join(&self.times));
        c.insert("experiment.protocol", self.protocol.name());
        c.insert("experiment.dtau", self.dtau);
        c
    }

    /// `experiment.*` keys plus the `daem.*` physics keys; `experiment.preset`
    /// (kerr|nonmarkovian) supplies defaults for both.
    pub fn from_config(c: &ConfigMap) -> Result<Self> {
        c.reject_unknown("experiment.", &["preset", "alpha", "times", "protocol", "dtau"])?;
        let base = match c.get::<String>("experiment.preset")?.as_deref() {
            None | Some("kerr") => Self::kerr(),
            Some("nonmarkovian") => Self::nonmarkovian(),
            Some(other) => return Err(Error::Config { line: 0, message: format!("unknown experiment preset `{other}`") }),
        };
        let physics = if c.contains("daem.preset") {
            DaemConfig::from_config(c)?
        } else {
            let mut with_preset = c.clone();
            let preset = if base.physics.regime == Regime::Markovian { "kerr" } else { "nonmarkovian" };
            with_preset.insert("daem.preset", preset);
            DaemConfig::from_config(&with_preset)?
        };
        let alpha = match c.get_list::<f64>("experiment.alpha")? {
            None => base.alpha,
            Some(v) if v.len() == 2 => CoherentAmplitude::new(v[0], v[1]),
            Some(_) => return Err(Error::Config { line: 0, message: "experiment.alpha takes re,im".into() }),
        };
        let e = Experiment {
            physics,
            alpha,
            times: c.get_list("experiment.times")?.unwrap_or(base.times),
            protocol: match c.get::<String>("experiment.protocol")? {
                Some(s) => Protocol::parse(&s)?,
                None => base.protocol,
            },
            dtau: c.get_or("experiment.dtau", base.dtau)?,
        };
        e.validate().map_err(|err| Error::Config { line: 0, message: err.to_string() })?;
        Ok(e)
    }

    pub fn to_text(&self) -> String {
        self.to_config().to_text()
    }

    fn reference_spec(&self) -> Result<EvolutionSpec> {
        let h = self.physics.hamiltonian.build(self.physics.cutoff)?;
        Ok(EvolutionSpec::markovian(h, vec![]).with_dt(self.physics.dt))
    }

    /// Noiseless reference states at the sweep times.
    pub fn reference_states(&self) -> Result<Vec<DensityMatrix>> {
        let rho0 = fock::coherent(self.alpha, self.physics.cutoff)?;
        Ok(dynamics::evolve_checkpoints(&rho0, &self.reference_spec()?, &self.times)?.0)
    }

    /// Forward states at `kappa` (Markovian) at the sweep times.
    fn forward_states(&self, kappa: f64) -> Result<Vec<DensityMatrix>> {
        let rho0 = fock::coherent(self.alpha, self.physics.cutoff)?;
        Ok(dynamics::evolve_checkpoints(&rho0, &self.physics.spec(kappa)?, &self.times)?.0)
    }

    /// Reduced forward states in the reaction-coordinate environment.
    fn forward_rc(&self) -> Result<Vec<DensityMatrix>> {
        daem::forward_rc_states(&self.physics, self.alpha, &self.times)?
            .iter()
            .map(|ext| dynamics::rc_reduce(ext, self.physics.cutoff, self.physics.rc_cutoff))
            .collect()
    }
}

/// Simulated inputs and references for every sweep time.
#[derive(Clone, Debug)]
pub struct SweepInputs {
    pub times: Vec<f64>,
    /// Per time: channels at each fiducial rate (direct) or the single noisy state (iterative).
    pub channels: Vec<Vec<WignerGrid>>,
    pub noisy: Vec<WignerGrid>,
    pub reference: Vec<WignerGrid>,
}

/// Simulates what a sweep consumes. Trajectories run in parallel over loss
/// rates; Wigner transforms run in parallel over times.
pub fn simulate_sweep(exp: &Experiment, exec: Execution) -> Result<SweepInputs> {
    exp.validate()?;
    let grid = exp.physics.grid;
    let at = |i: usize| {
        let t = exp.times[i];
        move |e: Error| Error::AtTime { t, source: Box::new(e) }
    };
    let wigners = |states: &[DensityMatrix]| -> Result<Vec<WignerGrid>> {
        exec.try_map(states.len(), |i| wigner::wigner_with(&states[i], &grid, Execution::Sequential).map_err(at(i)))
    };
    let reference = wigners(&exp.reference_states()?)?;
    let nt = exp.times.len();
    match exp.protocol {
        Protocol::Direct => {
            let kappas = &exp.physics.kappa_set;
            let mut rates = kappas.clone();
            rates.push(exp.physics.kappa_forward);
            let trajectories = exec.try_map(rates.len(), |r| exp.forward_states(rates[r]))?;
            let per_rate: Vec<Vec<WignerGrid>> = trajectories.iter().map(|s| wigners(s)).collect::<Result<_>>()?;
            let channels = (0..nt).map(|i| (0..kappas.len()).map(|r| per_rate[r][i].clone()).collect()).collect();
            Ok(SweepInputs { times: exp.times.clone(), channels, noisy: per_rate[kappas.len()].clone(), reference })
        }
        Protocol::Iterative => {
            let states = match exp.physics.regime {
                Regime::ReactionCoordinate => exp.forward_rc()?,
                Regime::Markovian => exp.forward_states(exp.physics.kappa_forward)?,
            };
            let noisy = wigners(&states)?;
            let channels = noisy.iter().map(|w| vec![w.clone()]).collect();
            Ok(SweepInputs { times: exp.times.clone(), channels, noisy, reference })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub t: f64,
    pub protocol: Protocol,
    pub similarity_mitigated: f64,
    pub similarity_noisy: f64,
    pub model_variant: String,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Per model, per time.
    pub mitigated: Vec<Vec<WignerGrid>>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,protocol,similarity_mitigated,similarity_noisy,model_variant\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.t,
                r.protocol.name(),
                r.similarity_mitigated,
                r.similarity_noisy,
                r.model_variant
            );
        }
        out
    }

    pub fn row(&self, variant: &str, t: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.model_variant == variant && (r.t - t).abs() < 1e-9)
    }
}

/// A trained network taking part in a sweep.
pub struct SweepModel<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore,
}

impl SweepModel<'_> {
    pub fn label(&self) -> String {
        match (self.model.config.variant, self.model.config.stepwise()) {
            (Variant::SwinAdaLN, true) => "swin_stepwise".into(),
            (Variant::SwinAdaLN, false) => "swin".into(),
            (Variant::CnnBaseline, _) => "cnn".into(),
        }
    }
}

/// Runs the experiment's protocol for every model and time. Rows are ordered
/// by model, then time index.
pub fn run_sweep(exp: &Experiment, inputs: &SweepInputs, models: &[SweepModel], exec: Execution) -> Result<SweepReport> {
    let mut rows = Vec::new();
    let mut mitigated = Vec::new();
    for m in models {
        let label = m.label();
        let outs = exec.try_map(inputs.times.len(), |i| {
            let t = inputs.times[i];
            let out = match exp.protocol {
                Protocol::Direct => mitigate_direct(m.model, m.params, &inputs.channels[i], t),
                Protocol::Iterative => mitigate_iterative(m.model, m.params, &inputs.noisy[i], t, exp.dtau),
            }
            .map_err(|e| Error::AtTime { t, source: Box::new(e) })?;
            let sm = wigner::cosine_similarity(&out, &inputs.reference[i]).map_err(|e| Error::AtTime { t, source: Box::new(e) })?;
            let sn = wigner::cosine_similarity(&inputs.noisy[i], &inputs.reference[i])
                .map_err(|e| Error::AtTime { t, source: Box::new(e) })?;
            Ok::<_, Error>((out, sm, sn))
        })?;
        let mut grids = Vec::with_capacity(outs.len());
        for (i, (out, sm, sn)) in outs.into_iter().enumerate() {
            rows.push(SweepRow {
                t: inputs.times[i],
                protocol: exp.protocol,
                similarity_mitigated: sm,
                similarity_noisy: sn,
                model_variant: label.clone(),
            });
            grids.push(out);
        }
        mitigated.push(grids);
    }
    Ok(SweepReport { rows, mitigated })
}

/// Simulates, runs every model and, with `out_dir`, writes `report.csv`,
/// the experiment text and one raster per (time, kind).
pub fn extrapolation_sweep(
    exp: &Experiment,
    models: &[SweepModel],
    out_dir: Option<&Path>,
    exec: Execution,
) -> Result<SweepReport> {
    let inputs = simulate_sweep(exp, exec)?;
    let report = run_sweep(exp, &inputs, models, exec)?;
    if let Some(dir) = out_dir {
        write_report(dir, exp, &inputs, models, &report)?;
    }
    Ok(report)
}

fn write_report(dir: &Path, exp: &Experiment, inputs: &SweepInputs, models: &[SweepModel], report: &SweepReport) -> Result<()> {
    crate::codec::write_file(&dir.join("report.csv"), report.to_csv().as_bytes())?;
    crate::codec::write_file(&dir.join("experiment.manifest"), exp.to_text().as_bytes())?;
    let rasters = dir.join("rasters");
    for (i, &t) in inputs.times.iter().enumerate() {
        daem::save_raster(&inputs.noisy[i], &rasters.join(format!("t{t}_noisy.cvqr")))?;
        daem::save_raster(&inputs.reference[i], &rasters.join(format!("t{t}_reference.cvqr")))?;
        for (m, grids) in models.iter().zip(&report.mitigated) {
            daem::save_raster(&grids[i], &rasters.join(format!("t{t}_mitigated_{}.cvqr", m.label())))?;
        }
    }
    Ok(())
}
