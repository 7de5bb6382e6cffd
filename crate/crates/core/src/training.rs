//! Mini-batch AdamW on the mean L1 objective.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec;
use crate::config::ConfigMap;
use crate::daem::{DaemRecord, Dataset};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Conditioning, Model, ModelConfig, ModelInput, OptimizerState, ParamStore};
use crate::parallel::Execution;
use crate::tensor::{Element, Tape, Var};
use crate::wigner::WignerGrid;

/// Slack for comparing `f32`-stored record times with the horizon.
const HORIZON_SLACK: f64 = 1e-6;

/// Samples evaluated per gradient shard; bounds peak memory.
const SHARD: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub seed: u64,
    /// Write the checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 10,
            max_steps: None,
            seed: 0,
            checkpoint_every: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::InvalidArgument("invalid optimizer coefficients".into()));
        }
        Ok(())
    }

    pub fn to_config(&self) -> ConfigMap {
        let mut c = ConfigMap::default();
        c.insert("train.batch_size", self.batch_size);
        c.insert("train.lr", self.lr);
        c.insert("train.weight_decay", self.weight_decay);
        c.insert("train.epochs", self.epochs);
        if let Some(s) = self.max_steps {
            c.insert("train.max_steps", s);
        }
        c.insert("train.seed", self.seed);
        c.insert("train.checkpoint_every", self.checkpoint_every);
        c.insert("train.beta1", self.beta1);
        c.insert("train.beta2", self.beta2);
        c.insert("train.eps", self.eps);
        c.insert("train.lr_schedule", "cosine");
        c
    }

    pub fn from_config(c: &ConfigMap) -> Result<Self> {
        c.reject_unknown(
            "train.",
            &[
                "batch_size", "lr", "weight_decay", "epochs", "max_steps", "seed", "checkpoint_every", "beta1", "beta2",
                "eps", "lr_schedule",
            ],
        )?;
        if let Some(s) = c.get::<String>("train.lr_schedule")? {
            if s != "cosine" {
                return Err(Error::Config { line: 0, message: format!("unsupported lr_schedule `{s}`") });
            }
        }
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            batch_size: c.get_or("train.batch_size", d.batch_size)?,
            lr: c.get_or("train.lr", d.lr)?,
            weight_decay: c.get_or("train.weight_decay", d.weight_decay)?,
            epochs: c.get_or("train.epochs", d.epochs)?,
            max_steps: c.get("train.max_steps")?,
            seed: c.get_or("train.seed", d.seed)?,
            checkpoint_every: c.get_or("train.checkpoint_every", d.checkpoint_every)?,
            beta1: c.get_or("train.beta1", d.beta1)?,
            beta2: c.get_or("train.beta2", d.beta2)?,
            eps: c.get_or("train.eps", d.eps)?,
        };
        cfg.validate().map_err(|e| Error::Config { line: 0, message: e.to_string() })?;
        Ok(cfg)
    }

    pub fn steps_per_epoch(&self, records: usize) -> u64 {
        records.div_ceil(self.batch_size) as u64
    }

    /// Length of the learning-rate schedule.
    pub fn total_steps(&self, records: usize) -> u64 {
        self.steps_per_epoch(records) * self.epochs as u64
    }

    /// Step count at which this run stops.
    pub fn stop_step(&self, records: usize) -> u64 {
        let total = self.total_steps(records);
        self.max_steps.map_or(total, |m| m.min(total))
    }

    /// Cosine decay from `lr` to zero over `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if total == 0 {
            return self.lr;
        }
        let frac = (step as f64 / total as f64).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Mean absolute difference over grid points.
pub fn l1_loss(pred: &WignerGrid, target: &WignerGrid) -> Result<f64> {
    if pred.grid != target.grid || pred.values.len() != target.values.len() {
        return Err(Error::GridMismatch);
    }
    Ok(pred.values.iter().zip(&target.values).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.values.len() as f64)
}

/// Mean L1 on the tape.
pub fn l1_loss_on<T: Element>(tape: &mut Tape<T>, pred: Var, target: &[f32]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    let t = tape.constant(target.iter().map(|&v| T::from_f64(v as f64)).collect(), &shape)?;
    let d = tape.sub(pred, t)?;
    let a = tape.abs(d);
    Ok(tape.mean_all(a))
}

/// One AdamW update with decoupled weight decay: `p ← p(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
pub fn adamw_step(params: &mut ParamStore, grads: &[Vec<f32>], state: &mut OptimizerState, cfg: &TrainConfig, lr: f64) {
    if state.m.is_empty() {
        state.m = (0..params.len()).map(|i| vec![0.0; params.data(i).len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = (1.0 - lr * cfg.weight_decay) as f32;
    for i in 0..params.len() {
        if !params.is_trainable(i) {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, p) in params.data_mut(i).iter_mut().enumerate() {
            let g = grads[i][k];
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            let mhat = m[k] as f64 / c1;
            let vhat = v[k] as f64 / c2;
            *p *= decay;
            *p -= (lr * mhat / (vhat.sqrt() + cfg.eps)) as f32;
        }
    }
}

/// Network inputs for a record under the given model layout.
pub fn record_input<'a>(cfg: &ModelConfig, rec: &DaemRecord, channels: &'a [&'a [f32]]) -> Result<ModelInput<'a>> {
    if channels.len() != cfg.wigner_channels {
        return Err(Error::ModelConfig(format!(
            "model takes {} Wigner channels, record has {}",
            cfg.wigner_channels,
            channels.len()
        )));
    }
    Ok(ModelInput {
        wigner: channels,
        tau: rec.tau as f64,
        delta_tau: cfg.stepwise().then_some(rec.delta_tau as f64),
    })
}

/// Rejects any record whose times exceed the training horizon.
pub fn check_horizon(dataset: &Dataset) -> Result<()> {
    dataset.records.iter().try_for_each(|r| check_record_horizon(r, dataset.config.t_train))
}

fn check_record_horizon(r: &DaemRecord, t_train: f64) -> Result<()> {
    let (t, tau) = (r.t_k as f64, r.tau as f64);
    if !(t <= t_train + HORIZON_SLACK && tau <= t_train + HORIZON_SLACK) {
        return Err(Error::HorizonViolation { t, tau, t_train });
    }
    Ok(())
}

/// Per-sample loss and gradients, in store order.
fn sample_gradient(model: &Model, params: &ParamStore, rec: &DaemRecord) -> Result<(f64, Vec<Vec<f32>>)> {
    let channels: Vec<&[f32]> = rec.channels.iter().map(Vec::as_slice).collect();
    let input = record_input(&model.config, rec, &channels)?;
    let mut tape = Tape::<f32>::new();
    let (y, binder) = model.forward_on(&mut tape, params, &input, Conditioning::On)?;
    let loss = l1_loss_on(&mut tape, y, &rec.target)?;
    tape.backward(loss)?;
    Ok((tape.scalar(loss) as f64, binder.gradients(&tape)))
}

/// Mean loss and mean gradient over `batch`, reduced in index order.
pub fn batch_gradient(
    model: &Model,
    params: &ParamStore,
    records: &[&DaemRecord],
    exec: Execution,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut total = 0.0;
    let mut acc: Vec<Vec<f32>> = (0..params.len()).map(|i| vec![0.0; params.data(i).len()]).collect();
    for shard in records.chunks(SHARD) {
        let results = exec.try_map(shard.len(), |k| sample_gradient(model, params, shard[k]))?;
        for (loss, grads) in results {
            total += loss;
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
    }
    let inv = 1.0 / records.len() as f32;
    acc.iter_mut().flatten().for_each(|x| *x *= inv);
    Ok((total / records.len() as f64, acc))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,epoch,loss,lr\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.epoch, r.loss, r.lr);
    }
    out
}

/// Where a run writes its artifacts, and where it resumes from.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub exec: Execution,
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Per-epoch progress on stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRecord>,
}

impl TrainOutcome {
    /// Mean step loss per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(u64, f64, usize)> = Vec::new();
        for r in &self.losses {
            match out.last_mut() {
                Some(last) if last.0 == r.epoch => {
                    last.1 += r.loss;
                    last.2 += 1;
                }
                _ => out.push((r.epoch, r.loss, 1)),
            }
        }
        out.into_iter().map(|(_, s, n)| s / n as f64).collect()
    }
}

/// `key=value` description of a run: model, training and data provenance.
pub fn run_manifest(model: &ModelConfig, train: &TrainConfig, dataset: &Dataset, dataset_sha: &str) -> String {
    let mut c = model.to_config();
    for (k, v) in parse_pairs(&train.to_config().to_text()) {
        c.insert(&k, v);
    }
    c.insert("train.full_scale_batch_size", 1024);
    c.insert("dataset.sha256", dataset_sha);
    c.insert("dataset.records", dataset.records.len());
    c.insert("dataset.config_digest", format!("{:016x}", dataset.config.digest()));
    c.to_text()
}

fn parse_pairs(text: &str) -> Vec<(String, String)> {
    text.lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn save_run(ck: &Checkpoint, losses: &[LossRecord], opts: &TrainOptions) -> Result<()> {
    if let Some(path) = &opts.checkpoint {
        ck.save(path)?;
        codec::write_file(&crate::daem::manifest_path(path), ck.meta.as_bytes())?;
    }
    if let Some(path) = &opts.loss_csv {
        codec::write_file(path, loss_csv(losses).as_bytes())?;
    }
    Ok(())
}

/// Trains from scratch (seeded initialization and fitted input transform) or
/// resumes a checkpoint, continuing its step counter and shuffling stream.
pub fn train(dataset: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_horizon(dataset)?;
    if dataset.records.is_empty() {
        return Err(Error::InvalidArgument("dataset has no records".into()));
    }
    let grid = dataset.grid();
    if grid.nq != model_cfg.grid_side || grid.np != model_cfg.grid_side {
        return Err(Error::ModelConfig(format!(
            "dataset grid {}x{} does not match model side {}",
            grid.nq, grid.np, model_cfg.grid_side
        )));
    }
    let model = Model::new(model_cfg.clone())?;
    let sha = dataset.digest()?;
    let meta = run_manifest(model_cfg, cfg, dataset, &sha);

    let mut ck = match &opts.resume {
        Some(prev) => {
            if prev.model != *model_cfg {
                return Err(Error::CheckpointMismatch("model config differs from the checkpoint".into()));
            }
            let prev_sha = parse_pairs(&prev.meta).into_iter().find(|(k, _)| k == "dataset.sha256").map(|(_, v)| v);
            if prev_sha.as_deref() != Some(sha.as_str()) {
                return Err(Error::CheckpointMismatch("checkpoint was trained on a different dataset".into()));
            }
            let mut ck = prev.clone();
            ck.meta = meta;
            ck
        }
        None => {
            let mut params = model.init_params(cfg.seed);
            model.fit_input_whitening(
                &mut params,
                dataset.records.iter().map(|r| r.channels.iter().map(Vec::as_slice).collect()),
            )?;
            let mut ck = Checkpoint::new(model_cfg.clone(), params);
            ck.rng_seed = ChaCha8Rng::seed_from_u64(cfg.seed).get_seed();
            ck.meta = meta;
            ck
        }
    };

    let n = dataset.records.len();
    let spe = cfg.steps_per_epoch(n);
    let total = cfg.total_steps(n);
    let stop = cfg.stop_step(n);
    let mut losses = Vec::new();
    // The RNG state stored in a checkpoint is the one at the start of its epoch.
    let mut rng = ChaCha8Rng::from_seed(ck.rng_seed);
    rng.set_word_pos(ck.rng_word_pos);

    while ck.step < stop {
        let epoch = ck.step / spe;
        let epoch_start = (ChaCha8Rng::get_seed(&rng), rng.get_word_pos());
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = (0.0, 0usize);
        for b in (ck.step - epoch * spe) as usize..spe as usize {
            if ck.step >= stop {
                break;
            }
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let batch: Vec<&DaemRecord> = idx.iter().map(|&i| &dataset.records[i]).collect();
            for r in &batch {
                check_record_horizon(r, dataset.config.t_train)?;
            }
            let lr = cfg.lr_at(ck.step, total);
            let (loss, grads) = batch_gradient(&model, &ck.params, &batch, opts.exec)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                ck.rng_seed = epoch_start.0;
                ck.rng_word_pos = epoch_start.1;
                save_run(&ck, &losses, opts)?;
                return Err(Error::DivergedTraining { step: ck.step, loss: loss as f32 });
            }
            adamw_step(&mut ck.params, &grads, &mut ck.optimizer, cfg, lr);
            ck.step += 1;
            ck.epoch = epoch;
            losses.push(LossRecord { step: ck.step, epoch, loss, lr });
            epoch_loss.0 += loss;
            epoch_loss.1 += 1;
            if cfg.checkpoint_every > 0 && ck.step % cfg.checkpoint_every == 0 && ck.step < stop {
                ck.rng_seed = epoch_start.0;
                ck.rng_word_pos = epoch_start.1;
                save_run(&ck, &losses, opts)?;
            }
        }
        if opts.verbose && epoch_loss.1 > 0 {
            eprintln!("epoch {epoch}: mean loss {:.6e} over {} steps", epoch_loss.0 / epoch_loss.1 as f64, epoch_loss.1);
        }
        if ck.step % spe != 0 {
            // Stopped mid-epoch: resume must replay this permutation.
            ck.rng_seed = epoch_start.0;
            ck.rng_word_pos = epoch_start.1;
            break;
        }
        ck.rng_seed = ChaCha8Rng::get_seed(&rng);
        ck.rng_word_pos = rng.get_word_pos();
    }
    save_run(&ck, &losses, opts)?;
    Ok(TrainOutcome { checkpoint: ck, losses })
}

/// Loads a checkpoint and rebuilds its model.
pub fn load_model(path: &Path) -> Result<(Model, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    Ok((Model::new(ck.model.clone())?, ck))
}
