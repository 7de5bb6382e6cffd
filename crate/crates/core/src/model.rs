//! The time-conditioned windowed-attention U-Net and the convolutional baseline.
//!
//! Feature maps live on the tape as `[tokens, channels]` with tokens in
//! row-major `(p, q)` order, matching the raster layout. Spatial rearrangements
//! (patching, windows, shifts, padding, im2col) are precomputed gather maps.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{self, Reader, Writer};
use crate::config::{join, ConfigMap};
use crate::error::{Error, Result};
use crate::tensor::{self, Element, GatherIndex, Tape, Var};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CVQC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Wigner inputs are multiplied by this (so `|W| ≤ 1/π` maps into `[−1, 1]`)
/// and outputs divided by it.
pub const INPUT_SCALE: f64 = std::f64::consts::PI;

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    SwinAdaLN,
    CnnBaseline,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::SwinAdaLN => "swin",
            Variant::CnnBaseline => "cnn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "swin" | "swin_adaln" => Ok(Variant::SwinAdaLN),
            "cnn" | "cnn_baseline" => Ok(Variant::CnnBaseline),
            other => Err(Error::ModelConfig(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Total input channels: Wigner channels plus one uniform time raster
    /// (Δτ for the stepwise model, τ for the baseline) when present.
    pub in_channels: usize,
    pub wigner_channels: usize,
    pub grid_side: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub window: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub bottleneck_depth: usize,
    pub cond_dim: usize,
    pub mlp_ratio: usize,
    /// Sinusoid frequencies per embedded time scalar.
    pub time_frequencies: usize,
    /// Zero-pad maps whose side the window does not divide (padded tokens are masked).
    pub pad_windows: bool,
    pub head_features: usize,
    pub cnn_width: usize,
}

impl ModelConfig {
    /// Five-channel snapshot model, 8×8 windows.
    pub fn swin_markovian() -> Self {
        ModelConfig {
            variant: Variant::SwinAdaLN,
            in_channels: 5,
            wigner_channels: 5,
            grid_side: 48,
            embed_dim: 48,
            patch_size: 2,
            window: 8,
            depths: vec![2, 2],
            heads: vec![3, 6],
            bottleneck_depth: 2,
            cond_dim: 128,
            mlp_ratio: 4,
            time_frequencies: 32,
            pad_windows: true,
            head_features: 16,
            cnn_width: 32,
        }
    }

    /// Stepwise model: Wigner + Δτ raster, 6×6 windows.
    pub fn swin_stepwise() -> Self {
        ModelConfig { in_channels: 2, wigner_channels: 1, window: 6, ..Self::swin_markovian() }
    }

    /// Convolutional U-Net over five Wigner channels plus a τ raster.
    pub fn cnn_baseline() -> Self {
        ModelConfig { variant: Variant::CnnBaseline, in_channels: 6, wigner_channels: 5, ..Self::swin_markovian() }
    }

    /// Small geometry for gradient checks: 8×8 grid, window 2, width 8.
    pub fn reduced(variant: Variant) -> Self {
        let base = match variant {
            Variant::SwinAdaLN => Self::swin_markovian(),
            Variant::CnnBaseline => Self::cnn_baseline(),
        };
        ModelConfig {
            grid_side: 8,
            embed_dim: 8,
            window: 2,
            heads: vec![1, 2],
            bottleneck_depth: 1,
            cond_dim: 16,
            time_frequencies: 4,
            head_features: 4,
            cnn_width: 4,
            ..base
        }
    }

    pub fn stepwise(&self) -> bool {
        self.variant == Variant::SwinAdaLN && self.in_channels == self.wigner_channels + 1
    }

    pub fn token_side(&self) -> usize {
        self.grid_side / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ModelConfig(m));
        if self.grid_side == 0 || self.wigner_channels == 0 {
            return bad("grid side and channel count must be positive".into());
        }
        match self.variant {
            Variant::SwinAdaLN => {
                if self.in_channels != self.wigner_channels && self.in_channels != self.wigner_channels + 1 {
                    return bad(format!(
                        "in_channels {} must equal wigner_channels {} (+1 for a Δτ raster)",
                        self.in_channels, self.wigner_channels
                    ));
                }
                if self.patch_size == 0 || self.grid_side % self.patch_size != 0 {
                    return bad(format!("grid side {} not divisible by patch {}", self.grid_side, self.patch_size));
                }
                let stages = self.depths.len();
                if stages == 0 || self.heads.len() != stages {
                    return bad("depths and heads must be non-empty and of equal length".into());
                }
                if self.token_side() % (1 << stages) != 0 {
                    return bad(format!("token side {} not divisible by 2^{stages}", self.token_side()));
                }
                if self.window == 0 {
                    return bad("window must be positive".into());
                }
                for (s, &h) in self.heads.iter().chain([&(self.heads[stages - 1] * 2)]).enumerate() {
                    let dim = self.embed_dim << s;
                    if h == 0 || dim % h != 0 {
                        return bad(format!("stage {s}: dim {dim} not divisible by {h} heads"));
                    }
                    let side = self.token_side() >> s;
                    let win = self.window.min(side);
                    if side % win != 0 && !self.pad_windows {
                        return bad(format!("stage {s}: window {win} does not divide side {side} and padding is disabled"));
                    }
                }
                if self.time_frequencies == 0 || self.cond_dim == 0 {
                    return bad("time embedding sizes must be positive".into());
                }
            }
            Variant::CnnBaseline => {
                if self.in_channels != self.wigner_channels + 1 {
                    return bad("the baseline takes the Wigner channels plus one τ raster".into());
                }
                if self.grid_side % 4 != 0 {
                    return bad("baseline needs a grid side divisible by 4".into());
                }
            }
        }
        Ok(())
    }

    pub fn to_config(&self) -> ConfigMap {
        let mut c = ConfigMap::default();
        c.insert("model.variant", self.variant.name());
        c.insert("model.in_channels", self.in_channels);
        c.insert("model.wigner_channels", self.wigner_channels);
        c.insert("model.grid_side", self.grid_side);
        c.insert("model.embed_dim", self.embed_dim);
        c.insert("model.patch_size", self.patch_size);
        c.insert("model.window", self.window);
        c.insert("model.depths", join(&self.depths));
        c.insert("model.heads", join(&self.heads));
        c.insert("model.bottleneck_depth", self.bottleneck_depth);
        c.insert("model.cond_dim", self.cond_dim);
        c.insert("model.mlp_ratio", self.mlp_ratio);
        c.insert("model.time_frequencies", self.time_frequencies);
        c.insert("model.pad_windows", self.pad_windows);
        c.insert("model.head_features", self.head_features);
        c.insert("model.cnn_width", self.cnn_width);
        c
    }

    /// Reads `model.*` keys; `model.preset` (swin_markovian|swin_stepwise|cnn)
    /// supplies defaults.
    pub fn from_config(c: &ConfigMap) -> Result<Self> {
        c.reject_unknown(
            "model.",
            &[
                "preset", "variant", "in_channels", "wigner_channels", "grid_side", "embed_dim", "patch_size", "window",
                "depths", "heads", "bottleneck_depth", "cond_dim", "mlp_ratio", "time_frequencies", "pad_windows",
                "head_features", "cnn_width",
            ],
        )?;
        let base = match c.get::<String>("model.preset")?.as_deref() {
            None | Some("swin_markovian") => Self::swin_markovian(),
            Some("swin_stepwise") => Self::swin_stepwise(),
            Some("cnn") => Self::cnn_baseline(),
            Some(other) => return Err(Error::Config { line: 0, message: format!("unknown model preset `{other}`") }),
        };
        let m = ModelConfig {
            variant: match c.get::<String>("model.variant")? {
                Some(v) => Variant::parse(&v)?,
                None => base.variant,
            },
            in_channels: c.get_or("model.in_channels", base.in_channels)?,
            wigner_channels: c.get_or("model.wigner_channels", base.wigner_channels)?,
            grid_side: c.get_or("model.grid_side", base.grid_side)?,
            embed_dim: c.get_or("model.embed_dim", base.embed_dim)?,
            patch_size: c.get_or("model.patch_size", base.patch_size)?,
            window: c.get_or("model.window", base.window)?,
            depths: c.get_list("model.depths")?.unwrap_or(base.depths),
            heads: c.get_list("model.heads")?.unwrap_or(base.heads),
            bottleneck_depth: c.get_or("model.bottleneck_depth", base.bottleneck_depth)?,
            cond_dim: c.get_or("model.cond_dim", base.cond_dim)?,
            mlp_ratio: c.get_or("model.mlp_ratio", base.mlp_ratio)?,
            time_frequencies: c.get_or("model.time_frequencies", base.time_frequencies)?,
            pad_windows: c.get_or("model.pad_windows", base.pad_windows)?,
            head_features: c.get_or("model.head_features", base.head_features)?,
            cnn_width: c.get_or("model.cnn_width", base.cnn_width)?,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        self.to_config().to_text()
    }

    pub fn digest(&self) -> u64 {
        codec::digest64(self.to_text().as_bytes())
    }
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    /// `value · I` for a square matrix.
    Identity(f64),
    /// Normal with the given standard deviation.
    Normal(f64),
}

/// Named `f32` parameter tensors in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("param", format!("{name}: {} values for {shape:?}", data.len())));
        }
        if self.index.contains_key(name) {
            return Err(Error::ModelConfig(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.shapes.push(shape);
        self.data.push(data);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn data(&self, i: usize) -> &[f32] {
        &self.data[i]
    }

    pub fn data_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.position(name).map(|i| self.data[i].as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        self.position(name).map(|i| self.data[i].as_mut_slice())
    }

    /// Entries under `input.` are fitted from data, never optimized.
    pub fn is_trainable(&self, i: usize) -> bool {
        !self.names[i].starts_with("input.")
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }
}

/// Binds store entries onto a tape on first use.
pub struct Binder<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Binder { store, vars: vec![None; store.len()] }
    }

    fn get<T: Element>(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        let i = self.store.position(name).ok_or_else(|| Error::ModelConfig(format!("missing parameter {name}")))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let data = self.store.data[i].iter().map(|&x| T::from_f64(x as f64)).collect();
        let v = if self.store.is_trainable(i) {
            tape.param(data, &self.store.shapes[i])?
        } else {
            tape.constant(data, &self.store.shapes[i])?
        };
        self.vars[i] = Some(v);
        Ok(v)
    }

    /// Binds parameter `name` to explicit values in the tape's precision
    /// instead of the stored `f32` data. Must precede the forward pass.
    pub fn bind_values<T: Element>(&mut self, tape: &mut Tape<T>, name: &str, data: Vec<T>) -> Result<Var> {
        let i = self.store.position(name).ok_or_else(|| Error::ModelConfig(format!("missing parameter {name}")))?;
        let v = tape.param(data, &self.store.shapes[i])?;
        self.vars[i] = Some(v);
        Ok(v)
    }

    /// Gradient per parameter, zeros for parameters the forward pass never touched.
    pub fn gradients<T: Element>(&self, tape: &Tape<T>) -> Vec<Vec<f32>> {
        self.gradients_f64(tape).into_iter().map(|g| g.into_iter().map(|x| x as f32).collect()).collect()
    }

    pub fn gradients_f64<T: Element>(&self, tape: &Tape<T>) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, v)| match v.and_then(|v| tape.grad(v)) {
                Some(g) => g.iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; self.store.data[i].len()],
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Geometry

struct WindowMap {
    to_windows: Arc<GatherIndex>,
    from_windows: Arc<GatherIndex>,
    /// `[n_windows·heads, T, T]` additive mask, already replicated over heads.
    mask: Option<Arc<Vec<f64>>>,
    n_windows: usize,
    tokens: usize,
}

struct Level {
    side: usize,
    dim: usize,
    heads: usize,
    maps: [Arc<WindowMap>; 2],
}

impl Level {
    fn new(side: usize, dim: usize, heads: usize, window: usize) -> Self {
        let win = window.min(side);
        let padded = side.div_ceil(win) * win;
        let shift = if win < side { win / 2 } else { 0 };
        let plain = Arc::new(window_map(side, padded, dim, heads, win, 0));
        let shifted = if shift == 0 { Arc::clone(&plain) } else { Arc::new(window_map(side, padded, dim, heads, win, shift)) };
        Level { side, dim, heads, maps: [plain, shifted] }
    }
}

fn window_map(side: usize, padded: usize, c: usize, heads: usize, win: usize, shift: usize) -> WindowMap {
    let nwx = padded / win;
    let n_windows = nwx * nwx;
    let t_count = win * win;
    // Shifted-frame coordinate of window `wi`, token `t`, and its original position.
    let orig = |wi: usize, t: usize| {
        let ys = (wi / nwx) * win + t / win;
        let xs = (wi % nwx) * win + t % win;
        let (y, x) = ((ys + shift) % padded, (xs + shift) % padded);
        (ys, xs, (y < side && x < side).then_some(y * side + x))
    };
    let to = GatherIndex::new(
        side * side * c,
        (0..n_windows).flat_map(|wi| {
            (0..t_count).flat_map(move |t| {
                let src = orig(wi, t).2;
                (0..c).map(move |ch| src.map(|s| s * c + ch))
            })
        }),
    );
    let from = GatherIndex::new(
        n_windows * t_count * c,
        (0..side * side).flat_map(|pos| {
            let (y, x) = (pos / side, pos % side);
            let ys = (y + padded - shift) % padded;
            let xs = (x + padded - shift) % padded;
            let wi = (ys / win) * nwx + xs / win;
            let t = (ys % win) * win + xs % win;
            (0..c).map(move |ch| Some((wi * t_count + t) * c + ch))
        }),
    );
    let region = |v: usize| {
        if shift == 0 || v < padded - win {
            0
        } else if v < padded - shift {
            1
        } else {
            2
        }
    };
    let labels: Vec<Vec<usize>> = (0..n_windows)
        .map(|wi| {
            (0..t_count)
                .map(|t| {
                    let (ys, xs, src) = orig(wi, t);
                    if src.is_none() {
                        usize::MAX
                    } else {
                        region(ys) * 3 + region(xs)
                    }
                })
                .collect()
        })
        .collect();
    let needs_mask = labels.iter().any(|l| l.iter().any(|&v| v != l[0]));
    let mask = needs_mask.then(|| {
        let mut m = Vec::with_capacity(n_windows * heads * t_count * t_count);
        for l in &labels {
            for _ in 0..heads {
                for i in 0..t_count {
                    m.extend((0..t_count).map(|j| if l[i] == l[j] { 0.0 } else { MASK_NEG }));
                }
            }
        }
        Arc::new(m)
    });
    WindowMap { to_windows: Arc::new(to), from_windows: Arc::new(from), mask, n_windows, tokens: t_count }
}

struct Geometry {
    patch_in: Arc<GatherIndex>,
    encoder: Vec<Level>,
    bottleneck: Level,
    merge: Vec<Arc<GatherIndex>>,
    /// `expand[s]` maps level `s + 1` features to level `s` resolution.
    expand: Vec<Arc<GatherIndex>>,
    patch_out: Arc<GatherIndex>,
    /// Baseline: im2col per (side, channels).
    im2col: HashMap<(usize, usize), Arc<GatherIndex>>,
    cnn_down: Vec<Arc<GatherIndex>>,
    cnn_up: Vec<Arc<GatherIndex>>,
}

impl Geometry {
    fn new(cfg: &ModelConfig) -> Self {
        let g = cfg.grid_side;
        let mut geo = Geometry {
            patch_in: Arc::new(GatherIndex::new(0, [])),
            encoder: vec![],
            bottleneck: Level::new(1, 1, 1, 1),
            merge: vec![],
            expand: vec![],
            patch_out: Arc::new(GatherIndex::new(0, [])),
            im2col: HashMap::new(),
            cnn_down: vec![],
            cnn_up: vec![],
        };
        match cfg.variant {
            Variant::SwinAdaLN => {
                let p = cfg.patch_size;
                let ts = cfg.token_side();
                geo.patch_in = Arc::new(tensor::space_to_depth_index(g, g, cfg.in_channels, p));
                let stages = cfg.depths.len();
                for s in 0..stages {
                    let (side, dim) = (ts >> s, cfg.embed_dim << s);
                    geo.encoder.push(Level::new(side, dim, cfg.heads[s], cfg.window));
                    geo.merge.push(Arc::new(tensor::space_to_depth_index(side, side, dim, 2)));
                    geo.expand.push(Arc::new(tensor::depth_to_space_index(side / 2, side / 2, dim, 2)));
                }
                geo.bottleneck = Level::new(ts >> stages, cfg.embed_dim << stages, cfg.heads[stages - 1] * 2, cfg.window);
                geo.patch_out = Arc::new(tensor::depth_to_space_index(ts, ts, cfg.head_features, p));
            }
            Variant::CnnBaseline => {
                let w = cfg.cnn_width;
                for (side, cs) in [
                    (g, vec![cfg.in_channels, w, 2 * w]),
                    (g / 2, vec![2 * w, 4 * w]),
                    (g / 4, vec![4 * w]),
                ] {
                    for c in cs {
                        geo.im2col.insert((side, c), Arc::new(tensor::im2col_index(side, side, c, 3)));
                    }
                }
                geo.cnn_down = vec![
                    Arc::new(tensor::space_to_depth_index(g, g, w, 2)),
                    Arc::new(tensor::space_to_depth_index(g / 2, g / 2, 2 * w, 2)),
                ];
                geo.cnn_up = vec![
                    Arc::new(tensor::depth_to_space_index(g / 2, g / 2, w, 2)),
                    Arc::new(tensor::depth_to_space_index(g / 4, g / 4, 2 * w, 2)),
                ];
            }
        }
        geo
    }
}

// ---------------------------------------------------------------------------
// Model

/// One network evaluation's inputs. Rasters are `grid_side²` values, `q` fastest.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub wigner: &'a [&'a [f32]],
    pub tau: f64,
    pub delta_tau: Option<f64>,
}

/// Whether AdaLN modulation is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    On,
    /// Plain normalization everywhere; used to check identity at initialization.
    Off,
}

pub struct Model {
    pub config: ModelConfig,
    geo: Geometry,
}

struct Ctx<'t, 's, T: Element> {
    tape: &'t mut Tape<T>,
    binder: Binder<'s>,
    conditioning: Conditioning,
}

impl<T: Element> Ctx<'_, '_, T> {
    fn p(&mut self, name: &str) -> Result<Var> {
        self.binder.get(self.tape, name)
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    fn layer_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let n = self.tape.normalize(x, LN_EPS)?;
        let g = self.p(&format!("{name}.g"))?;
        let b = self.p(&format!("{name}.b"))?;
        let y = self.tape.mul_row(n, g)?;
        self.tape.add_row(y, b)
    }

    /// `(1 + γ̂(e)) ⊙ LN(x) + β(e)`.
    fn adaln(&mut self, x: Var, cond: Var, name: &str) -> Result<Var> {
        let n = self.tape.normalize(x, LN_EPS)?;
        if self.conditioning == Conditioning::Off {
            return Ok(n);
        }
        let d = *self.tape.shape(x).last().expect("rank >= 1");
        let m = self.linear(cond, name)?;
        let m = self.tape.reshape(m, &[2 * d])?;
        let gamma = self.tape.slice(m, 0, 0, d)?;
        let beta = self.tape.slice(m, 0, d, d)?;
        let ones = self.tape.constant(vec![T::one(); d], &[d])?;
        let scale = self.tape.add(gamma, ones)?;
        let y = self.tape.mul_row(n, scale)?;
        self.tape.add_row(y, beta)
    }

    fn gather(&mut self, x: Var, idx: &Arc<GatherIndex>, shape: &[usize]) -> Result<Var> {
        self.tape.gather(x, idx, shape)
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let geo = Geometry::new(&config);
        Ok(Model { config, geo })
    }

    fn declare(&self) -> Vec<(String, Vec<usize>, Init)> {
        let cfg = &self.config;
        let wc = cfg.wigner_channels;
        let mut out = vec![
            ("input.offset".to_string(), vec![wc], Init::Zeros),
            ("input.whiten".to_string(), vec![wc, wc], Init::Identity(INPUT_SCALE)),
        ];
        let linear = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, i: usize, o: usize, zero: bool| {
            let init = if zero { Init::Zeros } else { Init::Normal(1.0 / (i as f64).sqrt()) };
            out.push((format!("{name}.w"), vec![i, o], init));
            out.push((format!("{name}.b"), vec![o], Init::Zeros));
        };
        match cfg.variant {
            Variant::SwinAdaLN => {
                let tf = cfg.time_frequencies * 2 * if cfg.stepwise() { 2 } else { 1 };
                linear(&mut out, "time.fc1", tf, cfg.cond_dim, false);
                linear(&mut out, "time.fc2", cfg.cond_dim, cfg.cond_dim, false);
                let p2 = cfg.patch_size * cfg.patch_size;
                linear(&mut out, "embed", p2 * cfg.in_channels, cfg.embed_dim, false);
                let ts = cfg.token_side();
                out.push(("embed.pos".into(), vec![ts * ts, cfg.embed_dim], Init::Normal(0.02)));
                let block = |out: &mut Vec<_>, name: String, dim: usize| {
                    linear(out, &format!("{name}.ada1"), cfg.cond_dim, 2 * dim, true);
                    linear(out, &format!("{name}.qkv"), dim, 3 * dim, false);
                    linear(out, &format!("{name}.proj"), dim, dim, false);
                    linear(out, &format!("{name}.ada2"), cfg.cond_dim, 2 * dim, true);
                    linear(out, &format!("{name}.fc1"), dim, cfg.mlp_ratio * dim, false);
                    linear(out, &format!("{name}.fc2"), cfg.mlp_ratio * dim, dim, false);
                };
                let stages = cfg.depths.len();
                for s in 0..stages {
                    let dim = cfg.embed_dim << s;
                    for b in 0..cfg.depths[s] {
                        block(&mut out, format!("enc{s}.{b}"), dim);
                    }
                    out.push((format!("merge{s}.norm.g"), vec![4 * dim], Init::Ones));
                    out.push((format!("merge{s}.norm.b"), vec![4 * dim], Init::Zeros));
                    linear(&mut out, &format!("merge{s}.red"), 4 * dim, 2 * dim, false);
                }
                let bdim = cfg.embed_dim << stages;
                for b in 0..cfg.bottleneck_depth {
                    block(&mut out, format!("mid.{b}"), bdim);
                }
                for s in (0..stages).rev() {
                    let dim = cfg.embed_dim << s;
                    linear(&mut out, &format!("expand{s}"), 2 * dim, 4 * dim, false);
                    linear(&mut out, &format!("fuse{s}"), 2 * dim, dim, false);
                    for b in 0..cfg.depths[s] {
                        block(&mut out, format!("dec{s}.{b}"), dim);
                    }
                }
                out.push(("out.norm.g".into(), vec![cfg.embed_dim], Init::Ones));
                out.push(("out.norm.b".into(), vec![cfg.embed_dim], Init::Zeros));
                linear(&mut out, "out.expand", cfg.embed_dim, p2 * cfg.head_features, false);
                linear(&mut out, "head", cfg.head_features + cfg.in_channels, 1, true);
            }
            Variant::CnnBaseline => {
                let w = cfg.cnn_width;
                let conv = |out: &mut Vec<_>, name: &str, i: usize, o: usize| linear(out, name, 9 * i, o, false);
                conv(&mut out, "c0a", cfg.in_channels, w);
                conv(&mut out, "c0b", w, w);
                linear(&mut out, "down0", 4 * w, 2 * w, false);
                conv(&mut out, "c1a", 2 * w, 2 * w);
                conv(&mut out, "c1b", 2 * w, 2 * w);
                linear(&mut out, "down1", 8 * w, 4 * w, false);
                conv(&mut out, "c2a", 4 * w, 4 * w);
                conv(&mut out, "c2b", 4 * w, 4 * w);
                linear(&mut out, "up1", 4 * w, 8 * w, false);
                conv(&mut out, "d1a", 4 * w, 2 * w);
                conv(&mut out, "d1b", 2 * w, 2 * w);
                linear(&mut out, "up0", 2 * w, 4 * w, false);
                conv(&mut out, "d0a", 2 * w, w);
                conv(&mut out, "d0b", w, w);
                linear(&mut out, "head", w + cfg.in_channels, 1, true);
            }
        }
        out
    }

    /// Deterministic initialization from `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        for (name, shape, init) in self.declare() {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Identity(v) => {
                    let d = shape[0];
                    (0..n).map(|k| if k / d == k % d { v as f32 } else { 0.0 }).collect()
                }
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| d.sample(&mut rng) as f32).collect()
                }
            };
            store.insert(&name, shape, data).expect("declared shapes are consistent");
        }
        store
    }

    pub fn parameter_count(&self) -> usize {
        self.declare().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let cfg = &self.config;
        if input.wigner.len() != cfg.wigner_channels {
            return Err(Error::ModelConfig(format!(
                "expected {} Wigner channels, got {}",
                cfg.wigner_channels,
                input.wigner.len()
            )));
        }
        let n = cfg.grid_side * cfg.grid_side;
        if input.wigner.iter().any(|w| w.len() != n) {
            return Err(Error::ModelConfig(format!("rasters must hold {n} values")));
        }
        if cfg.stepwise() && input.delta_tau.is_none() {
            return Err(Error::ModelConfig("stepwise model needs Δτ".into()));
        }
        if !input.tau.is_finite() || input.delta_tau.is_some_and(|d| !d.is_finite()) {
            return Err(Error::InvalidArgument("non-finite time input".into()));
        }
        Ok(())
    }

    /// Time raster value appended after the Wigner channels, if any.
    fn extra_channel(&self, input: &ModelInput) -> Option<f64> {
        match self.config.variant {
            Variant::CnnBaseline => Some(input.tau),
            Variant::SwinAdaLN if self.config.stepwise() => input.delta_tau,
            Variant::SwinAdaLN => None,
        }
    }

    /// `[grid², in_channels]`: transformed Wigner channels, then the time raster.
    fn prepare_input<T: Element>(&self, cx: &mut Ctx<T>, input: &ModelInput) -> Result<Var> {
        let cfg = &self.config;
        let n = cfg.grid_side * cfg.grid_side;
        let wc = cfg.wigner_channels;
        let mut raw = Vec::with_capacity(n * wc);
        for pix in 0..n {
            raw.extend(input.wigner.iter().map(|w| T::from_f64(w[pix] as f64)));
        }
        let x = cx.tape.constant(raw, &[n, wc])?;
        let offset = cx.p("input.offset")?;
        let x = cx.tape.add_row(x, offset)?;
        let whiten = cx.p("input.whiten")?;
        let x = cx.tape.matmul(x, whiten)?;
        match self.extra_channel(input) {
            Some(v) => {
                let t = cx.tape.constant(vec![T::from_f64(v); n], &[n, 1])?;
                cx.tape.concat(&[x, t], 1)
            }
            None => Ok(x),
        }
    }

    /// Fits the frozen input transform so that, over every pixel of the given
    /// samples, the Wigner channels have zero mean and identity covariance
    /// (principal-axis whitening). Directions with variance below `1e-10` of
    /// the largest are left unamplified.
    pub fn fit_input_whitening<'a>(
        &self,
        params: &mut ParamStore,
        samples: impl IntoIterator<Item = Vec<&'a [f32]>>,
    ) -> Result<()> {
        let wc = self.config.wigner_channels;
        let mut count = 0usize;
        let mut sum = vec![0.0f64; wc];
        let mut outer = nalgebra::DMatrix::<f64>::zeros(wc, wc);
        for channels in samples {
            if channels.len() != wc {
                return Err(Error::ModelConfig(format!("expected {wc} channels, got {}", channels.len())));
            }
            for pix in 0..channels[0].len() {
                let v: Vec<f64> = channels.iter().map(|c| c[pix] as f64).collect();
                for a in 0..wc {
                    sum[a] += v[a];
                    for b in 0..wc {
                        outer[(a, b)] += v[a] * v[b];
                    }
                }
                count += 1;
            }
        }
        if count < 2 {
            return Err(Error::InvalidArgument("whitening needs at least two pixels".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let cov = nalgebra::DMatrix::from_fn(wc, wc, |a, b| outer[(a, b)] / count as f64 - mean[a] * mean[b]);
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..wc).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]].max(f64::MIN_POSITIVE);
        let floor = 1e-10 * top;
        let mut whiten = vec![0.0f32; wc * wc];
        for (col, &k) in order.iter().enumerate() {
            let u = eig.eigenvectors.column(k);
            // Sign convention: largest-magnitude entry positive.
            let pivot = (0..wc).max_by(|&a, &b| u[a].abs().total_cmp(&u[b].abs())).expect("wc > 0");
            let sign = u[pivot].signum();
            let scale = sign / eig.eigenvalues[k].max(floor).sqrt();
            for row in 0..wc {
                whiten[row * wc + col] = (u[row] * scale) as f32;
            }
        }
        params.get_mut("input.offset").expect("declared").iter_mut().zip(&mean).for_each(|(o, m)| *o = -*m as f32);
        params.get_mut("input.whiten").expect("declared").copy_from_slice(&whiten);
        Ok(())
    }

    /// Sinusoidal features of τ (and Δτ) for the embedding MLP.
    pub fn time_features(&self, tau: f64, delta_tau: Option<f64>) -> Vec<f64> {
        let nf = self.config.time_frequencies;
        let freqs: Vec<f64> = (0..nf)
            .map(|k| if nf == 1 { 1.0 } else { 0.1 * 100f64.powf(k as f64 / (nf - 1) as f64) })
            .collect();
        let mut out = Vec::with_capacity(4 * nf);
        let mut push = |v: f64| {
            out.extend(freqs.iter().map(|w| (w * v).sin()));
            out.extend(freqs.iter().map(|w| (w * v).cos()));
        };
        push(tau);
        if self.config.stepwise() {
            push(delta_tau.unwrap_or(0.0));
        }
        out
    }

    fn time_embed_on<T: Element>(&self, cx: &mut Ctx<T>, tau: f64, delta_tau: Option<f64>) -> Result<Var> {
        let f = self.time_features(tau, delta_tau);
        let n = f.len();
        let x = cx.tape.constant(f.into_iter().map(T::from_f64).collect(), &[1, n])?;
        let h = cx.linear(x, "time.fc1")?;
        let h = cx.tape.gelu(h);
        cx.linear(h, "time.fc2")
    }

    /// Embedding `e_τ` (length `cond_dim`).
    pub fn time_embed(&self, params: &ParamStore, tau: f64, delta_tau: Option<f64>) -> Result<Vec<f64>> {
        let mut tape = Tape::<f64>::new();
        let mut cx = Ctx { tape: &mut tape, binder: Binder::new(params), conditioning: Conditioning::On };
        let e = self.time_embed_on(&mut cx, tau, delta_tau)?;
        Ok(tape.value(e).to_vec())
    }

    fn attention<T: Element>(&self, cx: &mut Ctx<T>, x: Var, level: &Level, map: &WindowMap, name: &str) -> Result<Var> {
        let (c, heads) = (level.dim, level.heads);
        let dh = c / heads;
        let (nw, t) = (map.n_windows, map.tokens);
        let xw = cx.gather(x, &map.to_windows, &[nw * t, c])?;
        let qkv = cx.linear(xw, &format!("{name}.qkv"))?;
        let qkv = cx.tape.reshape(qkv, &[nw, t, 3, heads, dh])?;
        let qkv = cx.tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = cx.tape.reshape(qkv, &[3, nw * heads, t, dh])?;
        let mut parts = [None; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let s = cx.tape.slice(qkv, 0, i, 1)?;
            *part = Some(cx.tape.reshape(s, &[nw * heads, t, dh])?);
        }
        let [q, k, v] = parts.map(|p| p.expect("set above"));
        let scores = cx.tape.bmm(q, k, true)?;
        let mut scores = cx.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(mask) = &map.mask {
            let m = cx.tape.constant(mask.iter().map(|&v| T::from_f64(v)).collect(), &[nw * heads, t, t])?;
            scores = cx.tape.add(scores, m)?;
        }
        let attn = cx.tape.softmax(scores)?;
        let out = cx.tape.bmm(attn, v, false)?;
        let out = cx.tape.reshape(out, &[nw, heads, t, dh])?;
        let out = cx.tape.permute(out, &[0, 2, 1, 3])?;
        let out = cx.tape.reshape(out, &[nw * t, c])?;
        let out = cx.linear(out, &format!("{name}.proj"))?;
        cx.gather(out, &map.from_windows, &[level.side * level.side, c])
    }

    fn block<T: Element>(&self, cx: &mut Ctx<T>, x: Var, cond: Var, level: &Level, parity: usize, name: &str) -> Result<Var> {
        let h = cx.adaln(x, cond, &format!("{name}.ada1"))?;
        let h = self.attention(cx, h, level, &level.maps[parity % 2], name)?;
        let x = cx.tape.add(x, h)?;
        let h = cx.adaln(x, cond, &format!("{name}.ada2"))?;
        let h = cx.linear(h, &format!("{name}.fc1"))?;
        let h = cx.tape.gelu(h);
        let h = cx.linear(h, &format!("{name}.fc2"))?;
        cx.tape.add(x, h)
    }

    fn swin_forward<T: Element>(&self, cx: &mut Ctx<T>, input: Var, m: &ModelInput) -> Result<Var> {
        let cfg = &self.config;
        let geo = &self.geo;
        let p2 = cfg.patch_size * cfg.patch_size;
        let ts = cfg.token_side();
        let cond = self.time_embed_on(cx, m.tau, m.delta_tau)?;
        let cond = cx.tape.gelu(cond);

        let x = cx.gather(input, &geo.patch_in, &[ts * ts, p2 * cfg.in_channels])?;
        let x = cx.linear(x, "embed")?;
        let pos = cx.p("embed.pos")?;
        let mut x = cx.tape.add(x, pos)?;

        let stages = cfg.depths.len();
        let mut skips = Vec::with_capacity(stages);
        for s in 0..stages {
            let level = &geo.encoder[s];
            for b in 0..cfg.depths[s] {
                x = self.block(cx, x, cond, level, b, &format!("enc{s}.{b}"))?;
            }
            skips.push(x);
            let half = level.side / 2;
            x = cx.gather(x, &geo.merge[s], &[half * half, 4 * level.dim])?;
            x = cx.layer_norm(x, &format!("merge{s}.norm"))?;
            x = cx.linear(x, &format!("merge{s}.red"))?;
        }
        for b in 0..cfg.bottleneck_depth {
            x = self.block(cx, x, cond, &geo.bottleneck, b, &format!("mid.{b}"))?;
        }
        for s in (0..stages).rev() {
            let level = &geo.encoder[s];
            x = cx.linear(x, &format!("expand{s}"))?;
            x = cx.gather(x, &geo.expand[s], &[level.side * level.side, level.dim])?;
            x = cx.tape.concat(&[x, skips[s]], 1)?;
            x = cx.linear(x, &format!("fuse{s}"))?;
            for b in 0..cfg.depths[s] {
                x = self.block(cx, x, cond, level, b, &format!("dec{s}.{b}"))?;
            }
        }
        let x = cx.layer_norm(x, "out.norm")?;
        let x = cx.linear(x, "out.expand")?;
        let g = cfg.grid_side;
        let x = cx.gather(x, &geo.patch_out, &[g * g, cfg.head_features])?;
        let x = cx.tape.gelu(x);
        let x = cx.tape.concat(&[x, input], 1)?;
        cx.linear(x, "head")
    }

    fn conv<T: Element>(&self, cx: &mut Ctx<T>, x: Var, side: usize, name: &str) -> Result<Var> {
        let c = cx.tape.shape(x)[1];
        let idx = self.geo.im2col.get(&(side, c)).ok_or_else(|| Error::ModelConfig(format!("no im2col map for {side}x{side}x{c}")))?;
        let cols = cx.gather(x, &Arc::clone(idx), &[side * side, 9 * c])?;
        let y = cx.linear(cols, name)?;
        Ok(cx.tape.gelu(y))
    }

    fn cnn_forward<T: Element>(&self, cx: &mut Ctx<T>, input: Var) -> Result<Var> {
        let g = self.config.grid_side;
        let w = self.config.cnn_width;
        let (g1, g2) = (g / 2, g / 4);
        let x = self.conv(cx, input, g, "c0a")?;
        let s0 = self.conv(cx, x, g, "c0b")?;
        let x = cx.gather(s0, &self.geo.cnn_down[0], &[g1 * g1, 4 * w])?;
        let x = cx.linear(x, "down0")?;
        let x = self.conv(cx, x, g1, "c1a")?;
        let s1 = self.conv(cx, x, g1, "c1b")?;
        let x = cx.gather(s1, &self.geo.cnn_down[1], &[g2 * g2, 8 * w])?;
        let x = cx.linear(x, "down1")?;
        let x = self.conv(cx, x, g2, "c2a")?;
        let x = self.conv(cx, x, g2, "c2b")?;
        let x = cx.linear(x, "up1")?;
        let x = cx.gather(x, &self.geo.cnn_up[1], &[g1 * g1, 2 * w])?;
        let x = cx.tape.concat(&[x, s1], 1)?;
        let x = self.conv(cx, x, g1, "d1a")?;
        let x = self.conv(cx, x, g1, "d1b")?;
        let x = cx.linear(x, "up0")?;
        let x = cx.gather(x, &self.geo.cnn_up[0], &[g * g, w])?;
        let x = cx.tape.concat(&[x, s0], 1)?;
        let x = self.conv(cx, x, g, "d0a")?;
        let x = self.conv(cx, x, g, "d0b")?;
        let x = cx.tape.concat(&[x, input], 1)?;
        cx.linear(x, "head")
    }

    /// Records the forward pass on `tape`; returns the predicted raster var
    /// (`[grid², 1]`, Wigner units) and the parameter bindings for gradients.
    pub fn forward_on<'s, T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &'s ParamStore,
        input: &ModelInput,
        conditioning: Conditioning,
    ) -> Result<(Var, Binder<'s>)> {
        self.forward_bound(tape, Binder::new(params), input, conditioning)
    }

    /// [`Model::forward_on`] with caller-prepared bindings.
    pub fn forward_bound<'s, T: Element>(
        &self,
        tape: &mut Tape<T>,
        binder: Binder<'s>,
        input: &ModelInput,
        conditioning: Conditioning,
    ) -> Result<(Var, Binder<'s>)> {
        self.check_input(input)?;
        let cfg = &self.config;
        let mut cx = Ctx { tape, binder, conditioning };
        let x = self.prepare_input(&mut cx, input)?;
        let y = match cfg.variant {
            Variant::SwinAdaLN => self.swin_forward(&mut cx, x, input)?,
            Variant::CnnBaseline => self.cnn_forward(&mut cx, x)?,
        };
        let y = cx.tape.scale(y, 1.0 / INPUT_SCALE);
        if cx.tape.value(y).iter().any(|v| !v.is_finite()) {
            return Err(Error::DivergedForward);
        }
        Ok((y, cx.binder))
    }

    /// Single-precision inference.
    pub fn forward(&self, params: &ParamStore, input: &ModelInput) -> Result<Vec<f32>> {
        self.forward_with(params, input, Conditioning::On)
    }

    pub fn forward_with(&self, params: &ParamStore, input: &ModelInput, conditioning: Conditioning) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let (y, _) = self.forward_on(&mut tape, params, input, conditioning)?;
        Ok(tape.value(y).to_vec())
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Adam moments, aligned with the parameter store order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    /// Completed optimizer steps.
    pub step: u64,
    pub epoch: u64,
    /// Seed and word position of the shuffling RNG.
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    /// Free-form `key=value` metadata (training config, dataset digest).
    pub meta: String,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, params: ParamStore) -> Self {
        Checkpoint {
            model,
            params,
            optimizer: OptimizerState::default(),
            step: 0,
            epoch: 0,
            rng_seed: [0; 32],
            rng_word_pos: 0,
            meta: String::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::header(&CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.u64(self.model.digest());
        w.str(&self.model.to_text());
        w.str(&self.meta);
        w.u64(self.step);
        w.u64(self.epoch);
        w.buf.extend_from_slice(&self.rng_seed);
        w.buf.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        w.u32(self.params.len() as u32);
        for i in 0..self.params.len() {
            w.str(&self.params.names[i]);
            let shape = self.params.shape(i);
            w.u8(shape.len() as u8);
            shape.iter().for_each(|&d| w.u32(d as u32));
            w.f32s(self.params.data(i));
        }
        let has_opt = !self.optimizer.m.is_empty();
        w.u8(has_opt as u8);
        if has_opt {
            w.u64(self.optimizer.step);
            for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
                w.f32s(m);
                w.f32s(v);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, &CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let digest = r.u64("config digest")?;
        let text = r.str("model config")?;
        let model = ModelConfig::from_config(&ConfigMap::parse(&text)?)
            .map_err(|e| Error::Corrupt(format!("embedded model config: {e}")))?;
        if model.digest() != digest {
            return Err(Error::CheckpointMismatch("config digest does not match embedded config".into()));
        }
        let meta = r.str("meta")?;
        let step = r.u64("step")?;
        let epoch = r.u64("epoch")?;
        let mut rng_seed = [0u8; 32];
        for b in rng_seed.iter_mut() {
            *b = r.u8("rng")?;
        }
        let mut pos = [0u8; 16];
        for b in pos.iter_mut() {
            *b = r.u8("rng")?;
        }
        let n = r.u32("param count")? as usize;
        let mut params = ParamStore::default();
        for _ in 0..n {
            let name = r.str("param name")?;
            let rank = r.u8("param shape")? as usize;
            let shape = (0..rank).map(|_| r.u32("param shape").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f32s(shape.iter().product(), "param data")?;
            params.insert(&name, shape, data).map_err(|e| Error::Corrupt(e.to_string()))?;
        }
        let mut optimizer = OptimizerState::default();
        if r.u8("optimizer flag")? == 1 {
            optimizer.step = r.u64("optimizer")?;
            for i in 0..params.len() {
                let len = params.data(i).len();
                optimizer.m.push(r.f32s(len, "optimizer")?);
                optimizer.v.push(r.f32s(len, "optimizer")?);
            }
        }
        r.finish()?;
        // Parameter names and shapes must match what the config declares.
        let declared = Model::new(model.clone())?.declare();
        let matches = declared.len() == params.len()
            && declared.iter().enumerate().all(|(i, (name, shape, _))| params.names[i] == *name && params.shape(i) == &shape[..]);
        if !matches {
            return Err(Error::CheckpointMismatch("parameters do not match the model config".into()));
        }
        Ok(Checkpoint { model, params, optimizer, step, epoch, rng_seed, rng_word_pos: u128::from_le_bytes(pos), meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rasters(n: usize, side: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..side * side).map(|_| rng.gen_range(-0.3..0.3)).collect()).collect()
    }

    fn randomize(store: &mut ParamStore, seed: u64, scale: f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..store.len() {
            for v in store.data_mut(i) {
                *v += rng.gen_range(-scale..scale);
            }
        }
    }

    #[test]
    fn zero_head_gives_zero_output_of_the_right_shape() {
        for cfg in [ModelConfig::swin_markovian(), ModelConfig::cnn_baseline()] {
            let model = Model::new(cfg.clone()).unwrap();
            let params = model.init_params(1);
            let xs = rasters(cfg.wigner_channels, 48, 2);
            let refs: Vec<&[f32]> = xs.iter().map(|v| v.as_slice()).collect();
            let out = model.forward(&params, &ModelInput { wigner: &refs, tau: 0.7, delta_tau: None }).unwrap();
            assert_eq!(out.len(), 48 * 48);
            assert!(out.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn window_size_does_not_change_parameter_count() {
        let a = Model::new(ModelConfig::swin_markovian()).unwrap().parameter_count();
        let b = Model::new(ModelConfig { window: 6, ..ModelConfig::swin_markovian() }).unwrap().parameter_count();
        assert_eq!(a, b);
        assert_eq!(a, Model::new(ModelConfig::swin_markovian()).unwrap().init_params(0).count());
    }

    #[test]
    fn invalid_geometry_is_a_config_error() {
        let cfg = ModelConfig { grid_side: 47, ..ModelConfig::swin_markovian() };
        assert!(matches!(Model::new(cfg), Err(Error::ModelConfig(_))));
        let cfg = ModelConfig { pad_windows: false, ..ModelConfig::swin_markovian() };
        assert!(matches!(Model::new(cfg), Err(Error::ModelConfig(_))));
        assert!(Model::new(ModelConfig { pad_windows: false, ..ModelConfig::swin_stepwise() }).is_ok());
    }

    #[test]
    fn time_embedding_contracts() {
        let model = Model::new(ModelConfig::swin_stepwise()).unwrap();
        let p = model.init_params(3);
        let e0 = model.time_embed(&p, 0.0, Some(0.1)).unwrap();
        assert_eq!(e0, model.time_embed(&p, 0.0, Some(0.1)).unwrap());
        assert!(e0.iter().all(|v| v.is_finite()) && e0.len() == 128);
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let e1 = model.time_embed(&p, 1e-6, Some(0.1)).unwrap();
        assert!(dist(&e0, &e1) < 1e-3);
        let a = model.time_embed(&p, 0.2, Some(0.1)).unwrap();
        let b = model.time_embed(&p, 0.8, Some(0.1)).unwrap();
        assert!(dist(&a, &b) >= 1e-6);
        let c = model.time_embed(&p, 0.2, Some(0.2)).unwrap();
        assert!(dist(&a, &c) >= 1e-6);
    }

    #[test]
    fn adaln_zero_modulation_is_plain_layer_norm() {
        let model = Model::new(ModelConfig::reduced(Variant::SwinAdaLN)).unwrap();
        let mut p = model.init_params(4);
        let mut tape = Tape::<f64>::new();
        let params = p.clone();
        let mut cx = Ctx { tape: &mut tape, binder: Binder::new(&params), conditioning: Conditioning::On };
        let x = cx.tape.constant((0..24).map(|i| (i as f64 * 0.37).sin()).collect(), &[3, 8]).unwrap();
        let cond = model.time_embed_on(&mut cx, 0.4, None).unwrap();
        let y = cx.adaln(x, cond, "enc0.0.ada1").unwrap();
        let plain = cx.tape.normalize(x, LN_EPS).unwrap();
        assert_eq!(cx.tape.value(y), cx.tape.value(plain));

        // Constant tokens normalize to zero, leaving β broadcast.
        let bias: Vec<f32> = (0..16).map(|i| i as f32 * 0.1).collect();
        p.get_mut("enc0.0.ada1.b").unwrap().copy_from_slice(&bias);
        let mut tape = Tape::<f64>::new();
        let mut cx = Ctx { tape: &mut tape, binder: Binder::new(&p), conditioning: Conditioning::On };
        let x = cx.tape.constant(vec![2.5; 16], &[2, 8]).unwrap();
        let cond = model.time_embed_on(&mut cx, 0.4, None).unwrap();
        let y = cx.adaln(x, cond, "enc0.0.ada1").unwrap();
        for (k, v) in cx.tape.value(y).iter().enumerate() {
            assert!((v - bias[8 + k % 8] as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn conditioning_is_identity_at_init_and_live_when_trained() {
        let model = Model::new(ModelConfig::swin_markovian()).unwrap();
        let mut p = model.init_params(5);
        // A nonzero head makes the comparison non-trivial.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        p.get_mut("head.w").unwrap().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        let xs = rasters(5, 48, 7);
        let refs: Vec<&[f32]> = xs.iter().map(|v| v.as_slice()).collect();
        let input = ModelInput { wigner: &refs, tau: 0.6, delta_tau: None };
        let on = model.forward_with(&p, &input, Conditioning::On).unwrap();
        let off = model.forward_with(&p, &input, Conditioning::Off).unwrap();
        assert!(on.iter().zip(&off).all(|(a, b)| a.to_bits() == b.to_bits()));

        p.get_mut("enc0.0.ada1.w").unwrap().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        let a = model.forward(&p, &ModelInput { tau: 0.2, ..input }).unwrap();
        let b = model.forward(&p, &ModelInput { tau: 0.8, ..input }).unwrap();
        assert!(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f32>() > 0.0);
    }

    /// Whole-map window, one head, identity value path, zero query/key.
    #[test]
    fn uniform_attention_averages_values() {
        let model = Model::new(ModelConfig::reduced(Variant::SwinAdaLN)).unwrap();
        let mut p = model.init_params(0);
        let dim = 8;
        let mut qkv = vec![0.0f32; dim * 3 * dim];
        for i in 0..dim {
            qkv[i * 3 * dim + 2 * dim + i] = 1.0;
        }
        p.get_mut("enc0.0.qkv.w").unwrap().copy_from_slice(&qkv);
        let mut proj = vec![0.0f32; dim * dim];
        (0..dim).for_each(|i| proj[i * dim + i] = 1.0);
        p.get_mut("enc0.0.proj.w").unwrap().copy_from_slice(&proj);
        let level = Level::new(4, dim, 1, 4);
        let mut tape = Tape::<f64>::new();
        let mut cx = Ctx { tape: &mut tape, binder: Binder::new(&p), conditioning: Conditioning::On };
        let vals: Vec<f64> = (0..16 * dim).map(|i| ((i * 7) % 11) as f64).collect();
        let x = cx.tape.constant(vals.clone(), &[16, dim]).unwrap();
        let y = model.attention(&mut cx, x, &level, &level.maps[0], "enc0.0").unwrap();
        for c in 0..dim {
            let mean = (0..16).map(|t| vals[t * dim + c]).sum::<f64>() / 16.0;
            for t in 0..16 {
                assert!((cx.tape.value(y)[t * dim + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_is_window_local_and_shift_mixes() {
        let model = Model::new(ModelConfig::reduced(Variant::SwinAdaLN)).unwrap();
        let mut p = model.init_params(9);
        randomize(&mut p, 10, 0.3);
        let level = Level::new(4, 8, 1, 2);
        let run = |vals: &[f64], parity: usize| {
            let mut tape = Tape::<f64>::new();
            let mut cx = Ctx { tape: &mut tape, binder: Binder::new(&p), conditioning: Conditioning::On };
            let x = cx.tape.constant(vals.to_vec(), &[16, 8]).unwrap();
            let y = model.attention(&mut cx, x, &level, &level.maps[parity], "enc0.0").unwrap();
            cx.tape.value(y).to_vec()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Swap the top-left and bottom-right 2×2 windows.
        let swap = |v: &[f64]| {
            let mut out = v.to_vec();
            for dy in 0..2 {
                for dx in 0..2 {
                    let a = dy * 4 + dx;
                    let b = (2 + dy) * 4 + 2 + dx;
                    for c in 0..8 {
                        out.swap(a * 8 + c, b * 8 + c);
                    }
                }
            }
            out
        };
        let base = run(&vals, 0);
        assert_eq!(run(&swap(&vals), 0), swap(&base));
        let shifted = run(&vals, 1);
        assert!(base.iter().zip(&shifted).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn padded_windows_never_attend_to_padding() {
        // A 6-token side with window 4 pads to 8; every real query must see
        // padded keys masked out.
        let level = Level::new(6, 4, 2, 4);
        for map in &level.maps {
            let mask = map.mask.as_ref().expect("padding needs a mask");
            let idx = &map.to_windows;
            for wi in 0..map.n_windows {
                for i in 0..map.tokens {
                    let qi_valid = is_valid(idx, (wi * map.tokens + i) * 4);
                    for j in 0..map.tokens {
                        let kj_valid = is_valid(idx, (wi * map.tokens + j) * 4);
                        let m = mask[(wi * 2 * map.tokens + i) * map.tokens + j];
                        if qi_valid && !kj_valid {
                            assert_eq!(m, MASK_NEG);
                        }
                    }
                }
            }
        }
    }

    fn is_valid(idx: &GatherIndex, k: usize) -> bool {
        let mut probe = Tape::<f64>::new();
        let x = probe.constant(vec![1.0; idx.in_len], &[idx.in_len]).unwrap();
        let y = probe.gather(x, &Arc::new(idx.clone()), &[idx.len()]).unwrap();
        probe.value(y)[k] == 1.0
    }

    fn reduced_inputs(cfg: &ModelConfig) -> Vec<Vec<f32>> {
        rasters(cfg.wigner_channels, cfg.grid_side, 12)
    }

    /// Squared-error loss and per-parameter gradients, optionally with
    /// parameter `(i, j)` overridden by an exact value.
    fn loss_and_grads<T: Element>(
        model: &Model,
        p: &ParamStore,
        input: &ModelInput,
        target: &[f64],
        over: Option<(usize, usize, f64)>,
    ) -> (f64, Vec<Vec<f64>>) {
        let n = model.config.grid_side * model.config.grid_side;
        let mut tape = Tape::<T>::new();
        let mut binder = Binder::new(p);
        if let Some((i, j, value)) = over {
            let mut data: Vec<T> = p.data(i).iter().map(|&v| T::from_f64(v as f64)).collect();
            data[j] = T::from_f64(value);
            binder.bind_values(&mut tape, &p.names()[i], data).unwrap();
        }
        let (y, binder) = model.forward_bound(&mut tape, binder, input, Conditioning::On).unwrap();
        let t = tape.constant(target.iter().map(|&v| T::from_f64(v)).collect(), &[n, 1]).unwrap();
        let d = tape.sub(y, t).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let l = tape.mean_all(sq);
        tape.backward(l).unwrap();
        (tape.scalar(l).as_f64(), binder.gradients_f64(&tape))
    }

    /// Worst relative error of f64 and f32 backward gradients against central
    /// differences taken in f64.
    fn fd_check(variant: Variant) -> (f64, f64) {
        let cfg = ModelConfig::reduced(variant);
        let model = Model::new(cfg.clone()).unwrap();
        let mut p = model.init_params(13);
        randomize(&mut p, 14, 0.2);
        let xs = reduced_inputs(&cfg);
        let refs: Vec<&[f32]> = xs.iter().map(|v| v.as_slice()).collect();
        let input = ModelInput { wigner: &refs, tau: 0.3, delta_tau: None };
        let target: Vec<f64> = (0..64).map(|i| (i as f64 * 0.1).cos() * 0.1).collect();
        let (_, g64) = loss_and_grads::<f64>(&model, &p, &input, &target, None);
        let (_, g32) = loss_and_grads::<f32>(&model, &p, &input, &target, None);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
        let h = 1e-5;
        for _ in 0..40 {
            let i = rng.gen_range(2..p.len());
            let j = rng.gen_range(0..p.data(i).len());
            let base = p.data(i)[j] as f64;
            let eval = |v: f64| loss_and_grads::<f64>(&model, &p, &input, &target, Some((i, j, v))).0;
            let fd = (eval(base + h) - eval(base - h)) / (2.0 * h);
            let rel = |g: f64| (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
            worst64 = worst64.max(rel(g64[i][j]));
            worst32 = worst32.max(rel(g32[i][j]));
        }
        (worst64, worst32)
    }

    #[test]
    fn reduced_models_pass_end_to_end_gradient_checks() {
        for v in [Variant::SwinAdaLN, Variant::CnnBaseline] {
            let (e64, e32) = fd_check(v);
            assert!(e64 < 1e-4, "{v:?} f64: {e64}");
            assert!(e32 < 1e-2, "{v:?} f32: {e32}");
        }
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(ModelConfig::reduced(Variant::SwinAdaLN)).unwrap();
        let mut params = model.init_params(16);
        randomize(&mut params, 17, 0.1);
        let mut ck = Checkpoint::new(model.config.clone(), params);
        ck.step = 42;
        ck.rng_word_pos = 1234;
        ck.rng_seed[3] = 9;
        ck.optimizer = OptimizerState {
            step: 42,
            m: ck.params.names().iter().enumerate().map(|(i, _)| vec![0.5; ck.params.data(i).len()]).collect(),
            v: ck.params.names().iter().enumerate().map(|(i, _)| vec![0.25; ck.params.data(i).len()]).collect(),
        };
        let path = dir.path().join("m.cvqc");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let xs = reduced_inputs(&model.config);
        let refs: Vec<&[f32]> = xs.iter().map(|v| v.as_slice()).collect();
        let input = ModelInput { wigner: &refs, tau: 0.5, delta_tau: None };
        let a = model.forward(&ck.params, &input).unwrap();
        let b = model.forward(&back.params, &input).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));

        let mut bytes = ck.to_bytes();
        bytes[1] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::MagicMismatch { .. })));
        let other = Checkpoint::new(ModelConfig::reduced(Variant::CnnBaseline), ck.params.clone());
        assert!(matches!(Checkpoint::from_bytes(&other.to_bytes()), Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn fitted_input_transform_whitens_the_fitting_data() {
        let cfg = ModelConfig { wigner_channels: 3, in_channels: 3, ..ModelConfig::reduced(Variant::SwinAdaLN) };
        let model = Model::new(cfg).unwrap();
        let mut p = model.init_params(0);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // Strongly correlated channels: a shared signal plus small, smaller perturbations.
        let samples: Vec<Vec<Vec<f32>>> = (0..4)
            .map(|_| {
                let base: Vec<f32> = (0..64).map(|_| rng.gen_range(-0.3..0.3)).collect();
                (0..3)
                    .map(|c| base.iter().map(|&b| b * (1.0 - 0.1 * c as f32) + rng.gen_range(-1e-3..1e-3) * c as f32).collect())
                    .collect()
            })
            .collect();
        model.fit_input_whitening(&mut p, samples.iter().map(|s| s.iter().map(|c| c.as_slice()).collect())).unwrap();
        let offset = p.get("input.offset").unwrap();
        let w = p.get("input.whiten").unwrap();
        let mut feats = Vec::new();
        for s in &samples {
            for pix in 0..64 {
                let x: Vec<f64> = (0..3).map(|c| (s[c][pix] + offset[c]) as f64).collect();
                feats.push((0..3).map(|j| (0..3).map(|i| x[i] * w[i * 3 + j] as f64).sum::<f64>()).collect::<Vec<_>>());
            }
        }
        let n = feats.len() as f64;
        for a in 0..3 {
            let mean = feats.iter().map(|f| f[a]).sum::<f64>() / n;
            assert!(mean.abs() < 1e-3, "mean {a}: {mean}");
            for b in 0..3 {
                let cov = feats.iter().map(|f| f[a] * f[b]).sum::<f64>() / n;
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((cov - expect).abs() < 2e-2, "cov[{a}][{b}] = {cov}");
            }
        }
        assert!(!p.is_trainable(p.position("input.whiten").unwrap()));
    }

    #[test]
    fn model_config_text_round_trips() {
        for cfg in [ModelConfig::swin_markovian(), ModelConfig::swin_stepwise(), ModelConfig::cnn_baseline()] {
            assert_eq!(ModelConfig::from_config(&ConfigMap::parse(&cfg.to_text()).unwrap()).unwrap(), cfg);
        }
    }
}
