//! Conditional velocity network `u(x_t, r, t | y)`.
//!
//! Spectrograms enter as `[frames, 2 * bins]` matrices (real parts, then
//! imaginary parts). Two backbones share the same residual SiLU trunk:
//!
//! * `frame`: one row per frame, holding the `x_t` frame and a window of
//!   `2 * context + 1` frames of `y`; the trunk outputs a whole frame.
//! * `patch`: one row per time-frequency cell, holding the
//!   `(2 * context + 1) x (2 * bin_context + 1)` neighbourhood of the cell in
//!   `x_t` and in `y` (complex values, plus log magnitudes for `y`) and the
//!   cell's relative frequency. The trunk emits two real gains and a complex
//!   offset, and the cell's output is `g_x * x + g_y * y + offset`. Weights
//!   are shared across bins, like a convolution.
//!
//! Time enters additively: every block adds a projection of the (fused) time
//! embedding to its pre-activation.
//!
//! Time embedding: `s -> [sin(2 pi f s), cos(2 pi f s)] -> linear -> SiLU ->
//! linear`, with `f` drawn once from `N(0, fourier_scale^2)`. In flow mode
//! the embedding of `t` feeds the blocks directly. In mean-flow mode the
//! embeddings of `r` and `t` share those layers, are concatenated as
//! `[e(r), e(t)]` and mapped back to `K` features by the fusion layer.
//!
//! The fusion weight is stored as a `[2K, K]` matrix acting on row vectors,
//! i.e. the transpose of the `K x 2K` matrix acting on column vectors. Rows
//! `0..K` multiply `e(r)` and rows `K..2K` multiply `e(t)`.

use std::f64::consts::TAU;
use std::sync::Arc;

use mf_autodiff::{NdArray, Tape, Var, GATHER_ZERO};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LOG_MAG_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Flow,
    #[serde(rename = "meanflow")]
    MeanFlow,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Flow => "flow",
            Mode::MeanFlow => "meanflow",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Frame,
    Patch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub backbone: Backbone,
    /// Frequency bins per frame.
    pub bins: usize,
    /// Neighbouring frames on each side.
    pub context: usize,
    /// Neighbouring bins on each side (patch backbone only).
    pub bin_context: usize,
    pub hidden: usize,
    /// Residual blocks after the input layer.
    pub depth: usize,
    /// Time embedding width `K` (even).
    pub time_dim: usize,
    pub fourier_scale: f64,
    /// Adds a learned linear map from the block input straight to the output.
    pub linear_skip: bool,
    /// Scale of the output layer's initial weights; 0 gives a zero field.
    pub output_gain: f64,
}

/// Zero bins: filled in from the STFT geometry when a run is resolved.
impl Default for NetworkConfig {
    fn default() -> Self {
        Self::with_bins(0)
    }
}

impl NetworkConfig {
    pub fn with_bins(bins: usize) -> Self {
        Self {
            backbone: Backbone::Patch,
            bins,
            context: 1,
            bin_context: 2,
            hidden: 64,
            depth: 2,
            time_dim: 128,
            fourier_scale: 1.0,
            linear_skip: true,
            output_gain: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || self.hidden == 0 {
            return Err(Error::Config("bins and hidden must be positive".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_dim must be even and positive, got {}",
                self.time_dim
            )));
        }
        if !(self.fourier_scale > 0.0 && self.fourier_scale.is_finite()) {
            return Err(Error::Config("fourier_scale must be positive".into()));
        }
        if !(self.output_gain >= 0.0 && self.output_gain.is_finite()) {
            return Err(Error::Config("output_gain must be >= 0".into()));
        }
        Ok(())
    }

    /// Columns of one `x_t` frame.
    pub fn frame_width(&self) -> usize {
        2 * self.bins
    }

    fn patch_cells(&self) -> usize {
        (2 * self.context + 1) * (2 * self.bin_context + 1)
    }

    /// Trunk input features taken from `x_t`.
    pub fn x_features(&self) -> usize {
        match self.backbone {
            Backbone::Frame => self.frame_width(),
            Backbone::Patch => 2 * self.patch_cells(),
        }
    }

    /// Trunk input features taken from `y`.
    pub fn y_features(&self) -> usize {
        match self.backbone {
            Backbone::Frame => self.frame_width() * (2 * self.context + 1),
            Backbone::Patch => 3 * self.patch_cells() + 1,
        }
    }

    /// Columns per frame of the prepared condition.
    pub fn cond_width(&self) -> usize {
        match self.backbone {
            Backbone::Frame => self.y_features(),
            Backbone::Patch => self.bins * self.y_features(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.x_features() + self.y_features()
    }

    /// Trunk output features per row.
    pub fn output_width(&self) -> usize {
        match self.backbone {
            Backbone::Frame => self.frame_width(),
            Backbone::Patch => 4,
        }
    }

    /// Output columns per row once gains are applied.
    pub fn value_width(&self) -> usize {
        match self.backbone {
            Backbone::Frame => self.frame_width(),
            Backbone::Patch => 2,
        }
    }

    fn centre_cell(&self) -> usize {
        self.context * (2 * self.bin_context + 1) + self.bin_context
    }
}

/// Name and shape of every trainable array, in serialization order.
pub fn param_layout(cfg: &NetworkConfig, mode: Mode) -> Vec<(String, Vec<usize>)> {
    let k = cfg.time_dim;
    let h = cfg.hidden;
    let mut out = vec![
        ("time.fc1.weight".to_string(), vec![k, k]),
        ("time.fc1.bias".to_string(), vec![1, k]),
        ("time.fc2.weight".to_string(), vec![k, k]),
        ("time.fc2.bias".to_string(), vec![1, k]),
    ];
    if mode == Mode::MeanFlow {
        out.push(("fusion.weight".into(), vec![2 * k, k]));
        out.push(("fusion.bias".into(), vec![1, k]));
    }
    out.push(("input.weight".into(), vec![cfg.input_width(), h]));
    out.push(("input.bias".into(), vec![1, h]));
    out.push(("input.time".into(), vec![k, h]));
    for i in 0..cfg.depth {
        out.push((format!("block{i}.weight"), vec![h, h]));
        out.push((format!("block{i}.bias"), vec![1, h]));
        out.push((format!("block{i}.time"), vec![k, h]));
    }
    out.push(("output.weight".into(), vec![h, cfg.output_width()]));
    out.push(("output.bias".into(), vec![1, cfg.output_width()]));
    if cfg.linear_skip {
        out.push(("skip.weight".into(), vec![cfg.input_width(), cfg.value_width()]));
    }
    out
}

/// Something that can record `u(x, r, t | y)` on a tape with its parameters
/// supplied as tape variables.
///
/// The conditioning input is prepared once per utterance by [`condition`]
/// and must keep one row per frame, so callers may crop frames of `x` and of
/// the prepared condition together.
///
/// [`condition`]: VelocityModel::condition
pub trait VelocityModel {
    fn params(&self) -> &[NdArray];

    fn condition(&self, y: &NdArray) -> Result<NdArray> {
        Ok(y.clone())
    }

    /// `x`: `[frames, width]`; `r`, `t`: `[1, 1]`; `cond` from `condition`.
    fn record(&self, tape: &mut Tape, params: &[Var], x: Var, r: Var, t: Var, cond: Var) -> Result<Var>;
}

/// Plain evaluation of a model, parameters treated as constants.
pub fn evaluate<M: VelocityModel + ?Sized>(model: &M, x: &NdArray, r: f64, t: f64, y: &NdArray) -> Result<NdArray> {
    evaluate_prepared(model, x, r, t, &model.condition(y)?)
}

/// Like [`evaluate`] with the conditioning input already prepared.
pub fn evaluate_prepared<M: VelocityModel + ?Sized>(
    model: &M,
    x: &NdArray,
    r: f64,
    t: f64,
    cond: &NdArray,
) -> Result<NdArray> {
    if x.shape().len() != 2 || x.shape()[0] != cond.shape()[0] {
        return Err(Error::Shape {
            what: "x_t",
            expected: vec![cond.shape()[0], x.shape().last().copied().unwrap_or(0)],
            got: x.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let params = model
        .params()
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect::<mf_autodiff::Result<Vec<_>>>()?;
    let cond = tape.constant(cond.clone())?;
    let xv = tape.constant(x.clone())?;
    let rv = tape.constant(NdArray::full(&[1, 1], r))?;
    let tv = tape.constant(NdArray::full(&[1, 1], t))?;
    let out = model.record(&mut tape, &params, xv, rv, tv, cond)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNetwork {
    config: NetworkConfig,
    mode: Mode,
    frequencies: Vec<f64>,
    params: Vec<NdArray>,
}

struct Idx {
    fusion: Option<usize>,
    input: usize,
    blocks: usize,
    output: usize,
    skip: Option<usize>,
}

impl VelocityNetwork {
    /// Fresh network. Frequencies and weights are drawn from separate streams
    /// of `seed`, so two modes built from the same seed share frequencies.
    pub fn new(config: NetworkConfig, mode: Mode, seed: u64) -> Result<Self> {
        config.validate()?;
        let frequencies = draw_frequencies(&config, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut params = Vec::new();
        for (name, shape) in param_layout(&config, mode) {
            let arr = if name.ends_with(".bias") {
                NdArray::zeros(&shape)
            } else if name == "fusion.weight" {
                fusion_identity(config.time_dim, true)
            } else if name == "skip.weight" {
                NdArray::zeros(&shape)
            } else {
                let gain = if name == "output.weight" { config.output_gain } else { 1.0 };
                lecun_uniform(&shape, gain, &mut rng)
            };
            params.push(arr);
        }
        Ok(Self {
            config,
            mode,
            frequencies,
            params,
        })
    }

    pub fn from_parts(config: NetworkConfig, mode: Mode, frequencies: Vec<f64>, params: Vec<NdArray>) -> Result<Self> {
        config.validate()?;
        if frequencies.len() != config.time_dim / 2 {
            return Err(Error::Geometry(format!(
                "expected {} frequencies, got {}",
                config.time_dim / 2,
                frequencies.len()
            )));
        }
        let layout = param_layout(&config, mode);
        if layout.len() != params.len() {
            return Err(Error::Geometry(format!(
                "expected {} parameter arrays, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Geometry(format!("{name}: expected {shape:?}, got {:?}", p.shape())));
            }
            if !p.is_finite() {
                return Err(Error::Geometry(format!("{name}: non-finite values")));
            }
        }
        Ok(Self {
            config,
            mode,
            frequencies,
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn params_mut(&mut self) -> &mut [NdArray] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(NdArray::len).sum()
    }

    pub fn param_names(&self) -> Vec<String> {
        param_layout(&self.config, self.mode).into_iter().map(|(n, _)| n).collect()
    }

    pub fn param(&self, name: &str) -> Option<&NdArray> {
        self.param_names()
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut NdArray> {
        let pos = self.param_names().iter().position(|n| n == name)?;
        Some(&mut self.params[pos])
    }

    fn idx(&self) -> Idx {
        let fusion = (self.mode == Mode::MeanFlow).then_some(4);
        let input = if fusion.is_some() { 6 } else { 4 };
        let blocks = input + 3;
        let output = blocks + 3 * self.config.depth;
        let skip = self.config.linear_skip.then_some(output + 2);
        Idx {
            fusion,
            input,
            blocks,
            output,
            skip,
        }
    }

    /// Sine/cosine features of `s` before the shared linear layers.
    pub fn fourier_features(&self, s: f64) -> NdArray {
        let sin = self.frequencies.iter().map(|f| (TAU * f * s).sin());
        let cos = self.frequencies.iter().map(|f| (TAU * f * s).cos());
        NdArray::row(sin.chain(cos).collect())
    }

    fn record_embedding(&self, tape: &mut Tape, p: &[Var], s: Var) -> Result<Var> {
        let freqs = tape.constant(NdArray::row(self.frequencies.iter().map(|f| TAU * f).collect()))?;
        let arg = tape.matmul(s, freqs)?;
        let sin = tape.sin(arg)?;
        let cos = tape.cos(arg)?;
        let ff = tape.concat(&[sin, cos], 1)?;
        let h = tape.affine(ff, p[0], p[1])?;
        let h = tape.silu(h)?;
        Ok(tape.affine(h, p[2], p[3])?)
    }

    /// Time embedding of `s` (the `K`-vector after the shared linear layers).
    pub fn gaussian_fourier_embed(&self, s: f64) -> Result<NdArray> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::TimeOutOfRange(s));
        }
        let mut tape = Tape::new();
        let p = self.const_params(&mut tape)?;
        let sv = tape.constant(NdArray::full(&[1, 1], s))?;
        let e = self.record_embedding(&mut tape, &p, sv)?;
        Ok(tape.value(e).clone())
    }

    fn record_time(&self, tape: &mut Tape, p: &[Var], r: Var, t: Var) -> Result<Var> {
        let et = self.record_embedding(tape, p, t)?;
        match self.idx().fusion {
            None => Ok(et),
            Some(f) => {
                let er = self.record_embedding(tape, p, r)?;
                let cat = tape.concat(&[er, et], 1)?;
                Ok(tape.affine(cat, p[f], p[f + 1])?)
            }
        }
    }

    /// Fused time feature for the interval `[r, t]`. In flow mode this is the
    /// embedding of `t`.
    pub fn fuse_times(&self, r: f64, t: f64) -> Result<NdArray> {
        if !(0.0..=1.0).contains(&r) || !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(if (0.0..=1.0).contains(&r) { t } else { r }));
        }
        if r > t {
            return Err(Error::InvalidInterval { r, t });
        }
        let mut tape = Tape::new();
        let p = self.const_params(&mut tape)?;
        let rv = tape.constant(NdArray::full(&[1, 1], r))?;
        let tv = tape.constant(NdArray::full(&[1, 1], t))?;
        let fused = self.record_time(&mut tape, &p, rv, tv)?;
        Ok(tape.value(fused).clone())
    }

    fn const_params(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        Ok(self
            .params
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect::<mf_autodiff::Result<Vec<_>>>()?)
    }

    /// Prepared condition: per frame, the `y` features of every trunk row
    /// belonging to that frame. Out-of-range neighbours are zero.
    pub fn conditioning_window(&self, y: &NdArray) -> Result<NdArray> {
        let (frames, width) = y.dims2("condition")?;
        if width != self.config.frame_width() {
            return Err(Error::Shape {
                what: "y",
                expected: vec![frames, self.config.frame_width()],
                got: y.shape().to_vec(),
            });
        }
        let data = match self.config.backbone {
            Backbone::Frame => {
                let c = self.config.context as isize;
                let mut data = Vec::with_capacity(frames * self.config.cond_width());
                for f in 0..frames as isize {
                    for off in -c..=c {
                        let src = f + off;
                        if src < 0 || src >= frames as isize {
                            data.extend(std::iter::repeat_n(0.0, width));
                        } else {
                            let s = src as usize * width;
                            data.extend_from_slice(&y.data()[s..s + width]);
                        }
                    }
                }
                data
            }
            Backbone::Patch => {
                let idx = patch_index(&self.config, frames);
                let q = self.config.x_features();
                let bins = self.config.bins;
                let scale = 1.0 / (bins.max(2) - 1) as f64;
                let mut data = Vec::with_capacity(frames * self.config.cond_width());
                let at = |i: usize| if i == GATHER_ZERO { 0.0 } else { y.data()[i] };
                for (row, cells) in idx.chunks(q).enumerate() {
                    data.extend(cells.iter().map(|&i| at(i)));
                    data.extend(cells.chunks(2).map(|c| (at(c[0]).hypot(at(c[1])) + LOG_MAG_FLOOR).log10()));
                    data.push((row % bins) as f64 * scale);
                }
                data
            }
        };
        Ok(NdArray::matrix(frames, self.config.cond_width(), data)?)
    }

    fn record_window(&self, tape: &mut Tape, p: &[Var], x: Var, r: Var, t: Var, cond: Var) -> Result<Var> {
        let idx = self.idx();
        let time = self.record_time(tape, p, r, t)?;
        let gate = tape.silu(time)?;
        let frames = tape.value(x).shape()[0];
        let inp = match self.config.backbone {
            Backbone::Frame => tape.concat(&[x, cond], 1)?,
            Backbone::Patch => {
                let rows = frames * self.config.bins;
                let xp = tape.gather(x, patch_index(&self.config, frames).into(), &[rows, self.config.x_features()])?;
                let yp = tape.reshape(cond, &[rows, self.config.y_features()])?;
                tape.concat(&[xp, yp], 1)?
            }
        };

        let bias = tape.affine(gate, p[idx.input + 2], p[idx.input + 1])?;
        let pre = tape.affine(inp, p[idx.input], bias)?;
        let mut h = tape.silu(pre)?;
        for b in 0..self.config.depth {
            let base = idx.blocks + 3 * b;
            let bias = tape.affine(gate, p[base + 2], p[base + 1])?;
            let pre = tape.affine(h, p[base], bias)?;
            let act = tape.silu(pre)?;
            h = tape.add(h, act)?;
        }
        let mut out = tape.affine(h, p[idx.output], p[idx.output + 1])?;
        if self.config.backbone == Backbone::Patch {
            let rows = frames * self.config.bins;
            let pick = |cols: [usize; 2]| -> Arc<[usize]> { (0..rows).flat_map(|r| cols.map(|c| 4 * r + c)).collect() };
            let gx = tape.gather(out, pick([0, 0]), &[rows, 2])?;
            let gy = tape.gather(out, pick([1, 1]), &[rows, 2])?;
            let offset = tape.gather(out, pick([2, 3]), &[rows, 2])?;
            let qx = self.config.x_features();
            let centre = 2 * self.config.centre_cell();
            let pick_in = |start: usize| -> Arc<[usize]> {
                let w = self.config.input_width();
                (0..rows).flat_map(|r| [r * w + start, r * w + start + 1]).collect()
            };
            let xc = tape.gather(inp, pick_in(centre), &[rows, 2])?;
            let yc = tape.gather(inp, pick_in(qx + centre), &[rows, 2])?;
            let a = tape.mul(gx, xc)?;
            let b = tape.mul(gy, yc)?;
            let gated = tape.add(a, b)?;
            out = tape.add(gated, offset)?;
        }
        if let Some(s) = idx.skip {
            let lin = tape.matmul(inp, p[s])?;
            out = tape.add(out, lin)?;
        }
        if self.config.backbone == Backbone::Patch {
            out = tape.gather(out, unpatch_index(self.config.bins, frames).into(), &[frames, self.config.frame_width()])?;
        }
        Ok(out)
    }

    /// Predicted velocity for one spectrogram (`r = t` queries the
    /// instantaneous field).
    pub fn forward(&self, x_t: &NdArray, r: f64, t: f64, y: &NdArray) -> Result<NdArray> {
        evaluate(self, x_t, r, t, y)
    }
}

impl VelocityModel for VelocityNetwork {
    fn params(&self) -> &[NdArray] {
        &self.params
    }

    fn condition(&self, y: &NdArray) -> Result<NdArray> {
        self.conditioning_window(y)
    }

    fn record(&self, tape: &mut Tape, params: &[Var], x: Var, r: Var, t: Var, cond: Var) -> Result<Var> {
        let xs = tape.value(x).shape();
        let cs = tape.value(cond).shape();
        if xs.len() != 2 || xs[1] != self.config.frame_width() || cs.len() != 2 || cs[0] != xs[0] {
            return Err(Error::Shape {
                what: "x_t",
                expected: vec![cs.first().copied().unwrap_or(0), self.config.frame_width()],
                got: xs.to_vec(),
            });
        }
        self.record_window(tape, params, x, r, t, cond)
    }
}

/// Mean-flow network that reproduces a trained flow network: every shared
/// array is copied and the fusion layer is set to `([0 | I], 0)`, so the
/// fused feature equals the embedding of `t` for any `r`.
pub fn flowse_init(flow: &VelocityNetwork, geometry: &NetworkConfig) -> Result<VelocityNetwork> {
    if flow.mode != Mode::Flow {
        return Err(Error::Geometry(format!("expected a flow network, got {}", flow.mode)));
    }
    if &flow.config != geometry {
        return Err(Error::Geometry(format!(
            "flow network geometry {:?} differs from {:?}",
            flow.config, geometry
        )));
    }
    let k = geometry.time_dim;
    let mut params = Vec::with_capacity(flow.params.len() + 2);
    params.extend_from_slice(&flow.params[..4]);
    params.push(fusion_identity(k, true));
    params.push(NdArray::zeros(&[1, k]));
    params.extend_from_slice(&flow.params[4..]);
    VelocityNetwork::from_parts(geometry.clone(), Mode::MeanFlow, flow.frequencies.clone(), params)
}

/// Fails unless both networks carry the same frozen frequency table.
pub fn check_frequencies(a: &VelocityNetwork, b: &VelocityNetwork) -> Result<()> {
    if a.frequencies != b.frequencies {
        return Err(Error::FrequencyMismatch);
    }
    Ok(())
}

/// Frequency table a network built from `seed` would carry.
pub fn draw_frequencies(config: &NetworkConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.time_dim / 2)
        .map(|_| config.fourier_scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Flat indices into an `[frames, 2 * bins]` spectrogram for every cell's
/// neighbourhood, row `f * bins + k`, columns ordered by frame offset, bin
/// offset, then real/imaginary.
fn patch_index(cfg: &NetworkConfig, frames: usize) -> Vec<usize> {
    let (bins, c, b) = (cfg.bins as isize, cfg.context as isize, cfg.bin_context as isize);
    let width = 2 * cfg.bins;
    let mut idx = Vec::with_capacity(frames * cfg.bins * cfg.x_features());
    for f in 0..frames as isize {
        for k in 0..bins {
            for df in -c..=c {
                for dk in -b..=b {
                    let (ff, kk) = (f + df, k + dk);
                    if ff < 0 || ff >= frames as isize || kk < 0 || kk >= bins {
                        idx.extend([GATHER_ZERO, GATHER_ZERO]);
                    } else {
                        let base = ff as usize * width + kk as usize;
                        idx.extend([base, base + cfg.bins]);
                    }
                }
            }
        }
    }
    idx
}

/// Maps per-cell `[re, im]` rows back to `[frames, 2 * bins]`.
fn unpatch_index(bins: usize, frames: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(frames * 2 * bins);
    for f in 0..frames {
        idx.extend((0..bins).map(|k| 2 * (f * bins + k)));
        idx.extend((0..bins).map(|k| 2 * (f * bins + k) + 1));
    }
    idx
}

/// `[2K, K]` block matrix: zeros over the `e(r)` rows and the identity over
/// the `e(t)` rows (or the reverse when `t_second` is false).
fn fusion_identity(k: usize, t_second: bool) -> NdArray {
    let mut w = NdArray::zeros(&[2 * k, k]);
    let offset = if t_second { k } else { 0 };
    for i in 0..k {
        w.data_mut()[(offset + i) * k + i] = 1.0;
    }
    w
}

fn lecun_uniform(shape: &[usize], gain: f64, rng: &mut ChaCha8Rng) -> NdArray {
    let fan_in = shape[0] as f64;
    let bound = gain * (3.0 / fan_in).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0) * bound).collect();
    NdArray::new(shape.to_vec(), data).expect("layout shapes are consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig {
            backbone: Backbone::Patch,
            bins: 3,
            context: 1,
            bin_context: 1,
            hidden: 8,
            depth: 2,
            time_dim: 6,
            fourier_scale: 1.0,
            linear_skip: true,
            output_gain: 0.5,
        }
    }

    fn spectro(frames: usize, width: usize, phase: f64) -> NdArray {
        NdArray::matrix(
            frames,
            width,
            (0..frames * width).map(|i| (i as f64 * 0.31 + phase).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn fourier_features_at_zero() {
        let net = VelocityNetwork::new(small(), Mode::Flow, 1).unwrap();
        let f = net.fourier_features(0.0);
        assert_eq!(f.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn embedding_is_deterministic_and_separates_times() {
        let net = VelocityNetwork::new(NetworkConfig::with_bins(4), Mode::Flow, 9).unwrap();
        assert_eq!(net.gaussian_fourier_embed(0.3).unwrap(), net.gaussian_fourier_embed(0.3).unwrap());
        for i in 0..100 {
            let a = i as f64 / 100.0;
            let b = a + 0.005;
            let d = net
                .gaussian_fourier_embed(a)
                .unwrap()
                .max_abs_diff(&net.gaussian_fourier_embed(b).unwrap())
                .unwrap();
            assert!(d > 0.0, "embeddings of {a} and {b} coincide");
        }
        assert!(net.gaussian_fourier_embed(1.5).is_err());
    }

    #[test]
    fn identity_fusion_returns_t_embedding() {
        let net = VelocityNetwork::new(small(), Mode::MeanFlow, 2).unwrap();
        for &r in &[0.0, 0.2, 0.6] {
            let fused = net.fuse_times(r, 0.6).unwrap();
            assert_eq!(fused, net.gaussian_fourier_embed(0.6).unwrap());
        }
        assert!(matches!(net.fuse_times(0.7, 0.6), Err(Error::InvalidInterval { .. })));
    }

    #[test]
    fn zero_fusion_gives_zero_vector() {
        let mut net = VelocityNetwork::new(small(), Mode::MeanFlow, 2).unwrap();
        net.param_mut("fusion.weight").unwrap().data_mut().fill(0.0);
        let fused = net.fuse_times(0.1, 0.9).unwrap();
        assert!(fused.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_fusion_is_deterministic_on_diagonal() {
        let mut net = VelocityNetwork::new(small(), Mode::MeanFlow, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in net.param_mut("fusion.weight").unwrap().data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let a = net.fuse_times(0.4, 0.4).unwrap();
        assert_eq!(a, net.fuse_times(0.4, 0.4).unwrap());
        assert_ne!(a, net.fuse_times(0.5, 0.5).unwrap());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = small();
        let net = VelocityNetwork::new(cfg.clone(), Mode::MeanFlow, 3).unwrap();
        let x = spectro(5, cfg.frame_width(), 0.0);
        let y = spectro(5, cfg.frame_width(), 1.0);
        let out = net.forward(&x, 0.2, 0.7, &y).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert!(out.is_finite());
        assert_eq!(out, net.forward(&x, 0.2, 0.7, &y).unwrap());
        let bad = spectro(4, cfg.frame_width(), 1.0);
        assert!(net.forward(&x, 0.2, 0.7, &bad).is_err());
    }

    #[test]
    fn zero_output_layer_gives_zero_field() {
        let mut cfg = small();
        cfg.output_gain = 0.0;
        let net = VelocityNetwork::new(cfg.clone(), Mode::Flow, 3).unwrap();
        let x = spectro(4, cfg.frame_width(), 0.0);
        let out = net.forward(&x, 0.5, 0.5, &x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conditioning_window_pads_edges() {
        let mut cfg = small();
        cfg.backbone = Backbone::Frame;
        cfg.bins = 1;
        let net = VelocityNetwork::new(cfg, Mode::Flow, 0).unwrap();
        let y = NdArray::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = net.conditioning_window(&y).unwrap();
        assert_eq!(c.shape(), &[3, 6]);
        assert_eq!(&c.data()[..6], &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&c.data()[12..], &[3.0, 4.0, 5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn patch_window_holds_neighbours_and_position() {
        let mut cfg = small();
        cfg.bins = 2;
        cfg.context = 0;
        cfg.bin_context = 1;
        let net = VelocityNetwork::new(cfg, Mode::Flow, 0).unwrap();
        // one frame: re = [1, 2], im = [3, 4]
        let y = NdArray::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = net.conditioning_window(&y).unwrap();
        assert_eq!(c.shape(), &[1, 20]);
        let lm = |re: f64, im: f64| (re.hypot(im) + LOG_MAG_FLOOR).log10();
        let row0 = [0.0, 0.0, 1.0, 3.0, 2.0, 4.0, lm(0.0, 0.0), lm(1.0, 3.0), lm(2.0, 4.0), 0.0];
        let row1 = [1.0, 3.0, 2.0, 4.0, 0.0, 0.0, lm(1.0, 3.0), lm(2.0, 4.0), lm(0.0, 0.0), 1.0];
        assert_eq!(&c.data()[..10], &row0);
        assert_eq!(&c.data()[10..], &row1);
    }

    #[test]
    fn frame_and_patch_backbones_both_run() {
        for backbone in [Backbone::Frame, Backbone::Patch] {
            let mut cfg = small();
            cfg.backbone = backbone;
            let net = VelocityNetwork::new(cfg.clone(), Mode::Flow, 1).unwrap();
            let x = spectro(4, cfg.frame_width(), 0.2);
            let out = net.forward(&x, 0.5, 0.5, &x).unwrap();
            assert_eq!(out.shape(), x.shape());
            let params: usize = param_layout(&cfg, Mode::Flow).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
            assert_eq!(net.param_count(), params);
        }
    }

    #[test]
    fn patch_rows_see_only_their_neighbourhood() {
        // changing one cell of x moves only outputs within the patch radius
        let cfg = small();
        let net = VelocityNetwork::new(cfg.clone(), Mode::Flow, 6).unwrap();
        let x = spectro(6, cfg.frame_width(), 0.1);
        let y = spectro(6, cfg.frame_width(), 0.4);
        let base = net.forward(&x, 0.3, 0.3, &y).unwrap();
        let mut moved = x.clone();
        moved.data_mut()[0] += 1.0; // frame 0, bin 0, real part
        let out = net.forward(&moved, 0.3, 0.3, &y).unwrap();
        let w = cfg.frame_width();
        for f in 0..6 {
            for k in 0..cfg.bins {
                let changed = out.data()[f * w + k] != base.data()[f * w + k];
                assert_eq!(changed, f <= 1 && k <= 1, "frame {f} bin {k}");
            }
        }
    }

    #[test]
    fn flowse_init_makes_output_independent_of_r() {
        let cfg = small();
        let flow = VelocityNetwork::new(cfg.clone(), Mode::Flow, 4).unwrap();
        let mean = flowse_init(&flow, &cfg).unwrap();
        assert_eq!(mean.mode(), Mode::MeanFlow);
        check_frequencies(&flow, &mean).unwrap();
        let x = spectro(3, cfg.frame_width(), 0.3);
        let y = spectro(3, cfg.frame_width(), 0.9);
        let want = flow.forward(&x, 0.8, 0.8, &y).unwrap();
        for &r in &[0.0, 0.3, 0.8] {
            assert_eq!(mean.forward(&x, r, 0.8, &y).unwrap(), want);
        }
    }

    #[test]
    fn perturbed_fusion_depends_on_r() {
        let cfg = small();
        let flow = VelocityNetwork::new(cfg.clone(), Mode::Flow, 4).unwrap();
        let mut mean = flowse_init(&flow, &cfg).unwrap();
        mean.param_mut("fusion.weight").unwrap().data_mut()[0] += 1e-3;
        let x = spectro(3, cfg.frame_width(), 0.3);
        let y = spectro(3, cfg.frame_width(), 0.9);
        let a = mean.forward(&x, 0.0, 0.8, &y).unwrap();
        let b = mean.forward(&x, 0.5, 0.8, &y).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 0.0);
    }

    #[test]
    fn flowse_init_rejects_mismatches() {
        let cfg = small();
        let flow = VelocityNetwork::new(cfg.clone(), Mode::Flow, 4).unwrap();
        let mut other = cfg.clone();
        other.hidden = 9;
        assert!(matches!(flowse_init(&flow, &other), Err(Error::Geometry(_))));
        let mean = VelocityNetwork::new(cfg.clone(), Mode::MeanFlow, 4).unwrap();
        assert!(matches!(flowse_init(&mean, &cfg), Err(Error::Geometry(_))));
        let stranger = VelocityNetwork::new(cfg, Mode::Flow, 5).unwrap();
        assert!(matches!(check_frequencies(&flow, &stranger), Err(Error::FrequencyMismatch)));
    }

    #[test]
    fn default_parameter_budget() {
        // wideband bins would exceed this; the desk-scale default is 64 bins
        let net = VelocityNetwork::new(NetworkConfig::with_bins(64), Mode::MeanFlow, 0).unwrap();
        assert!(net.param_count() <= 1_000_000, "{} parameters", net.param_count());
    }
}
