//! Objectives and the optimisation loop.
//!
//! Each batch item gets its own child RNG seeded from the batch stream. The
//! child draws, in order: the crop offset, the prior noise, `t`, and (mean
//! flow only) the mix-up coin and `r`. Because `t` precedes the coin, the
//! mean-flow objective at flow ratio 1 reproduces the CFM objective draw for
//! draw.

use std::io::Write;
use std::time::Instant;

use mf_autodiff::{AdError, NdArray, Tape, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_path::GaussianPath;
use crate::network::{flowse_init, Mode, NetworkConfig, VelocityModel, VelocityNetwork};
use crate::optimizer::{AdamConfig, AdamW};

const VALIDATION_STREAM: u64 = 0x7661_6c69_6461_7465;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeInterval {
    pub r: f64,
    pub t: f64,
}

impl TimeInterval {
    pub fn new(r: f64, t: f64, t_floor: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        if t < t_floor {
            return Err(Error::TimeBelowFloor { t, floor: t_floor });
        }
        if !(0.0..=t).contains(&r) {
            return Err(Error::InvalidInterval { r, t });
        }
        Ok(Self { r, t })
    }

    pub fn width(&self) -> f64 {
        self.t - self.r
    }

    /// `r = t` marks a flow-matching draw.
    pub fn is_flow(&self) -> bool {
        self.r == self.t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub stages: Vec<f64>,
    pub steps_per_stage: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            stages: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            steps_per_stage: 300,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.steps_per_stage == 0 {
            return Err(Error::Config("curriculum needs stages and steps".into()));
        }
        if self.stages.windows(2).any(|w| w[1] <= w[0]) || self.stages[0] <= 0.0 {
            return Err(Error::Config(format!(
                "curriculum widths must be positive and strictly increasing: {:?}",
                self.stages
            )));
        }
        if *self.stages.last().unwrap() != 1.0 {
            return Err(Error::Config("last curriculum width must be 1.0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub flow_ratio: f64,
    pub lr_scratch: f64,
    pub lr_finetune: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps for flow-mode training and for from-scratch mean-flow training.
    pub steps: usize,
    /// Frames per training crop; 0 trains on whole utterances.
    pub crop_frames: usize,
    pub val_every: usize,
    pub log_every: usize,
    pub adam: AdamConfig,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            flow_ratio: 0.75,
            lr_scratch: 1e-4,
            lr_finetune: 1e-5,
            weight_decay: 1e-6,
            batch_size: 2,
            seed: 0,
            steps: 3000,
            crop_frames: 64,
            val_every: 100,
            log_every: 50,
            adam: AdamConfig::default(),
            divergence_factor: 1e3,
            divergence_patience: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flow_ratio) {
            return Err(Error::Config(format!("flow_ratio {} outside [0, 1]", self.flow_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [
            ("lr_scratch", self.lr_scratch),
            ("lr_finetune", self.lr_finetune),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.divergence_factor > 0.0) {
            return Err(Error::Config("divergence_factor must be positive".into()));
        }
        if self.val_every == 0 || self.log_every == 0 || self.divergence_patience == 0 {
            return Err(Error::Config("val_every, log_every and divergence_patience must be positive".into()));
        }
        Ok(())
    }
}

/// Which regression target the loss uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Cfm,
    MeanFlow { flow_ratio: f64, max_width: f64 },
}

/// A clean/noisy spectrogram pair, `[frames, 2 * bins]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub x0: NdArray,
    pub y: NdArray,
}

/// A pair with the model's conditioning input precomputed.
#[derive(Debug, Clone)]
pub struct Prepared {
    x0: NdArray,
    y: NdArray,
    cond: NdArray,
}

impl Prepared {
    pub fn new<M: VelocityModel + ?Sized>(model: &M, pair: &TrainPair) -> Result<Self> {
        if pair.x0.shape() != pair.y.shape() {
            return Err(Error::Shape {
                what: "x0",
                expected: pair.y.shape().to_vec(),
                got: pair.x0.shape().to_vec(),
            });
        }
        Ok(Self {
            x0: pair.x0.clone(),
            y: pair.y.clone(),
            cond: model.condition(&pair.y)?,
        })
    }

    pub fn frames(&self) -> usize {
        self.y.shape()[0]
    }
}

/// Loss (and optionally gradients) over a batch.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub loss: f64,
    pub grads: Option<Vec<NdArray>>,
    /// Largest `t - r` drawn in the batch.
    pub max_width: f64,
}

/// `(t, t)` with probability `flow_ratio`, otherwise `t - r` in `(0, max_width]`.
pub fn sample_interval<R: Rng + ?Sized>(path: &GaussianPath, rng: &mut R, flow_ratio: f64, max_width: f64) -> TimeInterval {
    let t = path.sample_time(rng);
    let coin: f64 = rng.random();
    if coin < flow_ratio {
        return TimeInterval { r: t, t };
    }
    let lo = (t - max_width).max(0.0);
    let r = if lo < t { rng.random_range(lo..t) } else { lo };
    TimeInterval { r, t }
}

fn rows(a: &NdArray, start: usize, len: usize) -> NdArray {
    let w = a.shape()[1];
    NdArray::matrix(len, w, a.data()[start * w..(start + len) * w].to_vec()).expect("row slice in range")
}

fn time_array(s: f64, tangent: Option<f64>) -> NdArray {
    let a = NdArray::full(&[1, 1], s);
    match tangent {
        Some(d) => a.with_tangent(vec![d]).expect("one element"),
        None => a,
    }
}

/// `v - (t - r) * d/dt u(x_t, r, t)` with the total derivative taken along
/// `(dx, dr, dt) = (v, 0, 1)`, recorded on a tangent tape.
fn record_target<M: VelocityModel + ?Sized>(
    model: &M,
    tape: &mut Tape,
    params: &[Var],
    x_t: &NdArray,
    iv: TimeInterval,
    cond: Var,
    v: &NdArray,
) -> Result<(Var, NdArray)> {
    let x = tape.constant(x_t.clone().with_tangent(v.data().to_vec())?)?;
    let r = tape.constant(time_array(iv.r, None))?;
    let t = tape.constant(time_array(iv.t, Some(1.0)))?;
    let u = model.record(tape, params, x, r, t, cond)?;
    let du = tape.tangent_of(u);
    Ok((u, v.axpy(-(iv.t - iv.r), &du)?))
}

/// Mean-flow regression target for one spectrogram; carries no tangent.
pub fn mf_target<M: VelocityModel + ?Sized>(
    model: &M,
    x_t: &NdArray,
    iv: TimeInterval,
    y: &NdArray,
    v: &NdArray,
) -> Result<NdArray> {
    if iv.is_flow() {
        return Ok(v.clone().without_tangent());
    }
    let mut tape = Tape::with_tangents();
    let params = model
        .params()
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect::<mf_autodiff::Result<Vec<_>>>()?;
    let cond = tape.constant(model.condition(y)?)?;
    let (_, target) = record_target(model, &mut tape, &params, x_t, iv, cond, v)?;
    Ok(target)
}

fn non_finite(e: Error, t: f64, target: &NdArray) -> Error {
    match e {
        Error::Autodiff(AdError::NonFinite { .. }) => Error::NonFiniteLoss {
            t,
            target_norm: target.norm(),
        },
        other => other,
    }
}

/// Squared error of `u_theta(x_t, r, t)` against the stop-gradient target
/// for one drawn sample, and the parameter gradients when `with_grad`.
///
/// Mean-flow intervals record the network once on a tangent tape; the
/// target is read off the output tangent and re-enters as a constant.
pub fn interval_loss<M: VelocityModel + ?Sized>(
    model: &M,
    x_t: &NdArray,
    iv: TimeInterval,
    cond: &NdArray,
    v: &NdArray,
    with_grad: bool,
) -> Result<(f64, Option<Vec<NdArray>>)> {
    let mut tape = if iv.is_flow() { Tape::new() } else { Tape::with_tangents() };
    let params = model
        .params()
        .iter()
        .map(|p| if with_grad { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
        .collect::<mf_autodiff::Result<Vec<_>>>()?;
    let cond = tape.constant(cond.clone())?;

    let (u, target) = if iv.is_flow() {
        let x = tape.constant(x_t.clone())?;
        let r = tape.constant(time_array(iv.r, None))?;
        let t = tape.constant(time_array(iv.t, None))?;
        let u = model.record(&mut tape, &params, x, r, t, cond).map_err(|e| non_finite(e, iv.t, v))?;
        (u, v.clone())
    } else {
        record_target(model, &mut tape, &params, x_t, iv, cond, v).map_err(|e| non_finite(e, iv.t, v))?
    };
    if !target.is_finite() {
        return Err(Error::NonFiniteLoss {
            t: iv.t,
            target_norm: target.norm(),
        });
    }
    let loss_var = (|| -> mf_autodiff::Result<Var> {
        let tgt = tape.constant(target.clone())?;
        let tgt = tape.stop_gradient(tgt)?;
        let diff = tape.sub(u, tgt)?;
        let sq = tape.square(diff)?;
        tape.sum(sq)
    })()
    .map_err(|e| non_finite(e.into(), iv.t, &target))?;
    let loss = tape.value(loss_var).item()?;
    let grads = if with_grad {
        let g = tape.backward(loss_var)?;
        Some(params.iter().map(|&p| g.wrt(p)).collect())
    } else {
        None
    };
    Ok((loss, grads))
}

struct ItemEval {
    loss: f64,
    grads: Option<Vec<NdArray>>,
    width: f64,
}

fn item_eval<M: VelocityModel + ?Sized>(
    model: &M,
    path: &GaussianPath,
    item: &Prepared,
    seed: u64,
    objective: Objective,
    crop: usize,
    with_grad: bool,
) -> Result<ItemEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = item.frames();
    let (x0, y, cond) = if crop > 0 && frames > crop {
        let start = rng.random_range(0..=frames - crop);
        (rows(&item.x0, start, crop), rows(&item.y, start, crop), rows(&item.cond, start, crop))
    } else {
        (item.x0.clone(), item.y.clone(), item.cond.clone())
    };
    let x1 = path.sample_prior(&y, &mut rng);
    let iv = match objective {
        Objective::Cfm => {
            let t = path.sample_time(&mut rng);
            TimeInterval { r: t, t }
        }
        Objective::MeanFlow { flow_ratio, max_width } => sample_interval(path, &mut rng, flow_ratio, max_width),
    };
    let sample = path.sample_at(&x0, &y, x1, iv.t)?;
    let v = sample.v_target;

    let (loss, grads) = interval_loss(model, &sample.x_t, iv, &cond, &v, with_grad)?;
    Ok(ItemEval {
        loss,
        grads,
        width: iv.width(),
    })
}

/// Batch loss with one child seed per item drawn from `rng`. Items are
/// reduced in order, so the result does not depend on evaluation order.
pub fn batch_eval<M: VelocityModel + ?Sized, R: RngCore>(
    model: &M,
    path: &GaussianPath,
    batch: &[&Prepared],
    rng: &mut R,
    objective: Objective,
    crop: usize,
    with_grad: bool,
) -> Result<BatchEval> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut max_width = 0.0f64;
    let mut grads: Option<Vec<NdArray>> = None;
    for item in batch {
        let seed = rng.next_u64();
        let e = item_eval(model, path, item, seed, objective, crop, with_grad)?;
        loss += e.loss * scale;
        max_width = max_width.max(e.width);
        if let Some(g) = e.grads {
            grads = Some(match grads {
                None => g.iter().map(|a| a.scaled(scale)).collect(),
                Some(acc) => acc.iter().zip(&g).map(|(a, b)| a.axpy(scale, b)).collect::<mf_autodiff::Result<_>>()?,
            });
        }
    }
    Ok(BatchEval { loss, grads, max_width })
}

fn prepare_all<M: VelocityModel + ?Sized>(model: &M, pairs: &[TrainPair]) -> Result<Vec<Prepared>> {
    pairs.iter().map(|p| Prepared::new(model, p)).collect()
}

/// Mean over the batch of `|v_theta(x_t, t, y) - v(x_t | x0, y)|^2`.
pub fn cfm_loss<M: VelocityModel + ?Sized, R: RngCore>(
    model: &M,
    path: &GaussianPath,
    batch: &[TrainPair],
    rng: &mut R,
) -> Result<f64> {
    let prepared = prepare_all(model, batch)?;
    let refs: Vec<&Prepared> = prepared.iter().collect();
    Ok(batch_eval(model, path, &refs, rng, Objective::Cfm, 0, false)?.loss)
}

/// Mean over the batch of `|u_theta(x_t, r, t, y) - sg(u_tgt)|^2`.
pub fn mf_loss<M: VelocityModel + ?Sized, R: RngCore>(
    model: &M,
    path: &GaussianPath,
    batch: &[TrainPair],
    rng: &mut R,
    flow_ratio: f64,
    max_width: f64,
) -> Result<f64> {
    let prepared = prepare_all(model, batch)?;
    let refs: Vec<&Prepared> = prepared.iter().collect();
    let objective = Objective::MeanFlow { flow_ratio, max_width };
    Ok(batch_eval(model, path, &refs, rng, objective, 0, false)?.loss)
}

/// Validation loss over every held-out pair with a fixed draw stream; each
/// pair is cropped to `crop` frames at a seeded offset (0 keeps it whole).
pub fn validation_loss<M: VelocityModel + ?Sized>(
    model: &M,
    path: &GaussianPath,
    val: &[Prepared],
    objective: Objective,
    crop: usize,
    seed: u64,
) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ VALIDATION_STREAM);
    let refs: Vec<&Prepared> = val.iter().collect();
    Ok(batch_eval(model, path, &refs, &mut rng, objective, crop, false)?.loss)
}

/// One optimisation phase: a fixed objective, learning rate and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub objective: Objective,
    pub steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub index: usize,
    pub objective: Objective,
    pub steps_run: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_step: usize,
    pub max_sampled_width: f64,
    /// Lowest-validation-loss parameters of the stage.
    pub network: VelocityNetwork,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub stages: Vec<StageReport>,
}

impl TrainReport {
    pub fn final_network(&self) -> &VelocityNetwork {
        &self.stages.last().expect("at least one stage").network
    }
}

/// Training data split into optimisation and validation pairs.
#[derive(Debug, Clone, Copy)]
pub struct Dataset<'a> {
    pub train: &'a [TrainPair],
    pub val: &'a [TrainPair],
}

fn log_line(log: &mut Option<&mut dyn Write>, line: std::fmt::Arguments<'_>) -> Result<()> {
    if let Some(w) = log {
        writeln!(w, "{line}").map_err(Error::io("metrics log"))?;
    }
    Ok(())
}

fn fmt_val(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6e}"))
}

/// Runs `stages` in order. Each stage starts from the previous stage's best
/// parameters with fresh optimiser state.
///
/// The metrics log gets one line per logged step:
/// `step=<global> stage=<index> loss=<train> val_loss=<val or -> wall_ms=<ms>`.
pub fn train_stages(
    init: VelocityNetwork,
    data: Dataset<'_>,
    path: &GaussianPath,
    cfg: &TrainConfig,
    stages: &[Stage],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    let train = prepare_all(&init, data.train)?;
    let val = prepare_all(&init, data.val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clock = Instant::now();
    let mut net = init;
    let mut reports = Vec::with_capacity(stages.len());
    let mut global = 0usize;
    let mut reference: Option<f64> = None;

    for (si, stage) in stages.iter().enumerate() {
        let mut opt = AdamW::new(cfg.adam, cfg.weight_decay, net.params());
        let val_seed = cfg.seed.wrapping_add(si as u64);
        let initial_val = validation_loss(&net, path, &val, stage.objective, cfg.crop_frames, val_seed)?;
        let mut best = (initial_val, 0usize, net.clone());
        let (ratio, width) = match stage.objective {
            Objective::Cfm => (1.0, 0.0),
            Objective::MeanFlow { flow_ratio, max_width } => (flow_ratio, max_width),
        };
        let mut first_loss = f64::NAN;
        let mut last_loss = f64::NAN;
        let mut max_sampled = 0.0f64;
        let mut over = 0usize;
        log_line(
            &mut log,
            format_args!(
                "step={global} stage={si} loss=- val_loss={} wall_ms={}",
                fmt_val(Some(initial_val)),
                clock.elapsed().as_millis()
            ),
        )?;

        for step in 1..=stage.steps {
            global += 1;
            let batch: Vec<&Prepared> = (0..cfg.batch_size)
                .map(|_| &train[rng.random_range(0..train.len())])
                .collect();
            let eval = batch_eval(&net, path, &batch, &mut rng, stage.objective, cfg.crop_frames, true)?;
            if !eval.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    t: f64::NAN,
                    target_norm: f64::NAN,
                });
            }
            max_sampled = max_sampled.max(eval.max_width);
            if step == 1 {
                first_loss = eval.loss;
            }
            last_loss = eval.loss;
            let base = *reference.get_or_insert(eval.loss);
            if eval.loss > cfg.divergence_factor * base {
                over += 1;
                if over >= cfg.divergence_patience {
                    return Err(Error::Divergence {
                        stage: width,
                        flow_ratio: ratio,
                        step: global,
                    });
                }
            } else {
                over = 0;
            }
            let grads = eval.grads.expect("gradients requested");
            opt.step(net.params_mut(), &grads, stage.lr)?;

            let validate = step % cfg.val_every == 0 || step == stage.steps;
            let val_loss = if validate {
                let v = validation_loss(&net, path, &val, stage.objective, cfg.crop_frames, val_seed)?;
                if v < best.0 || best.0.is_nan() {
                    best = (v, step, net.clone());
                }
                Some(v)
            } else {
                None
            };
            if validate || step % cfg.log_every == 0 {
                log_line(
                    &mut log,
                    format_args!(
                        "step={global} stage={si} loss={:.6e} val_loss={} wall_ms={}",
                        eval.loss,
                        fmt_val(val_loss),
                        clock.elapsed().as_millis()
                    ),
                )?;
            }
        }
        // without a validation split the last iterate stands in for the best
        if val.is_empty() {
            best = (f64::NAN, stage.steps, net.clone());
        }
        net = best.2.clone();
        reports.push(StageReport {
            index: si,
            objective: stage.objective,
            steps_run: stage.steps,
            first_loss,
            last_loss,
            initial_val_loss: initial_val,
            best_val_loss: best.0,
            best_step: best.1,
            max_sampled_width: max_sampled,
            network: best.2,
        });
    }
    Ok(TrainReport { stages: reports })
}

/// Flow matching from the given (usually fresh) flow network.
pub fn train_flow(
    init: VelocityNetwork,
    data: Dataset<'_>,
    path: &GaussianPath,
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    if init.mode() != Mode::Flow {
        return Err(Error::Config("flow training needs a flow-mode network".into()));
    }
    let stage = Stage {
        objective: Objective::Cfm,
        steps: cfg.steps,
        lr: cfg.lr_scratch,
    };
    train_stages(init, data, path, cfg, &[stage], log)
}

/// Mean-flow fine-tuning through the interval curriculum, starting from a
/// trained flow network.
pub fn train_meanflow_curriculum(
    flow: &VelocityNetwork,
    geometry: &NetworkConfig,
    data: Dataset<'_>,
    path: &GaussianPath,
    cfg: &TrainConfig,
    schedule: &CurriculumSchedule,
    log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    schedule.validate()?;
    let init = flowse_init(flow, geometry)?;
    let stages: Vec<Stage> = schedule
        .stages
        .iter()
        .map(|&w| Stage {
            objective: Objective::MeanFlow {
                flow_ratio: cfg.flow_ratio,
                max_width: w,
            },
            steps: schedule.steps_per_stage,
            lr: cfg.lr_finetune,
        })
        .collect();
    train_stages(init, data, path, cfg, &stages, log)
}

/// Mean-flow training from random initialisation, full width from the start.
pub fn train_meanflow_scratch(
    init: VelocityNetwork,
    data: Dataset<'_>,
    path: &GaussianPath,
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    if init.mode() != Mode::MeanFlow {
        return Err(Error::Config("mean-flow training needs a meanflow-mode network".into()));
    }
    let stage = Stage {
        objective: Objective::MeanFlow {
            flow_ratio: cfg.flow_ratio,
            max_width: 1.0,
        },
        steps: cfg.steps,
        lr: cfg.lr_scratch,
    };
    train_stages(init, data, path, cfg, &[stage], log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_path::PathConfig;

    fn path() -> GaussianPath {
        GaussianPath::new(PathConfig::default()).unwrap()
    }

    /// `u = a * x`.
    struct Linear(f64);

    impl VelocityModel for Linear {
        fn params(&self) -> &[NdArray] {
            &[]
        }

        fn record(&self, tape: &mut Tape, _: &[Var], x: Var, _r: Var, _t: Var, _c: Var) -> Result<Var> {
            Ok(tape.scale(x, self.0)?)
        }
    }

    /// `u = t`, independent of `x`.
    struct TimeOnly;

    impl VelocityModel for TimeOnly {
        fn params(&self) -> &[NdArray] {
            &[]
        }

        fn record(&self, tape: &mut Tape, _: &[Var], x: Var, _r: Var, t: Var, _c: Var) -> Result<Var> {
            let zero = tape.scale(x, 0.0)?;
            tape.add(zero, t).map_err(Into::into)
        }
    }

    #[test]
    fn interval_collapse_returns_v() {
        let v = NdArray::row(vec![0.4, -1.0]);
        let iv = TimeInterval::new(0.6, 0.6, 1e-5).unwrap();
        let got = mf_target(&Linear(3.0), &NdArray::row(vec![1.0, 2.0]), iv, &NdArray::row(vec![0.0, 0.0]), &v).unwrap();
        assert_eq!(got, v);
    }

    #[test]
    fn linear_stub_target_by_hand() {
        let iv = TimeInterval::new(0.3, 0.8, 1e-5).unwrap();
        let one = NdArray::full(&[1, 1], 1.0);
        let got = mf_target(&Linear(2.0), &one, iv, &one, &one).unwrap();
        assert!(got.item().unwrap().abs() < 1e-15, "{got:?}");
        assert!(got.tangent().is_none());
    }

    #[test]
    fn time_only_stub_target_by_hand() {
        let iv = TimeInterval::new(0.25, 0.75, 1e-5).unwrap();
        let v = NdArray::full(&[1, 1], 1.5);
        let got = mf_target(&TimeOnly, &NdArray::full(&[1, 1], 9.0), iv, &v, &v).unwrap();
        assert!((got.item().unwrap() - (1.5 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn interval_sampler_degenerate_ratios() {
        let p = path();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert!(sample_interval(&p, &mut rng, 1.0, 0.2).is_flow());
        }
        let mut widest = 0.0f64;
        for _ in 0..100_000 {
            let iv = sample_interval(&p, &mut rng, 0.0, 0.2);
            assert!(!iv.is_flow());
            assert!(iv.r >= 0.0 && iv.t <= 1.0 && iv.t >= 1e-5);
            widest = widest.max(iv.width());
        }
        assert!(widest <= 0.2);
    }

    #[test]
    fn interval_sampler_mixup_fraction() {
        let p = path();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let flows = (0..n).filter(|_| sample_interval(&p, &mut rng, 0.75, 1.0).is_flow()).count();
        let frac = flows as f64 / n as f64;
        assert!((frac - 0.75).abs() <= 0.01, "{frac}");
    }

    #[test]
    fn interval_validation() {
        assert!(TimeInterval::new(0.5, 0.4, 1e-5).is_err());
        assert!(TimeInterval::new(0.0, 1e-6, 1e-5).is_err());
        assert!(TimeInterval::new(0.0, 1.2, 1e-5).is_err());
        assert!(TimeInterval::new(0.4, 0.4, 1e-5).unwrap().is_flow());
    }

    #[test]
    fn zero_network_loss_is_squared_target() {
        // a 1x1 "spectrogram": x0 = 0, y = 1; the loss is v^2 for the drawn t
        let p = path();
        let pair = TrainPair {
            x0: NdArray::full(&[1, 1], 0.0),
            y: NdArray::full(&[1, 1], 1.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let loss = cfm_loss(&Linear(0.0), &p, std::slice::from_ref(&pair), &mut rng).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut child = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let x1 = p.sample_prior(&pair.y, &mut child);
        let t = p.sample_time(&mut child);
        let s = p.sample_at(&pair.x0, &pair.y, x1, t).unwrap();
        let v = s.v_target.item().unwrap();
        assert!((loss - v * v).abs() <= 1e-12 * v * v);
    }

    #[test]
    fn flow_ratio_one_reproduces_cfm() {
        let p = path();
        let pairs: Vec<TrainPair> = (0..3)
            .map(|i| TrainPair {
                x0: NdArray::row(vec![i as f64, 0.5, -1.0]),
                y: NdArray::row(vec![1.0, i as f64 * 0.3, 0.2]),
            })
            .collect();
        for seed in 0..20 {
            let a = cfm_loss(&Linear(0.7), &p, &pairs, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = mf_loss(&Linear(0.7), &p, &pairs, &mut ChaCha8Rng::seed_from_u64(seed), 1.0, 0.4).unwrap();
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn losses_are_non_negative() {
        let p = path();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let pair = TrainPair {
                x0: NdArray::row((0..4).map(|_| rng.random_range(-2.0..2.0)).collect()),
                y: NdArray::row((0..4).map(|_| rng.random_range(-2.0..2.0)).collect()),
            };
            let l = mf_loss(&Linear(-0.4), &p, &[pair], &mut rng, 0.5, 1.0).unwrap();
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let p = path();
        assert!(cfm_loss(&Linear(1.0), &p, &[], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn curriculum_validation() {
        CurriculumSchedule::default().validate().unwrap();
        let bad = CurriculumSchedule {
            stages: vec![0.2, 0.2, 1.0],
            steps_per_stage: 5,
        };
        assert!(bad.validate().is_err());
        let short = CurriculumSchedule {
            stages: vec![0.2, 0.6],
            steps_per_stage: 5,
        };
        assert!(short.validate().is_err());
    }

    #[test]
    fn train_config_defaults_and_checks() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.flow_ratio, 0.75);
        assert_eq!(cfg.lr_scratch, 1e-4);
        assert_eq!(cfg.lr_finetune, 1e-5);
        assert_eq!(cfg.weight_decay, 1e-6);
        assert_eq!(cfg.batch_size, 2);
        cfg.validate().unwrap();
        let bad = TrainConfig {
            flow_ratio: 1.5,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }
}
