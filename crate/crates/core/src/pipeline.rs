//! The commands behind the `meanse` binary, callable as library functions.
//!
//! Output layout:
//!
//! ```text
//! gen-corpus      <out>/corpus.toml, pairs/*.bin, manifest.tsv
//! train-flow      <out>/flow.ckpt, train_flow.log
//! train-meanflow  <out>/stage_0.2.ckpt .. stage_1.0.ckpt, meanflow.ckpt,
//!                 stages.tsv, train_meanflow.log
//! enhance         <out>/<id>.spec, <id>.wav, enhance.log
//! eval            <out>/report.tsv, report.txt, thresholds.txt
//! ablate          <out>/ratio_<r>.ckpt, ratio_<r>.log, ablation.tsv
//! ```
//!
//! Every command also writes `run_config.toml`. Logs carry wall-clock times;
//! checkpoints and reports do not.

use std::cell::Cell;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mf_autodiff::{NdArray, Tape, Var};

use crate::checkpoint::{CheckpointMeta, NetworkCheckpoint};
use crate::config::{RunConfig, Thresholds};
use crate::corpus::{build_corpus, Corpus, Split};
use crate::error::{Error, Result};
use crate::flow_path::GaussianPath;
use crate::metrics::{compare_models, evaluate_split, format_table, format_tsv, Candidate, MetricReport};
use crate::network::{Mode, VelocityModel, VelocityNetwork};
use crate::sampler::{enhance, Method, SamplerConfig};
use crate::stft::Stft;
use crate::training::{train_flow, train_meanflow_curriculum, Dataset, StageReport, TrainReport};

pub const FLOW_CHECKPOINT: &str = "flow.ckpt";
pub const MEANFLOW_CHECKPOINT: &str = "meanflow.ckpt";
const NORMALIZATION: &str = "none";
const SPEC_MAGIC: &[u8; 8] = b"MFSESPEC";

pub fn stage_checkpoint_name(width: f64) -> String {
    format!("stage_{width:.1}.ckpt")
}

pub fn ratio_checkpoint_name(ratio: f64) -> String {
    format!("ratio_{ratio:.2}.ckpt")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(Error::io(path))
}

fn open_log(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(Error::io(path))?))
}

fn method_for(mode: Mode) -> Method {
    match mode {
        Mode::Flow => Method::Euler,
        Mode::MeanFlow => Method::MeanSe,
    }
}

fn path_for(cfg: &RunConfig) -> Result<GaussianPath> {
    GaussianPath::new(cfg.path)
}

fn meta(cfg: &RunConfig, corpus: &Corpus, stage: Option<f64>, flow_ratio: f64) -> CheckpointMeta {
    CheckpointMeta {
        seed: cfg.train.seed,
        curriculum_stage: stage,
        flow_ratio,
        sigma: cfg.path.sigma,
        stft: corpus.config.stft,
        normalization: NORMALIZATION.into(),
    }
}

/// Loads a corpus and checks it against the configured STFT geometry.
pub fn load_corpus(cfg: &RunConfig, dir: &Path) -> Result<Corpus> {
    let corpus = Corpus::load(dir)?;
    if corpus.config.stft.bins() != cfg.network.bins {
        return Err(Error::Geometry(format!(
            "corpus at {} has {} bins, network expects {}",
            dir.display(),
            corpus.config.stft.bins(),
            cfg.network.bins
        )));
    }
    Ok(corpus)
}

fn load_checkpoint(path: &Path, mode: Mode) -> Result<NetworkCheckpoint> {
    let ckpt = NetworkCheckpoint::load(path)?;
    if ckpt.network.mode() != mode {
        return Err(Error::Geometry(format!(
            "{} holds a {} network, expected {mode}",
            path.display(),
            ckpt.network.mode()
        )));
    }
    Ok(ckpt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSummary {
    pub manifest: PathBuf,
    pub counts: Vec<(Split, usize)>,
}

pub fn cmd_gen_corpus(cfg: &RunConfig, out: &Path) -> Result<CorpusSummary> {
    let corpus = build_corpus(&cfg.corpus)?;
    corpus.save(out)?;
    cfg.write_resolved(out)?;
    let counts = [Split::Train, Split::Val, Split::Test, Split::Ood]
        .into_iter()
        .map(|s| (s, corpus.split(s).count()))
        .collect();
    Ok(CorpusSummary {
        manifest: out.join("manifest.tsv"),
        counts,
    })
}

pub fn cmd_train_flow(cfg: &RunConfig, corpus_dir: &Path, out: &Path) -> Result<PathBuf> {
    let corpus = load_corpus(cfg, corpus_dir)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let train = corpus.train_pairs(Split::Train);
    let val = corpus.train_pairs(Split::Val);
    let init = VelocityNetwork::new(cfg.network.clone(), Mode::Flow, cfg.train.seed)?;
    let mut log = open_log(&out.join("train_flow.log"))?;
    let report = train_flow(
        init,
        Dataset { train: &train, val: &val },
        &path_for(cfg)?,
        &cfg.train,
        Some(&mut log),
    );
    let report = finish_log(log, report)?;
    let ckpt = NetworkCheckpoint {
        network: report.final_network().clone(),
        meta: meta(cfg, &corpus, None, 1.0),
    };
    let path = out.join(FLOW_CHECKPOINT);
    ckpt.save(&path)?;
    Ok(path)
}

/// Flushes a training log, appending a line for a failed run.
fn finish_log(mut log: BufWriter<File>, report: Result<TrainReport>) -> Result<TrainReport> {
    if let Err(e) = &report {
        let _ = writeln!(log, "unstable: {e}");
    }
    log.flush().map_err(|e| Error::Io {
        path: PathBuf::from("training log"),
        source: e,
    })?;
    report
}

fn stage_table(stages: &[StageReport]) -> String {
    let mut out = String::from("stage\tmax_width\tsteps\tfirst_loss\tlast_loss\tinitial_val_loss\tbest_val_loss\tbest_step\tsampled_max_width\n");
    for s in stages {
        let width = match s.objective {
            crate::training::Objective::MeanFlow { max_width, .. } => max_width,
            crate::training::Objective::Cfm => 0.0,
        };
        writeln!(
            out,
            "{}\t{width}\t{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{}\t{:.6}",
            s.index, s.steps_run, s.first_loss, s.last_loss, s.initial_val_loss, s.best_val_loss, s.best_step, s.max_sampled_width
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct MeanFlowRun {
    pub final_checkpoint: PathBuf,
    pub stage_checkpoints: Vec<PathBuf>,
    pub stages: Vec<StageReport>,
}

pub fn cmd_train_meanflow(cfg: &RunConfig, corpus_dir: &Path, flow_ckpt: &Path, out: &Path) -> Result<MeanFlowRun> {
    let corpus = load_corpus(cfg, corpus_dir)?;
    let flow = load_checkpoint(flow_ckpt, Mode::Flow)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let train = corpus.train_pairs(Split::Train);
    let val = corpus.train_pairs(Split::Val);
    let mut log = open_log(&out.join("train_meanflow.log"))?;
    let report = train_meanflow_curriculum(
        &flow.network,
        &cfg.network,
        Dataset { train: &train, val: &val },
        &path_for(cfg)?,
        &cfg.train,
        &cfg.curriculum,
        Some(&mut log),
    );
    let report = finish_log(log, report)?;
    let mut stage_checkpoints = Vec::new();
    for (s, &width) in report.stages.iter().zip(&cfg.curriculum.stages) {
        let path = out.join(stage_checkpoint_name(width));
        NetworkCheckpoint {
            network: s.network.clone(),
            meta: meta(cfg, &corpus, Some(width), cfg.train.flow_ratio),
        }
        .save(&path)?;
        stage_checkpoints.push(path);
    }
    write_file(&out.join("stages.tsv"), stage_table(&report.stages))?;
    let final_checkpoint = out.join(MEANFLOW_CHECKPOINT);
    NetworkCheckpoint {
        network: report.final_network().clone(),
        meta: meta(cfg, &corpus, cfg.curriculum.stages.last().copied(), cfg.train.flow_ratio),
    }
    .save(&final_checkpoint)?;
    Ok(MeanFlowRun {
        final_checkpoint,
        stage_checkpoints,
        stages: report.stages,
    })
}

/// Counts network evaluations made through it.
struct Counted<'a> {
    inner: &'a VelocityNetwork,
    calls: Cell<usize>,
}

impl VelocityModel for Counted<'_> {
    fn params(&self) -> &[NdArray] {
        self.inner.params()
    }

    fn condition(&self, y: &NdArray) -> Result<NdArray> {
        self.inner.condition(y)
    }

    fn record(&self, tape: &mut Tape, params: &[Var], x: Var, r: Var, t: Var, cond: Var) -> Result<Var> {
        self.calls.set(self.calls.get() + 1);
        self.inner.record(tape, params, x, r, t, cond)
    }
}

pub enum EnhanceSource<'a> {
    Corpus { dir: &'a Path, split: Split },
    /// Mono WAV at the checkpoint's sample rate.
    Wav(&'a Path),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedUtterance {
    pub id: String,
    pub network_calls: usize,
    pub spectrogram: PathBuf,
    pub waveform: PathBuf,
}

/// Spectrogram file: magic `MFSESPEC`, rows and columns as u32 LE, then
/// row-major f64 LE values.
pub fn write_spectrogram(path: &Path, spec: &NdArray) -> Result<()> {
    let (rows, cols) = spec.dims2("spectrogram")?;
    let mut bytes = Vec::with_capacity(16 + 8 * spec.len());
    bytes.extend_from_slice(SPEC_MAGIC);
    bytes.extend_from_slice(&(rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in spec.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, bytes)
}

pub fn read_spectrogram(path: &Path) -> Result<NdArray> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    if bytes.len() < 16 || &bytes[..8] != SPEC_MAGIC {
        return Err(Error::format(path, "not a spectrogram file"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 8 * rows * cols {
        return Err(Error::format(path, "payload length does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(NdArray::matrix(rows, cols, data)?)
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wav_err = |e: hound::Error| Error::format(path, e.to_string());
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        w.write_sample(s as f32).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

pub fn read_wav(path: &Path, sample_rate: u32) -> Result<Vec<f64>> {
    let wav_err = |e: hound::Error| Error::format(path, e.to_string());
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.sample_rate != sample_rate {
        return Err(Error::Config(format!(
            "{}: need mono audio at {sample_rate} Hz, got {} channel(s) at {} Hz",
            path.display(),
            spec.channels,
            spec.sample_rate
        )));
    }
    match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from).map_err(wav_err))
            .collect(),
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale).map_err(wav_err))
                .collect()
        }
    }
}

/// Enhances a corpus split or one WAV file with the sampler that matches the
/// checkpoint's mode. Utterance `i` uses seed `eval.seed ^ i`.
pub fn cmd_enhance(
    cfg: &RunConfig,
    checkpoint: &Path,
    source: EnhanceSource<'_>,
    nfe: usize,
    out: &Path,
) -> Result<Vec<EnhancedUtterance>> {
    let ckpt = NetworkCheckpoint::load(checkpoint)?;
    let stft = Stft::new(ckpt.meta.stft)?;
    let sampler = SamplerConfig::new(nfe, cfg.eval.seed, ckpt.meta.sigma)?;
    let inputs: Vec<(String, Vec<f64>)> = match source {
        EnhanceSource::Corpus { dir, split } => {
            let corpus = Corpus::load(dir)?;
            if corpus.config.stft != ckpt.meta.stft {
                return Err(Error::Geometry(format!(
                    "corpus STFT {:?} differs from checkpoint STFT {:?}",
                    corpus.config.stft, ckpt.meta.stft
                )));
            }
            corpus.split(split).map(|p| (p.meta.id.clone(), p.noisy_wave.clone())).collect()
        }
        EnhanceSource::Wav(path) => {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_string();
            vec![(stem, read_wav(path, ckpt.meta.stft.sample_rate_hz)?)]
        }
    };
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let method = method_for(ckpt.network.mode());
    let mut log = open_log(&out.join("enhance.log"))?;
    let mut done = Vec::with_capacity(inputs.len());
    for (i, (id, wave)) in inputs.iter().enumerate() {
        let y = stft.forward(wave)?;
        let model = Counted {
            inner: &ckpt.network,
            calls: Cell::new(0),
        };
        let spec = enhance(&model, &y, &sampler, method, i as u64)?;
        let spectrogram = out.join(format!("{id}.spec"));
        let waveform = out.join(format!("{id}.wav"));
        write_spectrogram(&spectrogram, &spec)?;
        write_wav(&waveform, &stft.inverse(&spec, wave.len())?, ckpt.meta.stft.sample_rate_hz)?;
        writeln!(log, "id={id} method={method:?} nfe={nfe} network_calls={}", model.calls.get()).map_err(Error::io(out))?;
        done.push(EnhancedUtterance {
            id: id.clone(),
            network_calls: model.calls.get(),
            spectrogram,
            waveform,
        });
    }
    log.flush().map_err(Error::io(out))?;
    Ok(done)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub rows: Vec<MetricReport>,
    pub checks: Vec<ThresholdCheck>,
}

impl EvalOutcome {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn find<'a>(rows: &'a [MetricReport], model: &str, nfe: usize, split: Split) -> Option<&'a MetricReport> {
    rows.iter().find(|r| r.model == model && r.nfe == nfe && r.split == split)
}

/// Applies the configured gates to a flow/mean-flow comparison.
pub fn check_thresholds(rows: &[MetricReport], flow: &str, meanflow: &str, nfe: &[usize], t: &Thresholds) -> Vec<ThresholdCheck> {
    let mut checks = Vec::new();
    let score = |m: &str, n: usize, s: Split| find(rows, m, n, s).map(|r| r.si_sdr_db);
    let min = t.min_gain_nfe1_db;
    if min.is_finite() {
        if let (Some(a), Some(b)) = (score(meanflow, 1, Split::Test), score(flow, 1, Split::Test)) {
            checks.push(ThresholdCheck {
                name: "min_gain_nfe1_db".into(),
                passed: a - b >= min,
                detail: format!("{meanflow}@1 {a:.3} dB vs {flow}@1 {b:.3} dB, margin {:.3} dB, need >= {min}", a - b),
            });
        }
    }
    let max = t.max_nfe1_vs_nfe5_db;
    if max.is_finite() {
        if let (Some(a), Some(b)) = (score(meanflow, 1, Split::Test), score(meanflow, 5, Split::Test)) {
            checks.push(ThresholdCheck {
                name: "max_nfe1_vs_nfe5_db".into(),
                passed: (a - b).abs() <= max,
                detail: format!("{meanflow}@1 {a:.3} dB vs {meanflow}@5 {b:.3} dB, need |gap| <= {max}"),
            });
        }
    }
    if t.ood_wins_every_nfe {
        for &n in nfe {
            if let (Some(a), Some(b)) = (score(meanflow, n, Split::Ood), score(flow, n, Split::Ood)) {
                checks.push(ThresholdCheck {
                    name: format!("ood_wins_nfe{n}"),
                    passed: a > b,
                    detail: format!("{meanflow}@{n} {a:.3} dB vs {flow}@{n} {b:.3} dB on ood"),
                });
            }
        }
    }
    checks
}

fn model_id(mode: Mode) -> &'static str {
    match mode {
        Mode::Flow => "flowse",
        Mode::MeanFlow => "meanse",
    }
}

/// Scores the noisy input and every checkpoint at every configured NFE.
/// Models are named `flowse` and `meanse` by mode; further checkpoints of the
/// same mode are named by file stem.
pub fn cmd_eval(cfg: &RunConfig, checkpoints: &[PathBuf], corpus_dir: &Path, out: &Path) -> Result<EvalOutcome> {
    let corpus = load_corpus(cfg, corpus_dir)?;
    let mut loaded = Vec::with_capacity(checkpoints.len());
    let mut ids: Vec<String> = Vec::new();
    for path in checkpoints {
        let ckpt = NetworkCheckpoint::load(path)?;
        if ckpt.meta.sigma != cfg.path.sigma {
            return Err(Error::Config(format!(
                "{} was trained with sigma {}, config has {}",
                path.display(),
                ckpt.meta.sigma,
                cfg.path.sigma
            )));
        }
        let mut id = model_id(ckpt.network.mode()).to_string();
        if ids.contains(&id) {
            id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
        }
        if ids.contains(&id) {
            return Err(Error::Config(format!("duplicate model name {id}")));
        }
        ids.push(id);
        loaded.push(ckpt);
    }
    let mut candidates = vec![Candidate::Noisy];
    for (id, ckpt) in ids.iter().zip(&loaded) {
        candidates.push(Candidate::Model {
            id,
            network: &ckpt.network,
            method: method_for(ckpt.network.mode()),
        });
    }
    let rows = compare_models(&candidates, &corpus, &cfg.eval.splits, &cfg.eval.nfe, cfg.eval.seed, cfg.path.sigma)?;
    let checks = if ids.iter().any(|i| i == "flowse") && ids.iter().any(|i| i == "meanse") {
        check_thresholds(&rows, "flowse", "meanse", &cfg.eval.nfe, &cfg.eval.thresholds)
    } else {
        Vec::new()
    };
    create_dir(out)?;
    cfg.write_resolved(out)?;
    write_file(&out.join("report.tsv"), format_tsv(&rows))?;
    write_file(&out.join("report.txt"), format_table(&rows))?;
    let mut text = String::new();
    for c in &checks {
        writeln!(text, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail).unwrap();
    }
    write_file(&out.join("thresholds.txt"), text)?;
    Ok(EvalOutcome { rows, checks })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub flow_ratio: f64,
    pub split: Split,
    /// NaN when training diverged.
    pub si_sdr_db: f64,
    pub lsd_db: f64,
    /// Error message of a run stopped by the divergence guard or a non-finite loss.
    pub divergence: Option<String>,
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut out = String::from("flow_ratio\tnfe\tsplit\tsi_sdr_db\tlsd_db\tstatus\n");
    for r in rows {
        writeln!(
            out,
            "{:.2}\t1\t{}\t{:.4}\t{:.4}\t{}",
            r.flow_ratio,
            r.split,
            r.si_sdr_db,
            r.lsd_db,
            if r.divergence.is_some() { "divergent" } else { "ok" }
        )
        .unwrap();
    }
    out
}

/// One curriculum fine-tune per flow ratio from the same flow checkpoint and
/// seed, each scored at NFE 1. Rows are sorted by ratio.
pub fn cmd_ablate_flow_ratio(cfg: &RunConfig, corpus_dir: &Path, flow_ckpt: &Path, out: &Path) -> Result<Vec<AblationRow>> {
    let corpus = load_corpus(cfg, corpus_dir)?;
    let flow = load_checkpoint(flow_ckpt, Mode::Flow)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let train = corpus.train_pairs(Split::Train);
    let val = corpus.train_pairs(Split::Val);
    let path = path_for(cfg)?;
    let sampler = SamplerConfig::new(1, cfg.eval.seed, cfg.path.sigma)?;
    let mut ratios = cfg.ablation.ratios.clone();
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();
    let split = cfg.ablation.split;
    let mut rows = Vec::with_capacity(ratios.len());
    for ratio in ratios {
        let mut run = cfg.clone();
        run.train.flow_ratio = ratio;
        let mut log = open_log(&out.join(format!("ratio_{ratio:.2}.log")))?;
        let report = train_meanflow_curriculum(
            &flow.network,
            &run.network,
            Dataset { train: &train, val: &val },
            &path,
            &run.train,
            &run.curriculum,
            Some(&mut log),
        );
        match finish_log(log, report) {
            Ok(report) => {
                let net = report.final_network();
                NetworkCheckpoint {
                    network: net.clone(),
                    meta: meta(&run, &corpus, run.curriculum.stages.last().copied(), ratio),
                }
                .save(&out.join(ratio_checkpoint_name(ratio)))?;
                let r = evaluate_split(net, "meanse", Method::MeanSe, &corpus, split, &sampler)?;
                rows.push(AblationRow {
                    flow_ratio: ratio,
                    split,
                    si_sdr_db: r.si_sdr_db,
                    lsd_db: r.lsd_db,
                    divergence: None,
                });
            }
            Err(e @ (Error::Divergence { .. } | Error::NonFiniteLoss { .. })) => rows.push(AblationRow {
                flow_ratio: ratio,
                split,
                si_sdr_db: f64::NAN,
                lsd_db: f64::NAN,
                divergence: Some(e.to_string()),
            }),
            Err(e) => return Err(e),
        }
    }
    write_file(&out.join("ablation.tsv"), format_ablation(&rows))?;
    Ok(rows)
}
