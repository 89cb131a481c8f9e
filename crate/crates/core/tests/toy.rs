//! Point-mass toy problem: one fixed (clean, noisy) pair, so every path ends
//! at the same clean point and the exact average velocity is known.

use std::sync::OnceLock;

use meanse_core::flow_path::{GaussianPath, PathConfig};
use meanse_core::network::{Mode, NetworkConfig, VelocityNetwork};
use meanse_core::sampler::{euler_flow_sample, meanse_sample, SamplerConfig};
use meanse_core::training::{
    train_flow, train_meanflow_curriculum, CurriculumSchedule, Dataset, TrainConfig, TrainPair, TrainReport,
};
use mf_autodiff::NdArray;

const FRAMES: usize = 6;
const BINS: usize = 2;

fn pair() -> TrainPair {
    let w = 2 * BINS;
    let x0: Vec<f64> = (0..FRAMES * w).map(|i| (i as f64 * 0.71).sin()).collect();
    let y: Vec<f64> = x0
        .iter()
        .enumerate()
        .map(|(i, v)| v + 0.4 * (i as f64 * 1.93).cos())
        .collect();
    TrainPair {
        x0: NdArray::matrix(FRAMES, w, x0).unwrap(),
        y: NdArray::matrix(FRAMES, w, y).unwrap(),
    }
}

fn geometry() -> NetworkConfig {
    let mut cfg = NetworkConfig::with_bins(BINS);
    cfg.hidden = 32;
    cfg.time_dim = 16;
    cfg
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        lr_scratch: 3e-3,
        lr_finetune: 1e-3,
        steps: 1500,
        crop_frames: 0,
        val_every: 100,
        ..TrainConfig::default()
    }
}

struct Trained {
    flow: TrainReport,
    meanflow: TrainReport,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = [pair()];
        // repeated copies give validation several independent draws
        let val = vec![pair(); 16];
        let ds = Dataset { train: &data, val: &val };
        let path = GaussianPath::new(PathConfig::default()).unwrap();
        let init = VelocityNetwork::new(geometry(), Mode::Flow, 11).unwrap();
        let flow = train_flow(init, ds, &path, &train_cfg(), None).unwrap();
        let schedule = CurriculumSchedule {
            steps_per_stage: 400,
            ..CurriculumSchedule::default()
        };
        let meanflow =
            train_meanflow_curriculum(flow.final_network(), &geometry(), ds, &path, &train_cfg(), &schedule, None)
                .unwrap();
        Trained { flow, meanflow }
    })
}

fn rel(a: &NdArray, b: &NdArray) -> f64 {
    a.axpy(-1.0, b).unwrap().norm() / b.norm()
}

#[test]
fn flow_validation_loss_drops_tenfold() {
    let s = &trained().flow.stages[0];
    let ratio = s.initial_val_loss / s.best_val_loss;
    assert!(ratio >= 10.0, "initial {} best {} ratio {ratio}", s.initial_val_loss, s.best_val_loss);
}

#[test]
fn curriculum_runs_every_stage_without_divergence() {
    assert_eq!(trained().meanflow.stages.len(), 5);
}

#[test]
fn one_step_agrees_with_five_steps() {
    let net = trained().meanflow.final_network();
    let y = pair().y;
    for seed in 0..5 {
        let one = meanse_sample(net, &y, &SamplerConfig::new(1, seed, 0.5).unwrap()).unwrap();
        let five = meanse_sample(net, &y, &SamplerConfig::new(5, seed, 0.5).unwrap()).unwrap();
        let d = rel(&one, &five);
        assert!(d <= 0.1, "seed {seed}: relative gap {d}");
    }
}

#[test]
fn one_step_summarises_fine_euler_integration() {
    let net = trained().meanflow.final_network();
    let y = pair().y;
    for seed in 0..5 {
        let one = meanse_sample(net, &y, &SamplerConfig::new(1, seed, 0.5).unwrap()).unwrap();
        let fine = euler_flow_sample(net, &y, &SamplerConfig::new(256, seed, 0.5).unwrap()).unwrap();
        let d = rel(&one, &fine);
        assert!(d <= 0.15, "seed {seed}: relative gap {d}");
    }
}

#[test]
fn samples_land_near_the_clean_point() {
    let net = trained().meanflow.final_network();
    let p = pair();
    let one = meanse_sample(net, &p.y, &SamplerConfig::new(1, 3, 0.5).unwrap()).unwrap();
    let d = rel(&one, &p.x0);
    assert!(d <= 0.2, "relative distance to x0 {d}");
}
