#![allow(dead_code)]

use meanse_core::config::RunConfig;

/// A run small enough for every command to finish in seconds.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.corpus.duration_s = 0.25;
    cfg.corpus.train_pairs = 12;
    cfg.corpus.test_pairs = 4;
    cfg.corpus.ood_pairs = 4;
    cfg.network.hidden = 8;
    cfg.network.time_dim = 8;
    cfg.train.steps = 30;
    cfg.train.crop_frames = 8;
    cfg.train.val_every = 10;
    cfg.train.log_every = 10;
    cfg.curriculum.steps_per_stage = 10;
    cfg.resolve().unwrap()
}
