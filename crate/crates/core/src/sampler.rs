//! Inference: Euler integration of the instantaneous field and interval
//! stepping with the average field.

use mf_autodiff::NdArray;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_path::{GaussianPath, PathConfig};
use crate::network::{evaluate_prepared, VelocityModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Network evaluations per utterance.
    pub nfe: usize,
    pub seed: u64,
    pub sigma: f64,
}

impl SamplerConfig {
    pub fn new(nfe: usize, seed: u64, sigma: f64) -> Result<Self> {
        let cfg = Self { nfe, seed, sigma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(Error::Config("nfe must be at least 1".into()));
        }
        PathConfig::new(self.sigma, PathConfig::default().t_floor).map(|_| ())
    }

    fn path(&self) -> Result<GaussianPath> {
        GaussianPath::new(PathConfig {
            sigma: self.sigma,
            ..PathConfig::default()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Euler steps on `u(x, t, t)`.
    Euler,
    /// Interval steps on `u(x, r, t)`.
    #[serde(rename = "meanse")]
    MeanSe,
}

/// `x1 ~ N(y, sigma^2 I)` from the configured seed.
pub fn draw_prior(y: &NdArray, cfg: &SamplerConfig) -> Result<NdArray> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(cfg.path()?.sample_prior(y, &mut rng))
}

/// Integrates from `t = 1` to `0` in `nfe` equal steps:
/// `x <- x - (1/N) v(x, t_j, y)` with `t_j = 1 - j/N`.
pub fn euler_flow_sample<M: VelocityModel + ?Sized>(model: &M, y: &NdArray, cfg: &SamplerConfig) -> Result<NdArray> {
    cfg.validate()?;
    let cond = model.condition(y)?;
    euler_from(model, draw_prior(y, cfg)?, &cond, cfg.nfe)
}

/// Euler integration from a given starting point.
pub fn euler_from<M: VelocityModel + ?Sized>(model: &M, x1: NdArray, cond: &NdArray, nfe: usize) -> Result<NdArray> {
    let n = nfe as f64;
    let mut x = x1;
    for j in 0..nfe {
        let t = 1.0 - j as f64 / n;
        let v = evaluate_prepared(model, &x, t, t, cond)?;
        x = x.axpy(-1.0 / n, &v)?;
    }
    Ok(x)
}

/// Interval stepping with `r_i = i/N`, `t_i = (i+1)/N` for `i = N-1, ..., 0`:
/// `x <- x + (r_i - t_i) u(x, r_i, t_i, y)`.
pub fn meanse_sample<M: VelocityModel + ?Sized>(model: &M, y: &NdArray, cfg: &SamplerConfig) -> Result<NdArray> {
    cfg.validate()?;
    let cond = model.condition(y)?;
    meanse_from(model, draw_prior(y, cfg)?, &cond, cfg.nfe)
}

/// Interval stepping from a given starting point.
pub fn meanse_from<M: VelocityModel + ?Sized>(model: &M, x1: NdArray, cond: &NdArray, nfe: usize) -> Result<NdArray> {
    let n = nfe as f64;
    let mut x = x1;
    for i in (0..nfe).rev() {
        let r = i as f64 / n;
        let t = (i + 1) as f64 / n;
        let u = evaluate_prepared(model, &x, r, t, cond)?;
        x = x.axpy(r - t, &u)?;
    }
    Ok(x)
}

/// Enhances utterance `index` of a corpus. The prior draw is seeded with
/// `seed ^ index`.
pub fn enhance<M: VelocityModel + ?Sized>(
    model: &M,
    y: &NdArray,
    cfg: &SamplerConfig,
    method: Method,
    index: u64,
) -> Result<NdArray> {
    let local = SamplerConfig {
        seed: cfg.seed ^ index,
        ..*cfg
    };
    let out = match method {
        Method::Euler => euler_flow_sample(model, y, &local)?,
        Method::MeanSe => meanse_sample(model, y, &local)?,
    };
    out.ensure_finite("enhance")?;
    Ok(out)
}
