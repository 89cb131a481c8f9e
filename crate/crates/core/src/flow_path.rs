//! Gaussian conditional probability path between clean data (t = 0) and the
//! noisy prior N(y, sigma^2 I) (t = 1).
//!
//! For a schedule with mean `mu_t(x0, y)` and standard deviation `sigma_t`,
//!
//! ```text
//! x_t = sigma_t / sigma_1 * (x1 - mu_1) + mu_t
//! v_t = sigma_t' / sigma_t * (x_t - mu_t) + mu_t'
//! ```
//!
//! [`GaussianPath`] uses `mu_t = (1 - t) x0 + t y` and `sigma_t = t sigma`, so
//! `sigma_t / sigma_1 = t`, `mu_1 = y`, `sigma_t' / sigma_t = 1 / t` and
//! `mu_t' = y - x0`. Those reduced forms are what it evaluates; the general
//! expressions stay available through [`PathSchedule`] for other schedules.

use mf_autodiff::NdArray;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub sigma: f64,
    pub t_floor: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            t_floor: 1e-5,
        }
    }
}

impl PathConfig {
    pub fn new(sigma: f64, t_floor: f64) -> Result<Self> {
        let cfg = Self { sigma, t_floor };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.t_floor > 0.0 && self.t_floor <= 1e-3) {
            return Err(Error::Config(format!(
                "t_floor must lie in (0, 1e-3], got {}",
                self.t_floor
            )));
        }
        Ok(())
    }
}

/// One draw of the path for a training pair.
#[derive(Debug, Clone)]
pub struct PathSample {
    pub x_t: NdArray,
    pub t: f64,
    pub v_target: NdArray,
    pub x1: NdArray,
}

/// Mean and standard-deviation schedule of a Gaussian conditional path.
pub trait PathSchedule {
    fn mean(&self, x0: &NdArray, y: &NdArray, t: f64) -> Result<NdArray>;
    fn mean_rate(&self, x0: &NdArray, y: &NdArray, t: f64) -> Result<NdArray>;
    fn std(&self, t: f64) -> f64;
    fn std_rate(&self, t: f64) -> f64;
}

fn same_shape(what: &'static str, a: &NdArray, b: &NdArray) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            what,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip3(a: &NdArray, b: &NdArray, c: &NdArray, f: impl Fn(f64, f64, f64) -> f64) -> NdArray {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&p, &q), &r)| f(p, q, r))
        .collect();
    NdArray::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

/// `sigma_t / sigma_1 * (x1 - mu_1) + mu_t` for any schedule.
pub fn sample_xt_general<S: PathSchedule>(
    schedule: &S,
    x0: &NdArray,
    y: &NdArray,
    x1: &NdArray,
    t: f64,
) -> Result<NdArray> {
    same_shape("x1", x0, x1)?;
    let mu_1 = schedule.mean(x0, y, 1.0)?;
    let mu_t = schedule.mean(x0, y, t)?;
    let ratio = schedule.std(t) / schedule.std(1.0);
    Ok(zip3(x1, &mu_1, &mu_t, |a, m1, mt| ratio * (a - m1) + mt))
}

/// `sigma_t' / sigma_t * (x_t - mu_t) + mu_t'` for any schedule.
pub fn conditional_velocity_general<S: PathSchedule>(
    schedule: &S,
    x_t: &NdArray,
    x0: &NdArray,
    y: &NdArray,
    t: f64,
) -> Result<NdArray> {
    same_shape("x_t", x0, x_t)?;
    let mu_t = schedule.mean(x0, y, t)?;
    let dmu = schedule.mean_rate(x0, y, t)?;
    let gain = schedule.std_rate(t) / schedule.std(t);
    Ok(zip3(x_t, &mu_t, &dmu, |x, m, dm| gain * (x - m) + dm))
}

/// The linear-mean, linearly growing variance path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPath {
    cfg: PathConfig,
}

impl GaussianPath {
    pub fn new(cfg: PathConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &PathConfig {
        &self.cfg
    }

    /// `(1 - t) x0 + t y`.
    pub fn mean_schedule(&self, x0: &NdArray, y: &NdArray, t: f64) -> Result<NdArray> {
        same_shape("y", x0, y)?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        Ok(zip3(x0, y, y, |a, b, _| (1.0 - t) * a + t * b))
    }

    /// `t sigma`.
    pub fn std_schedule(&self, t: f64) -> f64 {
        t * self.cfg.sigma
    }

    /// `x1 = y + sigma * eps`, `eps ~ N(0, I)`.
    pub fn sample_prior<R: Rng + ?Sized>(&self, y: &NdArray, rng: &mut R) -> NdArray {
        let sigma = self.cfg.sigma;
        y.map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
    }

    /// `t` uniform on `(t_floor, 1]`.
    pub fn sample_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        1.0 - u * (1.0 - self.cfg.t_floor)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if t > 1.0 || t.is_nan() {
            return Err(Error::TimeOutOfRange(t));
        }
        if t < self.cfg.t_floor {
            return Err(Error::TimeBelowFloor {
                t,
                floor: self.cfg.t_floor,
            });
        }
        Ok(())
    }

    /// `x_t = t (x1 - y) + (1 - t) x0 + t y`.
    pub fn sample_xt(&self, x0: &NdArray, y: &NdArray, x1: &NdArray, t: f64) -> Result<NdArray> {
        self.check_time(t)?;
        same_shape("y", x0, y)?;
        same_shape("x1", x0, x1)?;
        Ok(zip3(x0, y, x1, |a, b, p| t * (p - b) + (1.0 - t) * a + t * b))
    }

    /// `v = (x_t - mu_t) / t + (y - x0)`.
    pub fn conditional_velocity(&self, x_t: &NdArray, x0: &NdArray, y: &NdArray, t: f64) -> Result<NdArray> {
        self.check_time(t)?;
        same_shape("y", x0, y)?;
        same_shape("x_t", x0, x_t)?;
        Ok(zip3(x_t, x0, y, |x, a, b| (x - ((1.0 - t) * a + t * b)) / t + (b - a)))
    }

    /// Builds `x_t` and its velocity target from an already drawn prior point.
    pub fn sample_at(&self, x0: &NdArray, y: &NdArray, x1: NdArray, t: f64) -> Result<PathSample> {
        let x_t = self.sample_xt(x0, y, &x1, t)?;
        let v_target = self.conditional_velocity(&x_t, x0, y, t)?;
        Ok(PathSample { x_t, t, v_target, x1 })
    }
}

impl PathSchedule for GaussianPath {
    fn mean(&self, x0: &NdArray, y: &NdArray, t: f64) -> Result<NdArray> {
        self.mean_schedule(x0, y, t)
    }

    fn mean_rate(&self, x0: &NdArray, y: &NdArray, _t: f64) -> Result<NdArray> {
        same_shape("y", x0, y)?;
        Ok(zip3(x0, y, y, |a, b, _| b - a))
    }

    fn std(&self, t: f64) -> f64 {
        self.std_schedule(t)
    }

    fn std_rate(&self, _t: f64) -> f64 {
        self.cfg.sigma
    }
}
