//! Synthetic stand-ins for speech and noise.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CleanSignal {
    pub samples: Vec<f64>,
    pub f0: f64,
    pub partials: usize,
}

fn sample_count(duration_s: f64, sample_rate: u32) -> Result<usize> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::Config(format!("duration must be positive, got {duration_s}")));
    }
    Ok((duration_s * sample_rate as f64).round() as usize)
}

/// Harmonic stack: `f0` in [90, 300] Hz, 3 to 8 partials with geometrically
/// decaying amplitudes, a slow amplitude envelope, peak-normalised to 0.5.
pub fn synth_clean<R: Rng + ?Sized>(rng: &mut R, duration_s: f64, sample_rate: u32) -> Result<CleanSignal> {
    let n = sample_count(duration_s, sample_rate)?;
    let fs = sample_rate as f64;
    let f0 = rng.random_range(90.0..=300.0);
    let partials = rng.random_range(3..=8usize);
    let decay = rng.random_range(0.5..0.8);
    let phases: Vec<f64> = (0..partials).map(|_| rng.random_range(0.0..TAU)).collect();
    let env_rate = rng.random_range(0.5..3.0);
    let env_phase = rng.random_range(0.0..TAU);
    let nyquist = fs / 2.0;

    let mut samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let env = 0.6 + 0.4 * (TAU * env_rate * t + env_phase).sin();
            let mut s = 0.0;
            let mut amp = 1.0;
            for (k, ph) in phases.iter().enumerate() {
                let f = f0 * (k + 1) as f64;
                if f < nyquist {
                    s += amp * (TAU * f * t + ph).sin();
                }
                amp *= decay;
            }
            env * s
        })
        .collect();
    let peak = samples.iter().fold(0.0f64, |a, s| a.max(s.abs()));
    if peak == 0.0 {
        return Err(Error::SilentSignal("clean"));
    }
    for s in &mut samples {
        *s *= 0.5 / peak;
    }
    Ok(CleanSignal { samples, f0, partials })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    /// Broadband noise with a 1/f power spectrum.
    Pink,
    /// Band-passed noise gated into amplitude-modulated bursts.
    Bursts,
}

impl NoiseFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseFamily::Pink => "pink",
            NoiseFamily::Bursts => "bursts",
        }
    }

    pub fn generate<R: Rng + ?Sized>(self, rng: &mut R, duration_s: f64, sample_rate: u32) -> Result<Vec<f64>> {
        match self {
            NoiseFamily::Pink => pink_noise(rng, duration_s, sample_rate),
            NoiseFamily::Bursts => burst_noise(rng, duration_s, sample_rate),
        }
    }
}

impl std::fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// White Gaussian noise reshaped in the frequency domain by `gain(f_hz)`.
fn shaped_noise<R: Rng + ?Sized>(rng: &mut R, n: usize, fs: f64, gain: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, b) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        *b *= gain(bin as f64 * fs / n as f64);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

pub fn pink_noise<R: Rng + ?Sized>(rng: &mut R, duration_s: f64, sample_rate: u32) -> Result<Vec<f64>> {
    let n = sample_count(duration_s, sample_rate)?;
    let fs = sample_rate as f64;
    let lowest = fs / n as f64;
    Ok(shaped_noise(rng, n, fs, |f| if f < lowest * 0.5 { 0.0 } else { 1.0 / f.sqrt() }))
}

/// Noise confined to a random band, gated by Hann-shaped bursts and a fast
/// amplitude modulation.
pub fn burst_noise<R: Rng + ?Sized>(rng: &mut R, duration_s: f64, sample_rate: u32) -> Result<Vec<f64>> {
    let n = sample_count(duration_s, sample_rate)?;
    let fs = sample_rate as f64;
    let centre = rng.random_range(500.0..(0.375 * fs).min(3000.0));
    let width = rng.random_range(300.0..800.0);
    let (lo, hi) = (centre - width / 2.0, centre + width / 2.0);
    let band = shaped_noise(rng, n, fs, |f| if (lo..=hi).contains(&f) { 1.0 } else { 0.0 });

    let burst_rate = rng.random_range(2.0..6.0);
    let duty = rng.random_range(0.3..0.7);
    let am_rate = rng.random_range(10.0..30.0);
    let am_phase = rng.random_range(0.0..TAU);
    let period = fs / burst_rate;
    let offset = rng.random_range(0.0..period);
    Ok(band
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let pos = ((i as f64 + offset) % period) / (period * duty);
            let gate = if pos < 1.0 { (std::f64::consts::PI * pos).sin().powi(2) } else { 0.0 };
            let am = 0.5 + 0.5 * (TAU * am_rate * i as f64 / fs + am_phase).sin();
            s * gate * am
        })
        .collect())
}

pub fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// `10 log10(P_signal / P_noise)`.
pub fn snr_db(signal: &[f64], noise: &[f64]) -> f64 {
    10.0 * (power(signal) / power(noise)).log10()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub noisy: Vec<f64>,
    pub gain: f64,
    pub realized_snr_db: f64,
}

/// `clean + g * noise` with `g` set so the mixture has exactly `snr_db`.
pub fn mix_at_snr(clean: &[f64], noise: &[f64], snr_db_target: f64) -> Result<Mixture> {
    if clean.len() != noise.len() {
        return Err(Error::Shape {
            what: "noise",
            expected: vec![clean.len()],
            got: vec![noise.len()],
        });
    }
    let pc = power(clean);
    let pn = power(noise);
    if pc == 0.0 {
        return Err(Error::SilentSignal("clean"));
    }
    if pn == 0.0 {
        return Err(Error::SilentSignal("noise"));
    }
    let gain = (pc / (pn * 10f64.powf(snr_db_target / 10.0))).sqrt();
    let scaled: Vec<f64> = noise.iter().map(|v| gain * v).collect();
    let noisy = clean.iter().zip(&scaled).map(|(c, s)| c + s).collect();
    Ok(Mixture {
        noisy,
        gain,
        realized_snr_db: snr_db(clean, &scaled),
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn clean_is_deterministic_and_normalised() {
        let a = synth_clean(&mut ChaCha8Rng::seed_from_u64(5), 0.5, 8000).unwrap();
        let b = synth_clean(&mut ChaCha8Rng::seed_from_u64(5), 0.5, 8000).unwrap();
        assert_eq!(a, b);
        assert!((90.0..=300.0).contains(&a.f0));
        assert!((3..=8).contains(&a.partials));
        let peak = a.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        assert!((peak - 0.5).abs() < 1e-12);
        assert!(power(&a.samples) > 0.0);
    }

    #[test]
    fn spectral_peak_sits_at_f0() {
        for seed in 0..10 {
            let sig = synth_clean(&mut ChaCha8Rng::seed_from_u64(seed), 1.0, 8000).unwrap();
            let n = sig.samples.len();
            let mut buf: Vec<Complex64> = sig.samples.iter().map(|&s| Complex64::new(s, 0.0)).collect();
            FftPlanner::new().plan_fft_forward(n).process(&mut buf);
            let peak = (1..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
            let bin_hz = 8000.0 / n as f64;
            assert!((peak as f64 * bin_hz - sig.f0).abs() <= bin_hz, "seed {seed}: {} vs {}", peak as f64 * bin_hz, sig.f0);
        }
    }

    #[test]
    fn mixing_gain_by_hand() {
        let c: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let n: Vec<f64> = (0..100).map(|i| if i % 4 < 2 { 1.0 } else { -1.0 }).collect();
        assert!((mix_at_snr(&c, &n, 0.0).unwrap().gain - 1.0).abs() < 1e-15);
        assert!((mix_at_snr(&c, &n, 10.0).unwrap().gain - 10f64.powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn realized_snr_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = synth_clean(&mut rng, 0.5, 8000).unwrap().samples;
        for fam in [NoiseFamily::Pink, NoiseFamily::Bursts] {
            let n = fam.generate(&mut rng, 0.5, 8000).unwrap();
            for snr in [0.0, 2.5, 7.5, 15.0] {
                let m = mix_at_snr(&c, &n, snr).unwrap();
                assert!((m.realized_snr_db - snr).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn silent_noise_is_an_error() {
        let c = vec![0.3; 10];
        assert!(matches!(mix_at_snr(&c, &[0.0; 10], 5.0), Err(Error::SilentSignal("noise"))));
        assert!(mix_at_snr(&c, &[0.0; 9], 5.0).is_err());
    }

    #[test]
    fn pink_noise_falls_off_with_frequency() {
        let x = pink_noise(&mut ChaCha8Rng::seed_from_u64(1), 2.0, 8000).unwrap();
        let n = x.len();
        let mut buf: Vec<Complex64> = x.iter().map(|&s| Complex64::new(s, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let band = |lo: usize, hi: usize| buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>();
        // equal-octave bands carry roughly equal power under 1/f
        let low = band(n * 100 / 8000, n * 200 / 8000);
        let high = band(n * 1000 / 8000, n * 2000 / 8000);
        assert!((low / high).log10().abs() < 0.3, "{}", low / high);
    }

    #[test]
    fn bursts_are_band_limited_and_gated() {
        let x = burst_noise(&mut ChaCha8Rng::seed_from_u64(2), 1.0, 8000).unwrap();
        assert!(power(&x) > 0.0);
        assert!(x.iter().filter(|v| **v == 0.0).count() > x.len() / 5);
    }
}
