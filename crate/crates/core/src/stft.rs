//! Short-time Fourier transform with weighted overlap-add inversion.
//!
//! Frames are centred: the signal is zero-padded by `n_fft / 2` at the
//! start and by at least as much at the end. Spectrograms
//! are `[frames, 2 * bins]` arrays holding the real parts of the one-sided
//! spectrum followed by the imaginary parts, `bins = n_fft / 2 + 1`.

use std::f64::consts::TAU;
use std::sync::Arc;

use mf_autodiff::NdArray;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// Periodic Hann.
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n).map(|i| 0.5 - 0.5 * (TAU * i as f64 / n as f64).cos()).collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Window,
    pub sample_rate_hz: u32,
}

impl StftConfig {
    pub fn desk() -> Self {
        Self {
            n_fft: 126,
            hop: 32,
            window: Window::Hann,
            sample_rate_hz: 8000,
        }
    }

    pub fn wideband() -> Self {
        Self {
            n_fft: 1022,
            hop: 320,
            window: Window::Hann,
            sample_rate_hz: 16000,
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn pad(&self) -> usize {
        self.n_fft / 2
    }

    /// Frames produced for a signal of `len` samples: enough that the last
    /// frame starts at or past the final sample.
    pub fn frames(&self, len: usize) -> usize {
        1 + len.div_ceil(self.hop)
    }
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::desk()
    }
}

pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    /// Fails unless every sample is covered by a window with non-zero weight,
    /// which the overlap-add inverse needs.
    pub fn new(cfg: StftConfig) -> Result<Self> {
        if cfg.n_fft < 2 || !cfg.n_fft.is_multiple_of(2) {
            return Err(Error::Stft(format!("n_fft must be even and >= 2, got {}", cfg.n_fft)));
        }
        if cfg.hop == 0 || cfg.hop > cfg.n_fft {
            return Err(Error::Stft(format!("hop {} must be in 1..={}", cfg.hop, cfg.n_fft)));
        }
        if cfg.sample_rate_hz == 0 {
            return Err(Error::Stft("sample rate must be positive".into()));
        }
        let window = cfg.window.coefficients(cfg.n_fft);
        let peak = window.iter().fold(0.0f64, |a, w| a.max(w * w));
        for phase in 0..cfg.hop {
            let cover: f64 = window.iter().skip(phase).step_by(cfg.hop).map(|w| w * w).sum();
            if cover <= 1e-10 * peak {
                return Err(Error::Stft(format!(
                    "window/hop pair {:?}/{} leaves samples uncovered (overlap-add weight {cover:e} at phase {phase})",
                    cfg.window, cfg.hop
                )));
            }
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window,
            forward: planner.plan_fft_forward(cfg.n_fft),
            inverse: planner.plan_fft_inverse(cfg.n_fft),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    fn padded(&self, wave: &[f64]) -> Vec<f64> {
        let frames = self.cfg.frames(wave.len());
        let total = (frames - 1) * self.cfg.hop + self.cfg.n_fft;
        let mut out = vec![0.0; total];
        out[self.cfg.pad()..self.cfg.pad() + wave.len()].copy_from_slice(wave);
        out
    }

    pub fn forward(&self, wave: &[f64]) -> Result<NdArray> {
        let n = self.cfg.n_fft;
        if wave.len() < n {
            return Err(Error::Stft(format!("signal of {} samples is shorter than n_fft {n}", wave.len())));
        }
        let bins = self.cfg.bins();
        let padded = self.padded(wave);
        let frames = self.cfg.frames(wave.len());
        let mut data = vec![0.0; frames * 2 * bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for f in 0..frames {
            let seg = &padded[f * self.cfg.hop..f * self.cfg.hop + n];
            for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex64::new(s * w, 0.0);
            }
            self.forward.process(&mut buf);
            let row = &mut data[f * 2 * bins..(f + 1) * 2 * bins];
            for k in 0..bins {
                row[k] = buf[k].re;
                row[bins + k] = buf[k].im;
            }
        }
        Ok(NdArray::matrix(frames, 2 * bins, data)?)
    }

    /// Inverse transform back to `len` samples.
    pub fn inverse(&self, spec: &NdArray, len: usize) -> Result<Vec<f64>> {
        let n = self.cfg.n_fft;
        let bins = self.cfg.bins();
        let (frames, width) = spec.dims2("istft")?;
        if width != 2 * bins || frames != self.cfg.frames(len) {
            return Err(Error::Stft(format!(
                "spectrogram {frames}x{width} does not match {} frames x {} columns for {len} samples",
                self.cfg.frames(len),
                2 * bins
            )));
        }
        let total = (frames - 1) * self.cfg.hop + n;
        let mut acc = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for f in 0..frames {
            let row = &spec.data()[f * width..(f + 1) * width];
            for k in 0..bins {
                buf[k] = Complex64::new(row[k], row[bins + k]);
            }
            for k in bins..n {
                buf[k] = buf[n - k].conj();
            }
            // DC and Nyquist of a real signal are real
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            self.inverse.process(&mut buf);
            let off = f * self.cfg.hop;
            for (m, (b, &w)) in buf.iter().zip(&self.window).enumerate() {
                acc[off + m] += b.re / n as f64 * w;
                norm[off + m] += w * w;
            }
        }
        let pad = self.cfg.pad();
        Ok((pad..pad + len).map(|i| acc[i] / norm[i]).collect())
    }

    /// Overlap-add weight `sum_f w^2(n - f hop)` at each original sample.
    pub fn overlap_weights(&self, len: usize) -> Vec<f64> {
        let frames = self.cfg.frames(len);
        let total = (frames - 1) * self.cfg.hop + self.cfg.n_fft;
        let mut norm = vec![0.0; total];
        for f in 0..frames {
            for (m, &w) in self.window.iter().enumerate() {
                norm[f * self.cfg.hop + m] += w * w;
            }
        }
        norm[self.cfg.pad()..self.cfg.pad() + len].to_vec()
    }

    /// Two-sided spectrogram energy divided by `n_fft`. Equals the
    /// overlap-weighted signal energy `sum_n W(n) x(n)^2`.
    pub fn spectral_energy(&self, spec: &NdArray) -> f64 {
        let bins = self.cfg.bins();
        let width = 2 * bins;
        let mut e = 0.0;
        for row in spec.data().chunks(width) {
            for k in 0..bins {
                let p = row[k] * row[k] + row[bins + k] * row[bins + k];
                e += if k == 0 || k == bins - 1 { p } else { 2.0 * p };
            }
        }
        e / self.cfg.n_fft as f64
    }
}

/// Magnitudes `|S|` of a stacked spectrogram, `[frames, bins]` row-major.
pub fn magnitudes(spec: &NdArray) -> Vec<f64> {
    let width = spec.shape()[1];
    let bins = width / 2;
    spec.data()
        .chunks(width)
        .flat_map(|row| (0..bins).map(move |k| row[k].hypot(row[bins + k])))
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn configs() -> [StftConfig; 2] {
        [StftConfig::desk(), StftConfig::wideband()]
    }

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn round_trip() {
        for cfg in configs() {
            let stft = Stft::new(cfg).unwrap();
            for (i, len) in [cfg.n_fft, 3001, 8000].into_iter().enumerate() {
                let w = noise(len, i as u64);
                let back = stft.inverse(&stft.forward(&w).unwrap(), len).unwrap();
                assert!(rel(&back, &w) <= 1e-10, "{cfg:?} len {len}: {}", rel(&back, &w));
            }
        }
    }

    #[test]
    fn bin_sinusoid_concentrates_energy() {
        for cfg in configs() {
            let stft = Stft::new(cfg).unwrap();
            let k0 = cfg.n_fft / 8;
            let len = cfg.n_fft * 12;
            let w: Vec<f64> = (0..len).map(|i| (TAU * k0 as f64 * i as f64 / cfg.n_fft as f64).sin()).collect();
            let spec = stft.forward(&w).unwrap();
            let mags = magnitudes(&spec);
            let bins = cfg.bins();
            // interior frames only, edge frames see the zero padding
            let frames = spec.shape()[0];
            let (mut near, mut all) = (0.0, 0.0);
            for f in 2..frames - 2 {
                for k in 0..bins {
                    let p = mags[f * bins + k].powi(2);
                    all += p;
                    if k.abs_diff(k0) <= 1 {
                        near += p;
                    }
                }
            }
            assert!(near / all > 0.99, "{cfg:?}: {}", near / all);
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let stft = Stft::new(StftConfig::desk()).unwrap();
        let spec = stft.forward(&[0.0; 500]).unwrap();
        assert!(spec.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linearity() {
        for cfg in configs() {
            let stft = Stft::new(cfg).unwrap();
            let (a, b) = (noise(4000, 1), noise(4000, 2));
            let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.7 * x + y).collect();
            let lhs = stft.forward(&mix).unwrap();
            let rhs = stft.forward(&a).unwrap().scaled(0.7).axpy(1.0, &stft.forward(&b).unwrap()).unwrap();
            assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn weighted_parseval() {
        for cfg in configs() {
            let stft = Stft::new(cfg).unwrap();
            let w = noise(5000, 3);
            let spec = stft.forward(&w).unwrap();
            let weights = stft.overlap_weights(w.len());
            let time: f64 = w.iter().zip(&weights).map(|(x, q)| q * x * x).sum();
            let freq = stft.spectral_energy(&spec);
            assert!(((time - freq) / time).abs() <= 1e-8, "{time} vs {freq}");
        }
    }

    #[test]
    fn uncovered_samples_are_rejected() {
        let cfg = StftConfig {
            hop: 126,
            ..StftConfig::desk()
        };
        assert!(matches!(Stft::new(cfg), Err(Error::Stft(_))));
        let rect = StftConfig {
            hop: 126,
            window: Window::Rectangular,
            ..StftConfig::desk()
        };
        Stft::new(rect).unwrap();
    }

    #[test]
    fn short_signal_rejected() {
        let stft = Stft::new(StftConfig::desk()).unwrap();
        assert!(stft.forward(&[0.0; 100]).is_err());
    }
}
