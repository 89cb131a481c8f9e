//! Synthetic paired corpus and its on-disk layout.
//!
//! A corpus directory holds `corpus.toml` (the generating config),
//! `manifest.tsv` and one `pairs/<id>.bin` per pair. A pair file is
//!
//! ```text
//! magic    8 bytes  "MFSEPAIR"
//! version  u32 LE
//! hlen     u32 LE   length of the JSON header
//! header   hlen bytes, UTF-8 JSON (PairMeta plus array shapes)
//! payload  f64 LE: clean wave, noisy wave, clean spectrogram, noisy spectrogram
//! ```
//!
//! The manifest has a header line and then one tab-separated record per pair:
//! `id split snr_db noise sha256`, the digest taken over the pair file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mf_autodiff::NdArray;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::stft::{Stft, StftConfig};
use crate::synth::{mix_at_snr, synth_clean, NoiseFamily};
use crate::training::TrainPair;

const PAIR_MAGIC: &[u8; 8] = b"MFSEPAIR";
const PAIR_VERSION: u32 = 1;
pub const MANIFEST_HEADER: &str = "id\tsplit\tsnr_db\tnoise\tsha256";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Ood,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Ood => "ood",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "ood" => Ok(Split::Ood),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub duration_s: f64,
    /// Pairs drawn with training SNRs; `val_fraction` of them become validation.
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub ood_pairs: usize,
    pub val_fraction: f64,
    pub train_snrs: Vec<f64>,
    pub test_snrs: Vec<f64>,
    pub train_noise: NoiseFamily,
    pub ood_noise: NoiseFamily,
    pub stft: StftConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_s: 1.0,
            train_pairs: 200,
            test_pairs: 40,
            ood_pairs: 40,
            val_fraction: 0.1,
            train_snrs: vec![0.0, 5.0, 10.0, 15.0],
            test_snrs: vec![2.5, 7.5, 12.5, 17.5],
            train_noise: NoiseFamily::Pink,
            ood_noise: NoiseFamily::Bursts,
            stft: StftConfig::desk(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_pairs == 0 || self.test_pairs == 0 || self.ood_pairs == 0 {
            return Err(Error::Config("every split needs at least one pair".into()));
        }
        if self.train_snrs.is_empty() || self.test_snrs.is_empty() {
            return Err(Error::Config("SNR sets must not be empty".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if self.train_noise == self.ood_noise {
            return Err(Error::Config(format!(
                "out-of-domain noise must differ from training noise ({})",
                self.train_noise
            )));
        }
        let samples = (self.duration_s * self.stft.sample_rate_hz as f64).round();
        if !(samples >= self.stft.n_fft as f64) {
            return Err(Error::Config(format!(
                "duration {} s gives fewer samples than n_fft {}",
                self.duration_s, self.stft.n_fft
            )));
        }
        Stft::new(self.stft).map(|_| ())
    }

    pub fn samples(&self) -> usize {
        (self.duration_s * self.stft.sample_rate_hz as f64).round() as usize
    }

    fn val_count(&self) -> usize {
        (self.val_fraction * self.train_pairs as f64).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub id: String,
    pub split: Split,
    pub snr_db: f64,
    pub realized_snr_db: f64,
    pub noise: NoiseFamily,
    /// Stream the pair was drawn from.
    pub stream: u64,
    pub f0: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectroPair {
    pub meta: PairMeta,
    pub clean_wave: Vec<f64>,
    pub noisy_wave: Vec<f64>,
    /// `[frames, 2 * bins]`.
    pub clean: NdArray,
    pub noisy: NdArray,
}

impl SpectroPair {
    pub fn train_pair(&self) -> TrainPair {
        TrainPair {
            x0: self.clean.clone(),
            y: self.noisy.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Header<'a> {
            meta: &'a PairMeta,
            spec_shape: &'a [usize],
        }
        let header = serde_json::to_vec(&Header {
            meta: &self.meta,
            spec_shape: self.clean.shape(),
        })
        .expect("pair header serialises");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * (2 * self.clean_wave.len() + 2 * self.clean.len()));
        out.extend_from_slice(PAIR_MAGIC);
        out.extend_from_slice(&PAIR_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for block in [&self.clean_wave[..], &self.noisy_wave[..], self.clean.data(), self.noisy.data()] {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            meta: PairMeta,
            spec_shape: Vec<usize>,
        }
        let bad = |reason: &str| Error::format(path, reason);
        if bytes.len() < 16 || &bytes[..8] != PAIR_MAGIC {
            return Err(bad("not a pair file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != PAIR_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        if header.spec_shape.len() != 2 {
            return Err(bad("spectrogram shape must be 2-D"));
        }
        let wave = header.meta.samples;
        let spec: usize = header.spec_shape.iter().product();
        let payload = &bytes[16 + hlen..];
        if payload.len() != 8 * (2 * wave + 2 * spec) {
            return Err(bad("payload length does not match header"));
        }
        let mut vals = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };
        let clean_wave = take(wave);
        let noisy_wave = take(wave);
        let clean = NdArray::new(header.spec_shape.clone(), take(spec))?;
        let noisy = NdArray::new(header.spec_shape, take(spec))?;
        Ok(Self {
            meta: header.meta,
            clean_wave,
            noisy_wave,
            clean,
            noisy,
        })
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub pairs: Vec<SpectroPair>,
}

#[derive(Debug, Clone, Copy)]
enum Pool {
    Train,
    Test,
    Ood,
}

impl Pool {
    fn code(self) -> u64 {
        match self {
            Pool::Train => 1,
            Pool::Test => 2,
            Pool::Ood => 3,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Pool::Train => "train",
            Pool::Test => "test",
            Pool::Ood => "ood",
        }
    }
}

fn make_pair(cfg: &CorpusConfig, stft: &Stft, pool: Pool, index: usize, split: Split) -> Result<SpectroPair> {
    let stream = (pool.code() << 32) | index as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let (snrs, noise) = match pool {
        Pool::Train => (&cfg.train_snrs, cfg.train_noise),
        Pool::Test => (&cfg.test_snrs, cfg.train_noise),
        Pool::Ood => (&cfg.test_snrs, cfg.ood_noise),
    };
    let snr = snrs[index % snrs.len()];
    let clean = synth_clean(&mut rng, cfg.duration_s, cfg.stft.sample_rate_hz)?;
    let noise_wave = noise.generate(&mut rng, cfg.duration_s, cfg.stft.sample_rate_hz)?;
    let mix = mix_at_snr(&clean.samples, &noise_wave, snr)?;
    Ok(SpectroPair {
        meta: PairMeta {
            id: format!("{}-{index:04}", pool.name()),
            split,
            snr_db: snr,
            realized_snr_db: mix.realized_snr_db,
            noise,
            stream,
            f0: clean.f0,
            samples: clean.samples.len(),
        },
        clean: stft.forward(&clean.samples)?,
        noisy: stft.forward(&mix.noisy)?,
        clean_wave: clean.samples,
        noisy_wave: mix.noisy,
    })
}

/// Generates every split. Each pair draws from its own stream, so a pair's
/// content depends only on the seed, its pool and its index.
pub fn build_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let stft = Stft::new(cfg.stft)?;
    let mut order: Vec<usize> = (0..cfg.train_pairs).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_7a11));
    let val: std::collections::HashSet<usize> = order[..cfg.val_count()].iter().copied().collect();

    let mut pairs = Vec::with_capacity(cfg.train_pairs + cfg.test_pairs + cfg.ood_pairs);
    for i in 0..cfg.train_pairs {
        let split = if val.contains(&i) { Split::Val } else { Split::Train };
        pairs.push(make_pair(cfg, &stft, Pool::Train, i, split)?);
    }
    for i in 0..cfg.test_pairs {
        pairs.push(make_pair(cfg, &stft, Pool::Test, i, Split::Test)?);
    }
    for i in 0..cfg.ood_pairs {
        pairs.push(make_pair(cfg, &stft, Pool::Ood, i, Split::Ood)?);
    }
    Ok(Corpus {
        config: cfg.clone(),
        pairs,
    })
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SpectroPair> {
        self.pairs.iter().filter(move |p| p.meta.split == split)
    }

    pub fn train_pairs(&self, split: Split) -> Vec<TrainPair> {
        self.split(split).map(SpectroPair::train_pair).collect()
    }

    pub fn manifest(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for p in &self.pairs {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                p.meta.id,
                p.meta.split,
                p.meta.snr_db,
                p.meta.noise,
                p.checksum()
            )
            .unwrap();
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let pair_dir = dir.join("pairs");
        fs::create_dir_all(&pair_dir).map_err(Error::io(&pair_dir))?;
        let cfg_path = dir.join("corpus.toml");
        let cfg = toml::to_string(&self.config).map_err(|e| Error::format(&cfg_path, e.to_string()))?;
        fs::write(&cfg_path, cfg).map_err(Error::io(&cfg_path))?;
        for p in &self.pairs {
            let path = pair_dir.join(format!("{}.bin", p.meta.id));
            fs::write(&path, p.to_bytes()).map_err(Error::io(&path))?;
        }
        let manifest = dir.join("manifest.tsv");
        fs::write(&manifest, self.manifest()).map_err(Error::io(&manifest))
    }

    /// Reads a saved corpus and checks every pair against its manifest digest.
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("corpus.toml");
        let text = fs::read_to_string(&cfg_path).map_err(Error::io(&cfg_path))?;
        let config: CorpusConfig = toml::from_str(&text).map_err(|e| Error::format(&cfg_path, e.to_string()))?;
        let manifest = dir.join("manifest.tsv");
        let text = fs::read_to_string(&manifest).map_err(Error::io(&manifest))?;
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::format(&manifest, "missing header line"));
        }
        let mut pairs = Vec::new();
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::format(&manifest, format!("line {}: expected 5 fields", n + 2)));
            }
            let path: PathBuf = dir.join("pairs").join(format!("{}.bin", fields[0]));
            let bytes = fs::read(&path).map_err(Error::io(&path))?;
            if hex::encode(Sha256::digest(&bytes)) != fields[4] {
                return Err(Error::format(&path, "checksum does not match manifest"));
            }
            let pair = SpectroPair::from_bytes(&bytes, &path)?;
            if pair.meta.split != Split::parse(fields[1])? {
                return Err(Error::format(&path, "split differs from manifest"));
            }
            pairs.push(pair);
        }
        Ok(Self { config, pairs })
    }
}
