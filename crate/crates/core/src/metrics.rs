//! Intrusive quality metrics and comparison reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SpectroPair, Split};
use crate::error::{Error, Result};
use crate::network::VelocityNetwork;
use crate::sampler::{enhance, Method, SamplerConfig};
use crate::stft::{magnitudes, Stft};

pub const SI_SDR_CAP_DB: f64 = 100.0;
const MAG_FLOOR: f64 = 1e-8;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SDR in dB, capped at [`SI_SDR_CAP_DB`].
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Shape {
            what: "estimate",
            expected: vec![reference.len()],
            got: vec![estimate.len()],
        });
    }
    let rr = dot(reference, reference);
    if rr == 0.0 {
        return Err(Error::SilentSignal("reference"));
    }
    let alpha = dot(estimate, reference) / rr;
    let target = alpha * alpha * rr;
    let residual: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| (e - alpha * r).powi(2))
        .sum();
    if residual == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / residual).log10()).min(SI_SDR_CAP_DB))
}

/// RMS over frames and bins of `20 log10(|S_ref| / |S_est|)`, magnitudes
/// floored at 1e-8.
pub fn log_spectral_distance(reference: &[f64], estimate: &[f64], stft: &Stft) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Shape {
            what: "estimate",
            expected: vec![reference.len()],
            got: vec![estimate.len()],
        });
    }
    let a = magnitudes(&stft.forward(reference)?);
    let b = magnitudes(&stft.forward(estimate)?);
    let ms: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (20.0 * (x.max(MAG_FLOOR).log10() - y.max(MAG_FLOOR).log10())).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    Ok(ms.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub si_sdr_db: f64,
    pub lsd_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    /// 0 for the unprocessed input.
    pub nfe: usize,
    pub split: Split,
    pub si_sdr_db: f64,
    pub lsd_db: f64,
    pub utterances: Vec<UtteranceScore>,
}

impl MetricReport {
    pub fn from_scores(model: String, nfe: usize, split: Split, utterances: Vec<UtteranceScore>) -> Self {
        let n = utterances.len().max(1) as f64;
        Self {
            si_sdr_db: utterances.iter().map(|u| u.si_sdr_db).sum::<f64>() / n,
            lsd_db: utterances.iter().map(|u| u.lsd_db).sum::<f64>() / n,
            model,
            nfe,
            split,
            utterances,
        }
    }
}

/// A row source for [`compare_models`].
#[derive(Debug, Clone, Copy)]
pub enum Candidate<'a> {
    /// The noisy input scored as is.
    Noisy,
    Model {
        id: &'a str,
        network: &'a VelocityNetwork,
        method: Method,
    },
}

fn score(pair: &SpectroPair, estimate: &[f64], stft: &Stft) -> Result<UtteranceScore> {
    Ok(UtteranceScore {
        id: pair.meta.id.clone(),
        si_sdr_db: si_sdr(&pair.clean_wave, estimate)?,
        lsd_db: log_spectral_distance(&pair.clean_wave, estimate, stft)?,
    })
}

/// Enhances and scores every pair of `split`. Utterance `i` of the split is
/// sampled with seed `seed ^ i`.
pub fn evaluate_split(
    network: &VelocityNetwork,
    id: &str,
    method: Method,
    corpus: &Corpus,
    split: Split,
    sampler: &SamplerConfig,
) -> Result<MetricReport> {
    let stft = Stft::new(corpus.config.stft)?;
    check_geometry(network, &stft)?;
    let mut scores = Vec::new();
    for (i, pair) in corpus.split(split).enumerate() {
        let spec = enhance(network, &pair.noisy, sampler, method, i as u64)?;
        let wave = stft.inverse(&spec, pair.meta.samples)?;
        scores.push(score(pair, &wave, &stft)?);
    }
    Ok(MetricReport::from_scores(id.to_string(), sampler.nfe, split, scores))
}

pub fn evaluate_noisy(corpus: &Corpus, split: Split) -> Result<MetricReport> {
    let stft = Stft::new(corpus.config.stft)?;
    let scores = corpus
        .split(split)
        .map(|p| score(p, &p.noisy_wave, &stft))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_scores("noisy".into(), 0, split, scores))
}

pub fn check_geometry(network: &VelocityNetwork, stft: &Stft) -> Result<()> {
    if network.config().bins != stft.config().bins() {
        return Err(Error::Geometry(format!(
            "network expects {} bins, corpus STFT has {}",
            network.config().bins,
            stft.config().bins()
        )));
    }
    Ok(())
}

/// Every (candidate, nfe, split) cell. The noisy row appears once per split.
pub fn compare_models(
    candidates: &[Candidate<'_>],
    corpus: &Corpus,
    splits: &[Split],
    nfe_list: &[usize],
    seed: u64,
    sigma: f64,
) -> Result<Vec<MetricReport>> {
    let stft = Stft::new(corpus.config.stft)?;
    for c in candidates {
        if let Candidate::Model { network, .. } = c {
            check_geometry(network, &stft)?;
        }
    }
    let mut rows = Vec::new();
    for c in candidates {
        match *c {
            Candidate::Noisy => {
                for &split in splits {
                    rows.push(evaluate_noisy(corpus, split)?);
                }
            }
            Candidate::Model { id, network, method } => {
                for &nfe in nfe_list {
                    let sampler = SamplerConfig::new(nfe, seed, sigma)?;
                    for &split in splits {
                        rows.push(evaluate_split(network, id, method, corpus, split, &sampler)?);
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub const REPORT_COLUMNS: [&str; 6] = ["model", "nfe", "split", "si_sdr_db", "lsd_db", "n_utts"];

/// Tab-separated rows with a header, columns as in [`REPORT_COLUMNS`].
pub fn format_tsv(rows: &[MetricReport]) -> String {
    let mut out = REPORT_COLUMNS.join("\t");
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{}",
            r.model,
            r.nfe,
            r.split,
            r.si_sdr_db,
            r.lsd_db,
            r.utterances.len()
        )
        .unwrap();
    }
    out
}

/// Aligned plain-text table of the same rows.
pub fn format_table(rows: &[MetricReport]) -> String {
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                r.nfe.to_string(),
                r.split.to_string(),
                format!("{:.2}", r.si_sdr_db),
                format!("{:.2}", r.lsd_db),
                r.utterances.len().to_string(),
            ]
        })
        .collect();
    let mut widths = REPORT_COLUMNS.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: &[&str]| {
        let parts: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 3 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(&mut out, &REPORT_COLUMNS);
    for row in &cells {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::StftConfig;

    fn tone(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.05).sin() + 0.3 * (i as f64 * 0.17).cos()).collect()
    }

    #[test]
    fn identical_estimate_hits_cap() {
        let r = tone(1000);
        assert_eq!(si_sdr(&r, &r).unwrap(), SI_SDR_CAP_DB);
        let doubled: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&r, &doubled).unwrap(), SI_SDR_CAP_DB);
    }

    #[test]
    fn equal_power_orthogonal_noise_is_zero_db() {
        let r: Vec<f64> = (0..400).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let n: Vec<f64> = (0..400).map(|i| if i % 4 < 2 { 1.0 } else { -1.0 }).collect();
        assert_eq!(dot(&r, &n), 0.0);
        let e: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + b).collect();
        assert!(si_sdr(&r, &e).unwrap().abs() < 1e-12);
    }

    #[test]
    fn scale_invariance() {
        let r = tone(500);
        let e: Vec<f64> = r.iter().enumerate().map(|(i, v)| v + 0.1 * (i as f64 * 1.3).sin()).collect();
        let base = si_sdr(&r, &e).unwrap();
        let twice: Vec<f64> = e.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&r, &twice).unwrap(), base);
        let odd: Vec<f64> = e.iter().map(|v| 3.7 * v).collect();
        assert!((si_sdr(&r, &odd).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn silent_reference_is_an_error() {
        assert!(matches!(si_sdr(&[0.0; 4], &[1.0; 4]), Err(Error::SilentSignal(_))));
    }

    #[test]
    fn lsd_values() {
        let stft = Stft::new(StftConfig::desk()).unwrap();
        let r = tone(2000);
        assert_eq!(log_spectral_distance(&r, &r, &stft).unwrap(), 0.0);
        let loud: Vec<f64> = r.iter().map(|v| 10.0 * v).collect();
        let d = log_spectral_distance(&r, &loud, &stft).unwrap();
        // bins whose reference magnitude sits under the floor would shrink this
        assert!((d - 20.0).abs() < 1e-6, "{d}");
        let other: Vec<f64> = r.iter().map(|v| v.powi(3)).collect();
        assert!(log_spectral_distance(&r, &other, &stft).unwrap() >= 0.0);
    }

    #[test]
    fn report_mean_and_formats() {
        let utts = vec![
            UtteranceScore {
                id: "a".into(),
                si_sdr_db: 1.0,
                lsd_db: 2.0,
            },
            UtteranceScore {
                id: "b".into(),
                si_sdr_db: 4.0,
                lsd_db: 3.0,
            },
        ];
        let r = MetricReport::from_scores("m".into(), 2, Split::Test, utts);
        assert_eq!(r.si_sdr_db, 2.5);
        assert_eq!(r.lsd_db, 2.5);
        let tsv = format_tsv(std::slice::from_ref(&r));
        assert_eq!(tsv, "model\tnfe\tsplit\tsi_sdr_db\tlsd_db\tn_utts\nm\t2\ttest\t2.5000\t2.5000\t2\n");
        let table = format_table(&[r]);
        assert_eq!(table.lines().count(), 2);
    }
}
