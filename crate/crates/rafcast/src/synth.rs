//! Seeded multi-domain synthetic corpora.
//!
//! Each domain draws, per series, a base frequency (cycles per step), an
//! amplitude, a linear trend slope and a phase from its bands. A domain with
//! `second_tone` adds a second sinusoid at `ratio ×` the base frequency.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rafcast_core::tsdata::Series;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::artifact::Envelope;
use crate::dataset::{write_series_csv, DatasetEntry, Manifest, MANIFEST_FILE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondTone {
    /// Frequency multiple of the base tone; irrational for incommensurate tones.
    pub ratio: f64,
    /// Amplitude relative to the base tone.
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Sampling-frequency label written to the manifest.
    pub frequency: String,
    /// Base-tone frequency band in cycles per step.
    pub freq: [f64; 2],
    pub amplitude: [f64; 2],
    /// Trend slope band per step.
    pub trend: [f64; 2],
    pub noise: f64,
    #[serde(default)]
    pub second_tone: Option<SecondTone>,
    pub series: usize,
    /// Additional series tagged held-out.
    #[serde(default)]
    pub heldout_series: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub domains: Vec<DomainSpec>,
    pub length: usize,
}

fn band(name: &str, what: &str, b: [f64; 2]) -> Result<()> {
    if !(b[0].is_finite() && b[1].is_finite() && b[0] <= b[1]) {
        return Err(Error::Config(format!("domain {name:?}: {what} band {b:?} is not an interval")));
    }
    Ok(())
}

impl SyntheticSpec {
    /// Three domains: a slow tone with trend, a fast tone, and two
    /// incommensurate tones.
    pub fn three_domain(series: usize, heldout: usize, length: usize) -> Self {
        let d = |name: &str, freq, trend, second_tone, heldout_series| DomainSpec {
            name: name.into(),
            frequency: "h".into(),
            freq,
            amplitude: [0.8, 1.2],
            trend,
            noise: 0.05,
            second_tone,
            series,
            heldout_series,
        };
        Self {
            domains: vec![
                d("A", [1.0 / 80.0, 1.0 / 40.0], [0.002, 0.006], None, 0),
                d("B", [1.0 / 12.0, 1.0 / 6.0], [0.0, 0.0], None, 0),
                d(
                    "C",
                    [1.0 / 32.0, 1.0 / 20.0],
                    [0.0, 0.0],
                    Some(SecondTone {
                        ratio: std::f64::consts::SQRT_2,
                        amplitude: 0.6,
                    }),
                    heldout,
                ),
            ],
            length,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::Config("a synthetic corpus needs at least two domains".into()));
        }
        if self.length == 0 {
            return Err(Error::Config("series length must be positive".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for d in &self.domains {
            if !names.insert(&d.name) {
                return Err(Error::Config(format!("duplicate domain {:?}", d.name)));
            }
            band(&d.name, "frequency", d.freq)?;
            band(&d.name, "amplitude", d.amplitude)?;
            band(&d.name, "trend", d.trend)?;
            if !(d.freq[0] > 0.0 && d.freq[1] < 0.5) {
                return Err(Error::Config(format!("domain {:?}: frequency must lie in (0, 0.5)", d.name)));
            }
            if d.noise.is_nan() || d.noise < 0.0 {
                return Err(Error::Config(format!("domain {:?}: noise must be non-negative", d.name)));
            }
        }
        Ok(())
    }
}

/// One generated series and whether it is held out.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub series: Series,
    pub heldout: bool,
}

fn draw(rng: &mut ChaCha8Rng, b: [f64; 2]) -> f64 {
    if b[0] == b[1] {
        b[0]
    } else {
        rng.random_range(b[0]..b[1])
    }
}

fn one_series(d: &DomainSpec, length: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let f = draw(rng, d.freq);
    let a = draw(rng, d.amplitude);
    let slope = draw(rng, d.trend);
    let phase = rng.random_range(0.0..TAU);
    let second = d.second_tone.map(|s| (s, rng.random_range(0.0..TAU)));
    let noise = Normal::new(0.0, d.noise).expect("validated noise");
    (0..length)
        .map(|t| {
            let t = t as f64;
            let mut v = a * (TAU * f * t + phase).sin() + slope * t;
            if let Some((s, p2)) = second {
                v += a * s.amplitude * (TAU * f * s.ratio * t + p2).sin();
            }
            v + noise.sample(rng)
        })
        .collect()
}

/// Generates every series of `spec`. Dataset ids are `<domain>_<nnn>`, with
/// held-out series numbered after the regular ones.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Generated>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for d in &spec.domains {
        for i in 0..d.series + d.heldout_series {
            out.push(Generated {
                series: Series {
                    values: one_series(d, spec.length, &mut rng),
                    channel_id: "value".into(),
                    dataset_id: format!("{}_{i:03}", d.name),
                    domain: d.name.clone(),
                    frequency: d.frequency.clone(),
                },
                heldout: i >= d.series,
            });
        }
    }
    Ok(out)
}

/// Writes one CSV per series plus the manifest into `dir`.
pub fn write_corpus(dir: &Path, corpus: &[Generated], artifact: Option<&Envelope>) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(corpus.len());
    for g in corpus {
        let file = format!("{}.csv", g.series.dataset_id);
        write_series_csv(&dir.join(&file), &g.series.channel_id, &g.series.values)?;
        entries.push(DatasetEntry {
            dataset_id: g.series.dataset_id.clone(),
            domain: g.series.domain.clone(),
            frequency: g.series.frequency.clone(),
            files: vec![file],
            value_columns: vec![g.series.channel_id.clone()],
            heldout: g.heldout,
        });
    }
    let mut manifest = Manifest::new(entries);
    manifest.artifact = artifact.cloned();
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Frequency estimate from the zero-crossing count of the detrended series.
pub fn zero_crossing_frequency(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let (mt, mv) = ((n - 1.0) / 2.0, values.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, v) in values.iter().enumerate() {
        sxy += (t as f64 - mt) * (v - mv);
        sxx += (t as f64 - mt).powi(2);
    }
    let slope = sxy / sxx;
    let resid: Vec<f64> = values
        .iter()
        .enumerate()
        .map(|(t, v)| v - mv - slope * (t as f64 - mt))
        .collect();
    let crossings = resid.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count();
    crossings as f64 / (2.0 * (n - 1.0))
}
