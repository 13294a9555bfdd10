//! The external knowledge base: fixed-length raw windows tagged with their
//! domain and source so that training can exclude the query's own dataset.
//!
//! Windows are cut on a non-overlapping grid (starts at multiples of `sl`),
//! so two entries from the same channel can never overlap. Entries are stored
//! un-normalized; callers normalize at use time. Values are held at f32
//! precision, the precision of the on-disk format.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tsdata::Series;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KbEntry {
    pub values: Vec<f64>,
    pub domain: String,
    pub dataset_id: String,
    pub channel_id: String,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    sl: usize,
    entries: Vec<KbEntry>,
    manifest_digest: u64,
}

/// One grid window: index into the source series list and start offset.
type GridSlot = (usize, usize);

fn grid(series: &Series, index: usize, sl: usize) -> impl Iterator<Item = GridSlot> + '_ {
    (0..series.len() / sl).map(move |w| (index, w * sl))
}

fn digest_sources(datasets: &[Series]) -> u64 {
    let crc = crc::Crc::<u64>::new(&crc::CRC_64_XZ);
    let mut d = crc.digest();
    for s in datasets {
        for field in [&s.dataset_id, &s.channel_id, &s.domain] {
            d.update(field.as_bytes());
            d.update(&[0]);
        }
        d.update(&(s.len() as u64).to_le_bytes());
    }
    d.finalize()
}

/// Rounds to the nearest f32; out-of-range values become infinite.
pub fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn entry(series: &Series, start: usize, sl: usize) -> KbEntry {
    KbEntry {
        values: series.values[start..start + sl].iter().map(|&v| quantize(v)).collect(),
        domain: series.domain.clone(),
        dataset_id: series.dataset_id.clone(),
        channel_id: series.channel_id.clone(),
        start,
    }
}

impl KnowledgeBase {
    /// Assembles a knowledge base from existing entries, e.g. after loading
    /// it from disk. Every entry must have length `sl`; values are rounded
    /// to f32.
    pub fn from_entries(sl: usize, mut entries: Vec<KbEntry>, manifest_digest: u64) -> Result<Self> {
        if sl == 0 {
            return Err(Error::Config("knowledge base window length must be positive".into()));
        }
        for e in &mut entries {
            crate::error::check_len("knowledge base entry", sl, e.values.len())?;
            e.values.iter_mut().for_each(|v| *v = quantize(*v));
            if e.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("knowledge base entry"));
            }
        }
        Ok(Self {
            sl,
            entries,
            manifest_digest,
        })
    }

    /// Domain-balanced build: `per_domain_quota` windows drawn uniformly
    /// without replacement from each domain's grid.
    pub fn build(datasets: &[Series], sl: usize, per_domain_quota: usize, seed: u64) -> Result<Self> {
        if per_domain_quota == 0 {
            return Err(Error::Config("per-domain quota must be at least 1".into()));
        }
        if sl == 0 {
            return Err(Error::Config("knowledge base window length must be positive".into()));
        }
        let mut by_domain: BTreeMap<&str, Vec<GridSlot>> = BTreeMap::new();
        for (i, s) in datasets.iter().enumerate() {
            by_domain.entry(s.domain.as_str()).or_default().extend(grid(s, i, sl));
        }
        if let Some((domain, slots)) = by_domain.iter().find(|(_, s)| s.len() < per_domain_quota) {
            return Err(Error::InsufficientWindows {
                domain: String::from(*domain),
                available: slots.len(),
                needed: per_domain_quota,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::with_capacity(by_domain.len() * per_domain_quota);
        for slots in by_domain.values() {
            let mut picked: Vec<GridSlot> = rand::seq::index::sample(&mut rng, slots.len(), per_domain_quota)
                .into_iter()
                .map(|i| slots[i])
                .collect();
            picked.sort_unstable();
            entries.extend(picked.into_iter().map(|(s, start)| entry(&datasets[s], start, sl)));
        }
        Ok(Self {
            sl,
            entries,
            manifest_digest: digest_sources(datasets),
        })
    }

    /// Uniform draw of `total` windows from the pooled grid of all domains.
    /// The result inherits whatever imbalance the corpus has.
    pub fn build_pooled(datasets: &[Series], sl: usize, total: usize, seed: u64) -> Result<Self> {
        if total == 0 || sl == 0 {
            return Err(Error::Config("pooled knowledge base needs positive size and window".into()));
        }
        let slots: Vec<GridSlot> = datasets.iter().enumerate().flat_map(|(i, s)| grid(s, i, sl)).collect();
        if slots.len() < total {
            return Err(Error::InsufficientWindows {
                domain: String::from("<pooled>"),
                available: slots.len(),
                needed: total,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<GridSlot> = rand::seq::index::sample(&mut rng, slots.len(), total)
            .into_iter()
            .map(|i| slots[i])
            .collect();
        picked.sort_unstable();
        Ok(Self {
            sl,
            entries: picked.into_iter().map(|(s, start)| entry(&datasets[s], start, sl)).collect(),
            manifest_digest: digest_sources(datasets),
        })
    }

    pub fn sl(&self) -> usize {
        self.sl
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &KbEntry {
        &self.entries[i]
    }

    pub fn manifest_digest(&self) -> u64 {
        self.manifest_digest
    }

    /// Entry indices grouped by domain, in domain order.
    pub fn domain_index(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut idx: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            idx.entry(e.domain.as_str()).or_default().push(i);
        }
        idx
    }

    pub fn domain_counts(&self) -> BTreeMap<String, usize> {
        self.domain_index()
            .into_iter()
            .map(|(d, v)| (String::from(d), v.len()))
            .collect()
    }

    /// Indices a query may retrieve. During training the query's own
    /// dataset is excluded; at inference every entry is eligible.
    pub fn eligible_candidates(&self, query_dataset: &str, training: bool, k: usize) -> Result<Vec<usize>> {
        if self.entries.is_empty() {
            return Err(Error::Empty("knowledge base"));
        }
        let eligible: Vec<usize> = if training {
            (0..self.entries.len())
                .filter(|&i| self.entries[i].dataset_id != query_dataset)
                .collect()
        } else {
            (0..self.entries.len()).collect()
        };
        if eligible.len() < k {
            return Err(Error::InsufficientCandidates {
                available: eligible.len(),
                needed: k,
            });
        }
        Ok(eligible)
    }

    /// Stratified subsample keeping `round(fraction · count)` entries of each
    /// domain, in original order.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config("subsample fraction must lie in (0, 1]".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for (domain, idx) in self.domain_index() {
            let n = libm::round(fraction * idx.len() as f64) as usize;
            if n == 0 {
                return Err(Error::InsufficientWindows {
                    domain: String::from(domain),
                    available: 0,
                    needed: 1,
                });
            }
            keep.extend(rand::seq::index::sample(&mut rng, idx.len(), n).into_iter().map(|i| idx[i]));
        }
        keep.sort_unstable();
        Ok(Self {
            sl: self.sl,
            entries: keep.into_iter().map(|i| self.entries[i].clone()).collect(),
            manifest_digest: self.manifest_digest,
        })
    }

    /// Keeps only entries of the given domain.
    pub fn restrict_to_domain(&self, domain: &str) -> Self {
        Self {
            sl: self.sl,
            entries: self.entries.iter().filter(|e| e.domain == domain).cloned().collect(),
            manifest_digest: self.manifest_digest,
        }
    }
}
