//! The JSON run configuration shared by every subcommand.
//!
//! Absent fields take the desk-benchmark defaults. Keys the schema does not
//! know are rejected at any depth. Stage seeds (generator, backbone init,
//! pretraining, knowledge base, training) are derived from the top-level
//! `seed` exactly as the ablation harness derives them, so the nested `seed`
//! fields of `pretrain` and `train` are overwritten.

use std::fs;
use std::path::Path;

use rafcast_core::backbone::{BackboneDims, PretrainConfig};
use rafcast_core::fusion::FusionPolicy;
use rafcast_core::trainer::{RetrievalPolicy, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bench::{mix, BenchConfig, KbSource};
use crate::error::{Error, Result};
use crate::synth::SyntheticSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbConfig {
    /// Windows per domain; the pooled `random` source draws as many in
    /// total as the curated base holds.
    pub per_domain: usize,
    pub source: KbSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub stride: usize,
    /// Keep per-window residuals in the report.
    pub residuals: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub cells: Vec<(RetrievalPolicy, FusionPolicy)>,
    pub kb_fractions: Vec<f64>,
    pub kb_sources: Vec<KbSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SyntheticSpec,
    /// Domain excluded from pretraining and evaluated on its held-out series.
    /// `None` pretrains on every domain and evaluates every held-out series.
    pub target_domain: Option<String>,
    pub dims: BackboneDims,
    pub pretrain: PretrainConfig,
    pub pretrain_stride: usize,
    pub kb: KbConfig,
    pub train: TrainConfig,
    pub train_stride: usize,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BenchConfig::desk();
        Self {
            seed: 0,
            synth: b.synth,
            target_domain: Some(b.target_domain),
            dims: b.dims,
            pretrain: b.pretrain,
            pretrain_stride: b.pretrain_stride,
            kb: KbConfig {
                per_domain: b.kb_per_domain,
                source: KbSource::Curated,
            },
            train: b.train,
            train_stride: b.train_stride,
            eval: EvalConfig {
                stride: b.test_stride,
                residuals: false,
            },
            ablation: AblationConfig {
                seeds: b.seeds,
                cells: b.cells,
                kb_fractions: b.kb_fractions,
                kb_sources: b.kb_sources,
            },
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from the defaults) and applies `key=value`
    /// overrides, where `key` is a dotted path and `value` is JSON or a bare
    /// string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut v = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let user: Value = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                let mut base = serde_json::to_value(Self::default())?;
                merge(&mut base, user);
                base
            }
            None => serde_json::to_value(Self::default())?,
        };
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            set_path(&mut v, key, value)?;
        }
        Self::from_value(v)
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(v.clone())?;
        check_known(&v, &serde_json::to_value(&cfg)?, "")?;
        cfg.validate()?;
        Ok(cfg.effective())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.dims.validate()?;
        self.train.validate()?;
        if let Some(t) = &self.target_domain {
            if !self.synth.domains.iter().any(|d| &d.name == t) {
                return Err(Error::Config(format!("target domain {t:?} is not in the synthetic corpus")));
            }
        }
        if self.pretrain_stride == 0 || self.train_stride == 0 {
            return Err(Error::Config("window strides must be positive".into()));
        }
        if self.kb.per_domain == 0 {
            return Err(Error::Config("kb.per_domain must be at least 1".into()));
        }
        if self.kb.source == KbSource::Without {
            return Err(Error::Config("kb.source \"without\" only exists as an ablation cell".into()));
        }
        if self.eval.stride == 0 {
            return Err(Error::Config("eval.stride must be positive".into()));
        }
        Ok(())
    }

    /// The same config with derived stage seeds filled in.
    pub fn effective(mut self) -> Self {
        self.pretrain.seed = mix(self.seed, 3);
        self.train.seed = mix(self.seed, 6);
        self
    }

    pub fn generator_seed(&self) -> u64 {
        mix(self.seed, 1)
    }

    pub fn backbone_init_seed(&self) -> u64 {
        mix(self.seed, 2)
    }

    pub fn kb_seed(&self) -> u64 {
        mix(self.seed, 4)
    }

    /// Seed of the pooled random source, as used by the ablation harness.
    pub fn random_kb_seed(&self) -> u64 {
        mix(self.seed, 5)
    }

    /// The ablation harness configuration described by this run config.
    pub fn bench(&self) -> BenchConfig {
        BenchConfig {
            synth: self.synth.clone(),
            target_domain: self.target_domain.clone().unwrap_or_default(),
            dims: self.dims,
            pretrain: self.pretrain,
            pretrain_stride: self.pretrain_stride,
            train: self.train,
            train_stride: self.train_stride,
            test_stride: self.eval.stride,
            kb_per_domain: self.kb.per_domain,
            seeds: self.ablation.seeds.clone(),
            cells: self.ablation.cells.clone(),
            kb_fractions: self.ablation.kb_fractions.clone(),
            kb_sources: self.ablation.kb_sources.clone(),
        }
    }
}

/// Recursively overlays `top` onto `base`; arrays and scalars replace.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn set_path(v: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = v;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if !map.contains_key(*part) {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
                let slot = map.get_mut(*part).expect("checked above");
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("{key:?}: {part:?} is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("{key:?}: index {idx} out of range ({len} items)")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("{key:?}: cannot descend into a scalar"))),
        };
    }
    Err(Error::Config("empty override key".into()))
}

/// Every object key in `user` must survive a parse/serialize round trip.
fn check_known(user: &Value, parsed: &Value, at: &str) -> Result<()> {
    match (user, parsed) {
        (Value::Object(u), Value::Object(p)) => {
            for (k, v) in u {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match p.get(k) {
                    Some(pv) => check_known(v, pv, &path)?,
                    None => return Err(Error::Config(format!("unknown config key {path:?}"))),
                }
            }
            Ok(())
        }
        (Value::Array(u), Value::Array(p)) => {
            for (i, (uv, pv)) in u.iter().zip(p).enumerate() {
                check_known(uv, pv, &format!("{at}.{i}"))?;
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(RunConfig::from_value(v).unwrap(), cfg);
        assert_eq!(cfg.train.seed, mix(0, 6));
    }

    #[test]
    fn overrides_and_files() {
        let cfg = RunConfig::load(
            None,
            &["train.lambda=0.5".into(), "seed=7".into(), "train.fusion_policy=average".into()],
        )
        .unwrap();
        assert_eq!((cfg.train.lambda, cfg.seed), (0.5, 7));
        assert_eq!(cfg.train.fusion_policy, FusionPolicy::Average);
        assert_eq!(cfg.pretrain.seed, mix(7, 3));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"hyper": {"k": 4}}, "eval": {"stride": 3}}"#).unwrap();
        let cfg = RunConfig::load(Some(&p), &["synth.domains.0.noise=0.5".into()]).unwrap();
        assert_eq!((cfg.train.hyper.k, cfg.eval.stride), (4, 3));
        assert_eq!(cfg.train.hyper.tau_m, 0.1);
        assert_eq!(cfg.synth.domains[0].noise, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["nope=1", "train.lamda=1", "synth.domains.9.noise=1"] {
            let e = RunConfig::load(None, &[bad.into()]).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{bad}: {e}");
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"hyper": {"kk": 4}}}"#).unwrap();
        let e = RunConfig::load(Some(&p), &[]).unwrap_err().to_string();
        assert!(e.contains("train.hyper.kk"), "{e}");
        assert!(matches!(
            RunConfig::load(None, &["train.lambda=-1".into()]),
            Err(Error::Core(_) | Error::Config(_))
        ));
    }
}
