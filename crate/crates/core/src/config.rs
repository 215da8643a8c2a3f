//! Layered experiment configuration.
//!
//! A config is a JSON object with one section per component. Layers apply in
//! the order defaults, file, master seed, dotted `section.key=value`
//! overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attack::AttackConfig;
use crate::defense::DefenseConfig;
use crate::error::{Error, Result};
use crate::harness::CorpusConfig;
use crate::model::ToyEncoderConfig;
use crate::seeds;

const SEEDED_SECTIONS: [&str; 4] = ["model", "corpus", "attack", "defense"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Images per forward pass; defended layers decompose whole batches.
    pub batch_size: usize,
    pub bench_batches: usize,
    pub warmup_batches: usize,
    pub bench_rank: usize,
    pub bench_alpha: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self { batch_size: 32, bench_batches: 20, warmup_batches: 3, bench_rank: 64, bench_alpha: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. Section seeds are derived from it by [`Self::with_seed`].
    pub seed: u64,
    pub model: ToyEncoderConfig,
    pub corpus: CorpusConfig,
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
    pub harness: HarnessConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ToyEncoderConfig::default(),
            corpus: CorpusConfig::default(),
            attack: AttackConfig::default(),
            defense: DefenseConfig::default(),
            harness: HarnessConfig::default(),
        }
        .with_seed(0)
    }
}

impl ExperimentConfig {
    /// Sets the master seed and derives every section seed from it as
    /// `derive(seed, [tag(section)])`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = Self::section_seed(seed, "model");
        self.corpus.seed = Self::section_seed(seed, "corpus");
        self.attack.seed = Self::section_seed(seed, "attack");
        self.defense.seed = Self::section_seed(seed, "defense");
        self
    }

    pub fn section_seed(master: u64, section: &str) -> u64 {
        seeds::derive(master, &[seeds::tag(section)])
    }

    /// Every seed in effect, keyed by section.
    pub fn seeds(&self) -> Vec<(String, u64)> {
        vec![
            ("master".into(), self.seed),
            ("model".into(), self.model.seed),
            ("corpus".into(), self.corpus.seed),
            ("attack".into(), self.attack.seed),
            ("defense".into(), self.defense.seed),
        ]
    }

    /// Parses a config. Sections that omit `seed` get the seed derived from
    /// the top-level `seed` (0 when absent).
    pub fn from_json(text: &str) -> Result<Self> {
        let mut tree: Value = serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        let root = tree.as_object_mut().ok_or_else(|| Error::config("config must be a JSON object"))?;
        let master = match root.get("seed") {
            None => 0,
            Some(v) => v.as_u64().ok_or_else(|| Error::config("seed must be a non-negative integer"))?,
        };
        for section in SEEDED_SECTIONS {
            let entry = root.entry(section).or_insert_with(|| Value::Object(Default::default()));
            if let Some(obj) = entry.as_object_mut() {
                obj.entry("seed").or_insert_with(|| Value::from(Self::section_seed(master, section)));
            }
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        self.attack.validate()?;
        self.defense.validate()?;
        let h = &self.harness;
        if h.batch_size == 0 {
            return Err(Error::config("harness.batch_size must be positive"));
        }
        if h.bench_batches < 20 || h.warmup_batches < 3 {
            return Err(Error::config("bench needs at least 20 timed and 3 warm-up batches"));
        }
        if h.bench_rank == 0 || !(0.0..=1.0).contains(&h.bench_alpha) {
            return Err(Error::config("harness.bench_rank must be positive and bench_alpha in [0, 1]"));
        }
        Ok(())
    }

    /// Applies `section.key=value` overrides in order. Values parse as JSON
    /// when possible and as bare strings otherwise.
    pub fn apply_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) =
                o.split_once('=').ok_or_else(|| Error::config(format!("override `{o}` is not KEY=VALUE")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut tree;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::config(format!("unknown config key `{key}`")))?;
            }
            *slot = value;
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::config(format!("override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::Method;
    use crate::model::LayerId;

    #[test]
    fn defaults_round_trip_through_json() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), c);
        assert_eq!(ExperimentConfig::from_json(r#"{"seed":7}"#).unwrap(), c.clone().with_seed(7));
        let partial = ExperimentConfig::from_json(r#"{"model":{"depth":4},"attack":{"seed":3}}"#).unwrap();
        assert_eq!(partial.model.seed, c.model.seed);
        assert_eq!(partial.model.depth, 4);
        assert_eq!(partial.attack.seed, 3);
        assert!(ExperimentConfig::from_json("[]").is_err());
    }

    #[test]
    fn seeds_fan_out_and_differ() {
        let a = ExperimentConfig::default().with_seed(7);
        let b = ExperimentConfig::default().with_seed(8);
        assert_ne!(a.model.seed, b.model.seed);
        let s: Vec<u64> = a.seeds().into_iter().map(|(_, v)| v).collect();
        let mut uniq = s.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), s.len());
        assert_eq!(a, ExperimentConfig::default().with_seed(7));
    }

    #[test]
    fn dotted_overrides() {
        let c = ExperimentConfig::default()
            .apply_overrides(&[
                "defense.alpha=0.5",
                "defense.method=cp",
                r#"defense.layers=["block2.norm2","final_norm"]"#,
                "corpus.pairs=40",
                "attack.random_start=true",
            ])
            .unwrap();
        assert_eq!(c.defense.alpha, 0.5);
        assert_eq!(c.defense.method, Method::Cp);
        assert_eq!(c.defense.target_layers, vec![LayerId::Norm2(2), LayerId::FinalNorm]);
        assert_eq!(c.corpus.pairs, 40);
        assert!(c.attack.random_start);

        let base = ExperimentConfig::default();
        assert!(base.apply_overrides(&["defense.alpha"]).is_err());
        assert!(base.apply_overrides(&["defense.nope=1"]).is_err());
        assert!(base.apply_overrides(&["defense.alpha=2"]).is_err());
        assert!(base.apply_overrides(&["defense.rank=abc"]).is_err());
    }

    #[test]
    fn unknown_sections_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"extra":{}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"harness":{"bench_batches":5}}"#).is_err());
    }
}
