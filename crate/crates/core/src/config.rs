//! Run configuration: one nested structure covering every stage, loadable
//! from TOML with dotted-path overrides. Unknown keys are rejected with
//! the full list of offenders, and the resolved value hashes stably for
//! provenance manifests.

use serde::{Deserialize, Serialize};

use crate::dpo::{DpoHyper, SampleConfig, Strategy};
use crate::model::ComeConfig;
use crate::reward::RewardConfig;
use crate::synthgui::Difficulty;
use crate::tensor::{Error, Result};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub episodes: usize,
    pub difficulty: Difficulty,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ComeConfig,
    /// Scorer model dimensions (dense; usually smaller than the policy).
    pub rm_model: ComeConfig,
    pub pretrain: TrainConfig,
    pub expert_ft: TrainConfig,
    pub router_ft: TrainConfig,
    pub cot_ft: TrainConfig,
    pub rm_ft: TrainConfig,
    pub dpo_ft: TrainConfig,
    pub reward: RewardConfig,
    pub sample: SampleConfig,
    pub dpo: DpoHyper,
    pub strategies: Vec<Strategy>,
}

impl Default for RunConfig {
    fn default() -> Self {
        // vocab_size 0 is patched to the real vocabulary size at load time
        let mut model = ComeConfig::desk(0);
        model.max_seq = 224;
        // scorers share the policy trunk dimensions (dense, single FFN)
        let rm_model = ComeConfig {
            experts: 1,
            ..model.clone()
        };
        RunConfig {
            seed: 17,
            data: DataConfig {
                episodes: 400,
                difficulty: Difficulty::Medium,
            },
            model,
            rm_model,
            pretrain: TrainConfig {
                peak_lr: 3e-3,
                epochs: 2,
                batch_size: 8,
                gamma: 0.0,
                seed: 9,
            },
            expert_ft: TrainConfig {
                peak_lr: 2e-3,
                epochs: 1,
                batch_size: 8,
                gamma: 0.0,
                seed: 1,
            },
            router_ft: TrainConfig {
                peak_lr: 5e-2,
                epochs: 60,
                batch_size: 8,
                gamma: 0.0,
                seed: 2,
            },
            cot_ft: TrainConfig {
                peak_lr: 2e-3,
                epochs: 2,
                batch_size: 8,
                gamma: 0.1,
                seed: 3,
            },
            rm_ft: TrainConfig {
                peak_lr: 2e-3,
                epochs: 2,
                batch_size: 8,
                gamma: 0.0,
                seed: 4,
            },
            dpo_ft: TrainConfig {
                peak_lr: 5e-4,
                epochs: 1,
                batch_size: 4,
                gamma: 0.1,
                seed: 5,
            },
            reward: RewardConfig::default(),
            sample: SampleConfig::default(),
            dpo: DpoHyper::default(),
            strategies: vec![Strategy::Cc, Strategy::Cw],
        }
    }
}

impl RunConfig {
    /// Fill vocabulary-dependent fields after the vocabulary is built.
    pub fn with_vocab_size(mut self, v: usize) -> Self {
        if self.model.vocab_size == 0 {
            self.model.vocab_size = v;
        }
        if self.rm_model.vocab_size == 0 {
            self.rm_model.vocab_size = v;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.rm_model.validate()?;
        if self.cot_ft.gamma < 0.0 || self.dpo.gamma < 0.0 {
            return Err(Error::InvalidArgument("negative regularizer weight".into()));
        }
        if self.sample.k < 2 {
            return Err(Error::InvalidArgument("sample.k must be at least 2".into()));
        }
        Ok(())
    }

    /// Stable content hash of the resolved configuration (FNV-1a over the
    /// canonical JSON encoding).
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Keys present in `user` but absent from `reference`, as dotted paths.
fn unknown_keys(user: &toml::Value, reference: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    if let (toml::Value::Table(ut), toml::Value::Table(rt)) = (user, reference) {
        for (k, v) in ut {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match rt.get(k) {
                None => out.push(path),
                Some(rv) => unknown_keys(v, rv, &path, out),
            }
        }
    }
}

fn reference_table() -> toml::Value {
    toml::Value::try_from(RunConfig::default()).expect("default config converts")
}

/// Parse a TOML file (all keys optional, layered over defaults) plus
/// repeatable `key=value` overrides. Every invalid key is reported.
pub fn load_config(
    file: Option<&str>,
    overrides: &[String],
    vocab_size: usize,
) -> Result<RunConfig> {
    let reference = reference_table();
    let mut merged = reference.clone();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("config {path}: {e}")))?;
        let user: toml::Value = text
            .parse()
            .map_err(|e| Error::Parse(format!("config {path}: {e}")))?;
        let mut bad = Vec::new();
        unknown_keys(&user, &reference, "", &mut bad);
        if !bad.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "unknown config keys: {}",
                bad.join(", ")
            )));
        }
        merge_into(&mut merged, &user);
    }
    let mut bad = Vec::new();
    for ov in overrides {
        match apply_override(&mut merged, &reference, ov) {
            Ok(()) => {}
            Err(e) => bad.push(format!("{ov} ({e})")),
        }
    }
    if !bad.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "invalid overrides: {}",
            bad.join("; ")
        )));
    }
    let cfg: RunConfig = merged
        .try_into()
        .map_err(|e| Error::Parse(format!("config: {e}")))?;
    let cfg = cfg.with_vocab_size(vocab_size);
    cfg.validate()?;
    Ok(cfg)
}

fn merge_into(base: &mut toml::Value, user: &toml::Value) {
    match (base, user) {
        (toml::Value::Table(bt), toml::Value::Table(ut)) => {
            for (k, v) in ut {
                match bt.get_mut(k) {
                    Some(bv) if bv.is_table() && v.is_table() => merge_into(bv, v),
                    Some(bv) => *bv = v.clone(),
                    None => {
                        bt.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, u) => *b = u.clone(),
    }
}

fn apply_override(
    merged: &mut toml::Value,
    reference: &toml::Value,
    spec: &str,
) -> std::result::Result<(), String> {
    let (path, raw) = spec.split_once('=').ok_or("expected key=value")?;
    let parts: Vec<&str> = path.split('.').collect();
    // the key must exist in the reference tree
    let mut ref_cursor = reference;
    for p in &parts {
        ref_cursor = ref_cursor
            .get(p)
            .ok_or_else(|| format!("unknown key {path}"))?;
    }
    let new_value: toml::Value = match ref_cursor {
        toml::Value::Integer(_) => toml::Value::Integer(raw.parse().map_err(|_| "not an integer")?),
        toml::Value::Float(_) => toml::Value::Float(raw.parse().map_err(|_| "not a number")?),
        toml::Value::Boolean(_) => toml::Value::Boolean(raw.parse().map_err(|_| "not a bool")?),
        toml::Value::String(_) => toml::Value::String(raw.to_string()),
        toml::Value::Array(_) => {
            let items: Vec<toml::Value> = raw
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| toml::Value::String(s.trim().to_string()))
                .collect();
            toml::Value::Array(items)
        }
        _ => return Err("unsupported override target".into()),
    };
    let mut cursor = merged;
    for p in &parts[..parts.len() - 1] {
        cursor = cursor.get_mut(p).ok_or("missing table")?;
    }
    match cursor {
        toml::Value::Table(t) => {
            t.insert(parts.last().unwrap().to_string(), new_value);
            Ok(())
        }
        _ => Err("not a table".into()),
    }
}
