//! Run configuration: built-in profile defaults, then a JSON file of flat
//! dotted keys (`"train.epochs": 50`), then command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use retinex_gan::{DecompSpec, DecompTrainConfig, Error, TrainConfig, VariantId};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub paired_dir: Option<PathBuf>,
    pub low_dir: Option<PathBuf>,
    pub high_dir: Option<PathBuf>,
    pub decomp_ckpt: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    /// `paper` (full-size networks) or `desk` (reduced networks on 32 px images).
    pub profile: String,
    pub variant: VariantId,
    pub data: DataPaths,
    pub decomp: DecompSpec,
    pub decomp_train: DecompTrainConfig,
    pub train: TrainConfig,
}

impl CliConfig {
    pub fn for_profile(profile: &str) -> Result<Self, Error> {
        let base = |decomp, decomp_train, train| Self {
            profile: profile.to_string(),
            variant: VariantId::RetinexCyclegan,
            data: DataPaths::default(),
            decomp,
            decomp_train,
            train,
        };
        match profile {
            "paper" => Ok(base(DecompSpec::default(), DecompTrainConfig::default(), TrainConfig::default())),
            "desk" => Ok(base(
                DecompSpec {
                    width: 16,
                    hidden_layers: 3,
                    input_kernel: 9,
                },
                DecompTrainConfig {
                    patch_count: 8,
                    patch_size: 32,
                    ..DecompTrainConfig::default()
                },
                TrainConfig {
                    epochs: 50,
                    batch_size: 4,
                    ..TrainConfig::desk()
                },
            )),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected paper or desk)"))),
        }
    }

    /// Defaults of the chosen profile, then `file`, then `overrides`, all as dotted keys.
    /// The profile itself may come from either source; overrides win.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, Error> {
        let from_file = match file {
            Some(p) => read_flat(p)?,
            None => Map::new(),
        };
        let profile = overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "profile")
            .map(|(_, v)| v.clone())
            .or_else(|| from_file.get("profile").cloned())
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(Error::Config(format!("profile must be a string, got {other}"))),
            })
            .transpose()?
            .unwrap_or_else(|| "paper".to_string());
        let mut tree = serde_json::to_value(Self::for_profile(&profile)?).expect("config serializes");
        for (k, v) in from_file.iter().map(|(k, v)| (k.clone(), v.clone())).chain(overrides.iter().cloned()) {
            set_dotted(&mut tree, &k, v)?;
        }
        let cfg: Self =
            serde_json::from_value(tree).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Flat dotted-key form; feeding it back through `resolve` reproduces `self`.
    pub fn to_flat_json(&self) -> String {
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut flat);
        serde_json::to_string_pretty(&flat).expect("map serializes")
    }
}

fn read_flat(path: &Path) -> Result<Map<String, Value>, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::Config(format!("{} must hold a JSON object", path.display()))),
        Err(e) => Err(Error::Config(format!("{} is not valid JSON: {e}", path.display()))),
    }
}

fn set_dotted(tree: &mut Value, key: &str, value: Value) -> Result<(), Error> {
    let mut cur = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split yields at least one part")
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Parses `key=value`; the value is JSON when it parses as JSON, else a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}
