//! Layered run configuration: a TOML file, then `section.key=value`
//! overrides from the command line, then `CROSSFUSION_`-prefixed environment
//! variables. Sections are joined to keys with a double underscore, so
//! `CROSSFUSION_TRAIN__STAGE1_EPOCHS=2` sets `train.stage1_epochs`.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scene_synth::SynthConfig;
use crate::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "CROSSFUSION_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// The last `val_scenes` generated scenes form the validation split.
    pub val_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { val_scenes: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct EvalConfig {
    /// Seed of the point-dropping corruption streams.
    pub corruption_seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// SHA-256 of the canonical JSON form of `value`, hex encoded. Object keys
/// are sorted, so the digest does not depend on field order.
pub fn fingerprint_of<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    let digest = Sha256::digest(serde_json::to_vec(&canonical)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn parse_scalar(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Table, path: &[&str], value: toml::Value) -> Result<()> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut table = root;
    for key in parents {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path crosses non-table key {key}")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Builds the configuration from an optional file, `key=value`
    /// overrides and `(name, value)` environment pairs, in that order of
    /// increasing precedence. Unknown keys are errors.
    pub fn layered(
        file: Option<&str>,
        overrides: &[String],
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut table: toml::Table = match file {
            Some(text) => toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            set_path(&mut table, &path, parse_scalar(raw.trim()))?;
        }
        let mut env: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        env.sort();
        for (k, raw) in env {
            let key = k[ENV_PREFIX.len()..].to_ascii_lowercase();
            let path: Vec<&str> = key.split("__").collect();
            set_path(&mut table, &path, parse_scalar(&raw))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if any) and layers the overrides and the process
    /// environment on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::layered(text.as_deref(), overrides, std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let rig = &self.synth.rig;
        if rig.cameras != self.model.cameras
            || rig.image_width != self.model.image_width
            || rig.image_height != self.model.image_height
        {
            return Err(Error::Config(
                "model camera count and image size must match the synthetic rig".into(),
            ));
        }
        if self.synth.classes.len() != self.model.num_classes {
            return Err(Error::Config(format!(
                "model has {} classes, synth defines {}",
                self.model.num_classes,
                self.synth.classes.len()
            )));
        }
        if self.data.val_scenes == 0 {
            return Err(Error::Config("val_scenes must be at least 1".into()));
        }
        Ok(())
    }

    /// Train and validation index ranges of a dataset with `n` scenes.
    pub fn split(&self, n: usize) -> Result<(Range<usize>, Range<usize>)> {
        if self.data.val_scenes >= n {
            return Err(Error::Config(format!(
                "val_scenes = {} leaves no training scenes in a dataset of {n}",
                self.data.val_scenes
            )));
        }
        let cut = n - self.data.val_scenes;
        Ok((0..cut, cut..n))
    }

    pub fn class_names(&self) -> Vec<String> {
        self.synth.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Digest of the whole configuration.
    pub fn fingerprint(&self) -> Result<String> {
        fingerprint_of(self)
    }

    /// Digest of the data-generating part only.
    pub fn data_fingerprint(&self) -> Result<String> {
        fingerprint_of(&self.synth)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn none() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn empty_input_gives_defaults() {
        let cfg = RunConfig::layered(None, &[], none()).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.split(cfg.synth.n_scenes).unwrap(), (0..500, 500..600));
        assert!(cfg.split(100).is_err());
    }

    #[test]
    fn precedence_is_file_then_flags_then_env() {
        let file = "[train]\nseed = 1\nstage1_epochs = 3\n[fusion_unused]\n";
        assert!(RunConfig::layered(Some(file), &[], none()).is_err());
        let file = "[train]\nseed = 1\nstage1_epochs = 3\n";
        let cfg = RunConfig::layered(Some(file), &["train.seed=2".into()], none()).unwrap();
        assert_eq!((cfg.train.seed, cfg.train.stage1_epochs), (2, 3));
        let env = vec![
            ("CROSSFUSION_TRAIN__SEED".to_string(), "9".to_string()),
            ("CROSSFUSION_MODEL__FUSION__ORDER".to_string(), "(LC)2".to_string()),
            ("HOME".to_string(), "/x".to_string()),
        ];
        let cfg = RunConfig::layered(Some(file), &["train.seed=2".into()], env).unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.model.fusion.order, "(LC)2");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::layered(None, &["train.sed=2".into()], none()).is_err());
        assert!(RunConfig::layered(None, &["train.seed".into()], none()).is_err());
        let env = vec![("CROSSFUSION_NOPE".to_string(), "1".to_string())];
        assert!(RunConfig::layered(None, &[], env).is_err());
        assert!(RunConfig::layered(None, &["model.num_classes=2".into()], none()).is_err());
        assert!(RunConfig::layered(None, &["train.stage1_epochs=0".into()], none()).is_err());
    }

    #[test]
    fn fingerprint_ignores_key_order() {
        let a = "[train]\nseed = 4\nbatch_size = 2\n[model]\nd = 16\n";
        let b = "[model]\nd = 16\n[train]\nbatch_size = 2\nseed = 4\n";
        let fa = RunConfig::layered(Some(a), &[], none()).unwrap().fingerprint().unwrap();
        let fb = RunConfig::layered(Some(b), &[], none()).unwrap().fingerprint().unwrap();
        assert_eq!(fa, fb);
        assert_eq!(fa.len(), 64);
        assert_ne!(fa, RunConfig::default().fingerprint().unwrap());
        let shuffled = serde_json::json!({"b": 1, "a": [1, 2]});
        let sorted = serde_json::json!({"a": [1, 2], "b": 1});
        assert_eq!(fingerprint_of(&shuffled).unwrap(), fingerprint_of(&sorted).unwrap());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::layered(Some(&text), &[], none()).unwrap(), cfg);
    }
}
