//! Run configuration: one JSON document covering every stage, with dotted-key overrides.

use std::path::{Path, PathBuf};

use atlasseg_core::dataio::{CropSpec, SynthConfig};
use atlasseg_core::evalstats::Hd95Mode;
use atlasseg_core::trainer::{DirectConfig, TrainConfig};
use atlasseg_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub hd95_mode: Hd95Mode,
    /// Surface sampling step as a fraction of the smallest voxel size.
    pub sample_spacing_voxels: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { hd95_mode: Hd95Mode::Pooled, sample_spacing_voxels: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub atlas: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    /// Crop box in atlas space; `null` keeps the full atlas grid.
    pub crop: Option<CropSpec>,
    pub train: TrainConfig,
    pub direct: DirectConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Applies `key=value` overrides. Keys are dotted paths; values are parsed as JSON
    /// and fall back to plain strings.
    pub fn with_overrides(self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self);
        }
        let mut doc = serde_json::to_value(&self)?;
        let mut created = Vec::new();
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("override {s:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value, &mut created)?;
        }
        serde_json::from_value(doc).map_err(|e| Error::InvalidArgument(format!("config override: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.direct.weights.validate()?;
        self.direct.optimizer.validate()?;
        if !(self.eval.sample_spacing_voxels > 0.0 && self.eval.sample_spacing_voxels.is_finite()) {
            return Err(Error::InvalidArgument("eval.sample_spacing_voxels must be positive".into()));
        }
        Ok(())
    }
}

/// `created` holds sections that were `null` before an earlier override filled them; keys
/// inside them are checked when the document is deserialized.
fn set_path(doc: &mut Value, key: &str, value: Value, created: &mut Vec<String>) -> Result<()> {
    let unknown = || Error::InvalidArgument(format!("unknown config key {key:?}"));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    let mut open = false;
    for (i, part) in parts.iter().enumerate() {
        let prefix = parts[..i].join(".");
        if cur.is_null() {
            *cur = Value::Object(Default::default());
            created.push(prefix.clone());
        }
        open |= created.contains(&prefix);
        let obj = cur.as_object_mut().ok_or_else(unknown)?;
        if !open && !obj.contains_key(*part) {
            return Err(unknown());
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Every leaf key of the default configuration with its default value.
pub fn key_listing() -> String {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&p, child, out);
                }
            }
            _ => out.push(format!("  {prefix} = {v}")),
        }
    }
    let doc = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut lines = Vec::new();
    walk("", &doc, &mut lines);
    format!(
        "Config keys (set in --config JSON or with --set key=value):\n{}\n  crop is null or {{\"dims\": [x, y, z], \"spacing\": [sx, sy, sz]}}",
        lines.join("\n")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_and_load_round_trip() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_apply_and_reject_unknown_keys() {
        let c = RunConfig::default()
            .with_overrides(&["train.epochs=7".into(), "train.variant=vxm".into(), "crop.dims=[16,16,16]".into(), "crop.spacing=[1,1,1]".into()])
            .unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.variant.name(), "vxm");
        assert_eq!(c.crop.unwrap().dims, [16, 16, 16]);
        assert!(RunConfig::default().with_overrides(&["train.epoch=7".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["nonsense".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["crop.size=3".into()]).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn listing_names_nested_keys() {
        let l = key_listing();
        for k in ["train.optimizer.lr", "train.network.base_channels", "synth.noise_std", "direct.iterations", "train.t_lower_mm", "crop"] {
            assert!(l.contains(&format!("  {k} = ")), "{k}");
        }
    }
}
