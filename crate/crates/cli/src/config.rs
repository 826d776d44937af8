//! Pipeline configuration: one TOML document with a section per stage group.
//!
//! Unknown keys are rejected at every level. Overrides use dotted paths,
//! `--set pseudo.beta=4.0`; the right-hand side is parsed as a TOML value and
//! falls back to a plain string.

use std::path::{Path, PathBuf};

use psam_core::data::{DatasetProfile, SynthDatasetConfig};
use psam_core::detect::{PeakConfig, SegTrainConfig, ThresholdConfig, VoronoiConfig};
use psam_core::net::EncoderPreset;
use psam_core::pseudo::PseudoConfig;
use psam_core::saliency::SaliencyConfig;
use psam_core::segment::{JointLossConfig, SegmentConfig};
use psam_core::ssl::{PretrainConfig, ProxyTask};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory. When absent the `synth-data` stage output is used.
    pub root: Option<PathBuf>,
    pub profile: DatasetProfile,
    /// Cut training images into square patches of this size.
    pub patch_size: Option<usize>,
    /// Patch stride; defaults to `patch_size`.
    pub patch_stride: Option<usize>,
    pub synth: SynthDatasetConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: None,
            profile: DatasetProfile::Synthetic,
            patch_size: None,
            patch_stride: None,
            synth: SynthDatasetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslSection {
    pub encoder: EncoderPreset,
    pub task: ProxyTask,
    pub train: PretrainConfig,
}

impl Default for SslSection {
    fn default() -> Self {
        Self {
            encoder: EncoderPreset::Compact,
            task: ProxyTask::default(),
            train: PretrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub train: SegTrainConfig,
    pub threshold: ThresholdConfig,
    pub peaks: PeakConfig,
    pub voronoi: VoronoiConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentSection {
    pub train: SegTrainConfig,
    pub loss: JointLossConfig,
    pub inference: SegmentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Point-matching radius in pixels.
    pub match_radius: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { match_radius: 5.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataSection,
    pub ssl: SslSection,
    pub saliency: SaliencyConfig,
    pub pseudo: PseudoConfig,
    pub detect: DetectSection,
    pub segment: SegmentSection,
    pub metrics: MetricsSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Loads `path` (or the defaults) and applies `key=value` overrides.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(e.to_string()))?
            }
            None => toml::Table::try_from(Self::default())
                .map_err(|e| CliError::Config(e.to_string()))?,
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = doc
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A copy with one `key=value` override applied.
    pub fn with_override(&self, assignment: &str) -> Result<Self, CliError> {
        let mut doc = toml::Table::try_from(self).map_err(|e| CliError::Config(e.to_string()))?;
        apply_override(&mut doc, assignment)?;
        let cfg: Self = doc
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.detect
            .threshold
            .validate()
            .or_else(|e| bad(e.to_string()))?;
        self.segment
            .loss
            .validate()
            .or_else(|e| bad(e.to_string()))?;
        self.data
            .synth
            .synth
            .validate()
            .or_else(|e| bad(e.to_string()))?;
        if !(self.pseudo.beta.is_finite() && self.pseudo.beta >= 0.0) {
            return bad(format!(
                "pseudo.beta must be finite and >= 0, got {}",
                self.pseudo.beta
            ));
        }
        if self.pseudo.kmeans.k != 3 {
            return bad(format!(
                "pseudo.kmeans.k must be 3, got {}",
                self.pseudo.kmeans.k
            ));
        }
        if self.saliency.layer == 0 {
            return bad("saliency.layer is 1-based".into());
        }
        if !(self.metrics.match_radius > 0.0) {
            return bad(format!(
                "metrics.match_radius must be > 0, got {}",
                self.metrics.match_radius
            ));
        }
        if self.detect.peaks.radius == 0 {
            return bad("detect.peaks.radius must be >= 1".into());
        }
        for (name, t) in [
            ("detect.train", &self.detect.train),
            ("segment.train", &self.segment.train),
        ] {
            if t.epochs > 0 && !(t.learning_rate > 0.0) {
                return bad(format!("{name}.learning_rate must be > 0"));
            }
            if t.batch_size == 0 {
                return bad(format!("{name}.batch_size must be >= 1"));
            }
        }
        if self.ssl.train.batch_size == 0 {
            return bad("ssl.train.batch_size must be >= 1".into());
        }
        if let (Some(p), Some(s)) = (self.data.patch_size, self.data.patch_stride) {
            if p == 0 || s == 0 {
                return bad("data.patch_size and data.patch_stride must be positive".into());
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| {
        CliError::Config(format!(
            "override `{assignment}` is not of the form key=value"
        ))
    })?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!(
            "override key `{path}` is malformed"
        )));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty key path");
    let mut table = doc;
    for k in parents {
        table = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                CliError::Config(format!("override `{path}`: `{k}` is not a section"))
            })?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// SHA-256 over a canonical JSON rendering, hex encoded.
pub fn hash_value<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_value(value).expect("hashable value");
    let mut h = Sha256::new();
    h.update(canonical(&json).as_bytes());
    hex::encode(h.finalize())
}

fn canonical(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Object(map) => {
            let mut keys: Vec<_> = map.keys().collect();
            keys.sort();
            let parts: Vec<String> = keys
                .into_iter()
                .map(|k| {
                    format!(
                        "{}:{}",
                        serde_json::to_string(k).unwrap(),
                        canonical(&map[k])
                    )
                })
                .collect();
            format!("{{{}}}", parts.join(","))
        }
        serde_json::Value::Array(items) => {
            format!(
                "[{}]",
                items.iter().map(canonical).collect::<Vec<_>>().join(",")
            )
        }
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml("[pseudo]\nbetta = 2.0\n").is_err());
        assert!(PipelineConfig::from_toml("[nonsense]\n").is_err());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = PipelineConfig::resolve(
            None,
            &[
                "pseudo.beta=4.0".into(),
                "segment.loss.mode=pixel-only".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.pseudo.beta, 4.0);
        assert_eq!(
            cfg.segment.loss.mode,
            psam_core::segment::LossMode::PixelOnly
        );
        assert!(PipelineConfig::resolve(None, &["pseudo.beta=-1".into()]).is_err());
        assert!(PipelineConfig::resolve(None, &["pseudo.nope=1".into()]).is_err());
        assert!(PipelineConfig::resolve(None, &["pseudo.beta".into()]).is_err());
    }

    #[test]
    fn hash_ignores_key_order_and_tracks_values() {
        let a = serde_json::json!({"x": 1, "y": {"b": 2, "a": 3}});
        let b = serde_json::json!({"y": {"a": 3, "b": 2}, "x": 1});
        assert_eq!(hash_value(&a), hash_value(&b));
        let c = serde_json::json!({"x": 2, "y": {"b": 2, "a": 3}});
        assert_ne!(hash_value(&a), hash_value(&c));
    }
}
