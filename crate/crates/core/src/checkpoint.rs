//! Self-describing model checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use psam_nn::{load_state_dict, StateDict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::net::{Encoder, EncoderSpec, ResUnet, UnetSpec};
use crate::ssl::ProxyTaskKind;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Model topology stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    Encoder {
        spec: EncoderSpec,
        task: ProxyTaskKind,
    },
    Detection {
        spec: UnetSpec,
    },
    Segmentation {
        spec: UnetSpec,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelKind,
    /// Encoder weights live under `encoder.`, task heads under `head.`;
    /// U-Net checkpoints use unprefixed names.
    pub state: StateDict,
    pub config_hash: String,
    pub seed: u64,
    pub log: Vec<EpochLoss>,
}

impl Checkpoint {
    pub fn new(
        model: ModelKind,
        state: StateDict,
        config_hash: impl Into<String>,
        seed: u64,
        log: Vec<EpochLoss>,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model,
            state,
            config_hash: config_hash.into(),
            seed,
            log,
        }
    }

    /// Writes JSON through a temporary sibling file and renames it into
    /// place, so readers never observe a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            serde_json::to_writer(&mut f, self)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Self = serde_json::from_reader(std::io::BufReader::new(fs::File::open(path)?))?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "{}: unsupported checkpoint format {}",
                path.display(),
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    /// Training log as CSV `epoch,loss`.
    pub fn write_log_csv(&self, path: &Path) -> Result<()> {
        write_loss_log(path, &self.log)
    }

    /// Parameters whose names start with `prefix.`, with the prefix removed.
    pub fn sub_state(&self, prefix: &str) -> StateDict {
        let p = format!("{prefix}.");
        self.state
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn build_encoder(&self) -> Result<Encoder> {
        let ModelKind::Encoder { spec, .. } = &self.model else {
            return Err(Error::InvalidInput(
                "checkpoint does not hold an encoder".into(),
            ));
        };
        let mut enc = Encoder::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        load_state_dict(&mut enc, &self.sub_state("encoder"))?;
        Ok(enc)
    }

    pub fn build_unet(&self) -> Result<ResUnet> {
        let spec = match &self.model {
            ModelKind::Detection { spec } | ModelKind::Segmentation { spec } => spec,
            ModelKind::Encoder { .. } => {
                return Err(Error::InvalidInput(
                    "checkpoint holds an encoder, not a U-Net".into(),
                ))
            }
        };
        let mut net = ResUnet::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        load_state_dict(&mut net, &self.state)?;
        Ok(net)
    }
}

pub fn write_loss_log(path: &Path, log: &[EpochLoss]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["epoch", "loss"])?;
    for e in log {
        wtr.write_record([e.epoch.to_string(), e.loss.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{BackbonePreset, EncoderSpec};
    use psam_nn::state_dict;

    #[test]
    fn unet_round_trip() {
        let spec = UnetSpec::from_preset(BackbonePreset::Compact);
        let mut net = ResUnet::new(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let state = state_dict(&mut net);
        let ckpt = Checkpoint::new(
            ModelKind::Detection { spec },
            state.clone(),
            "abc",
            5,
            vec![EpochLoss {
                epoch: 1,
                loss: 0.25,
            }],
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ndn.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        let mut rebuilt = back.build_unet().unwrap();
        assert_eq!(state_dict(&mut rebuilt), state);
        assert!(back.build_encoder().is_err());

        let log = dir.path().join("log.csv");
        back.write_log_csv(&log).unwrap();
        assert_eq!(fs::read_to_string(log).unwrap(), "epoch,loss\n1,0.25\n");
    }

    #[test]
    fn encoder_state_is_prefixed() {
        let spec = EncoderSpec::compact();
        let mut enc = Encoder::new(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let state: StateDict = state_dict(&mut enc)
            .into_iter()
            .map(|(k, v)| (format!("encoder.{k}"), v))
            .collect();
        let ckpt = Checkpoint::new(
            ModelKind::Encoder {
                spec,
                task: ProxyTaskKind::Similarity,
            },
            state,
            "h",
            1,
            vec![],
        );
        let mut rebuilt = ckpt.build_encoder().unwrap();
        assert_eq!(state_dict(&mut rebuilt), state_dict(&mut enc));
    }
}
