//! Stage graph, content-addressed artifact directories and stage execution.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use psam_core::data::{
    extract_patches, load_manifest, write_synthetic_dataset, DatasetManifest, Sample, Split,
};
use psam_core::detect::{
    local_maxima, predict_probability, threshold_trimap, train_ndn, voronoi_labels,
};
use psam_core::io;
use psam_core::net::EncoderSpec;
use psam_core::pseudo::pseudo_mask_from_activation;
use psam_core::saliency::{activation_with_encoder, colorize_heatmap, ActivationMap};
use psam_core::segment::{segment, train_nsn};
use psam_core::ssl::pretrain;
use psam_core::{Checkpoint, RasterImage};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{hash_value, PipelineConfig};
use crate::{results, CliError, Result};

/// Name of the run log written last into every finished stage directory.
pub const RUN_LOG: &str = "run.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    SynthData,
    Pretrain,
    Activate,
    Pseudomask,
    TrainNdn,
    Detect,
    Voronoi,
    TrainNsn,
    Segment,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::SynthData,
        Stage::Pretrain,
        Stage::Activate,
        Stage::Pseudomask,
        Stage::TrainNdn,
        Stage::Detect,
        Stage::Voronoi,
        Stage::TrainNsn,
        Stage::Segment,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SynthData => "synth-data",
            Stage::Pretrain => "pretrain",
            Stage::Activate => "activate",
            Stage::Pseudomask => "pseudomask",
            Stage::TrainNdn => "train-ndn",
            Stage::Detect => "detect",
            Stage::Voronoi => "voronoi",
            Stage::TrainNsn => "train-nsn",
            Stage::Segment => "segment",
            Stage::Evaluate => "evaluate",
        }
    }

    /// The stage whose output this one reads first. `pretrain` depends on
    /// `synth-data` only when no dataset root is configured.
    fn upstream(self, synthetic: bool) -> Option<Stage> {
        match self {
            Stage::SynthData => None,
            Stage::Pretrain => synthetic.then_some(Stage::SynthData),
            Stage::Activate => Some(Stage::Pretrain),
            Stage::Pseudomask => Some(Stage::Activate),
            Stage::TrainNdn => Some(Stage::Pseudomask),
            Stage::Detect => Some(Stage::TrainNdn),
            Stage::Voronoi => Some(Stage::Detect),
            Stage::TrainNsn => Some(Stage::Voronoi),
            Stage::Segment => Some(Stage::TrainNsn),
            Stage::Evaluate => Some(Stage::Segment),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown stage `{s}`")))
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLog {
    pub stage: Stage,
    pub key: String,
    pub config_hash: String,
    pub data_key: String,
    pub upstream_key: Option<String>,
    pub seed: u64,
    pub wall_time_secs: f64,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: Stage,
    pub dir: PathBuf,
    pub skipped: bool,
}

/// A training image or patch.
#[derive(Debug, Clone)]
pub struct Item {
    pub stem: String,
    pub image: RasterImage,
}

pub struct Workspace {
    root: PathBuf,
    cfg: PipelineConfig,
    config_hash: String,
    data_key: String,
    keys: BTreeMap<Stage, String>,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, cfg: PipelineConfig) -> Result<Self> {
        let root = root.into();
        let config_hash = hash_value(&cfg);
        let mut ws = Self {
            root,
            cfg,
            config_hash,
            data_key: String::new(),
            keys: BTreeMap::new(),
        };
        ws.data_key = match &ws.cfg.data.root {
            None => ws.stage_key_raw(Stage::SynthData, None),
            Some(dir) => external_data_key(dir)?,
        };
        for stage in Stage::ALL {
            let up = stage.upstream(ws.synthetic()).map(|u| ws.keys[&u].clone());
            let key = ws.stage_key_raw(stage, up);
            ws.keys.insert(stage, key);
        }
        Ok(ws)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn key(&self, stage: Stage) -> &str {
        &self.keys[&stage]
    }

    fn synthetic(&self) -> bool {
        self.cfg.data.root.is_none()
    }

    fn section(&self, stage: Stage) -> serde_json::Value {
        let c = &self.cfg;
        match stage {
            Stage::SynthData => json!(c.data.synth),
            Stage::Pretrain => json!({
                "profile": c.data.profile,
                "patch_size": c.data.patch_size,
                "patch_stride": c.data.patch_stride,
                "encoder": c.ssl.encoder,
                "task": c.ssl.task,
                "train": c.ssl.train,
            }),
            Stage::Activate => json!(c.saliency),
            Stage::Pseudomask => json!(c.pseudo),
            Stage::TrainNdn => json!(c.detect.train),
            Stage::Detect => json!({"threshold": c.detect.threshold, "peaks": c.detect.peaks}),
            Stage::Voronoi => json!(c.detect.voronoi),
            Stage::TrainNsn => json!({"train": c.segment.train, "loss": c.segment.loss}),
            Stage::Segment => json!(c.segment.inference),
            Stage::Evaluate => json!(c.metrics),
        }
    }

    fn seed(&self, stage: Stage) -> u64 {
        let c = &self.cfg;
        match stage {
            Stage::SynthData => c.data.synth.synth.seed,
            Stage::Pretrain => c.ssl.train.seed,
            Stage::Pseudomask => c.pseudo.kmeans.seed,
            Stage::TrainNdn => c.detect.train.seed,
            Stage::TrainNsn => c.segment.train.seed,
            _ => 0,
        }
    }

    fn stage_key_raw(&self, stage: Stage, upstream: Option<String>) -> String {
        let data = if stage == Stage::SynthData {
            None
        } else {
            Some(self.data_key.clone())
        };
        hash_value(&json!({
            "format": 1,
            "stage": stage.name(),
            "upstream": upstream,
            "data": data,
            "config": self.section(stage),
        }))
    }

    /// `<root>/<stage>/<first 16 hex digits of the key>`.
    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name()).join(&self.keys[&stage][..16])
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.dir(stage).join(RUN_LOG).is_file()
    }

    fn require(&self, stage: Stage, upstream: Stage) -> Result<PathBuf> {
        if self.is_done(upstream) {
            Ok(self.dir(upstream))
        } else {
            Err(CliError::MissingUpstream {
                stage: stage.name(),
                upstream: upstream.name(),
            })
        }
    }

    pub fn run_log(&self, stage: Stage) -> Result<RunLog> {
        let text = std::fs::read_to_string(self.dir(stage).join(RUN_LOG))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Stages from the first one up to `target`, in execution order.
    pub fn chain(&self, target: Stage) -> Vec<Stage> {
        let mut out = vec![target];
        while let Some(u) = out.last().and_then(|s| s.upstream(self.synthetic())) {
            out.push(u);
        }
        out.reverse();
        out
    }

    /// Runs every stage up to and including `target`.
    pub fn run_to(&self, target: Stage) -> Result<Vec<StageOutcome>> {
        self.chain(target)
            .into_iter()
            .map(|s| self.run_stage(s))
            .collect()
    }

    /// Runs one stage. Its upstream must already be complete.
    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        let dir = self.dir(stage);
        if self.is_done(stage) {
            log::info!("{stage}: up-to-date ({})", dir.display());
            return Ok(StageOutcome {
                stage,
                dir,
                skipped: true,
            });
        }
        if stage == Stage::SynthData && !self.synthetic() {
            return Err(CliError::Config(
                "synth-data needs `data.root` to be unset".into(),
            ));
        }
        let upstream = stage.upstream(self.synthetic());
        if let Some(u) = upstream {
            self.require(stage, u)?;
        }
        let parent = dir.parent().expect("stage dir has a parent");
        std::fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(
            ".{}.tmp-{}",
            &self.keys[&stage][..16],
            std::process::id()
        ));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        log::info!("{stage}: running");
        let start = Instant::now();
        if let Err(e) = self.execute(stage, &tmp) {
            let _ = std::fs::remove_dir_all(&tmp);
            return Err(e);
        }
        let run = RunLog {
            stage,
            key: self.keys[&stage].clone(),
            config_hash: self.config_hash.clone(),
            data_key: self.data_key.clone(),
            upstream_key: upstream.map(|u| self.keys[&u].clone()),
            seed: self.seed(stage),
            wall_time_secs: start.elapsed().as_secs_f64(),
            config: self.section(stage),
        };
        std::fs::write(tmp.join(RUN_LOG), serde_json::to_string_pretty(&run)?)?;
        if dir.exists() {
            std::fs::remove_dir_all(&tmp)?;
        } else {
            std::fs::rename(&tmp, &dir)?;
        }
        log::info!(
            "{stage}: done in {:.1}s ({})",
            run.wall_time_secs,
            dir.display()
        );
        Ok(StageOutcome {
            stage,
            dir,
            skipped: false,
        })
    }

    pub fn dataset_root(&self, stage: Stage) -> Result<PathBuf> {
        match &self.cfg.data.root {
            Some(r) => Ok(r.clone()),
            None => Ok(self.require(stage, Stage::SynthData)?.join("dataset")),
        }
    }

    pub fn manifest(&self, stage: Stage) -> Result<DatasetManifest> {
        Ok(load_manifest(
            &self.dataset_root(stage)?,
            self.cfg.data.profile,
        )?)
    }

    /// Training split, cut into patches when `data.patch_size` is set.
    pub fn train_items(&self, stage: Stage) -> Result<Vec<Item>> {
        let manifest = self.manifest(stage)?;
        let mut out = Vec::new();
        for entry in manifest.split(Split::Train) {
            let image = io::read_image(&entry.image_path)?;
            match self.cfg.data.patch_size {
                None => out.push(Item {
                    stem: entry.stem.clone(),
                    image,
                }),
                Some(p) => {
                    let stride = self.cfg.data.patch_stride.unwrap_or(p);
                    for patch in extract_patches(&image, p, stride)? {
                        out.push(Item {
                            stem: format!(
                                "{}_r{:05}_c{:05}",
                                entry.stem, patch.offset.0, patch.offset.1
                            ),
                            image: patch.image,
                        });
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(CliError::Runtime(format!(
                "{stage}: the dataset has no training images"
            )));
        }
        Ok(out)
    }

    pub fn test_samples(&self, stage: Stage) -> Result<Vec<Sample>> {
        let manifest = self.manifest(stage)?;
        let samples: Vec<Sample> = manifest
            .split(Split::Test)
            .map(|e| e.load())
            .collect::<Result<_, _>>()?;
        if samples.is_empty() {
            return Err(CliError::Runtime(format!(
                "{stage}: the dataset has no test images"
            )));
        }
        Ok(samples)
    }

    fn execute(&self, stage: Stage, out: &Path) -> Result<()> {
        let c = &self.cfg;
        let key = self.keys[&stage].as_str();
        match stage {
            Stage::SynthData => {
                write_synthetic_dataset(&out.join("dataset"), &c.data.synth)?;
            }
            Stage::Pretrain => {
                let items = self.train_items(stage)?;
                let images: Vec<RasterImage> = items.into_iter().map(|i| i.image).collect();
                let spec = EncoderSpec::from_preset(c.ssl.encoder);
                let ck = pretrain(&images, &c.ssl.task, &spec, &c.ssl.train, key)?;
                ck.save(&out.join("encoder.json"))?;
                ck.write_log_csv(&out.join("loss.csv"))?;
            }
            Stage::Activate => {
                let ck =
                    Checkpoint::load(&self.require(stage, Stage::Pretrain)?.join("encoder.json"))?;
                let mut enc = ck.build_encoder()?;
                mkdirs(out, &["maps", "previews"])?;
                for item in self.train_items(stage)? {
                    let map = activation_with_encoder(
                        &mut enc,
                        &item.image,
                        c.saliency.selector(),
                        c.saliency.scalar,
                    )?;
                    io::write_map16(
                        &out.join("maps").join(png(&item.stem)),
                        map.normalized_values(),
                    )?;
                    io::write_image(
                        &out.join("previews").join(png(&item.stem)),
                        &colorize_heatmap(&map),
                    )?;
                }
            }
            Stage::Pseudomask => {
                let maps = self.require(stage, Stage::Activate)?.join("maps");
                mkdirs(out, &["masks"])?;
                for item in self.train_items(stage)? {
                    let map = ActivationMap::new(io::read_map16(&maps.join(png(&item.stem)))?)?;
                    let mask = pseudo_mask_from_activation(&map, &item.image, &c.pseudo)?;
                    io::write_tristate(&out.join("masks").join(png(&item.stem)), &mask)?;
                }
            }
            Stage::TrainNdn => {
                let masks_dir = self.require(stage, Stage::Pseudomask)?.join("masks");
                let items = self.train_items(stage)?;
                let masks = items
                    .iter()
                    .map(|i| io::read_tristate(&masks_dir.join(png(&i.stem))))
                    .collect::<Result<Vec<_>, _>>()?;
                let images: Vec<RasterImage> = items.into_iter().map(|i| i.image).collect();
                let ck = train_ndn(&images, &masks, &c.detect.train, key)?;
                ck.save(&out.join("ndn.json"))?;
                ck.write_log_csv(&out.join("loss.csv"))?;
            }
            Stage::Detect => {
                let ck = Checkpoint::load(&self.require(stage, Stage::TrainNdn)?.join("ndn.json"))?;
                let mut net = ck.build_unet()?;
                mkdirs(
                    out,
                    &[
                        "train/prob",
                        "train/trimap",
                        "train/points",
                        "test/prob",
                        "test/points",
                    ],
                )?;
                for item in self.train_items(stage)? {
                    let prob = predict_probability(&mut net, &item.image)?;
                    io::write_map16(&out.join("train/prob").join(png(&item.stem)), prob.values())?;
                    io::write_tristate(
                        &out.join("train/trimap").join(png(&item.stem)),
                        &threshold_trimap(&prob, &c.detect.threshold),
                    )?;
                    io::write_points(
                        &out.join("train/points").join(csv(&item.stem)),
                        &local_maxima(&prob, &c.detect.peaks)?,
                    )?;
                }
                for sample in self.test_samples(stage)? {
                    let prob = predict_probability(&mut net, &sample.image)?;
                    io::write_map16(
                        &out.join("test/prob").join(png(&sample.stem)),
                        prob.values(),
                    )?;
                    io::write_points(
                        &out.join("test/points").join(csv(&sample.stem)),
                        &local_maxima(&prob, &c.detect.peaks)?,
                    )?;
                }
            }
            Stage::Voronoi => {
                let points = self.require(stage, Stage::Detect)?.join("train/points");
                mkdirs(out, &["labels"])?;
                for item in self.train_items(stage)? {
                    let dims = item.image.dims();
                    let pts = io::read_points(&points.join(csv(&item.stem)), dims)?;
                    let labels = if pts.is_empty() {
                        // Nothing detected: no instance supervision for this image.
                        psam_core::TriStateMask::filled(dims, psam_core::TriState::Ignore)
                    } else {
                        voronoi_labels(&pts, dims, &c.detect.voronoi)?
                    };
                    io::write_tristate(&out.join("labels").join(png(&item.stem)), &labels)?;
                }
            }
            Stage::TrainNsn => {
                let labels = self.require(stage, Stage::Voronoi)?.join("labels");
                let trimaps = self.require(stage, Stage::Detect)?.join("train/trimap");
                let items = self.train_items(stage)?;
                let vor = items
                    .iter()
                    .map(|i| io::read_tristate(&labels.join(png(&i.stem))))
                    .collect::<Result<Vec<_>, _>>()?;
                let tri = items
                    .iter()
                    .map(|i| io::read_tristate(&trimaps.join(png(&i.stem))))
                    .collect::<Result<Vec<_>, _>>()?;
                let images: Vec<RasterImage> = items.into_iter().map(|i| i.image).collect();
                let ck = train_nsn(&images, &vor, &tri, &c.segment.train, &c.segment.loss, key)?;
                ck.save(&out.join("nsn.json"))?;
                ck.write_log_csv(&out.join("loss.csv"))?;
            }
            Stage::Segment => {
                let ck = Checkpoint::load(&self.require(stage, Stage::TrainNsn)?.join("nsn.json"))?;
                let mut net = ck.build_unet()?;
                mkdirs(out, &["masks", "instances"])?;
                for sample in self.test_samples(stage)? {
                    let (mask, inst) = segment(&mut net, &sample.image, &c.segment.inference)?;
                    io::write_binary(&out.join("masks").join(png(&sample.stem)), &mask)?;
                    io::write_instance_map(&out.join("instances").join(png(&sample.stem)), &inst)?;
                }
            }
            Stage::Evaluate => {
                let seg_dir = self.require(stage, Stage::Segment)?;
                let det_dir = self.require(stage, Stage::Detect)?;
                for upstream in [Stage::Segment, Stage::Detect] {
                    let log = self.run_log(upstream)?;
                    if log.data_key != self.data_key {
                        return Err(CliError::Runtime(format!(
                            "evaluate: `{upstream}` output was produced for dataset {} but the current dataset is {}",
                            &log.data_key[..16],
                            &self.data_key[..16]
                        )));
                    }
                }
                let samples = self.test_samples(stage)?;
                let rows = results::evaluate(
                    &samples,
                    &seg_dir,
                    &det_dir,
                    c.metrics.match_radius,
                    &self.config_hash,
                )?;
                results::write_results(&out.join(results::RESULTS_CSV), &rows)?;
            }
        }
        Ok(())
    }
}

fn png(stem: &str) -> String {
    format!("{stem}.png")
}

fn csv(stem: &str) -> String {
    format!("{stem}.csv")
}

fn mkdirs(root: &Path, subs: &[&str]) -> Result<()> {
    for s in subs {
        std::fs::create_dir_all(root.join(s))?;
    }
    Ok(())
}

/// Identity of an external dataset: relative paths and sizes of every file.
fn external_data_key(root: &Path) -> Result<String> {
    if !root.is_dir() {
        return Err(CliError::Config(format!(
            "data.root {} is not a directory",
            root.display()
        )));
    }
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let entry = entry?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap_or(&path)
                    .to_string_lossy()
                    .replace('\\', "/");
                files.push((rel, entry.metadata()?.len()));
            }
        }
    }
    files.sort();
    Ok(hash_value(&files))
}
