//! Segmentation stage: a residual U-Net trained under the joint
//! Voronoi / background loss, then binarized and split into instances.
//!
//! ```text
//! L = lambda * mean_{vor != -1} BCE(p, vor) + mean_{trimap == 0} -log(1 - p)
//! ```
//!
//! The first term pulls seed disks up and Voronoi boundaries down; the second
//! only penalizes foreground predictions on pixels the detection trimap calls
//! background. Each term is averaged over its own supervised pixels.

use ndarray::Array2;
use psam_nn::{state_dict, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::detect::{predict_probability, training_batch_images, SegTrainConfig};
use crate::net::{ResUnet, UnetSpec};
use crate::raster::{
    connected_components, Connectivity, InstanceMap, ProbabilityMap, RasterImage, TriState,
    TriStateMask,
};
use crate::train::{train_loop, LoopConfig};
use crate::{check_shape, Error, Result};

pub const LOG_EPS: f64 = 1e-7;

/// Which supervision the segmentation network sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Voronoi term plus trimap-background term.
    #[default]
    Joint,
    /// Baseline without Voronoi labels: BCE on the trimap's foreground and
    /// background pixels.
    PixelOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointLossConfig {
    /// Weight of the Voronoi (instance-level) term.
    pub lambda: f64,
    pub mode: LossMode,
}

impl Default for JointLossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            mode: LossMode::Joint,
        }
    }
}

impl JointLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::InvalidInput(format!(
                "lambda must be finite and > 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLoss {
    /// `lambda` times the mean Voronoi BCE.
    pub instance: f64,
    /// Mean `-log(1 - p)` over trimap background.
    pub background: f64,
    pub total: f64,
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0 - LOG_EPS)
}

struct Supervision {
    n_vor: usize,
    n_bg: usize,
}

fn supervision(vor: &TriStateMask, trimap: &TriStateMask) -> Supervision {
    Supervision {
        n_vor: vor.labels.len() - vor.count(TriState::Ignore),
        n_bg: trimap.count(TriState::Background),
    }
}

fn check_inputs(
    pred: (usize, usize),
    vor: &TriStateMask,
    trimap: &TriStateMask,
    cfg: &JointLossConfig,
) -> Result<Supervision> {
    cfg.validate()?;
    check_shape(pred, vor.dims())?;
    check_shape(pred, trimap.dims())?;
    let sup = supervision(vor, trimap);
    if sup.n_vor == 0 && sup.n_bg == 0 {
        return Err(Error::InvalidInput(
            "neither Voronoi nor trimap labels supervise any pixel".into(),
        ));
    }
    Ok(sup)
}

pub fn joint_loss(
    pred: &ProbabilityMap,
    vor: &TriStateMask,
    trimap: &TriStateMask,
    cfg: &JointLossConfig,
) -> Result<JointLoss> {
    let sup = check_inputs(pred.dims(), vor, trimap, cfg)?;
    let (mut inst, mut bg) = (0.0f64, 0.0f64);
    for ((&p, &v), &t) in pred
        .values()
        .iter()
        .zip(vor.labels.iter())
        .zip(trimap.labels.iter())
    {
        let p = clamp_p(p as f64);
        match v {
            TriState::Foreground => inst -= p.ln(),
            TriState::Background => inst -= (1.0 - p).ln(),
            TriState::Ignore => {}
        }
        if t == TriState::Background {
            bg -= (1.0 - p).ln();
        }
    }
    let instance = if sup.n_vor > 0 {
        cfg.lambda * (inst / sup.n_vor as f64)
    } else {
        0.0
    };
    let background = if sup.n_bg > 0 {
        bg / sup.n_bg as f64
    } else {
        0.0
    };
    Ok(JointLoss {
        instance,
        background,
        total: instance + background,
    })
}

/// `dL/dp` of [`joint_loss`]; zero where the clamp is active.
pub fn joint_loss_grad(
    pred: &ProbabilityMap,
    vor: &TriStateMask,
    trimap: &TriStateMask,
    cfg: &JointLossConfig,
) -> Result<Array2<f64>> {
    let sup = check_inputs(pred.dims(), vor, trimap, cfg)?;
    let mut g = Array2::<f64>::zeros(pred.dims());
    for (((gij, &p), &v), &t) in g
        .iter_mut()
        .zip(pred.values().iter())
        .zip(vor.labels.iter())
        .zip(trimap.labels.iter())
    {
        let p = p as f64;
        if p <= LOG_EPS || p >= 1.0 - LOG_EPS {
            continue;
        }
        match v {
            TriState::Foreground => *gij -= cfg.lambda / sup.n_vor as f64 / p,
            TriState::Background => *gij += cfg.lambda / sup.n_vor as f64 / (1.0 - p),
            TriState::Ignore => {}
        }
        if t == TriState::Background {
            *gij += 1.0 / sup.n_bg as f64 / (1.0 - p);
        }
    }
    Ok(g)
}

/// Trains the segmentation network. `trimaps` come from thresholding the
/// detection probability maps; `vor_labels` from the detected centers.
pub fn train_nsn(
    images: &[RasterImage],
    vor_labels: &[TriStateMask],
    trimaps: &[TriStateMask],
    cfg: &SegTrainConfig,
    loss_cfg: &JointLossConfig,
    config_hash: &str,
) -> Result<Checkpoint> {
    loss_cfg.validate()?;
    if images.len() != vor_labels.len() || images.len() != trimaps.len() {
        return Err(Error::InvalidInput(format!(
            "{} images, {} Voronoi maps, {} trimaps",
            images.len(),
            vor_labels.len(),
            trimaps.len()
        )));
    }
    let spec = UnetSpec::from_preset(cfg.backbone);
    let images = training_batch_images(images, &spec)?;
    for ((img, v), t) in images.iter().zip(vor_labels).zip(trimaps) {
        check_shape(img.dims(), v.dims())?;
        check_shape(img.dims(), t.dims())?;
    }
    // Per-pixel targets: (instance label, background flag) for joint mode,
    // (pixel label, unused) for the pixel-only baseline.
    let targets: Vec<(Array2<Option<f64>>, Array2<bool>)> = vor_labels
        .iter()
        .zip(trimaps)
        .map(|(v, t)| match loss_cfg.mode {
            LossMode::Joint => (
                v.labels.mapv(label_target),
                t.labels.mapv(|l| l == TriState::Background),
            ),
            LossMode::PixelOnly => (
                t.labels.mapv(label_target),
                Array2::from_elem(t.dims(), false),
            ),
        })
        .collect();
    let total_supervised: usize = targets
        .iter()
        .map(|(a, b)| a.iter().filter(|x| x.is_some()).count() + b.iter().filter(|&&x| x).count())
        .sum();
    if total_supervised == 0 {
        return Err(Error::InvalidInput(
            "no pixel carries a segmentation label".into(),
        ));
    }
    let lambda = match loss_cfg.mode {
        LossMode::Joint => loss_cfg.lambda,
        LossMode::PixelOnly => 1.0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = ResUnet::new(&spec, &mut rng)?;
    let step = |net: &mut ResUnet, batch: &[usize], _: &mut ChaCha8Rng| -> Result<Option<f64>> {
        let n_inst: usize = batch
            .iter()
            .map(|&i| targets[i].0.iter().filter(|x| x.is_some()).count())
            .sum();
        let n_bg: usize = batch
            .iter()
            .map(|&i| targets[i].1.iter().filter(|&&x| x).count())
            .sum();
        if n_inst + n_bg == 0 {
            return Ok(None);
        }
        let xs: Vec<&RasterImage> = batch.iter().map(|&i| &images[i]).collect();
        let logits = net.forward(&RasterImage::batch_tensor(&xs), true);
        let mut g = Tensor::zeros(logits.dim());
        let mut loss = 0.0f64;
        let w_inst = if n_inst > 0 {
            lambda / n_inst as f64
        } else {
            0.0
        };
        let w_bg = if n_bg > 0 { 1.0 / n_bg as f64 } else { 0.0 };
        for (s, &i) in batch.iter().enumerate() {
            let (inst, bg) = &targets[i];
            for ((r, c), y) in inst.indexed_iter() {
                let z = logits[[s, 0, r, c]] as f64;
                let p = 1.0 / (1.0 + (-z).exp());
                let softplus = (-z.abs()).exp().ln_1p();
                let mut dz = 0.0;
                if let Some(y) = *y {
                    loss += w_inst * (z.max(0.0) - y * z + softplus);
                    dz += w_inst * (p - y);
                }
                if bg[[r, c]] {
                    loss += w_bg * (z.max(0.0) + softplus);
                    dz += w_bg * p;
                }
                g[[s, 0, r, c]] = dz as f32;
            }
        }
        net.backward(&g);
        Ok(Some(loss))
    };
    let snapshot = |net: &mut ResUnet, log| {
        Checkpoint::new(
            ModelKind::Segmentation { spec: spec.clone() },
            state_dict(net),
            config_hash,
            cfg.seed,
            log,
        )
    };
    let loop_cfg: LoopConfig = cfg.loop_config();
    let log = train_loop(&mut net, images.len(), &loop_cfg, &mut rng, step, &snapshot)?;
    Ok(snapshot(&mut net, log))
}

fn label_target(l: TriState) -> Option<f64> {
    match l {
        TriState::Foreground => Some(1.0),
        TriState::Background => Some(0.0),
        TriState::Ignore => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    pub threshold: f32,
    pub connectivity: Connectivity,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            connectivity: Connectivity::Eight,
        }
    }
}

/// Foreground where the probability exceeds the threshold, split into
/// connected components.
pub fn instances_from_probability(
    prob: &ProbabilityMap,
    cfg: &SegmentConfig,
) -> (Array2<bool>, InstanceMap) {
    let mask = prob.values().mapv(|p| p > cfg.threshold);
    let inst = connected_components(&mask, cfg.connectivity);
    (mask, inst)
}

pub fn segment(
    net: &mut ResUnet,
    image: &RasterImage,
    cfg: &SegmentConfig,
) -> Result<(Array2<bool>, InstanceMap)> {
    Ok(instances_from_probability(
        &predict_probability(net, image)?,
        cfg,
    ))
}
