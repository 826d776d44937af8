//! Test-split evaluation and the results CSV.
//!
//! One row per test image followed by a `micro` and a `macro` summary row.
//! Pixel and detection counts are pooled for `micro`; `macro` averages the
//! per-image scores. Object Dice and AJI are only averaged (`macro`).

use std::path::Path;

use psam_core::data::Sample;
use psam_core::metrics::{
    aji, detection_scores, match_points, object_dice, pixel_scores, PixelScores,
};
use psam_core::{io, InstanceMap, Point, PointSet};
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

pub const RESULTS_CSV: &str = "results.csv";
pub const MICRO: &str = "micro";
pub const MACRO: &str = "macro";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub image: String,
    pub config_hash: String,
    pub pixel_tp: Option<u64>,
    pub pixel_fp: Option<u64>,
    pub pixel_fn: Option<u64>,
    pub iou: Option<f64>,
    pub f1: Option<f64>,
    pub dice_obj: Option<f64>,
    pub aji: Option<f64>,
    pub gt_instances: Option<usize>,
    pub pred_instances: usize,
    pub det_tp: Option<usize>,
    pub det_fp: Option<usize>,
    pub det_fn: Option<usize>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub det_f1: Option<f64>,
    /// Absolute count error per image; mean over images (MP) in summary rows.
    pub count_error: Option<f64>,
    pub match_radius: f64,
}

impl ResultRow {
    pub fn is_summary(&self) -> bool {
        self.image == MICRO || self.image == MACRO
    }
}

/// Ground-truth points, or instance centroids when the dataset has none.
fn gt_points(sample: &Sample) -> Result<Option<PointSet>> {
    if let Some(p) = &sample.points {
        return Ok(Some(p.clone()));
    }
    let Some(mask) = &sample.mask else {
        return Ok(None);
    };
    let (h, w) = mask.dims();
    let pts = mask
        .centroids()
        .into_iter()
        .map(|(r, c)| {
            Point::new(
                (r.round() as usize).min(h - 1),
                (c.round() as usize).min(w - 1),
            )
        })
        .collect();
    Ok(Some(PointSet::new(pts, mask.dims())?))
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores the `segment` and `detect` outputs against the test split.
pub fn evaluate(
    samples: &[Sample],
    seg_dir: &Path,
    det_dir: &Path,
    radius: f64,
    config_hash: &str,
) -> Result<Vec<ResultRow>> {
    if samples.is_empty() {
        return Err(CliError::Runtime(
            "evaluate: the test split is empty".into(),
        ));
    }
    let mut rows = Vec::with_capacity(samples.len() + 2);
    let mut pred_sets = Vec::new();
    let mut gt_sets = Vec::new();
    for s in samples {
        let dims = s.image.dims();
        let pred_mask = io::read_binary(&seg_dir.join("masks").join(format!("{}.png", s.stem)))?;
        let pred_inst: InstanceMap =
            io::read_instance_map(&seg_dir.join("instances").join(format!("{}.png", s.stem)))?;
        let pred_pts = io::read_points(
            &det_dir.join("test/points").join(format!("{}.csv", s.stem)),
            dims,
        )?;
        let mut row = ResultRow {
            image: s.stem.clone(),
            config_hash: config_hash.to_string(),
            pixel_tp: None,
            pixel_fp: None,
            pixel_fn: None,
            iou: None,
            f1: None,
            dice_obj: None,
            aji: None,
            gt_instances: None,
            pred_instances: pred_inst.count(),
            det_tp: None,
            det_fp: None,
            det_fn: None,
            precision: None,
            recall: None,
            det_f1: None,
            count_error: None,
            match_radius: radius,
        };
        if let Some(gt) = &s.mask {
            let px = pixel_scores(&pred_mask, &gt.foreground())?;
            row.pixel_tp = Some(px.tp);
            row.pixel_fp = Some(px.fp);
            row.pixel_fn = Some(px.fn_);
            row.iou = Some(px.iou);
            row.f1 = Some(px.f1);
            row.dice_obj = Some(object_dice(&pred_inst, gt)?);
            row.aji = if gt.count() == 0 {
                None
            } else {
                Some(aji(&pred_inst, gt)?)
            };
            row.gt_instances = Some(gt.count());
        }
        if let Some(gt_pts) = gt_points(s)? {
            let m = match_points(&pred_pts, &gt_pts, radius)?;
            row.det_tp = Some(m.tp);
            row.det_fp = Some(m.fp);
            row.det_fn = Some(m.fn_);
            let p = ratio(m.tp, m.tp + m.fp);
            let r = ratio(m.tp, m.tp + m.fn_);
            row.precision = Some(p);
            row.recall = Some(r);
            row.det_f1 = Some(if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            });
            row.count_error = Some((pred_pts.len() as f64 - gt_pts.len() as f64).abs());
            pred_sets.push(pred_pts);
            gt_sets.push(gt_pts);
        }
        rows.push(row);
    }

    let mut micro = ResultRow {
        image: MICRO.into(),
        pred_instances: rows.iter().map(|r| r.pred_instances).sum(),
        gt_instances: rows.iter().map(|r| r.gt_instances).sum(),
        dice_obj: None,
        aji: None,
        ..rows[0].clone()
    };
    let pooled = rows
        .iter()
        .try_fold((0u64, 0u64, 0u64), |(tp, fp, fn_), r| {
            Some((tp + r.pixel_tp?, fp + r.pixel_fp?, fn_ + r.pixel_fn?))
        });
    match pooled {
        Some((tp, fp, fn_)) => {
            let px = PixelScores::from_counts(tp, fp, fn_);
            micro.pixel_tp = Some(tp);
            micro.pixel_fp = Some(fp);
            micro.pixel_fn = Some(fn_);
            micro.iou = Some(px.iou);
            micro.f1 = Some(px.f1);
        }
        None => {
            micro.pixel_tp = None;
            micro.pixel_fp = None;
            micro.pixel_fn = None;
            micro.iou = None;
            micro.f1 = None;
        }
    }
    if gt_sets.len() == samples.len() {
        let d = detection_scores(&pred_sets, &gt_sets, radius)?;
        micro.det_tp = Some(d.tp);
        micro.det_fp = Some(d.fp);
        micro.det_fn = Some(d.fn_);
        micro.precision = Some(d.precision);
        micro.recall = Some(d.recall);
        micro.det_f1 = Some(d.f1);
        micro.count_error = Some(d.mp);
    } else {
        micro.det_tp = None;
        micro.det_fp = None;
        micro.det_fn = None;
        micro.precision = None;
        micro.recall = None;
        micro.det_f1 = None;
        micro.count_error = None;
    }

    let per = &rows;
    let macro_row = ResultRow {
        image: MACRO.into(),
        config_hash: config_hash.to_string(),
        pixel_tp: None,
        pixel_fp: None,
        pixel_fn: None,
        iou: mean(per.iter().map(|r| r.iou)),
        f1: mean(per.iter().map(|r| r.f1)),
        dice_obj: mean(per.iter().map(|r| r.dice_obj)),
        aji: mean(per.iter().map(|r| r.aji)),
        gt_instances: micro.gt_instances,
        pred_instances: micro.pred_instances,
        det_tp: None,
        det_fp: None,
        det_fn: None,
        precision: mean(per.iter().map(|r| r.precision)),
        recall: mean(per.iter().map(|r| r.recall)),
        det_f1: mean(per.iter().map(|r| r.det_f1)),
        count_error: mean(per.iter().map(|r| r.count_error)),
        match_radius: radius,
    };
    rows.push(micro);
    rows.push(macro_row);
    Ok(rows)
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Headline numbers taken from the summary rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub iou: Option<f64>,
    pub f1: Option<f64>,
    pub dice_obj: Option<f64>,
    pub aji: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub det_f1: Option<f64>,
    pub mp: Option<f64>,
}

impl Summary {
    /// Pixel and detection scores from `micro`, object scores from `macro`.
    pub fn from_rows(rows: &[ResultRow]) -> Option<Self> {
        let micro = rows.iter().find(|r| r.image == MICRO)?;
        let macro_row = rows.iter().find(|r| r.image == MACRO)?;
        Some(Self {
            iou: micro.iou,
            f1: micro.f1,
            dice_obj: macro_row.dice_obj,
            aji: macro_row.aji,
            precision: micro.precision,
            recall: micro.recall,
            det_f1: micro.det_f1,
            mp: micro.count_error,
        })
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "iou" => self.iou,
            "f1" => self.f1,
            "dice_obj" => self.dice_obj,
            "aji" => self.aji,
            "precision" => self.precision,
            "recall" => self.recall,
            "det_f1" => self.det_f1,
            "mp" => self.mp,
            _ => None,
        }
    }

    pub const METRICS: [&'static str; 8] = [
        "iou",
        "f1",
        "dice_obj",
        "aji",
        "precision",
        "recall",
        "det_f1",
        "mp",
    ];
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use psam_core::RasterImage;

    fn write_outputs(dir: &Path, stem: &str, inst: &InstanceMap, pts: &PointSet) {
        for sub in ["seg/masks", "seg/instances", "det/test/points"] {
            std::fs::create_dir_all(dir.join(sub)).unwrap();
        }
        io::write_binary(
            &dir.join("seg/masks").join(format!("{stem}.png")),
            &inst.foreground(),
        )
        .unwrap();
        io::write_instance_map(&dir.join("seg/instances").join(format!("{stem}.png")), inst)
            .unwrap();
        io::write_points(
            &dir.join("det/test/points").join(format!("{stem}.csv")),
            pts,
        )
        .unwrap();
    }

    fn sample(stem: &str, inst: &InstanceMap, pts: &PointSet) -> Sample {
        Sample {
            stem: stem.into(),
            image: RasterImage::filled(8, 8, 3, 0.5).unwrap(),
            mask: Some(inst.clone()),
            points: Some(pts.clone()),
        }
    }

    #[test]
    fn perfect_prediction_scores_one_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut labels = Array2::<u32>::zeros((8, 8));
        labels.slice_mut(ndarray::s![1..4, 1..4]).fill(1);
        labels.slice_mut(ndarray::s![5..7, 4..8]).fill(2);
        let inst = InstanceMap::new(labels).unwrap();
        let pts = PointSet::new(vec![Point::new(2, 2), Point::new(5, 5)], (8, 8)).unwrap();
        write_outputs(dir.path(), "a", &inst, &pts);
        let rows = evaluate(
            &[sample("a", &inst, &pts)],
            &dir.path().join("seg"),
            &dir.path().join("det"),
            5.0,
            "h",
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        let s = Summary::from_rows(&rows).unwrap();
        for m in [
            "iou",
            "f1",
            "dice_obj",
            "aji",
            "precision",
            "recall",
            "det_f1",
        ] {
            assert_eq!(s.metric(m), Some(1.0), "{m}");
        }
        assert_eq!(s.mp, Some(0.0));
        let path = dir.path().join(RESULTS_CSV);
        write_results(&path, &rows).unwrap();
        assert_eq!(read_results(&path).unwrap(), rows);
    }

    #[test]
    fn micro_pools_counts_and_macro_averages() {
        let dir = tempfile::tempdir().unwrap();
        let mut gt = Array2::<u32>::zeros((8, 8));
        gt.slice_mut(ndarray::s![0..4, 0..4]).fill(1);
        let gt = InstanceMap::new(gt).unwrap();
        let mut half = Array2::<u32>::zeros((8, 8));
        half.slice_mut(ndarray::s![0..4, 0..2]).fill(1);
        let half = InstanceMap::new(half).unwrap();
        let gt_pts = PointSet::new(vec![Point::new(2, 2)], (8, 8)).unwrap();
        let two = PointSet::new(vec![Point::new(2, 2), Point::new(7, 7)], (8, 8)).unwrap();
        write_outputs(dir.path(), "a", &gt, &gt_pts);
        write_outputs(dir.path(), "b", &half, &two);
        let samples = [sample("a", &gt, &gt_pts), sample("b", &gt, &gt_pts)];
        let rows = evaluate(
            &samples,
            &dir.path().join("seg"),
            &dir.path().join("det"),
            5.0,
            "h",
        )
        .unwrap();
        let micro = &rows[2];
        // tp 16 + 8, fn 0 + 8
        assert_eq!(micro.iou, Some(24.0 / 32.0));
        assert_eq!(rows[3].iou, Some((1.0 + 0.5) / 2.0));
        assert_eq!(micro.precision, Some(2.0 / 3.0));
        assert_eq!(micro.count_error, Some(0.5));
    }
}
