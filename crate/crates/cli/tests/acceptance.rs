//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use psam_cli::results::{read_results, Summary, RESULTS_CSV};
use psam_cli::sweep::{run_sweep, SweepParam, SweepRow};
use psam_cli::{PipelineConfig, Stage, Workspace};
use psam_core::data::{load_manifest, DatasetProfile, Split};
use psam_core::detect::{local_maxima, nearest_seed, voronoi_labels, PeakConfig, VoronoiConfig};
use psam_core::metrics::{aji, object_dice, pixel_scores, PixelScores};
use psam_core::net::{Encoder, EncoderSpec};
use psam_core::pseudo::kmeans;
use psam_core::saliency::{
    activation_weights, activation_with_encoder, LayerSelector, ScalarOutput,
};
use psam_core::segment::{joint_loss, joint_loss_grad, JointLossConfig};
use psam_core::{
    Checkpoint, InstanceMap, Point, PointSet, ProbabilityMap, RasterImage, TriState, TriStateMask,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- fixtures

fn random_instances(rng: &mut ChaCha8Rng, dims: (usize, usize), max_n: usize) -> Array2<u32> {
    let (h, w) = dims;
    let mut labels = Array2::<u32>::zeros(dims);
    let n = rng.gen_range(0..=max_n);
    for id in 1..=n as u32 {
        let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (rh, rw) = (rng.gen_range(1..=10), rng.gen_range(1..=10));
        for r in r0..(r0 + rh).min(h) {
            for c in c0..(c0 + rw).min(w) {
                labels[[r, c]] = id;
            }
        }
    }
    labels
}

/// A prediction that is either independent of `gt` or a shifted, permuted
/// and extended copy of it.
fn random_prediction(rng: &mut ChaCha8Rng, gt: &Array2<u32>) -> Array2<u32> {
    let dims = gt.dim();
    if rng.gen_bool(0.3) {
        return random_instances(rng, dims, 6);
    }
    let (dr, dc) = (rng.gen_range(-2i64..=2), rng.gen_range(-2i64..=2));
    let mut perm: Vec<u32> = (1..=7).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let mut out = Array2::<u32>::zeros(dims);
    for ((r, c), &g) in gt.indexed_iter() {
        let (rr, cc) = (r as i64 + dr, c as i64 + dc);
        if g > 0 && rr >= 0 && cc >= 0 && (rr as usize) < dims.0 && (cc as usize) < dims.1 {
            out[[rr as usize, cc as usize]] = perm[g as usize - 1];
        }
    }
    let extra = random_instances(rng, dims, 2);
    for ((r, c), &e) in extra.indexed_iter() {
        if e > 0 {
            out[[r, c]] = 7 + e;
        }
    }
    out
}

fn objects(map: &InstanceMap) -> Vec<HashSet<(usize, usize)>> {
    (1..=map.count() as u32)
        .map(|id| {
            map.labels()
                .indexed_iter()
                .filter(|(_, &l)| l == id)
                .map(|(p, _)| p)
                .collect()
        })
        .collect()
}

/// Partner of `a` with the largest positive overlap; ties go to the larger
/// partner, then the lower id.
fn best_partner(
    a: &HashSet<(usize, usize)>,
    others: &[HashSet<(usize, usize)>],
    usable: &[bool],
) -> Option<usize> {
    let mut best: Option<(usize, usize, usize)> = None;
    for (j, o) in others.iter().enumerate() {
        if !usable[j] {
            continue;
        }
        let inter = a.intersection(o).count();
        if inter == 0 {
            continue;
        }
        let better = match best {
            None => true,
            Some((_, bi, bs)) => inter > bi || (inter == bi && o.len() > bs),
        };
        if better {
            best = Some((j, inter, o.len()));
        }
    }
    best.map(|(j, _, _)| j)
}

fn oracle_object_dice(pred: &InstanceMap, gt: &InstanceMap) -> f64 {
    let (g, p) = (objects(gt), objects(pred));
    if g.is_empty() && p.is_empty() {
        return 1.0;
    }
    let side = |xs: &[HashSet<(usize, usize)>], ys: &[HashSet<(usize, usize)>]| -> f64 {
        let total: usize = xs.iter().map(|x| x.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let all = vec![true; ys.len()];
        xs.iter()
            .map(|x| {
                let gamma = x.len() as f64 / total as f64;
                match best_partner(x, ys, &all) {
                    Some(j) => {
                        let inter = x.intersection(&ys[j]).count() as f64;
                        gamma * 2.0 * inter / (x.len() + ys[j].len()) as f64
                    }
                    None => 0.0,
                }
            })
            .sum()
    };
    0.5 * (side(&g, &p) + side(&p, &g))
}

fn oracle_aji(pred: &InstanceMap, gt: &InstanceMap) -> f64 {
    let (g, p) = (objects(gt), objects(pred));
    let mut usable = vec![true; p.len()];
    let (mut num, mut den) = (0usize, 0usize);
    for gi in &g {
        match best_partner(gi, &p, &usable) {
            Some(j) => {
                usable[j] = false;
                num += gi.intersection(&p[j]).count();
                den += gi.union(&p[j]).count();
            }
            None => den += gi.len(),
        }
    }
    den += p
        .iter()
        .zip(&usable)
        .filter(|(_, &u)| u)
        .map(|(x, _)| x.len())
        .sum::<usize>();
    num as f64 / den as f64
}

// ---------------------------------------------------------------- criteria 1-7

fn c1_metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_dice, mut worst_aji, mut aji_cases) = (0.0f64, 0.0f64, 0);
    for _ in 0..100 {
        let gt_raw = random_instances(&mut rng, (32, 32), 6);
        let pred_raw = random_prediction(&mut rng, &gt_raw);
        let gt = InstanceMap::relabeled(&gt_raw);
        let pred = InstanceMap::relabeled(&pred_raw);
        let d = object_dice(&pred, &gt).unwrap();
        worst_dice = worst_dice.max((d - oracle_object_dice(&pred, &gt)).abs());
        match aji(&pred, &gt) {
            Ok(a) => {
                aji_cases += 1;
                worst_aji = worst_aji.max((a - oracle_aji(&pred, &gt)).abs());
            }
            Err(_) if gt.count() == 0 => {}
            Err(e) => return outcome(false, format!("aji rejected a non-empty ground truth: {e}")),
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst_dice <= 1e-9 && worst_aji <= 1e-9 && elapsed < Duration::from_secs(60),
        format!("100 pairs ({aji_cases} with AJI), max |dice - oracle| {worst_dice:.1e}, max |aji - oracle| {worst_aji:.1e}, {elapsed:.1?}"),
    )
}

fn c2_pixel_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = Vec::new();
    for case in 0..1000 {
        let (tp, fp, fn_) = loop {
            let t = (
                rng.gen_range(0..60u64),
                rng.gen_range(0..60u64),
                rng.gen_range(0..60u64),
            );
            if t.0 + t.1 + t.2 > 0 {
                break t;
            }
        };
        let tn = rng.gen_range(0..20u64);
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for (p, g, n) in [
            (true, true, tp),
            (true, false, fp),
            (false, true, fn_),
            (false, false, tn),
        ] {
            for _ in 0..n {
                pred.push(p);
                gt.push(g);
            }
        }
        let len = pred.len();
        let s = pixel_scores(
            &Array2::from_shape_vec((1, len), pred).unwrap(),
            &Array2::from_shape_vec((1, len), gt).unwrap(),
        )
        .unwrap();
        let (t, p, n) = (tp as f64, fp as f64, fn_ as f64);
        let ok = (s.tp, s.fp, s.fn_) == (tp, fp, fn_)
            && s.f1 == 2.0 * t / (2.0 * t + p + n)
            && s.iou == t / (t + p + n)
            && s.f1 >= s.iou
            && s == PixelScores::from_counts(tp, fp, fn_);
        if !ok {
            bad.push(format!("case {case}: tp {tp} fp {fp} fn {fn_} -> {s:?}"));
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "1000 confusion counts, {} violations {}",
            bad.len(),
            bad.first().cloned().unwrap_or_default()
        ),
    )
}

fn exhaustive_nearest(points: &[Point], r: usize, c: usize) -> BTreeSet<usize> {
    let d = |p: &Point| (p.row as i64 - r as i64).pow(2) + (p.col as i64 - c as i64).pow(2);
    let best = points.iter().map(d).min().unwrap();
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| d(p) == best)
        .map(|(i, _)| i)
        .collect()
}

fn c3_voronoi() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = (64usize, 64usize);
    let mut violations = Vec::new();
    let mut edge_pixels = 0usize;
    for set in 0..50 {
        let n = rng.gen_range(5..=30);
        let mut seen = HashSet::new();
        while seen.len() < n {
            seen.insert((rng.gen_range(0..dims.0), rng.gen_range(0..dims.1)));
        }
        let mut pts: Vec<Point> = seen.into_iter().map(|(r, c)| Point::new(r, c)).collect();
        pts.sort_by_key(|p| (p.row, p.col));
        let set_pts = PointSet::new(pts.clone(), dims).unwrap();
        let labels = voronoi_labels(&set_pts, dims, &VoronoiConfig::default()).unwrap();
        let owner = nearest_seed(&set_pts, dims);
        for r in 0..dims.0 {
            for c in 0..dims.1 {
                let here = exhaustive_nearest(&pts, r, c);
                if labels.labels[[r, c]] == TriState::Background {
                    edge_pixels += 1;
                    let mut cells = here.clone();
                    for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                        let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                        if rr >= 0 && cc >= 0 && (rr as usize) < dims.0 && (cc as usize) < dims.1 {
                            cells.extend(exhaustive_nearest(&pts, rr as usize, cc as usize));
                        }
                    }
                    if cells.len() < 2 {
                        violations
                            .push(format!("set {set}: edge pixel ({r}, {c}) touches one cell"));
                    }
                } else {
                    let expect = (here.len() == 1).then(|| *here.iter().next().unwrap() as u32);
                    if owner[[r, c]] != expect || expect.is_none() {
                        violations.push(format!(
                            "set {set}: pixel ({r}, {c}) owner {:?}, scan {here:?}",
                            owner[[r, c]]
                        ));
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        violations.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "50 seed sets, {edge_pixels} edge pixels, {} violations {}, {elapsed:.1?}",
            violations.len(),
            violations.first().cloned().unwrap_or_default()
        ),
    )
}

fn c4_local_maxima() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = Vec::new();
    let mut peaks = 0;
    for case in 0..50 {
        let quantized = case % 2 == 0;
        let values = Array2::from_shape_fn((32, 32), |_| {
            if quantized {
                rng.gen_range(0..8) as f32 / 7.0
            } else {
                rng.gen::<f32>()
            }
        });
        let cfg = PeakConfig {
            radius: rng.gen_range(1..=4),
            min_prob: rng.gen_range(0.0..0.6),
        };
        let got: Vec<(usize, usize)> =
            local_maxima(&ProbabilityMap::new(values.clone()).unwrap(), &cfg)
                .unwrap()
                .points()
                .iter()
                .map(|p| (p.row, p.col))
                .collect();
        let r = cfg.radius as i64;
        let mut expect = Vec::new();
        for m in 0..32i64 {
            for n in 0..32i64 {
                let p = values[[m as usize, n as usize]];
                if p < cfg.min_prob {
                    continue;
                }
                let mut strict = true;
                for i in (m - r)..=(m + r) {
                    for j in (n - r)..=(n + r) {
                        if (0..32).contains(&i)
                            && (0..32).contains(&j)
                            && (i, j) != (m, n)
                            && values[[i as usize, j as usize]] >= p
                        {
                            strict = false;
                        }
                    }
                }
                if strict {
                    expect.push((m as usize, n as usize));
                }
            }
        }
        peaks += expect.len();
        if got != expect {
            bad.push(format!(
                "map {case}: {} peaks vs {} by scan",
                got.len(),
                expect.len()
            ));
        }
    }
    let constant = (0..=10).all(|k| {
        let v = ProbabilityMap::new(Array2::from_elem((32, 32), k as f32 / 10.0)).unwrap();
        local_maxima(
            &v,
            &PeakConfig {
                radius: 3,
                min_prob: 0.0,
            },
        )
        .unwrap()
        .is_empty()
    });
    outcome(
        bad.is_empty() && constant,
        format!(
            "50 maps, {peaks} peaks, {} mismatches {}, constant maps empty: {constant}",
            bad.len(),
            bad.first().cloned().unwrap_or_default()
        ),
    )
}

fn c5_kmeans() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bad = Vec::new();
    for run in 0..100 {
        let n = rng.gen_range(10..200);
        let d = rng.gen_range(1..=3);
        let k = rng.gen_range(2..=5).min(n);
        let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-5.0..5.0));
        let res = kmeans(x.view(), k, run, 100, 0.0).unwrap();
        if let Some(w) = res.history.windows(2).find(|w| w[1] > w[0]) {
            bad.push(format!("run {run}: inertia rose {} -> {}", w[0], w[1]));
        }
    }
    let x = Array2::from_shape_vec((6, 1), vec![0.0, 0.0, 0.0, 10.0, 10.0, 10.0]).unwrap();
    let res = kmeans(x.view(), 2, 0, 100, 1e-9).unwrap();
    let mut cents: Vec<f64> = res.centroids.iter().copied().collect();
    cents.sort_by(f64::total_cmp);
    let toy = cents == [0.0, 10.0] && res.inertia == 0.0;
    outcome(
        bad.is_empty() && toy,
        format!(
            "100 runs, {} increases {}; toy centroids {cents:?} inertia {}",
            bad.len(),
            bad.first().cloned().unwrap_or_default(),
            res.inertia
        ),
    )
}

/// Toy tail on top of block features: `z = sum w tanh(A) + (sum u A)^2 / 2`.
fn toy_z(a: &Array3<f64>, w: &Array3<f64>, u: &Array3<f64>) -> f64 {
    let lin: f64 = (a * u).sum();
    (w * &a.mapv(f64::tanh)).sum() + 0.5 * lin * lin
}

fn c6_activation_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (k, h, w) = (4, 5, 6);
    let a = Array3::from_shape_fn((k, h, w), |_| rng.gen_range(0.0..2.0f64));
    let wt = Array3::from_shape_fn((k, h, w), |_| rng.gen_range(-1.0..1.0f64));
    let u = Array3::from_shape_fn((k, h, w), |_| rng.gen_range(-0.2..0.2f64));
    let lin: f64 = (&a * &u).sum();
    let grad = &wt * &a.mapv(|v| 1.0 - v.tanh().powi(2)) + &u * lin;
    let alpha = activation_weights(
        a.mapv(|v| v as f32).view(),
        grad.mapv(|v| v as f32).view(),
        h * w,
    )
    .unwrap();
    let eps = 1e-3;
    let mut worst = 0.0f64;
    for kk in 0..k {
        let mut fd = 0.0;
        for i in 0..h {
            for j in 0..w {
                let mut plus = a.clone();
                plus[[kk, i, j]] += eps;
                let mut minus = a.clone();
                minus[[kk, i, j]] -= eps;
                fd += (toy_z(&plus, &wt, &u) - toy_z(&minus, &wt, &u)) / (2.0 * eps);
            }
        }
        fd /= (h * w) as f64;
        worst = worst.max((alpha[kk] as f64 - fd).abs() / fd.abs().max(1e-3));
    }

    let mut enc = Encoder::new(&EncoderSpec::compact(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mut negative = 0;
    for case in 0..100 {
        let px = Array3::from_shape_fn((32, 32, 3), |_| rng.gen::<f32>());
        let img = RasterImage::new(px).unwrap();
        let scalar = if case % 2 == 0 {
            ScalarOutput::EmbeddingSum
        } else {
            ScalarOutput::EmbeddingNorm
        };
        let map = activation_with_encoder(&mut enc, &img, LayerSelector::new(1 + case % 4), scalar)
            .unwrap();
        if map.values().iter().any(|&v| !(v >= 0.0))
            || map
                .normalized_values()
                .iter()
                .any(|&v| !(0.0..=1.0).contains(&v))
        {
            negative += 1;
        }
    }
    outcome(
        worst <= 1e-4 && negative == 0,
        format!("max relative |alpha - FD| {worst:.2e}; {negative}/100 maps with negative or out-of-range values"),
    )
}

fn tri(rng: &mut ChaCha8Rng) -> TriState {
    match rng.gen_range(0..3) {
        0 => TriState::Background,
        1 => TriState::Foreground,
        _ => TriState::Ignore,
    }
}

fn c7_joint_loss() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = (16usize, 16usize);
    let p = Array2::from_shape_fn(dims, |_| rng.gen_range(0.1..0.9f32));
    let vor = TriStateMask::new(Array2::from_shape_fn(dims, |_| tri(&mut rng)));
    let trimap = TriStateMask::new(Array2::from_shape_fn(dims, |_| tri(&mut rng)));
    let cfg = JointLossConfig::default();
    let grad = joint_loss_grad(
        &ProbabilityMap::new(p.clone()).unwrap(),
        &vor,
        &trimap,
        &cfg,
    )
    .unwrap();
    let supervised: Vec<(usize, usize)> = p
        .indexed_iter()
        .map(|(ix, _)| ix)
        .filter(|&ix| {
            vor.labels[ix] != TriState::Ignore || trimap.labels[ix] == TriState::Background
        })
        .collect();
    let loss_at = |q: &Array2<f32>| {
        joint_loss(
            &ProbabilityMap::new(q.clone()).unwrap(),
            &vor,
            &trimap,
            &cfg,
        )
        .unwrap()
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 100 {
        let ix = supervised[rng.gen_range(0..supervised.len())];
        let eps = 2e-5f32;
        let (mut hi, mut lo) = (p.clone(), p.clone());
        hi[ix] += eps;
        lo[ix] -= eps;
        let step = hi[ix] as f64 - lo[ix] as f64;
        let fd = (loss_at(&hi).total - loss_at(&lo).total) / step;
        worst = worst.max((grad[ix] - fd).abs() / fd.abs().max(1e-12));
        checked += 1;
    }

    let base = loss_at(&p);
    let mut invariant = true;
    for _ in 0..20 {
        let mut q = p.clone();
        for (ix, v) in q.indexed_iter_mut() {
            if vor.labels[ix] == TriState::Ignore && trimap.labels[ix] != TriState::Background {
                *v = rng.gen::<f32>();
            }
        }
        invariant &= loss_at(&q).total.to_bits() == base.total.to_bits();
    }

    let mut linear = true;
    for lambda in [0.5, 1.0, 2.0, 5.0, 10.0, 0.3] {
        let one = joint_loss(
            &ProbabilityMap::new(p.clone()).unwrap(),
            &vor,
            &trimap,
            &JointLossConfig { lambda, ..cfg },
        )
        .unwrap();
        let two = joint_loss(
            &ProbabilityMap::new(p.clone()).unwrap(),
            &vor,
            &trimap,
            &JointLossConfig {
                lambda: 2.0 * lambda,
                ..cfg
            },
        )
        .unwrap();
        linear &= two.background == one.background && two.instance == 2.0 * one.instance;
    }
    outcome(
        worst <= 1e-4 && invariant && linear,
        format!("100 supervised pixels, max relative |grad - FD| {worst:.2e}; unsupervised invariance {invariant}; lambda linearity {linear}"),
    )
}

// ---------------------------------------------------------------- pipeline criteria

/// 200 train / 50 test synthetic 64x64 images, compact encoder, 20 pretraining
/// epochs and 20 epochs for each segmentation network.
const PIPELINE: &str = r#"
[ssl.task]
variance_weight = 1.0

[ssl.train]
epochs = 20
learning_rate = 1e-3

[detect.train]
epochs = 20
learning_rate = 1e-3

[segment.train]
epochs = 20
learning_rate = 1e-3
"#;

/// Reduced dataset for the repeat-run comparison.
const SMALL: &str = r#"
[data.synth]
train = 24
test = 8

[ssl.task]
variance_weight = 1.0

[ssl.train]
epochs = 3
batch_size = 8
learning_rate = 1e-3

[detect.train]
epochs = 3
learning_rate = 1e-3

[segment.train]
epochs = 3
learning_rate = 1e-3
"#;

fn summary(ws: &Workspace) -> psam_cli::Result<Summary> {
    ws.run_to(Stage::Evaluate)?;
    let rows = read_results(&ws.dir(Stage::Evaluate).join(RESULTS_CSV))?;
    Summary::from_rows(&rows)
        .ok_or_else(|| psam_cli::CliError::Runtime("results lack summary rows".into()))
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.3}"))
}

fn c8_end_to_end(root: &Path, cfg: &PipelineConfig) -> Outcome {
    let start = Instant::now();
    let s = match Workspace::new(root, cfg.clone()).and_then(|ws| summary(&ws)) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("pipeline failed: {e}")),
    };
    let get = |v: Option<f64>| v.unwrap_or(f64::NAN);
    let passed =
        get(s.det_f1) >= 0.70 && get(s.mp) <= 2.0 && get(s.iou) >= 0.50 && get(s.aji) >= 0.35;
    outcome(
        passed,
        format!(
            "detection F1 {} (>= 0.70), MP {} (<= 2.0), pixel IoU {} (>= 0.50), AJI {} (>= 0.35); P {} R {}, {:.0?}",
            fmt(s.det_f1),
            fmt(s.mp),
            fmt(s.iou),
            fmt(s.aji),
            fmt(s.precision),
            fmt(s.recall),
            start.elapsed()
        ),
    )
}

fn pearson(a: &Array2<f32>, b: &Array2<bool>) -> f64 {
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

fn sweep_values(rows: &[SweepRow]) -> Vec<(String, Option<f64>)> {
    rows.iter().map(|r| (r.value.clone(), r.aji)).collect()
}

fn c9_ablations(root: &Path, cfg: &PipelineConfig) -> Outcome {
    let mut parts = Vec::new();
    let mut passed = true;

    // (a) joint vs pixel-only training
    let joint = Workspace::new(root, cfg.clone()).and_then(|ws| summary(&ws));
    let pixel = cfg
        .with_override("segment.loss.mode=pixel-only")
        .and_then(|c| Workspace::new(root, c))
        .and_then(|ws| summary(&ws));
    match (joint, pixel) {
        (Ok(j), Ok(p)) => {
            let ok = matches!((j.aji, p.aji), (Some(a), Some(b)) if a > b);
            passed &= ok;
            parts.push(format!(
                "(a) {} joint AJI {} vs pixel-only {}",
                pf(ok),
                fmt(j.aji),
                fmt(p.aji)
            ));
        }
        (j, p) => {
            passed = false;
            parts.push(format!(
                "(a) FAIL {:?} / {:?}",
                j.err().map(|e| e.to_string()),
                p.err().map(|e| e.to_string())
            ));
        }
    }

    // (b) lambda sensitivity
    let lambdas: Vec<String> = ["0.5", "1.0", "2.0", "5.0", "10.0"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    match run_sweep(root, cfg, SweepParam::Lambda, &lambdas) {
        Ok(rep) => {
            let vals: Vec<f64> = rep.rows.iter().filter_map(|r| r.aji).collect();
            let spread = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - vals.iter().copied().fold(f64::INFINITY, f64::min);
            let ok = vals.len() == lambdas.len() && spread <= 0.10;
            passed &= ok;
            parts.push(format!(
                "(b) {} AJI spread {spread:.3} (<= 0.10) over {:?}",
                pf(ok),
                sweep_values(&rep.rows)
            ));
        }
        Err(e) => {
            passed = false;
            parts.push(format!("(b) FAIL {e}"));
        }
    }

    // (c) beta sweep shape
    let betas: Vec<String> = ["0.0", "1.0", "2.5", "4.0", "10.0"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    match run_sweep(root, cfg, SweepParam::Beta, &betas) {
        Ok(rep) => {
            let vals: Vec<f64> = rep.rows.iter().map(|r| r.aji.unwrap_or(f64::NAN)).collect();
            let interior = vals[1..vals.len() - 1]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let ok = interior > vals[0] && interior > vals[vals.len() - 1];
            passed &= ok;
            parts.push(format!(
                "(c) {} AJI by beta {:?}",
                pf(ok),
                sweep_values(&rep.rows)
            ));
        }
        Err(e) => {
            passed = false;
            parts.push(format!("(c) FAIL {e}"));
        }
    }

    // (d) block 1 vs block 4 activation correlation with the ground truth
    let corr = || -> psam_cli::Result<(f64, f64)> {
        let ws = Workspace::new(root, cfg.clone())?;
        ws.run_to(Stage::Pretrain)?;
        let ck = Checkpoint::load(&ws.dir(Stage::Pretrain).join("encoder.json"))?;
        let mut enc = ck.build_encoder()?;
        let manifest = load_manifest(
            &ws.dataset_root(Stage::Pretrain)?,
            DatasetProfile::Synthetic,
        )?;
        let (mut c1, mut c4, mut n) = (0.0, 0.0, 0);
        for entry in manifest.split(Split::Train).take(50) {
            let sample = entry.load()?;
            let gt = sample.mask.expect("synthetic masks").foreground();
            for (layer, acc) in [(1, &mut c1), (4, &mut c4)] {
                let map = activation_with_encoder(
                    &mut enc,
                    &sample.image,
                    LayerSelector::new(layer),
                    cfg.saliency.scalar,
                )?;
                *acc += pearson(map.normalized_values(), &gt);
            }
            n += 1;
        }
        Ok((c1 / n as f64, c4 / n as f64))
    };
    match corr() {
        Ok((c1, c4)) => {
            let ok = c1 > c4;
            passed &= ok;
            parts.push(format!(
                "(d) {} mean correlation block 1 {c1:.3} vs block 4 {c4:.3}",
                pf(ok)
            ));
        }
        Err(e) => {
            passed = false;
            parts.push(format!("(d) FAIL {e}"));
        }
    }
    outcome(passed, parts.join("; "))
}

fn c10_determinism() -> Outcome {
    let cfg = PipelineConfig::from_toml(SMALL).unwrap();
    let mut csvs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let run = Workspace::new(dir.path(), cfg.clone()).and_then(|ws| {
            ws.run_to(Stage::Evaluate)?;
            Ok(std::fs::read(ws.dir(Stage::Evaluate).join(RESULTS_CSV))?)
        });
        match run {
            Ok(bytes) => csvs.push(bytes),
            Err(e) => return outcome(false, format!("pipeline failed: {e}")),
        }
    }
    let same = csvs[0] == csvs[1];
    outcome(
        same,
        format!(
            "two fresh runs, results CSVs {} ({} bytes)",
            if same { "identical" } else { "differ" },
            csvs[0].len()
        ),
    )
}

fn pf(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 metric oracle equivalence", Box::new(c1_metric_oracles)),
        ("2 pixel-metric identities", Box::new(c2_pixel_identities)),
        ("3 Voronoi correctness", Box::new(c3_voronoi)),
        ("4 local-extremum correctness", Box::new(c4_local_maxima)),
        ("5 K-Means contract", Box::new(c5_kmeans)),
        (
            "6 activation-map gradients",
            Box::new(c6_activation_gradients),
        ),
        ("7 joint-loss contract", Box::new(c7_joint_loss)),
    ];
    let mut failed = 0;
    let mut report = |name: &str, o: Outcome| {
        if !o.passed {
            failed += 1;
        }
        println!("[{}] criterion {name}: {}", pf(o.passed), o.detail);
    };
    for (name, f) in &criteria {
        report(name, f());
    }

    let root = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::from_toml(PIPELINE).unwrap();
    report(
        "8 end-to-end synthetic pipeline",
        c8_end_to_end(root.path(), &cfg),
    );
    report("9 ablation directions", c9_ablations(root.path(), &cfg));
    report("10 determinism", c10_determinism());

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
