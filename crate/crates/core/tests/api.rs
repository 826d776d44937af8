use std::collections::HashSet;

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use psam_core::data::{extract_patches, stitch, synth_nuclei, SynthConfig};
use psam_core::detect::{
    local_maxima, threshold_trimap, voronoi_labels, PeakConfig, ThresholdConfig, VoronoiConfig,
};
use psam_core::metrics::{aji, detection_scores, match_points, object_dice, pixel_scores};
use psam_core::pseudo::{kmeans, reassign_labels, MiddleCluster};
use psam_core::{Point, PointSet, ProbabilityMap, RasterImage, TriState};

/// Largest matching by exhaustive search over every injective assignment.
fn brute_force_matches(pred: &[Point], gt: &[Point], r2: i64) -> usize {
    fn go(i: usize, pred: &[Point], gt: &[Point], used: &mut Vec<bool>, r2: i64) -> usize {
        if i == pred.len() {
            return 0;
        }
        let mut best = go(i + 1, pred, gt, used, r2);
        for j in 0..gt.len() {
            if !used[j] && pred[i].dist2(&gt[j]) <= r2 {
                used[j] = true;
                best = best.max(1 + go(i + 1, pred, gt, used, r2));
                used[j] = false;
            }
        }
        best
    }
    go(0, pred, gt, &mut vec![false; gt.len()], r2)
}

fn point_set() -> impl Strategy<Value = Vec<Point>> {
    prop::collection::hash_set((0usize..12, 0usize..12), 0..6)
        .prop_map(|s| s.into_iter().map(|(r, c)| Point::new(r, c)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn point_matching_is_maximum_and_within_radius(pred in point_set(), gt in point_set(), radius in 1u32..6) {
        let radius = radius as f64;
        let ps = PointSet::new(pred.clone(), (12, 12)).unwrap();
        let gs = PointSet::new(gt.clone(), (12, 12)).unwrap();
        let m = match_points(&ps, &gs, radius).unwrap();
        prop_assert_eq!(m.tp, brute_force_matches(&pred, &gt, (radius * radius) as i64));
        prop_assert_eq!(m.tp + m.fp, pred.len());
        prop_assert_eq!(m.tp + m.fn_, gt.len());
        let (mut seen_p, mut seen_g) = (HashSet::new(), HashSet::new());
        for &(i, j) in &m.pairs {
            prop_assert!(seen_p.insert(i) && seen_g.insert(j));
            prop_assert!(pred[i].dist2(&gt[j]) as f64 <= radius * radius);
        }
    }

    #[test]
    fn detection_scores_pool_counts(sets in prop::collection::vec((point_set(), point_set()), 1..5)) {
        let preds: Vec<PointSet> = sets.iter().map(|(p, _)| PointSet::new(p.clone(), (12, 12)).unwrap()).collect();
        let gts: Vec<PointSet> = sets.iter().map(|(_, g)| PointSet::new(g.clone(), (12, 12)).unwrap()).collect();
        let s = detection_scores(&preds, &gts, 3.0).unwrap();
        let tp: usize = sets.iter().map(|(p, g)| brute_force_matches(p, g, 9)).sum();
        let np: usize = sets.iter().map(|(p, _)| p.len()).sum();
        let ng: usize = sets.iter().map(|(_, g)| g.len()).sum();
        prop_assert_eq!((s.tp, s.fp, s.fn_), (tp, np - tp, ng - tp));
        let mp = sets.iter().map(|(p, g)| (p.len() as f64 - g.len() as f64).abs()).sum::<f64>() / sets.len() as f64;
        prop_assert!((s.mp - mp).abs() < 1e-12);
        if np > 0 {
            prop_assert!((s.precision - tp as f64 / np as f64).abs() < 1e-12);
        }
        if ng > 0 {
            prop_assert!((s.recall - tp as f64 / ng as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn trimap_thresholds_every_pixel(
        values in prop::collection::vec(0.0f32..=1.0, 36),
        t_bg in 0.0f32..=1.0,
        gap in 0.0f32..=0.5,
    ) {
        let cfg = ThresholdConfig { t_fg: (t_bg + gap).min(1.0), t_bg };
        let prob = ProbabilityMap::new(Array2::from_shape_vec((6, 6), values.clone()).unwrap()).unwrap();
        let tri = threshold_trimap(&prob, &cfg);
        for (v, s) in values.iter().zip(tri.labels.iter()) {
            let want = if *v > cfg.t_fg {
                TriState::Foreground
            } else if *v < cfg.t_bg {
                TriState::Background
            } else {
                TriState::Ignore
            };
            prop_assert_eq!(*s, want);
        }
    }

    #[test]
    fn patches_stitch_back_to_the_image(h in 8usize..20, w in 8usize..20, patch in 4usize..8, stride in 2usize..8, seed in any::<u64>()) {
        let stride = stride.min(patch);
        let mut state = seed;
        let pixels = Array3::from_shape_fn((h, w, 3), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 40) as f32 / (1u64 << 24) as f32
        });
        let img = RasterImage::new(pixels.clone()).unwrap();
        let patches = extract_patches(&img, patch, stride).unwrap();
        for p in &patches {
            prop_assert_eq!(p.image.dims(), (patch, patch));
            let (r0, c0) = p.offset;
            for r in 0..patch.min(h.saturating_sub(r0)) {
                for c in 0..patch.min(w.saturating_sub(c0)) {
                    prop_assert_eq!(p.image.pixels()[[r, c, 1]], pixels[[r0 + r, c0 + c, 1]]);
                }
            }
        }
        let parts: Vec<_> = patches.iter().map(|p| (p.image.pixels().clone(), p.offset)).collect();
        let back = stitch(&parts, (h, w)).unwrap();
        for (a, b) in back.iter().zip(pixels.iter()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn synthetic_ground_truth_is_self_consistent() {
    for seed in 0..20 {
        let cfg = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        let (img, inst, points) = synth_nuclei(&cfg).unwrap();
        assert_eq!(img.dims(), cfg.image_size);
        assert_eq!(inst.count(), points.len());
        let (lo, hi) = cfg.nuclei_count_range;
        assert!(
            (lo..=hi).contains(&points.len()),
            "seed {seed}: {} nuclei",
            points.len()
        );
        for (i, p) in points.points().iter().enumerate() {
            assert_eq!(
                inst.labels()[[p.row, p.col]],
                i as u32 + 1,
                "seed {seed} center {i}"
            );
        }
        let fg = inst.foreground();
        assert_eq!(pixel_scores(&fg, &fg).unwrap().iou, 1.0);
        assert_eq!(object_dice(&inst, &inst).unwrap(), 1.0);
        assert_eq!(aji(&inst, &inst).unwrap(), 1.0);
        let (again, inst2, points2) = synth_nuclei(&cfg).unwrap();
        assert_eq!(again.pixels(), img.pixels());
        assert_eq!(inst2.labels(), inst.labels());
        assert_eq!(points2.points(), points.points());
    }
}

#[test]
fn nuclei_are_darker_than_background() {
    let (img, inst, _) = synth_nuclei(&SynthConfig::default()).unwrap();
    let fg = inst.foreground();
    let gray = img.to_gray();
    let mean = |want: bool| {
        let v: Vec<f32> = gray
            .iter()
            .zip(fg.iter())
            .filter(|(_, &f)| f == want)
            .map(|(g, _)| *g)
            .collect();
        v.iter().sum::<f32>() / v.len() as f32
    };
    assert!(mean(true) < mean(false));
}

#[test]
fn gaussian_bumps_give_one_peak_per_seed() {
    let seeds = [(5usize, 6usize), (5, 20), (18, 9), (22, 24), (12, 15)];
    let prob = Array2::from_shape_fn((30, 30), |(r, c)| {
        let v: f64 = seeds
            .iter()
            .map(|&(sr, sc)| {
                let d2 = (r as f64 - sr as f64).powi(2) + (c as f64 - sc as f64).powi(2);
                (-d2 / 4.5).exp()
            })
            .sum();
        v.min(1.0) as f32 * 0.9
    });
    let peaks = local_maxima(
        &ProbabilityMap::new(prob).unwrap(),
        &PeakConfig {
            radius: 3,
            min_prob: 0.5,
        },
    )
    .unwrap();
    let found: HashSet<(usize, usize)> = peaks.points().iter().map(|p| (p.row, p.col)).collect();
    assert_eq!(found, seeds.into_iter().collect());
}

#[test]
fn voronoi_labels_follow_the_nearest_seed_partition() {
    let dims = (20, 24);
    let seeds = vec![
        Point::new(3, 4),
        Point::new(10, 18),
        Point::new(16, 5),
        Point::new(4, 15),
    ];
    let cfg = VoronoiConfig { seed_radius: 2 };
    let tri = voronoi_labels(&PointSet::new(seeds.clone(), dims).unwrap(), dims, &cfg).unwrap();
    let owner = |r: usize, c: usize| -> Option<usize> {
        let d: Vec<i64> = seeds.iter().map(|s| s.dist2(&Point::new(r, c))).collect();
        let best = *d.iter().min().unwrap();
        let winners: Vec<usize> = (0..d.len()).filter(|&i| d[i] == best).collect();
        (winners.len() == 1).then(|| winners[0])
    };
    for r in 0..dims.0 {
        for c in 0..dims.1 {
            let me = owner(r, c);
            let mut neighbours = vec![];
            if r > 0 {
                neighbours.push((r - 1, c));
            }
            if r + 1 < dims.0 {
                neighbours.push((r + 1, c));
            }
            if c > 0 {
                neighbours.push((r, c - 1));
            }
            if c + 1 < dims.1 {
                neighbours.push((r, c + 1));
            }
            let edge = me.is_none()
                || neighbours
                    .iter()
                    .any(|&(a, b)| owner(a, b).is_some_and(|o| Some(o) != me));
            let near_seed = seeds.iter().any(|s| s.dist2(&Point::new(r, c)) <= 4);
            let want = if edge {
                TriState::Background
            } else if near_seed {
                TriState::Foreground
            } else {
                TriState::Ignore
            };
            assert_eq!(tri.labels[[r, c]], want, "pixel ({r}, {c})");
        }
    }
}

#[test]
fn clustering_and_reassignment_rank_clusters_by_red() {
    // Three flat color bands: red 0.9 / 0.5 / 0.1.
    let (h, w) = (12, 12);
    let band = |r: usize| [0.9f32, 0.5, 0.1][r / 4];
    let pixels = Array3::from_shape_fn((h, w, 3), |(r, _, k)| if k == 0 { band(r) } else { 0.3 });
    let fused = RasterImage::new(pixels).unwrap();
    let features = Array2::from_shape_fn((h * w, 3), |(i, k)| {
        fused.pixels()[[i / w, i % w, k]] as f64
    });
    let clusters = kmeans(features.view(), 3, 0, 50, 1e-9).unwrap();
    assert!(clusters.inertia < 1e-9);
    let tri = reassign_labels(&clusters, &fused, MiddleCluster::Ignore).unwrap();
    for r in 0..h {
        let want = [TriState::Foreground, TriState::Ignore, TriState::Background][r / 4];
        assert!(tri.labels.row(r).iter().all(|&s| s == want), "row {r}");
    }
    let tri = reassign_labels(&clusters, &fused, MiddleCluster::Background).unwrap();
    assert_eq!(tri.count(TriState::Foreground), 48);
    assert_eq!(tri.count(TriState::Background), 96);
}
